//! Per-modality condition encoders producing token sequences for
//! cross-attention, all-or-nothing dropout, and canonical concatenation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Category, DatasetSample, ObservationMask, Silhouette, SILHOUETTE_SIZE, VOCABULARY};
use crate::error::{Error, Result};
use crate::geometry::TsdfGrid;
use crate::tensor::nn::{Conv2d, Conv3d};
use crate::tensor::{ConvAttrs, ParamStore, Tape, Tensor, Var};

pub const EMBED_DIM: usize = 32;
pub const MAX_TEXT_TOKENS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Partial,
    Class,
    Text,
    Silhouette,
}

impl Modality {
    /// Canonical concatenation order.
    pub const ALL: [Modality; 4] = [Modality::Partial, Modality::Class, Modality::Text, Modality::Silhouette];

    pub fn token_len(self) -> usize {
        match self {
            Modality::Partial => 8,
            Modality::Class => 1,
            Modality::Text => MAX_TEXT_TOKENS,
            Modality::Silhouette => 4,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Partial => "partial",
            Modality::Class => "class",
            Modality::Text => "text",
            Modality::Silhouette => "silhouette",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Total tokens of an aggregated sequence (8 + 1 + 8 + 4).
pub fn total_tokens() -> usize {
    Modality::ALL.iter().map(|m| m.token_len()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionPayload {
    Partial { grid: TsdfGrid, mask: ObservationMask },
    Class(usize),
    Text(Vec<usize>),
    Silhouette(Silhouette),
}

impl ConditionPayload {
    pub fn modality(&self) -> Modality {
        match self {
            ConditionPayload::Partial { .. } => Modality::Partial,
            ConditionPayload::Class(_) => Modality::Class,
            ConditionPayload::Text(_) => Modality::Text,
            ConditionPayload::Silhouette(_) => Modality::Silhouette,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConditionPayload::Class(id) if *id >= Category::ALL.len() => {
                Err(Error::invalid(format!("class id {id} out of range")))
            }
            ConditionPayload::Text(ids) => {
                if ids.len() > MAX_TEXT_TOKENS {
                    return Err(Error::invalid(format!("at most {MAX_TEXT_TOKENS} keywords, got {}", ids.len())));
                }
                match ids.iter().find(|&&i| i >= VOCABULARY.len()) {
                    Some(i) => Err(Error::invalid(format!("keyword id {i} outside the vocabulary"))),
                    None => Ok(()),
                }
            }
            ConditionPayload::Partial { grid, mask } if grid.resolution() != mask.resolution() => {
                Err(Error::invalid("partial grid and mask resolutions differ"))
            }
            _ => Ok(()),
        }
    }

    /// Every payload a dataset sample can supply, in canonical order.
    pub fn all_from_sample(sample: &DatasetSample) -> Vec<ConditionPayload> {
        vec![
            ConditionPayload::Partial {
                grid: sample.partial.clone(),
                mask: sample.mask.clone(),
            },
            ConditionPayload::Class(sample.category().id()),
            ConditionPayload::Text(
                sample
                    .keywords
                    .iter()
                    .filter_map(|k| crate::dataset::keyword_id(k))
                    .collect(),
            ),
            ConditionPayload::Silhouette(sample.silhouette.clone()),
        ]
    }
}

/// `[n_tokens, embed_dim]` tokens tagged with their modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub modality: Modality,
    pub tokens: Tensor,
}

impl TokenSequence {
    /// The null (dropped or absent) sequence of canonical length.
    pub fn zeros(modality: Modality, embed_dim: usize) -> Self {
        Self {
            modality,
            tokens: Tensor::zeros([modality.token_len(), embed_dim]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_zero(&self) -> bool {
        self.tokens.data().iter().all(|v| *v == 0.0)
    }
}

/// With probability `p` replace the whole sequence by zeros.
pub fn drop_condition<R: Rng + ?Sized>(tokens: &TokenSequence, p: f64, rng: &mut R) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1]")));
    }
    if rng.random_bool(p) {
        Ok(TokenSequence::zeros(tokens.modality, tokens.embed_dim()))
    } else {
        Ok(tokens.clone())
    }
}

/// Concatenate in canonical modality order; missing modalities contribute
/// zeros of their canonical length. Output is `[21, embed_dim]`.
pub fn aggregate(sequences: &[TokenSequence]) -> Result<Tensor> {
    let embed_dim = sequences.first().map_or(EMBED_DIM, TokenSequence::embed_dim);
    let mut slots: [Option<&TokenSequence>; 4] = [None; 4];
    for s in sequences {
        if s.embed_dim() != embed_dim {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: vec![embed_dim],
                rhs: vec![s.embed_dim()],
            });
        }
        if s.tokens.shape()[0] != s.modality.token_len() {
            return Err(Error::invalid(format!(
                "{} sequence has {} tokens, expected {}",
                s.modality.name(),
                s.tokens.shape()[0],
                s.modality.token_len()
            )));
        }
        let slot = &mut slots[s.modality.index()];
        if slot.is_some() {
            return Err(Error::invalid(format!("duplicate {} sequence", s.modality.name())));
        }
        *slot = Some(s);
    }
    let mut data = Vec::with_capacity(total_tokens() * embed_dim);
    for m in Modality::ALL {
        match slots[m.index()] {
            Some(s) => data.extend_from_slice(s.tokens.data()),
            None => data.extend(std::iter::repeat_n(0.0, m.token_len() * embed_dim)),
        }
    }
    Tensor::new(vec![total_tokens(), embed_dim], data)
}

#[derive(Clone, Debug)]
struct Layers {
    partial: [Conv3d; 3],
    silhouette: [Conv2d; 3],
}

/// Small trained-from-scratch encoders for all four modalities.
///
/// Partial shapes go through three stride-2 3D convs (16³ -> 2³ = 8 tokens);
/// silhouettes through three strided 2D convs (64² -> 2² = 4 tokens); class
/// and keywords are learned embeddings. Parameter names start with `cond.`.
#[derive(Clone, Debug)]
pub struct ConditionEncoders {
    resolution: usize,
    embed_dim: usize,
    params: ParamStore,
    layers: Layers,
}

impl ConditionEncoders {
    pub fn new(resolution: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if resolution != 16 {
            return Err(Error::invalid(format!(
                "partial-shape encoder expects 16³ grids, got {resolution}³"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let down = ConvAttrs::new(2, 1);
        let partial = [
            Conv3d::new(&mut p, "cond.partial.c1", 2, 8, 4, down, &mut rng)?,
            Conv3d::new(&mut p, "cond.partial.c2", 8, 16, 4, down, &mut rng)?,
            Conv3d::new(&mut p, "cond.partial.c3", 16, embed_dim, 4, down, &mut rng)?,
        ];
        let silhouette = [
            Conv2d::new(&mut p, "cond.sil.c1", 1, 8, 4, ConvAttrs::new(4, 0), &mut rng)?,
            Conv2d::new(&mut p, "cond.sil.c2", 8, 16, 4, ConvAttrs::new(4, 0), &mut rng)?,
            Conv2d::new(&mut p, "cond.sil.c3", 16, embed_dim, 2, ConvAttrs::new(2, 0), &mut rng)?,
        ];
        p.insert("cond.partial.pos", Tensor::randn([8, embed_dim], 0.1, &mut rng))?;
        p.insert("cond.sil.pos", Tensor::randn([4, embed_dim], 0.1, &mut rng))?;
        p.insert("cond.class", Tensor::randn([Category::ALL.len(), embed_dim], 1.0, &mut rng))?;
        p.insert("cond.text", Tensor::randn([VOCABULARY.len(), embed_dim], 1.0, &mut rng))?;
        Ok(Self {
            resolution,
            embed_dim,
            params: p,
            layers: Layers { partial, silhouette },
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Partial-shape input `[N, 2, D, D, D]` (normalized distances, mask)
    /// -> `[N, 8, E]`.
    pub fn partial_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let [c1, c2, c3] = &self.layers.partial;
        let h = c1.forward(tape, &self.params, x)?.silu()?;
        let h = c2.forward(tape, &self.params, h)?.silu()?;
        let h = c3.forward(tape, &self.params, h)?;
        let tokens = h.reshape(&[n, self.embed_dim, 8])?.permute(&[0, 2, 1])?;
        tokens.add(tape.param(&self.params, "cond.partial.pos")?)
    }

    /// Silhouettes `[N, 1, 64, 64]` -> `[N, 4, E]`.
    pub fn silhouette_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let [c1, c2, c3] = &self.layers.silhouette;
        let h = c1.forward(tape, &self.params, x)?.silu()?;
        let h = c2.forward(tape, &self.params, h)?.silu()?;
        let h = c3.forward(tape, &self.params, h)?;
        let tokens = h.reshape(&[n, self.embed_dim, 4])?.permute(&[0, 2, 1])?;
        tokens.add(tape.param(&self.params, "cond.sil.pos")?)
    }

    pub fn class_var<'t>(&self, tape: &'t Tape, ids: &[usize]) -> Result<Var<'t>> {
        let table = tape.param(&self.params, "cond.class")?;
        table.embedding(ids)?.reshape(&[ids.len(), 1, self.embed_dim])
    }

    /// Keyword ids per sample -> `[N, 8, E]` with zero rows as padding.
    pub fn text_var<'t>(&self, tape: &'t Tape, ids: &[Vec<usize>]) -> Result<Var<'t>> {
        let table = tape.param(&self.params, "cond.text")?;
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let rows = if flat.is_empty() { None } else { Some(table.embedding(&flat)?) };
        let mut parts = Vec::new();
        let mut offset = 0;
        for seq in ids {
            let mut pieces = Vec::new();
            if !seq.is_empty() {
                let r = rows.expect("nonempty ids imply rows");
                pieces.push(select_rows(tape, r, offset, seq.len(), flat.len())?);
            }
            let pad = MAX_TEXT_TOKENS - seq.len();
            if pad > 0 {
                pieces.push(tape.constant(Tensor::zeros([pad, self.embed_dim])));
            }
            offset += seq.len();
            let seq_var = if pieces.len() == 1 { pieces[0] } else { Var::concat(&pieces, 0)? };
            parts.push(seq_var.reshape(&[1, MAX_TEXT_TOKENS, self.embed_dim])?);
        }
        Var::concat(&parts, 0)
    }

    /// Encode a batch where every sample carries one payload of `modality`
    /// (or `None`, meaning absent). Returns `[N, len, E]`; absent entries
    /// are zero.
    pub fn encode_modality_var<'t>(
        &self,
        tape: &'t Tape,
        modality: Modality,
        payloads: &[Option<&ConditionPayload>],
    ) -> Result<Var<'t>> {
        let n = payloads.len();
        let len = modality.token_len();
        let mut keep = Vec::with_capacity(n);
        for p in payloads {
            if let Some(p) = p {
                p.validate()?;
                if p.modality() != modality {
                    return Err(Error::invalid(format!(
                        "expected a {} payload, got {}",
                        modality.name(),
                        p.modality().name()
                    )));
                }
            }
            keep.push(if p.is_some() { 1.0 } else { 0.0 });
        }
        if keep.iter().all(|k| *k == 0.0) {
            return Ok(tape.constant(Tensor::zeros([n, len, self.embed_dim])));
        }
        let tokens = match modality {
            Modality::Partial => {
                let d = self.resolution;
                let mut data = Vec::with_capacity(n * 2 * d.pow(3));
                for p in payloads {
                    match p {
                        Some(ConditionPayload::Partial { grid, mask }) => {
                            if grid.resolution() != d {
                                return Err(Error::ShapeMismatch {
                                    op: "encode_condition",
                                    lhs: vec![d],
                                    rhs: vec![grid.resolution()],
                                });
                            }
                            let tau = grid.truncation();
                            data.extend(grid.values().iter().map(|v| *v as f64 / tau));
                            data.extend(mask.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }));
                        }
                        _ => data.extend(std::iter::repeat_n(0.0, 2 * d.pow(3))),
                    }
                }
                let x = tape.constant(Tensor::new(vec![n, 2, d, d, d], data)?);
                self.partial_var(tape, x)?
            }
            Modality::Silhouette => {
                let s = SILHOUETTE_SIZE;
                let mut data = Vec::with_capacity(n * s * s);
                for p in payloads {
                    match p {
                        Some(ConditionPayload::Silhouette(img)) => {
                            data.extend(img.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }))
                        }
                        _ => data.extend(std::iter::repeat_n(0.0, s * s)),
                    }
                }
                let x = tape.constant(Tensor::new(vec![n, 1, s, s], data)?);
                self.silhouette_var(tape, x)?
            }
            Modality::Class => {
                let ids: Vec<usize> = payloads
                    .iter()
                    .map(|p| match p {
                        Some(ConditionPayload::Class(id)) => *id,
                        _ => 0,
                    })
                    .collect();
                self.class_var(tape, &ids)?
            }
            Modality::Text => {
                let ids: Vec<Vec<usize>> = payloads
                    .iter()
                    .map(|p| match p {
                        Some(ConditionPayload::Text(ids)) => ids.clone(),
                        _ => Vec::new(),
                    })
                    .collect();
                self.text_var(tape, &ids)?
            }
        };
        if keep.iter().all(|k| *k == 1.0) {
            return Ok(tokens);
        }
        tokens.mul(tape.constant(Tensor::new(vec![n, 1, 1], keep)?))
    }

    /// Aggregated `[N, 21, E]` context; `batch[i]` lists the payloads that
    /// are active for sample `i`.
    pub fn context_var<'t>(&self, tape: &'t Tape, batch: &[Vec<&ConditionPayload>]) -> Result<Var<'t>> {
        let mut parts = Vec::with_capacity(4);
        for m in Modality::ALL {
            let column: Vec<Option<&ConditionPayload>> = batch
                .iter()
                .map(|ps| ps.iter().copied().find(|p| p.modality() == m))
                .collect();
            parts.push(self.encode_modality_var(tape, m, &column)?);
        }
        Var::concat(&parts, 1)
    }

    pub fn encode_condition(&self, payload: &ConditionPayload) -> Result<TokenSequence> {
        let tape = Tape::no_grad();
        let m = payload.modality();
        let v = self.encode_modality_var(&tape, m, &[Some(payload)])?;
        Ok(TokenSequence {
            modality: m,
            tokens: v.value().as_ref().clone().reshape([m.token_len(), self.embed_dim])?,
        })
    }
}

/// Rows `[start, start + len)` of a `[total, E]` variable via a 0/1
/// selection matrix, keeping the gradient path to the table.
fn select_rows<'t>(tape: &'t Tape, rows: Var<'t>, start: usize, len: usize, total: usize) -> Result<Var<'t>> {
    if start == 0 && len == total {
        return Ok(rows);
    }
    let mut sel = vec![0.0; len * total];
    for i in 0..len {
        sel[i * total + start + i] = 1.0;
    }
    tape.constant(Tensor::new(vec![len, total], sel)?).matmul(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};

    fn encoders() -> ConditionEncoders {
        ConditionEncoders::new(16, EMBED_DIM, 7).unwrap()
    }

    #[test]
    fn text_padding_rows_are_zero() {
        let e = encoders();
        let t = e.encode_condition(&ConditionPayload::Text(vec![3, 10, 18])).unwrap();
        assert_eq!(t.tokens.shape(), &[8, EMBED_DIM]);
        let rows: Vec<&[f64]> = t.tokens.data().chunks(EMBED_DIM).collect();
        assert!(rows[..3].iter().all(|r| r.iter().any(|v| *v != 0.0)));
        assert!(rows[3..].iter().all(|r| r.iter().all(|v| *v == 0.0)));
        assert_eq!(rows[0], &e.params().get("cond.text").unwrap().data()[3 * EMBED_DIM..4 * EMBED_DIM]);
    }

    #[test]
    fn encoding_is_deterministic_and_classes_distinct() {
        let e = encoders();
        let ds = build_dataset(&DatasetConfig { n: 10, ..Default::default() }).unwrap();
        for p in ConditionPayload::all_from_sample(&ds.train[0]) {
            let a = e.encode_condition(&p).unwrap();
            assert_eq!(a, e.encode_condition(&p).unwrap());
            assert_eq!(a.tokens.shape(), &[p.modality().token_len(), EMBED_DIM]);
        }
        let rows: Vec<Tensor> = (0..4).map(|c| e.encode_condition(&ConditionPayload::Class(c)).unwrap().tokens).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn invalid_ids_are_rejected() {
        let e = encoders();
        assert!(e.encode_condition(&ConditionPayload::Class(4)).is_err());
        assert!(e.encode_condition(&ConditionPayload::Text(vec![VOCABULARY.len()])).is_err());
        assert!(e.encode_condition(&ConditionPayload::Text(vec![0; 9])).is_err());
    }

    #[test]
    fn aggregate_layout() {
        let e = encoders();
        let class = e.encode_condition(&ConditionPayload::Class(2)).unwrap();
        let text = e.encode_condition(&ConditionPayload::Text(vec![1])).unwrap();
        let a = aggregate(&[text.clone(), class.clone()]).unwrap();
        let b = aggregate(&[class.clone(), text.clone()]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[21, EMBED_DIM]);
        assert_eq!(&a.data()[8 * EMBED_DIM..9 * EMBED_DIM], class.tokens.data());
        assert!(a.data()[..8 * EMBED_DIM].iter().all(|v| *v == 0.0));
        let null = aggregate(&[]).unwrap();
        assert!(null.data().iter().all(|v| *v == 0.0));
        assert_eq!(null.shape(), &[21, EMBED_DIM]);
        let bad = TokenSequence {
            modality: Modality::Class,
            tokens: Tensor::zeros([1, 16]),
        };
        assert!(aggregate(&[class.clone(), bad]).is_err());
        assert!(aggregate(&[class.clone(), class]).is_err());
    }

    #[test]
    fn dropped_equals_absent() {
        let e = encoders();
        let t = e.encode_condition(&ConditionPayload::Class(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_condition(&t, 0.0, &mut rng).unwrap(), t);
        let dropped = drop_condition(&t, 1.0, &mut rng).unwrap();
        assert_eq!(dropped, TokenSequence::zeros(Modality::Class, EMBED_DIM));
        assert_eq!(aggregate(&[dropped]).unwrap(), aggregate(&[]).unwrap());
        assert!(drop_condition(&t, 1.5, &mut rng).is_err());
    }

    #[test]
    fn batched_context_matches_single() {
        let e = encoders();
        let ds = build_dataset(&DatasetConfig { n: 10, ..Default::default() }).unwrap();
        let p0 = ConditionPayload::all_from_sample(&ds.train[0]);
        let p1 = ConditionPayload::all_from_sample(&ds.train[1]);
        let batch = vec![p0.iter().collect::<Vec<_>>(), vec![&p1[1], &p1[2]]];
        let tape = Tape::no_grad();
        let ctx = e.context_var(&tape, &batch).unwrap().value();
        let singles: Vec<TokenSequence> = p0.iter().map(|p| e.encode_condition(p).unwrap()).collect();
        assert_eq!(ctx.slice_first(0).unwrap(), aggregate(&singles).unwrap());
        let singles1: Vec<TokenSequence> = [&p1[1], &p1[2]].iter().map(|p| e.encode_condition(p).unwrap()).collect();
        assert_eq!(ctx.slice_first(1).unwrap(), aggregate(&singles1).unwrap());
    }
}

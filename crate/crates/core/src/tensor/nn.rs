//! Small layer library on top of the tape: each layer remembers the names of
//! its parameters and pulls them from a [`ParamStore`] at forward time.

use rand::Rng;

use super::{ConvAttrs, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng)
}

/// `y = x W + b` on `[n, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        store.insert(format!("{name}.w"), fan_in_uniform(&[fan_in, fan_out], fan_in, rng))?;
        store.insert(format!("{name}.b"), Tensor::zeros([fan_out]))?;
        Ok(Self {
            name: name.to_string(),
            fan_in,
            fan_out,
        })
    }

    /// Same as [`Linear::new`] but with all-zero weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        store.insert(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]))?;
        store.insert(format!("{name}.b"), Tensor::zeros([fan_out]))?;
        Ok(Self {
            name: name.to_string(),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        x.matmul(w)?.add(b)
    }
}

/// 3D convolution over `[N, C, D, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    name: String,
    pub attrs: ConvAttrs,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        attrs: ConvAttrs,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel.pow(3);
        store.insert(
            format!("{name}.w"),
            fan_in_uniform(&[cout, cin, kernel, kernel, kernel], fan_in, rng),
        )?;
        store.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
        Ok(Self {
            name: name.to_string(),
            attrs,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        x.conv3d(w, Some(b), self.attrs)
    }
}

/// Transposed 3D convolution; weight layout `[C_in, C_out, k, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    name: String,
    pub attrs: ConvAttrs,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        attrs: ConvAttrs,
        rng: &mut R,
    ) -> Result<Self> {
        // Each output voxel sees about cin * (k/stride)^3 inputs.
        let reach = (kernel / attrs.stride.max(1)).max(1);
        let fan_in = cin * reach.pow(3);
        store.insert(
            format!("{name}.w"),
            fan_in_uniform(&[cin, cout, kernel, kernel, kernel], fan_in, rng),
        )?;
        store.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
        Ok(Self {
            name: name.to_string(),
            attrs,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        x.conv_transpose3d(w, Some(b), self.attrs)
    }
}

/// 2D convolution over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    pub attrs: ConvAttrs,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        attrs: ConvAttrs,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        store.insert(
            format!("{name}.w"),
            fan_in_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
        )?;
        store.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
        Ok(Self {
            name: name.to_string(),
            attrs,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        x.conv2d(w, Some(b), self.attrs)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    name: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let mut groups = groups.clamp(1, channels);
        while channels % groups != 0 {
            groups -= 1;
        }
        store.insert(format!("{name}.gamma"), Tensor::ones([channels]))?;
        store.insert(format!("{name}.beta"), Tensor::zeros([channels]))?;
        Ok(Self {
            name: name.to_string(),
            groups,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let g = tape.param(store, &format!("{}.gamma", self.name))?;
        let b = tape.param(store, &format!("{}.beta", self.name))?;
        x.group_norm(self.groups, g, b, 1e-5)
    }
}

/// Pre-activation residual block for 3D feature maps with an optional
/// per-channel conditioning vector (e.g. a time embedding) added between
/// the two convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock3d {
    norm1: GroupNorm,
    conv1: Conv3d,
    cond: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
    out_ch: usize,
}

impl ResBlock3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cond_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let same = ConvAttrs::new(1, 1);
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, 4)?,
            conv1: Conv3d::new(store, &format!("{name}.conv1"), cin, cout, 3, same, rng)?,
            cond: cond_dim
                .map(|d| Linear::new(store, &format!("{name}.cond"), d, cout, rng))
                .transpose()?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, 4)?,
            conv2: Conv3d::new(store, &format!("{name}.conv2"), cout, cout, 3, same, rng)?,
            skip: (cin != cout)
                .then(|| Conv3d::new(store, &format!("{name}.skip"), cin, cout, 1, ConvAttrs::new(1, 0), rng))
                .transpose()?,
            out_ch: cout,
        })
    }

    /// `cond` is `[N, cond_dim]` when the block was built with conditioning.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        cond: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let h = self.norm1.forward(tape, store, x)?.silu()?;
        let mut h = self.conv1.forward(tape, store, h)?;
        if let (Some(layer), Some(c)) = (&self.cond, cond) {
            let n = c.shape()[0];
            let proj = layer
                .forward(tape, store, c.silu()?)?
                .reshape(&[n, self.out_ch, 1, 1, 1])?;
            h = h.add(proj)?;
        }
        let h = self.norm2.forward(tape, store, h)?.silu()?;
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, store, x)?,
            None => x,
        };
        h.add(skip)
    }
}

/// Residual cross-attention from spatial sites (queries) to a token
/// sequence (keys/values). Works for any `[N, C, spatial...]` map.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        context_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, 4)?,
            q: Linear::new(store, &format!("{name}.q"), channels, attn_dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), context_dim, attn_dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), context_dim, attn_dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), attn_dim, channels, rng)?,
            channels,
        })
    }

    /// `x`: `[N, C, spatial...]`; `context`: `[N, M, context_dim]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        context: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let n = shape[0];
        let sites: usize = shape[2..].iter().product();
        let (m, e) = {
            let cs = context.shape();
            (cs[1], cs[2])
        };
        let h = self.norm.forward(tape, store, x)?;
        let tokens = h
            .reshape(&[n, self.channels, sites])?
            .permute(&[0, 2, 1])?
            .reshape(&[n * sites, self.channels])?;
        let a = self.q.fan_out;
        let q = self.q.forward(tape, store, tokens)?.reshape(&[n, sites, a])?;
        let ctx = context.reshape(&[n * m, e])?;
        let k = self.k.forward(tape, store, ctx)?.reshape(&[n, m, a])?;
        let v = self.v.forward(tape, store, ctx)?.reshape(&[n, m, a])?;
        let att = q.attention(k, v)?.reshape(&[n * sites, a])?;
        let o = self
            .out
            .forward(tape, store, att)?
            .reshape(&[n, sites, self.channels])?
            .permute(&[0, 2, 1])?
            .reshape(&shape)?;
        x.add(o)
    }
}

/// Sinusoidal embedding of integer timesteps, `[len(t), dim]`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![steps.len(), dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resblock_keeps_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = ResBlock3d::new(&mut store, "rb", 4, 8, Some(6), &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn([2, 4, 3, 3, 3], 1.0, &mut rng));
        let c = tape.constant(Tensor::randn([2, 6], 1.0, &mut rng));
        let y = block.forward(&tape, &store, x, Some(c)).unwrap();
        assert_eq!(y.shape(), vec![2, 8, 3, 3, 3]);
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(&[0], 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}

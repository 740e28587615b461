use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdfgen_core::dataset::{build_dataset, DatasetConfig};
use sdfgen_core::geometry::TsdfGrid;
use sdfgen_core::tensor::grad_check;
use sdfgen_core::vqvae::{train_vqvae, vqvae_loss, VqTrainConfig, VqVaeConfig, VqVaeModel};
use sdfgen_core::{Tape, Tensor, Var};

fn tiny() -> VqVaeModel {
    VqVaeModel::new(
        VqVaeConfig {
            resolution: 8,
            latent_channels: 2,
            codebook_size: 8,
            hidden: 4,
            ..VqVaeConfig::default()
        },
        5,
    )
    .unwrap()
}

fn probe<'t>(v: Var<'t>) -> sdfgen_core::Result<Var<'t>> {
    let w = Tensor::randn(v.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    v.mul(v.tape().constant(w))?.sum()
}

fn surrogate<'t>(model: &VqVaeModel, offset: &Tensor, t: &'t Tape, x: Var<'t>) -> sdfgen_core::Result<Var<'t>> {
    let z = model.encode_var(t, x)?.add(t.constant(offset.clone()))?;
    probe(model.decode_var(t, z)?)
}

/// The straight-through estimator is, by definition, the exact gradient of
/// `x -> f(dec(enc(x) + c))` with the quantisation offset `c = z_q - z_e`
/// frozen. Check both that the tape computes that surrogate's gradient and
/// that the surrogate's gradient matches central differences.
#[test]
fn straight_through_gradient_matches_frozen_offset_surrogate() {
    let model = tiny();
    let x = Tensor::randn([1, 1, 8, 8, 8], 0.1, &mut ChaCha8Rng::seed_from_u64(1));

    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let fwd = model.forward_batch(&tape, xv).unwrap();
    let ste = tape.backward(probe(fwd.x_rec).unwrap()).unwrap().wrt(xv);
    let offset = Tensor::new(
        fwd.z_e.shape(),
        fwd.z_q.value().data().iter().zip(fwd.z_e.value().data()).map(|(q, e)| q - e).collect(),
    )
    .unwrap();

    let err = grad_check(|t, v| surrogate(&model, &offset, t, v), &x, 1e-5).unwrap();
    assert!(err <= 1e-4, "surrogate grad check {err:e}");

    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let direct = tape.backward(surrogate(&model, &offset, &tape, xv).unwrap()).unwrap().wrt(xv);
    for (a, b) in ste.data().iter().zip(direct.data()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn codebook_gradient_pulls_entries_toward_assigned_encodings() {
    let model = tiny();
    let x = Tensor::randn([2, 1, 8, 8, 8], 0.1, &mut ChaCha8Rng::seed_from_u64(2));
    let tape = Tape::new();
    let fwd = model.forward_batch(&tape, tape.constant(x.clone())).unwrap();
    let loss = vqvae_loss(tape.constant(x), fwd.x_rec, fwd.z_e, fwd.z_q, 0.25).unwrap();
    let grads = tape.backward(loss.codebook).unwrap().param_grads();
    let g = &grads["codebook"];

    // d/de_k of C·mean((e - z_e)²) = 2/(N·sites) Σ_{s -> k} (e_k - z_e,s).
    let ze = fwd.z_e.value();
    let (n, c, d) = (2, 2, 2);
    let sites = d * d * d;
    let book = model.codebook();
    let mut expect = vec![0.0; book.numel()];
    for b in 0..n {
        for s in 0..sites {
            let k = fwd.indices[b * sites + s];
            for ch in 0..c {
                let e = book.data()[k * c + ch];
                let z = ze.data()[b * c * sites + ch * sites + s];
                expect[k * c + ch] += 2.0 * (e - z) / (n * sites) as f64;
            }
        }
    }
    for (a, b) in g.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn short_training_lowers_the_loss() {
    let ds = build_dataset(&DatasetConfig {
        n: 16,
        resolution: 12,
        ..DatasetConfig::default()
    })
    .unwrap();
    let grids: Vec<TsdfGrid> = ds.train.iter().map(|s| s.grid.clone()).collect();
    let cfg = VqVaeConfig {
        resolution: 12,
        codebook_size: 16,
        hidden: 4,
        ..VqVaeConfig::default()
    };
    let train = VqTrainConfig {
        epochs: 4,
        batch: 4,
        ..VqTrainConfig::default()
    };
    let (model, report) = train_vqvae(&grids, cfg.clone(), &train).unwrap();
    assert_eq!(report.loss_curve.len(), 4);
    assert!(report.loss_curve[3] < report.loss_curve[0], "{:?}", report.loss_curve);
    assert!(report.codebook_usage > 0.0 && report.codebook_usage <= 1.0);
    let (again, _) = train_vqvae(&grids, cfg, &train).unwrap();
    assert_eq!(model.params().checksum(), again.params().checksum());
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdfgen_core::conditioners::{ConditionPayload, Modality};
use sdfgen_core::diffusion::{
    blended_sample, q_sample, train_diffusion, training_loss, Blend, CondDropout, Denoiser, DenoiserConfig,
    DenoiserModel, DiffusionConfig, DiffusionSchedule, DiffusionTrainConfig, GuidedCondition, LatentDiffusion,
};
use sdfgen_core::tensor::grad_check;
use sdfgen_core::{Tape, Tensor};

fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        latent_extent: 2,
        base_channels: 8,
        context_dim: 4,
        attn_dim: 4,
    }
}

fn small_config() -> DiffusionConfig {
    DiffusionConfig {
        timesteps: 10,
        beta_start: 1e-2,
        beta_end: 0.3,
        denoiser: small_denoiser(),
        modalities: vec![Modality::Class],
        ..DiffusionConfig::default()
    }
}

/// A denoiser with a non-zero output layer, so gradients flow everywhere.
fn live_denoiser(seed: u64) -> DenoiserModel {
    let mut m = DenoiserModel::new(small_denoiser(), seed).unwrap();
    let shape = m.params().get("unet.conv_out.w").unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    m.params_mut()
        .set("unet.conv_out.w", Tensor::randn(shape, 0.2, &mut rng))
        .unwrap();
    m
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let model = live_denoiser(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = Tensor::randn([2, 2, 2, 2, 2], 1.0, &mut rng);
    let ctx = Tensor::randn([2, 21, 4], 1.0, &mut rng);
    let probe = Tensor::randn([2, 2, 2, 2, 2], 1.0, &mut rng);
    let wrt_z = grad_check(
        |tape, v| {
            let c = tape.constant(ctx.clone());
            let p = tape.constant(probe.clone());
            model.predict(tape, v, &[3, 7], c)?.mul(p)?.sum()
        },
        &z,
        1e-5,
    )
    .unwrap();
    assert!(wrt_z < 1e-4, "z: {wrt_z}");
    let wrt_ctx = grad_check(
        |tape, v| {
            let zz = tape.constant(z.clone());
            let p = tape.constant(probe.clone());
            model.predict(tape, zz, &[3, 7], v)?.mul(p)?.sum()
        },
        &ctx,
        1e-5,
    )
    .unwrap();
    assert!(wrt_ctx < 1e-4, "context: {wrt_ctx}");
}

#[test]
fn fresh_denoiser_predicts_zero() {
    let model = DenoiserModel::new(small_denoiser(), 0).unwrap();
    let tape = Tape::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = tape.constant(Tensor::randn([1, 2, 2, 2, 2], 1.0, &mut rng));
    let ctx = tape.constant(Tensor::zeros([1, 21, 4]));
    let out = model.predict(&tape, z, &[5], ctx).unwrap().value();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn dropout_extremes() {
    let payloads = vec![ConditionPayload::Class(1), ConditionPayload::Text(vec![2, 3])];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(CondDropout::NONE.apply(&payloads, &mut rng).len(), 2);
        let all = CondDropout {
            per_modality: 0.0,
            all: 1.0,
        };
        assert!(all.apply(&payloads, &mut rng).is_empty());
        let each = CondDropout {
            per_modality: 1.0,
            all: 0.0,
        };
        assert!(each.apply(&payloads, &mut rng).is_empty());
    }
}

#[test]
fn training_loss_is_noise_energy_for_zero_predictor() {
    let model = LatentDiffusion::new(small_config(), 0).unwrap();
    let z0 = Tensor::zeros([3, 2, 2, 2, 2]);
    let conds = vec![vec![ConditionPayload::Class(0)], vec![], vec![ConditionPayload::Class(2)]];
    let sched = DiffusionSchedule::rescaled_linear(25).unwrap();
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let loss = training_loss(
        &tape,
        model.denoiser(),
        model.encoders(),
        &z0,
        &conds,
        &sched,
        &CondDropout::default(),
        &mut rng,
    )
    .unwrap();
    // The untrained model outputs zero, so the loss is the mean squared noise.
    let v = loss.value().item().unwrap();
    assert!(v > 0.4 && v < 2.0, "{v}");
    assert!(training_loss(
        &tape,
        model.denoiser(),
        model.encoders(),
        &z0,
        &conds[..2],
        &sched,
        &CondDropout::NONE,
        &mut rng
    )
    .is_err());
}

fn toy_data(n: usize) -> (Vec<Tensor>, Vec<Vec<ConditionPayload>>) {
    let mut latents = Vec::new();
    let mut conds = Vec::new();
    for i in 0..n {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        latents.push(Tensor::full([2, 2, 2, 2], 0.5 * sign));
        conds.push(vec![ConditionPayload::Class(i % 2)]);
    }
    (latents, conds)
}

#[test]
fn training_reduces_loss_and_checkpoints_round_trip() {
    let (latents, conds) = toy_data(16);
    let train = DiffusionTrainConfig {
        iterations: 60,
        batch: 8,
        lr: 3e-3,
        seed: 1,
        dropout: CondDropout::default(),
    };
    let (model, report) = train_diffusion(&latents, &conds, small_config(), &train).unwrap();
    assert!((report.latent_scale - 0.5).abs() < 1e-12);
    let k = report.loss_curve.len();
    let head: f64 = report.loss_curve[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = report.loss_curve[k - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ldm.ckpt");
    model.save(&path).unwrap();
    let back = LatentDiffusion::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let conds = model.encode_conditions(&[(ConditionPayload::Class(1), 2.0)]).unwrap();
    let conds_back = back.encode_conditions(&[(ConditionPayload::Class(1), 2.0)]).unwrap();
    assert_eq!(conds, conds_back);
    let a = model.sample_latent(&conds, 11, None).unwrap();
    let b = back.sample_latent(&conds_back, 11, None).unwrap();
    assert_eq!(a.tensor(), b.tensor());
    let short = model.sample_latent(&conds, 11, Some(4)).unwrap();
    assert_eq!(short.tensor().shape(), a.tensor().shape());

    assert!(model.encode_conditions(&[(ConditionPayload::Text(vec![1]), 1.0)]).is_err());
    assert!(model
        .encode_conditions(&[(ConditionPayload::Class(1), 1.0), (ConditionPayload::Class(0), 1.0)])
        .is_err());
}

#[test]
fn zero_weights_equal_unconditional_sampling() {
    let (latents, conds) = toy_data(4);
    let train = DiffusionTrainConfig {
        iterations: 3,
        batch: 4,
        ..DiffusionTrainConfig::default()
    };
    let (model, _) = train_diffusion(&latents, &conds, small_config(), &train).unwrap();
    let zero: Vec<GuidedCondition> = model.encode_conditions(&[(ConditionPayload::Class(1), 0.0)]).unwrap();
    let a = model.sample_latent(&zero, 3, None).unwrap();
    let b = model.sample_latent(&[], 3, None).unwrap();
    assert_eq!(a.tensor(), b.tensor());
}

#[test]
fn blended_sites_follow_the_forward_chain_bitwise() {
    let model = live_denoiser(5);
    let sched = DiffusionSchedule::rescaled_linear(25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z_known = Tensor::randn([2, 2, 2, 2], 1.0, &mut rng);
    let observed = [true, false, true, false, false, false, false, true];
    let mut checked = 0;
    let mut observer = |step: &sdfgen_core::diffusion::BlendStep| -> sdfgen_core::Result<()> {
        let target = match step.eps {
            Some(e) => q_sample(&z_known, step.t, e, &sched)?,
            None => z_known.clone(),
        };
        for (i, (v, w)) in step.latent.data().iter().zip(target.data()).enumerate() {
            if observed[i % 8] {
                assert_eq!(v.to_bits(), w.to_bits(), "step {} index {i}", step.t);
            }
        }
        checked += 1;
        Ok(())
    };
    let out = blended_sample(
        &model,
        &sched,
        &[],
        4,
        8,
        Blend {
            z_known: &z_known,
            observed: &observed,
            observer: Some(&mut observer),
        },
    )
    .unwrap();
    assert_eq!(checked, 26);
    for (i, (v, w)) in out.data().iter().zip(z_known.data()).enumerate() {
        if observed[i % 8] {
            assert_eq!(v, w);
        }
    }
}

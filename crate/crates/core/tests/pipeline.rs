use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdfgen_core::conditioners::ConditionPayload;
use sdfgen_core::dataset::{Category, DatasetSample, PartialMode, ShapeSpec};
use sdfgen_core::diffusion::{DenoiserConfig, DiffusionConfig, LatentDiffusion};
use sdfgen_core::pipeline::{ModelStack, StackCompleter, DIFFUSION_FILE};
use sdfgen_core::vqvae::{VqVaeConfig, VqVaeModel};
use sdfgen_core::metrics::CompletionModel;
use sdfgen_core::Error;

fn small_stack() -> ModelStack {
    let vq = VqVaeModel::new(VqVaeConfig::default(), 1).unwrap();
    let cfg = DiffusionConfig {
        denoiser: DenoiserConfig {
            base_channels: 8,
            ..DenoiserConfig::default()
        },
        ..DiffusionConfig::default()
    };
    ModelStack::new(vq, LatentDiffusion::new(cfg, 2).unwrap(), None).unwrap()
}

fn sample() -> DatasetSample {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = ShapeSpec::random(Category::ALL[1], &mut rng);
    DatasetSample::from_spec("x", spec, 16, 0.2, PartialMode::BottomHalf).unwrap()
}

#[test]
fn stack_round_trips_and_reports_progress() {
    let stack = small_stack();
    let dir = tempfile::tempdir().unwrap();
    stack.save(dir.path()).unwrap();
    let back = ModelStack::load(dir.path()).unwrap();
    let conds = [(ConditionPayload::Class(1), 2.0)];
    let mut seen = Vec::new();
    let a = stack.generate(&conds, 7, Some(10), Some(&mut |f| seen.push(f))).unwrap();
    let b = back.generate(&conds, 7, Some(10), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(seen.len(), 10);
    assert!(seen.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*seen.last().unwrap(), 1.0);

    std::fs::remove_file(dir.path().join(DIFFUSION_FILE)).unwrap();
    match ModelStack::load(dir.path()) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with(DIFFUSION_FILE)),
        other => panic!("expected a missing-file error, got {:?}", other.err()),
    }
}

#[test]
fn partial_condition_runs_blended_completion() {
    let stack = small_stack();
    let s = sample();
    let partial = ConditionPayload::Partial {
        grid: s.partial.clone(),
        mask: s.mask.clone(),
    };
    let mut last = 0.0;
    let via_generate = stack.generate(&[(partial, 1.0)], 3, Some(10), Some(&mut |f| last = f)).unwrap();
    assert_eq!(last, 1.0);
    let completer = StackCompleter {
        stack: &stack,
        partial_weight: 1.0,
        steps: Some(10),
    };
    assert_eq!(completer.complete(&s.partial, &s.mask, 3).unwrap(), via_generate);
}

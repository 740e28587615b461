use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdfgen_core::diffusion::{DenoiserConfig, DiffusionConfig, LatentDiffusion};
use sdfgen_core::pipeline::ModelStack;
use sdfgen_core::texturing::{Critic2D, CriticConfig};
use sdfgen_core::vqvae::{VqVaeConfig, VqVaeModel};

fn sdfgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdfgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let cfg = serde_json::json!({
            "dataset": root.join("dataset"),
            "checkpoints": root.join("models"),
        });
        let config = root.join("config.json");
        std::fs::write(&config, cfg.to_string()).unwrap();
        Self {
            config: config.to_string_lossy().into_owned(),
            root,
            _tmp: tmp,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", self.config.as_str()];
        all.extend_from_slice(args);
        sdfgen(&all)
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }

    /// A small untrained stack, much faster than running the trainers.
    fn install_models(&self) {
        let vq = VqVaeModel::new(VqVaeConfig::default(), 1).unwrap();
        let cfg = DiffusionConfig {
            denoiser: DenoiserConfig {
                base_channels: 8,
                ..DenoiserConfig::default()
            },
            ..DiffusionConfig::default()
        };
        let critic = Critic2D::new(CriticConfig::default(), 3).unwrap();
        let stack = ModelStack::new(vq, LatentDiffusion::new(cfg, 2).unwrap(), Some(critic)).unwrap();
        stack.save(self.root.join("models")).unwrap();
    }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(sdfgen(&["sample", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(sdfgen(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sdfgen(&["sample", "--cond", "class"]).status.code(), Some(1));
    assert_eq!(sdfgen(&["--help"]).status.code(), Some(0));
    assert_eq!(sdfgen(&["--config", "/nonexistent/config.json", "sample"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_2_naming_the_path() {
    let ws = Workspace::new();
    let out = ws.run(&["sample", "--out", &ws.path("out")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(&ws.path("models/vqvae.ckpt")), "{}", stderr(&out));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_commands_end_to_end() {
    let ws = Workspace::new();
    ok(&ws.run(&["gen-dataset", "--n", "12"]));
    assert!(ws.root.join("dataset/manifest.json").is_file());
    ws.install_models();
    let out = ws.path("out");

    ok(&ws.run(&["sample", "--seed", "7", "--out", &out, "--cond", "class=chair@2"]));
    let first = read(&ws.root.join("out/sample-7.obj"));
    ok(&ws.run(&["sample", "--seed", "7", "--out", &out, "--cond", "class=chair@2"]));
    assert_eq!(first, read(&ws.root.join("out/sample-7.obj")));
    let bad = ws.run(&["sample", "--out", &out, "--cond", "text=nonsense"]);
    assert_eq!(bad.status.code(), Some(1));

    ok(&ws.run(&["evaluate", "--k", "10", "--shapes", "1", "--n-points", "256", "--steps", "5", "--out", &out]));
    let report: serde_json::Value = serde_json::from_slice(&read(&ws.root.join("out/evaluation.json"))).unwrap();
    assert_eq!(report["k"], 10);
    assert_eq!(report["shapes"].as_array().unwrap().len(), 1);

    ok(&ws.run(&["complete", "--k", "2", "--steps", "5", "--seed", "3", "--out", &out]));
    let produced: Vec<String> = std::fs::read_dir(ws.root.join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(produced.iter().filter(|n| n.starts_with("complete-")).count(), 2);
    assert_eq!(produced.iter().filter(|n| n.starts_with("partial-")).count(), 1);

    let manifest: serde_json::Value = serde_json::from_slice(&read(&ws.root.join("dataset/manifest.json"))).unwrap();
    let shape = manifest["test"][0].as_str().unwrap();
    ok(&ws.run(&["texture", "--shape", shape, "--keywords", "red", "--steps", "2", "--out", &out]));
    let obj = String::from_utf8(read(&ws.root.join(format!("out/textured-{shape}.obj")))).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("v ") && l.split_whitespace().count() == 7));
    assert!(ws.root.join(format!("out/textured-{shape}.ppm")).is_file());

    let busy = std::net::TcpListener::bind(("0.0.0.0", 0)).unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let serve = ws.run(&["serve", "--port", &port]);
    assert_eq!(serve.status.code(), Some(2));
    assert!(stderr(&serve).contains(&format!("cannot bind port {port}")), "{}", stderr(&serve));
}

#[test]
fn trainers_write_checkpoints() {
    let ws = Workspace::new();
    ok(&ws.run(&["gen-dataset", "--n", "12", "--partial-mode", "octant"]));
    ok(&ws.run(&["train-vqvae", "--epochs", "1", "--hidden", "4", "--codebook", "16"]));
    ok(&ws.run(&["train-diffusion", "--iterations", "2", "--batch", "2", "--base-channels", "8", "--modalities", "class,text"]));
    ok(&ws.run(&["train-critic", "--iterations", "2", "--batch", "2", "--shapes", "1"]));
    for f in ["vqvae.ckpt", "diffusion.ckpt", "critic.ckpt", "vqvae-report.json", "diffusion-report.json"] {
        assert!(ws.root.join("models").join(f).is_file(), "{f}");
    }
    let stack = ModelStack::load(ws.root.join("models")).unwrap();
    assert_eq!(stack.ldm.config().modalities.len(), 2);
    assert!(stack.critic.is_some());
}

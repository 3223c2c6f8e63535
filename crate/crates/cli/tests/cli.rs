//! End-to-end command dispatch tests against the built binary. These run a
//! deliberately tiny model configuration: they exercise the plumbing
//! (artifacts, manifests, exit codes), not generation quality.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_conceptfuse");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary executes")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let cfg = format!(
        r#"
[paths]
out_dir = "runs"
base_checkpoint = "runs/base.ckpt"
bank_dir = "runs/bank"
probe_file = "runs/probe.cftc"
cache_dir = "runs/caches"

[unet]
channels = [4, 4, 8]
text_dim = 6
temb_in = 8
temb_dim = 12
groups = 2
img_size = 32

[schedule]
ddim_steps = 8

[train_base]
n_scenes = 16
steps = 12
batch = 2

[train_concept]
steps = 2
images = 3

[fusion]
steps = 8

[probe]
crops_per_class = 40
steps = 60
min_holdout_accuracy = 0.0

[eval]
n_seeds = 1

[filter]
max_template_retries = 2
probe_threshold = 0.0
{extra}
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, &cfg).unwrap();
    path.to_string_lossy().to_string()
}

#[test]
fn unknown_command_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"], tmp.path());
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2_listing_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[fusion]\nlambda_suppress = -2.0\n").unwrap();
    let out = run(&["--config", path.to_str().unwrap(), "train-base"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda_suppress"), "{err}");
}

#[test]
fn downstream_without_upstream_names_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = run(&["--config", &cfg, "fuse"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-base"), "error should name the producing command: {err}");
}

#[test]
fn full_tiny_pipeline_and_filter_exhaustion() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = tiny_config(dir, "");

    // train-base with a tiny budget produces a checkpoint + manifest
    let out = run(&["--config", &cfg, "train-base"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/base.ckpt").exists());
    assert!(dir.join("runs/base.manifest.json").exists());

    // concept bank
    let out = run(&["--config", &cfg, "train-concept"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/bank/manifest.json").exists());
    assert!(dir.join("runs/bank/ring-circle.entry").exists());

    // an untrained 12-step model emits noise: the template filter rejects
    // every candidate and fuse exits with code 3, reasons logged
    let out = run(&["--config", &cfg, "fuse", "--seed", "9"], dir);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("filter"), "{err}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("filtered"), "reject reasons should be logged: {stdout}");

    // gen-template with gt-free masks also fails the same way
    let out = run(&["--config", &cfg, "gen-template"], dir);
    assert_eq!(out.status.code(), Some(3));

    // invert works on any template in range: use a rendered scene instead
    let scene_dir = dir.join("runs/templates");
    std::fs::create_dir_all(&scene_dir).unwrap();
    let domain = conceptfuse::scene::SceneDomain::new(
        conceptfuse::scene::ConceptRegistry::standard(),
    );
    let scenes = domain
        .make_dataset(conceptfuse::dataset::DatasetKind::Base, None, 1, 5)
        .unwrap();
    conceptfuse::dataset::save_scene(&scenes[0], &scene_dir, "template-4").unwrap();
    let out = run(&["--config", &cfg, "invert"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/caches").read_dir().unwrap().next().is_some());

    // mask on the same rendered template (sidecar present -> oracle masks);
    // the scene may or may not contain the configured words, so accept
    // either success or a logged filter rejection
    let out = run(&["--config", &cfg, "mask", "--seed", "4"], dir);
    assert!(
        out.status.code() == Some(0) || out.status.code() == Some(3),
        "unexpected mask exit: {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("runs/masks/verdict-4.json").exists());
}

#[test]
fn eval_emits_metrics_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // force template acceptance despite the weak model by using oracle-free
    // segmentation-tolerant settings: overlap threshold 1.0 cannot trigger,
    // and a generous retry budget is irrelevant once accepted
    let cfg = tiny_config(dir, "");
    assert!(run(&["--config", &cfg, "train-base"], dir).status.success());
    assert!(run(&["--config", &cfg, "train-concept"], dir).status.success());
    let out = run(&["--config", &cfg, "eval"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = std::fs::read_to_string(dir.join("runs/eval/metrics.tsv")).unwrap();
    assert!(tsv.starts_with("run_id\t"), "header missing: {tsv}");
    // rows exist for the full mode (rejected templates still produce rows)
    assert!(tsv.lines().count() >= 2, "{tsv}");
    assert!(dir.join("runs/eval/summary.json").exists());
    assert!(dir.join("runs/probe.cftc").exists());

    // rerun reproduces the table bitwise
    let before = std::fs::read(dir.join("runs/eval/metrics.tsv")).unwrap();
    let out = run(&["--config", &cfg, "eval"], dir);
    assert!(out.status.success());
    let after = std::fs::read(dir.join("runs/eval/metrics.tsv")).unwrap();
    assert_eq!(before, after);
}

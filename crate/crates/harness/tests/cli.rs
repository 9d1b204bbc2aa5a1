use std::fs;
use std::path::Path;
use std::process::Command;

use dtta_core::nn::save_checkpoint;
use dtta_harness::config::{parse_with_overrides, Paths};
use dtta_harness::run::{self, RunOptions, ABLATE_FILE, CLASSIFIER_FILE, GRID};
use dtta_harness::{aggregate, read_results, ExperimentConfig};

const TINY: &str = r#"
[data]
side = 8
classes = 3
train_count = 90
test_count = 30

[model]
classifier_hidden = [8]
classifier_epochs = 2
epsnet_hidden = [16, 16]
cond_dim = 4
timesteps = 50
diffusion_epochs = 2

[tta]
steps = 2
batch = 8
micro_batch = 4
examples = 6
dc_pairs = 4

[experiment]
seeds = [1, 2]
methods = ["none", "diffusion_tta", "entropy", "adapt_logits", "adapt_logits_ensemble", "diffusion_classifier"]
"#;

fn tiny(extra: &[&str]) -> ExperimentConfig {
    parse_with_overrides(TINY, &extra.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
}

fn trained(root: &Path, cfg: &ExperimentConfig) -> Paths {
    let paths = Paths::resolve(cfg, root);
    run::train(cfg, &paths).unwrap();
    paths
}

fn dtta(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dtta"))
        .args(args)
        .env("DTTA_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

#[test]
fn zero_epochs_checkpoint_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["model.classifier_epochs=0", "model.diffusion_epochs=0"]);
    let paths = trained(dir.path(), &cfg);
    let init = run::init_models(&cfg).unwrap();
    let saved = fs::read(paths.checkpoints.join(CLASSIFIER_FILE)).unwrap();
    assert_eq!(saved, save_checkpoint(&init.classifier.store));
    assert_eq!(run::load_models(&cfg, &paths).unwrap(), init);
}

#[test]
fn training_is_bitwise_repeatable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(&[]);
    let (pa, pb) = (trained(a.path(), &cfg), trained(b.path(), &cfg));
    for f in [CLASSIFIER_FILE, run::DIFFUSION_FILE, run::TRAINING_FILE] {
        assert_eq!(fs::read(pa.checkpoints.join(f)).unwrap(), fs::read(pb.checkpoints.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tta_rows_are_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let paths = trained(dir.path(), &cfg);
    let (csv, rows) = run::tta(&cfg, &paths, &RunOptions { dump_reports: true }).unwrap();
    let first = fs::read(&csv).unwrap();
    run::tta(&cfg, &paths, &RunOptions::default()).unwrap();
    assert_eq!(fs::read(&csv).unwrap(), first);

    assert_eq!(rows.len(), 6 * 2);
    for r in &rows {
        assert_eq!(r.delta, r.acc_after - r.acc_before);
        if r.method == "none" {
            assert_eq!(r.acc_after, r.acc_before);
        }
        if r.method == "diffusion_tta" {
            assert_eq!(r.mean_loss_trajectory.len(), cfg.tta.steps);
        }
    }
    let back = read_results(&csv).unwrap();
    assert_eq!(back.len(), rows.len());
    assert!(back.iter().zip(&rows).all(|(a, b)| a.delta == b.delta && a.mean_loss_trajectory == b.mean_loss_trajectory));

    let dump = fs::read_to_string(csv.with_file_name("tta_reports.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), rows.len() * cfg.tta.examples);
    assert!(csv.with_file_name("tta.json").exists());
    assert!(csv.with_file_name("tta.timings.csv").exists());
}

#[test]
fn online_mode_runs_in_stream_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["tta.mode=online", "experiment.methods=[\"diffusion_tta\"]"]);
    let paths = trained(dir.path(), &cfg);
    let (_, rows) = run::tta(&cfg, &paths, &RunOptions::default()).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn ablation_grid_has_stable_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["experiment.seeds=[3]"]);
    let paths = trained(dir.path(), &cfg);
    let (csv, rows) = run::ablate(&cfg, &paths, &RunOptions::default()).unwrap();
    assert_eq!(csv.file_name().unwrap(), ABLATE_FILE);
    let names: Vec<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(names, GRID);
    let single = rows.iter().find(|r| r.condition == "single_pair").unwrap();
    let g = aggregate(std::slice::from_ref(single));
    assert_eq!(g[0].acc_after.mean, single.acc_after);

    let picked = tiny(&["experiment.seeds=[3]", "experiment.cells=[\"last_layer\", \"single_pair\"]"]);
    let (_, rows) = run::ablate(&picked, &paths, &RunOptions::default()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(names, ["single_pair", "last_layer"]);
}

#[test]
fn binary_exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let cfg = config.to_str().unwrap();

    assert_eq!(dtta(root, &["tta", "-c", cfg, "--set", "tta.bogus=1"]).status.code(), Some(3));
    assert_eq!(dtta(root, &["tta", "-c", cfg]).status.code(), Some(4), "missing checkpoints");
    assert_eq!(dtta(root, &["tta", "-c", cfg, "--set", "tta.micro_batch=3"]).status.code(), Some(12));
    let empty = root.join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dtta(root, &["report", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no results"));

    let diverged = dtta(root, &["train", "-c", cfg, "--set", "model.classifier_lr=1e30", "--set", "experiment.checkpoints=bad"]);
    assert_eq!(diverged.status.code(), Some(16));

    assert!(dtta(root, &["train", "-c", cfg]).status.success());
    let out = dtta(root, &["tta", "-c", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = root.join("results/tta.csv");
    let replay = root.join("replay");
    let out = dtta(root, &["replay", csv.to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let results = root.join("results");
    let out = dtta(root, &["report", results.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| diffusion_tta |"));
    assert!(results.join("tta_loss.svg").exists());

    // a tampered row no longer replays
    let text = fs::read_to_string(&csv).unwrap().replacen("none,default", "none,tampered", 1);
    fs::write(&csv, text).unwrap();
    let out = dtta(root, &["replay", csv.to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(7));
}

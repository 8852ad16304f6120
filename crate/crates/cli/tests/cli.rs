use std::fs;
use std::path::{Path, PathBuf};

use rcl_core::eval::{evaluate_inputs, Task};
use rcl_core::nn::{save_checkpoint, Architecture, HeadKind, Init, RestorerNet};
use rcl_lab::io::{read_tensor, Manifest};
use rcl_lab::{run, Cli, Command};
use tempfile::TempDir;

const SMALL: &str = "\
image_count = 6
image_height = 16
image_width = 16
crop = 16
batch_size = 4
steps = 3
test_count = 2
labels = 2
finetune_steps = 3
n_triples = 10
";

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn exec(command: Command, config: &Path, out: &Path) -> anyhow::Result<()> {
    run(&Cli { command, config: config.to_path_buf(), out: Some(out.to_path_buf()), seed: None })
}

/// Simulated dataset in `dir/sim`, returned with its manifest path.
fn simulated(dir: &TempDir, extra: &str) -> PathBuf {
    let cfg = write_config(dir.path(), "sim.cfg", &format!("{SMALL}{extra}"));
    let out = dir.path().join("sim");
    exec(Command::Simulate, &cfg, &out).unwrap();
    out.join("manifest.csv")
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn zero_noise_range_gives_identical_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.cfg", "image_count = 1\nimage_height = 16\nimage_width = 16\nnoise_sigma_min = 0\nnoise_sigma_max = 0\n");
    let out = dir.path().join("sim");
    exec(Command::Simulate, &cfg, &out).unwrap();
    let clean = fs::read(out.join("images/clean_0000.rct")).unwrap();
    let noisy = fs::read(out.join("images/noisy_0000.rct")).unwrap();
    assert_eq!(clean, noisy);
}

#[test]
fn simulated_manifest_round_trips_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = simulated(&dir, "");
    let manifest = Manifest::load(&path).unwrap();
    assert_eq!(manifest.entries.len(), 6);
    let reparsed = Manifest::parse(&manifest.render(), &manifest.root).unwrap();
    assert_eq!(reparsed, manifest);
    let data = manifest.load_dataset().unwrap();
    let first = &manifest.entries[0];
    assert_eq!(data.samples[0].noisy, read_tensor(&manifest.root.join(first.noisy.as_ref().unwrap())).unwrap());
    // dropping the noisy column regenerates the same noise from the recorded seed
    let mut seeded = manifest.clone();
    for e in &mut seeded.entries {
        e.noisy = None;
    }
    let regenerated = seeded.load_dataset().unwrap();
    for (a, b) in data.samples.iter().zip(&regenerated.samples) {
        assert_eq!(a.noisy, b.noisy);
    }
    assert!(fs::read_to_string(dir.path().join("sim").join("config.resolved")).unwrap().contains("image_count = 6"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "image_count = 4\nlearning_rate = 0.1\n");
    let err = exec(Command::Simulate, &cfg, &dir.path().join("out")).unwrap_err();
    assert!(format!("{err:#}").contains("learning_rate"), "{err:#}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn pretrain_is_reproducible_for_every_distance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    for distance in ["emd", "bd", "mmd"] {
        let cfg = write_config(dir.path(), "pre.cfg", &format!("{SMALL}manifest = {}\ndistance = {distance}\n", manifest.display()));
        let a = dir.path().join(format!("{distance}-a"));
        let b = dir.path().join(format!("{distance}-b"));
        exec(Command::Pretrain, &cfg, &a).unwrap();
        exec(Command::Pretrain, &cfg, &b).unwrap();
        assert_eq!(fs::read(a.join("checkpoint.rcl")).unwrap(), fs::read(b.join("checkpoint.rcl")).unwrap(), "{distance}");
        let losses = csv_lines(&a.join("loss.csv"));
        assert_eq!(losses[0], "step,loss");
        assert_eq!(losses.len(), 4);
        assert_eq!(losses, csv_lines(&b.join("loss.csv")));
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let cfg = write_config(dir.path(), "pre.cfg", &format!("{SMALL}manifest = {}\nmode = n2n\n", manifest.display()));
    let a = dir.path().join("a");
    exec(Command::Pretrain, &cfg, &a).unwrap();
    let b = dir.path().join("b");
    exec(Command::Pretrain, &a.join("config.resolved"), &b).unwrap();
    assert_eq!(fs::read(a.join("checkpoint.rcl")).unwrap(), fs::read(b.join("checkpoint.rcl")).unwrap());
}

fn zero_dncnn(dir: &Path) -> PathBuf {
    let net = RestorerNet::new(Architecture::DncnnSmall, 3, 3, HeadKind::Identity, Init::Zeros).unwrap();
    let path = dir.join("zero.rcl");
    save_checkpoint(&net.params, &path).unwrap();
    path
}

#[test]
fn evaluating_an_identity_network_scores_the_noisy_input() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let ckpt = zero_dncnn(dir.path());
    let body = format!("{SMALL}manifest = {}\ncheckpoint = {}\nfresh_head = false\ntrials = 5\n", manifest.display(), ckpt.display());
    let cfg = write_config(dir.path(), "eval.cfg", &body);
    let out = dir.path().join("eval");
    exec(Command::Evaluate, &cfg, &out).unwrap();
    let lines = csv_lines(&out.join("metrics.csv"));
    assert_eq!(lines.len(), 7, "{lines:?}");
    assert!(lines[6].starts_with("denoise,as-is,mean,"), "{}", lines[6]);

    let data = Manifest::load(&manifest).unwrap().load_dataset().unwrap();
    let (_, test) = data.split_tail(2);
    let expected = evaluate_inputs(&Task::Denoise.pairs(&test).unwrap(), "denoise", "noisy").unwrap();
    let mut rows = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "psnr").unwrap();
    for row in rows.records() {
        let psnr: f64 = row.unwrap()[col].parse().unwrap();
        assert!((psnr - expected.psnr_mean).abs() < 1e-3, "{psnr} vs {}", expected.psnr_mean);
    }
}

#[test]
fn proxy_evaluation_writes_a_row_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let ckpt = zero_dncnn(dir.path());
    let body = format!("{SMALL}manifest = {}\ncheckpoint = {}\ntrials = 2\n", manifest.display(), ckpt.display());
    let cfg = write_config(dir.path(), "eval.cfg", &body);
    let out = dir.path().join("eval");
    exec(Command::Evaluate, &cfg, &out).unwrap();
    assert_eq!(csv_lines(&out.join("metrics.csv")).len(), 4);
    // header plus one line per test image and trial
    assert_eq!(csv_lines(&out.join("per_image.csv")).len(), 5);
}

#[test]
fn density_analysis_writes_every_phase() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let ckpt = zero_dncnn(dir.path());
    let body = format!("{SMALL}manifest = {}\ncheckpoint = {}\nanalyze = density\n", manifest.display(), ckpt.display());
    let cfg = write_config(dir.path(), "density.cfg", &body);
    let out = dir.path().join("density");
    exec(Command::Analyze, &cfg, &out).unwrap();
    let lines = csv_lines(&out.join("density.csv"));
    assert_eq!(lines.len(), 1 + 3 * 10);
    for phase in ["true-noise,", "pre-training,", "post-training,"] {
        assert_eq!(lines.iter().filter(|l| l.starts_with(phase)).count(), 10, "{phase}: {:?}", &lines[..3]);
    }
}

#[test]
fn sweep_writes_one_row_per_count_and_rejects_oversized_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let ckpt = zero_dncnn(dir.path());
    let base = format!("{SMALL}manifest = {}\ncheckpoint = {}\nanalyze = sweep\n", manifest.display(), ckpt.display());
    let cfg = write_config(dir.path(), "sweep.cfg", &format!("{base}sweep_counts = 1,4\n"));
    let out = dir.path().join("sweep");
    exec(Command::Analyze, &cfg, &out).unwrap();
    let lines = csv_lines(&out.join("sweep.csv"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("4,"), "{lines:?}");

    let cfg = write_config(dir.path(), "sweep.cfg", &format!("{base}sweep_counts = 1,5\n"));
    assert!(exec(Command::Analyze, &cfg, &dir.path().join("sweep2")).is_err());
}

#[test]
fn labels_beyond_the_pool_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let ckpt = zero_dncnn(dir.path());
    let body = format!("{}manifest = {}\ncheckpoint = {}\n", SMALL.replace("labels = 2", "labels = 5"), manifest.display(), ckpt.display());
    let cfg = write_config(dir.path(), "ft.cfg", &body);
    assert!(exec(Command::Finetune, &cfg, &dir.path().join("ft")).is_err());
}

#[test]
fn frozen_finetune_keeps_the_body() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let cfg = write_config(dir.path(), "pre.cfg", &format!("{SMALL}manifest = {}\n", manifest.display()));
    let pre = dir.path().join("pre");
    exec(Command::Pretrain, &cfg, &pre).unwrap();
    for (freeze, same) in [(true, true), (false, false)] {
        let body = format!("{SMALL}manifest = {}\ncheckpoint = {}\nfreeze = {freeze}\n", manifest.display(), pre.join("checkpoint.rcl").display());
        let cfg = write_config(dir.path(), "ft.cfg", &body);
        let out = dir.path().join(format!("ft-{freeze}"));
        exec(Command::Finetune, &cfg, &out).unwrap();
        let hashes = fs::read_to_string(out.join("body_hash.txt")).unwrap();
        let mut it = hashes.lines().map(|l| l.split_once(' ').unwrap().1);
        let (before, after) = (it.next().unwrap(), it.next().unwrap());
        assert_eq!(before == after, same, "freeze = {freeze}");
        assert!(out.join("finetuned.rcl").exists());
        assert_eq!(csv_lines(&out.join("metrics.csv")).len(), 3);
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulated(&dir, "");
    let body = format!("{SMALL}manifest = {}\ncheckpoint = nowhere.rcl\n", manifest.display());
    let cfg = write_config(dir.path(), "eval.cfg", &body);
    let err = exec(Command::Evaluate, &cfg, &dir.path().join("eval")).unwrap_err();
    assert!(format!("{err:#}").contains("nowhere.rcl"));
}

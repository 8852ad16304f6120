use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;
use rcl_core::eval::{
    density_analysis, evaluate_pairs, label_efficiency_sweep, nested_subset, proxy_evaluate, write_density_csv, write_metrics_csv,
    write_per_image_csv, write_sweep_csv, DensityConfig, DensityPhase, ProxyResult, SweepConfig,
};
use rcl_core::nn::{load_checkpoint, params_to_bytes, save_checkpoint, FeatureEncoder, ModelParams, RestorerNet};
use rcl_core::noise::{derive_rng, sample_nlf_params};
use rcl_core::tensor::Tensor;
use rcl_core::train::{finetune, pretrain_with, save_loss_csv, Dataset, Sample};
use sha2::{Digest, Sha256};

use crate::config::{AnalyzeKind, RunConfig};
use crate::io::{list_pngs, read_png, write_tensor, Manifest, ManifestEntry};

pub const RESOLVED_CONFIG: &str = "config.resolved";

/// Creates `out` and records the resolved configuration in it.
fn prepare(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.render()).context("writing resolved config")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of every parameter outside the task head.
pub fn body_hash(params: &ModelParams) -> String {
    let mut body = ModelParams::new();
    for e in params.entries().iter().filter(|e| !RestorerNet::is_head_param(&e.name)) {
        body.push(&e.name, e.tensor.clone()).expect("unique names");
    }
    sha256_hex(&params_to_bytes(&body))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.manifest.as_ref().context("config needs `manifest`")?;
    Manifest::load(path)?.load_dataset()
}

fn checkpoint(cfg: &RunConfig) -> Result<RestorerNet> {
    let path = cfg.checkpoint.as_ref().context("config needs `checkpoint`")?;
    ensure!(path.exists(), "checkpoint {} does not exist", path.display());
    let params = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(RestorerNet::from_checkpoint_params(params)?)
}

/// `(pool, test)`: the last `test_count` images are held out.
fn split(data: Dataset, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    ensure!(cfg.test_count >= 1 && cfg.test_count < data.len(), "test_count {} must lie in [1, {})", cfg.test_count, data.len());
    Ok(data.split_tail(cfg.test_count))
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare(out, cfg)?;
    let range = cfg.noise_range()?;
    let data = match &cfg.png_dir {
        None => Dataset::synthesize(cfg.image_count, cfg.image_height, cfg.image_width, range, cfg.seed)?,
        Some(dir) => {
            let mut samples = Vec::new();
            for (i, file) in list_pngs(dir)?.iter().enumerate() {
                let clean = read_png(file)?;
                let mut rng = derive_rng(cfg.seed, i as u64);
                let noise_seed: u64 = rng.random();
                let params = sample_nlf_params(range, &mut rng)?;
                samples.push(Sample::simulate(clean, params, noise_seed));
            }
            Dataset::new(samples)
        }
    };
    let images = out.join("images");
    fs::create_dir_all(&images)?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let clean = PathBuf::from(format!("images/clean_{i:04}.rct"));
        let noisy = PathBuf::from(format!("images/noisy_{i:04}.rct"));
        write_tensor(&out.join(&clean), &s.clean)?;
        write_tensor(&out.join(&noisy), &s.noisy)?;
        entries.push(ManifestEntry { clean, noisy: Some(noisy), params: Some(s.params), noise_seed: Some(s.noise_seed) });
    }
    let manifest = Manifest { root: out.to_path_buf(), entries };
    manifest.save(&out.join("manifest.csv"))?;
    println!("simulate: wrote {} images and manifest.csv to {}", data.len(), out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare(out, cfg)?;
    let data = dataset(cfg)?;
    let encoder = match &cfg.encoder_checkpoint {
        Some(p) => FeatureEncoder::from_params(load_checkpoint(p).with_context(|| format!("loading encoder {}", p.display()))?)?,
        None => FeatureEncoder::new(cfg.encoder_seed),
    };
    let tcfg = cfg.train_config();
    let every = (tcfg.steps / 20).max(1);
    let result = pretrain_with(&data, &tcfg, &encoder, |step, stats| {
        if step % every == 0 || step + 1 == tcfg.steps {
            eprintln!("step {step:>6}  loss {:.6}", stats.loss);
        }
    })?;
    let ckpt = out.join("checkpoint.rcl");
    save_checkpoint(&result.net.params, &ckpt)?;
    save_loss_csv(&out.join("loss.csv"), &result.losses)?;
    println!("pretrain: mode={} steps={} checkpoint sha256={}", tcfg.mode, tcfg.steps, file_hash(&ckpt)?);
    Ok(())
}

fn labeled_subset(pool: &[(Tensor, Tensor)], count: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
    let idx = nested_subset(pool.len(), count, seed)?;
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

pub fn finetune_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = checkpoint(cfg)?;
    prepare(out, cfg)?;
    cfg.task.check(&net)?;
    let (pool, test) = split(dataset(cfg)?, cfg)?;
    let pool = cfg.task.pairs(&pool)?;
    let test = cfg.task.pairs(&test)?;
    let labeled = labeled_subset(&pool, cfg.labels, cfg.seed)?;
    let before = body_hash(&net.params);
    let tuned = finetune(&net, &labeled, &cfg.finetune_config())?;
    let after = body_hash(&tuned.params);
    save_checkpoint(&tuned.params, &out.join("finetuned.rcl"))?;
    let report = evaluate_pairs(&tuned, &test, &cfg.task.to_string(), "finetune", cfg.seed, 0)?;
    let result = ProxyResult { psnr_mean: report.psnr_mean, ssim_mean: report.ssim_mean, trials: vec![report] };
    write_metrics_csv(fs::File::create(out.join("metrics.csv"))?, &result)?;
    write_per_image_csv(fs::File::create(out.join("per_image.csv"))?, &result.trials)?;
    fs::write(out.join("body_hash.txt"), format!("before {before}\nafter {after}\n"))?;
    println!(
        "finetune: task={} labels={} freeze={} psnr={} body_unchanged={}",
        cfg.task,
        labeled.len(),
        cfg.freeze,
        rcl_core::eval::format_metric(result.psnr_mean),
        before == after
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = checkpoint(cfg)?;
    prepare(out, cfg)?;
    cfg.task.check(&net)?;
    let (pool, test) = split(dataset(cfg)?, cfg)?;
    let test = cfg.task.pairs(&test)?;
    let result = if cfg.fresh_head {
        let pool = cfg.task.pairs(&pool)?;
        let labeled = labeled_subset(&pool, cfg.labels, cfg.seed)?;
        proxy_evaluate(&net, cfg.task, &labeled, &test, cfg.trials, &cfg.finetune_config(), "proxy")?
    } else {
        ensure!(
            net.head == cfg.task.head(),
            "checkpoint has a {} head but {} needs {}",
            net.head,
            cfg.task,
            cfg.task.head()
        );
        let trials = (0..cfg.trials)
            .map(|t| evaluate_pairs(&net, &test, &cfg.task.to_string(), "as-is", cfg.seed.wrapping_add(t as u64), t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let psnr_mean = trials.iter().map(|r| r.psnr_mean).sum::<f64>() / trials.len() as f64;
        let ssim_mean = trials.iter().map(|r| r.ssim_mean).sum::<f64>() / trials.len() as f64;
        ProxyResult { trials, psnr_mean, ssim_mean }
    };
    write_metrics_csv(fs::File::create(out.join("metrics.csv"))?, &result)?;
    write_per_image_csv(fs::File::create(out.join("per_image.csv"))?, &result.trials)?;
    println!(
        "evaluate: task={} trials={} psnr={} ssim={}",
        cfg.task,
        cfg.trials,
        rcl_core::eval::format_metric(result.psnr_mean),
        rcl_core::eval::format_metric(result.ssim_mean)
    );
    Ok(())
}

pub fn analyze(cfg: &RunConfig, out: &Path) -> Result<()> {
    match cfg.analyze {
        AnalyzeKind::Density => {
            let trained = checkpoint(cfg)?;
            prepare(out, cfg)?;
            let data = dataset(cfg)?;
            let untrained = RestorerNet::new(trained.architecture, trained.in_channels, trained.out_channels, trained.head, rcl_core::nn::Init::HeUniform { seed: cfg.seed })?;
            let dcfg = DensityConfig { crop: cfg.crop, overlap_min: cfg.overlap_min };
            let records = vec![
                density_analysis(None, DensityPhase::TrueNoise, &data, cfg.n_triples, dcfg, cfg.seed)?,
                density_analysis(Some(&untrained), DensityPhase::PreTraining, &data, cfg.n_triples, dcfg, cfg.seed)?,
                density_analysis(Some(&trained), DensityPhase::PostTraining, &data, cfg.n_triples, dcfg, cfg.seed)?,
            ];
            write_density_csv(fs::File::create(out.join("density.csv"))?, &records)?;
            for r in &records {
                println!("density: phase={} triples={} mean={:.6e} positive_fraction={:.4}", r.phase, r.values.len(), r.mean(), r.positive_fraction());
            }
        }
        AnalyzeKind::Sweep => {
            let net = checkpoint(cfg)?;
            prepare(out, cfg)?;
            let (pool, test) = split(dataset(cfg)?, cfg)?;
            let pool = rcl_core::eval::Task::Denoise.pairs(&pool)?;
            let test = rcl_core::eval::Task::Denoise.pairs(&test)?;
            let scfg = SweepConfig { finetune: cfg.finetune_config(), seed: cfg.seed };
            let rows = label_efficiency_sweep(&net, &pool, &test, &cfg.sweep_counts, &scfg)?;
            write_sweep_csv(fs::File::create(out.join("sweep.csv"))?, &rows)?;
            println!("sweep: {} rows written to {}", rows.len(), out.join("sweep.csv").display());
        }
    }
    Ok(())
}

pub fn dispatch(command: &str, cfg: &RunConfig, out: &Path) -> Result<()> {
    match command {
        "simulate" => simulate(cfg, out),
        "pretrain" => pretrain(cfg, out),
        "finetune" => finetune_cmd(cfg, out),
        "evaluate" => evaluate(cfg, out),
        "analyze" => analyze(cfg, out),
        other => bail!("unknown command `{other}`"),
    }
}

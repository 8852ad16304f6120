//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rcl_core::eval::Task;
use rcl_core::losses::DistanceKind;
use rcl_core::nn::Architecture;
use rcl_core::noise::NoiseRange;
use rcl_core::train::{Domain, FinetuneConfig, TrainConfig, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeKind {
    Density,
    Sweep,
}

impl FromStr for AnalyzeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "density" => Ok(Self::Density),
            "sweep" => Ok(Self::Sweep),
            _ => Err(format!("unknown analysis `{s}`")),
        }
    }
}

/// Every tunable of a run. Paths are resolved relative to the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub encoder_checkpoint: Option<PathBuf>,
    pub png_dir: Option<PathBuf>,
    pub image_count: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Noise standard deviation bounds on the 8-bit scale.
    pub noise_sigma_min: f64,
    pub noise_sigma_max: f64,
    pub mode: TrainMode,
    pub architecture: Architecture,
    pub domain: Domain,
    pub batch_size: usize,
    pub crop: usize,
    pub steps: usize,
    pub tau: f64,
    pub alpha: f64,
    pub distance: DistanceKind,
    pub distance_scale: f64,
    pub lr: f64,
    pub overlap_min: f64,
    pub encoder_seed: u64,
    pub task: Task,
    pub test_count: usize,
    pub labels: usize,
    pub freeze: bool,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_crop: usize,
    pub trials: usize,
    pub fresh_head: bool,
    pub analyze: AnalyzeKind,
    pub n_triples: usize,
    pub sweep_counts: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            manifest: None,
            checkpoint: None,
            encoder_checkpoint: None,
            png_dir: None,
            image_count: 64,
            image_height: 64,
            image_width: 64,
            noise_sigma_min: 0.0,
            noise_sigma_max: 20.0,
            mode: t.mode,
            architecture: t.architecture,
            domain: t.domain,
            batch_size: t.batch_size,
            crop: t.crop,
            steps: t.steps,
            tau: t.tau,
            alpha: t.alpha,
            distance: t.distance,
            distance_scale: t.distance_scale,
            lr: t.lr,
            overlap_min: t.overlap_min,
            encoder_seed: t.encoder_seed,
            task: Task::Denoise,
            test_count: 16,
            labels: 4,
            freeze: true,
            finetune_steps: 300,
            finetune_lr: 1e-3,
            finetune_crop: 0,
            trials: 1,
            fresh_head: true,
            analyze: AnalyzeKind::Density,
            n_triples: 500,
            sweep_counts: vec![4, 32],
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{v}`"),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), n + 1).is_some() {
                bail!("line {}: `{key}` is set twice", n + 1);
            }
            cfg.set(key, value).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse_str(&text).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(std::path::Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.checkpoint, &mut cfg.encoder_checkpoint, &mut cfg.png_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "manifest" => self.manifest = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "encoder_checkpoint" => self.encoder_checkpoint = opt_path(v),
            "png_dir" => self.png_dir = opt_path(v),
            "image_count" => self.image_count = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "noise_sigma_min" => self.noise_sigma_min = parse(key, v)?,
            "noise_sigma_max" => self.noise_sigma_max = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "architecture" => self.architecture = parse(key, v)?,
            "domain" => self.domain = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "distance" => self.distance = parse(key, v)?,
            "distance_scale" => self.distance_scale = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "overlap_min" => self.overlap_min = parse(key, v)?,
            "encoder_seed" => self.encoder_seed = parse(key, v)?,
            "task" => self.task = parse(key, v)?,
            "test_count" => self.test_count = parse(key, v)?,
            "labels" => self.labels = parse(key, v)?,
            "freeze" => self.freeze = parse_bool(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = parse(key, v)?,
            "finetune_crop" => self.finetune_crop = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "fresh_head" => self.fresh_head = parse_bool(key, v)?,
            "analyze" => self.analyze = parse(key, v)?,
            "n_triples" => self.n_triples = parse(key, v)?,
            "sweep_counts" => {
                self.sweep_counts = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<Vec<usize>>>()?;
            }
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.noise_range()?;
        self.train_config().validate()?;
        if self.image_height < 16 || self.image_width < 16 || self.image_height % 8 != 0 || self.image_width % 8 != 0 {
            bail!("image dimensions must be multiples of 8 and at least 16");
        }
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if self.finetune_crop % 8 != 0 {
            bail!("finetune_crop must be a multiple of 8 (0 trains on whole images)");
        }
        Ok(())
    }

    pub fn noise_range(&self) -> Result<NoiseRange> {
        Ok(NoiseRange::from_8bit(self.noise_sigma_min, self.noise_sigma_max)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mode: self.mode,
            architecture: self.architecture,
            domain: self.domain,
            batch_size: self.batch_size,
            crop: self.crop,
            steps: self.steps,
            tau: self.tau,
            alpha: self.alpha,
            distance: self.distance,
            distance_scale: self.distance_scale,
            lr: self.lr,
            overlap_min: self.overlap_min,
            encoder_seed: self.encoder_seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune_steps,
            lr: self.finetune_lr,
            seed: self.seed,
            freeze_body: self.freeze,
            head: self.task.head(),
            out_channels: 3,
            crop: (self.finetune_crop > 0).then_some(self.finetune_crop),
        }
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("manifest", path(&self.manifest));
        kv("checkpoint", path(&self.checkpoint));
        kv("encoder_checkpoint", path(&self.encoder_checkpoint));
        kv("png_dir", path(&self.png_dir));
        kv("image_count", self.image_count.to_string());
        kv("image_height", self.image_height.to_string());
        kv("image_width", self.image_width.to_string());
        kv("noise_sigma_min", format!("{:?}", self.noise_sigma_min));
        kv("noise_sigma_max", format!("{:?}", self.noise_sigma_max));
        kv("mode", self.mode.to_string());
        kv("architecture", self.architecture.to_string());
        kv("domain", self.domain.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("crop", self.crop.to_string());
        kv("steps", self.steps.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("alpha", format!("{:?}", self.alpha));
        kv("distance", self.distance.to_string());
        kv("distance_scale", format!("{:?}", self.distance_scale));
        kv("lr", format!("{:?}", self.lr));
        kv("overlap_min", format!("{:?}", self.overlap_min));
        kv("encoder_seed", self.encoder_seed.to_string());
        kv("task", self.task.to_string());
        kv("test_count", self.test_count.to_string());
        kv("labels", self.labels.to_string());
        kv("freeze", self.freeze.to_string());
        kv("finetune_steps", self.finetune_steps.to_string());
        kv("finetune_lr", format!("{:?}", self.finetune_lr));
        kv("finetune_crop", self.finetune_crop.to_string());
        kv("trials", self.trials.to_string());
        kv("fresh_head", self.fresh_head.to_string());
        kv("analyze", if self.analyze == AnalyzeKind::Density { "density" } else { "sweep" }.to_string());
        kv("n_triples", self.n_triples.to_string());
        kv("sweep_counts", self.sweep_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        s
    }
}

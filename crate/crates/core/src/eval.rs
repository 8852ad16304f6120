//! Image metrics, proxy evaluation, residual density analysis and
//! label-efficiency sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::losses::{emd, LossError};
use crate::nn::{HeadKind, Init, NnError, RestorerNet};
use crate::noise::{apply_nlf_noise, derive_rng, downsample2x, NoiseError};
use crate::tensor::{Tensor, TensorError};
use crate::train::{finetune, sample_pair_origins, Dataset, FinetuneConfig, Sample, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {0}x{1} is smaller than the 8x8 SSIM window")]
    TooSmall(usize, usize),
    #[error("task head mismatch: {0}")]
    HeadMismatch(String),
    #[error("requested {requested} labels but the pool holds {available}")]
    InsufficientLabels { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `10 log10(1 / MSE)` for unit peak; `+inf` when the images are identical.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(EvalError::Shape(x.shape().to_vec(), y.shape().to_vec()));
    }
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Renders a metric, spelling the infinite-PSNR sentinel as `inf`.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const C3: f64 = C2 / 2.0;

fn grayscale(t: &Tensor) -> Result<(usize, usize, usize, Vec<f64>)> {
    let &[n, c, h, w] = t.shape() else {
        return Err(EvalError::Invalid(format!("expected NCHW, got {:?}", t.shape())));
    };
    let mut out = vec![0.0; n * h * w];
    for b in 0..n {
        for ch in 0..c {
            let plane = &t.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for (o, v) in out[b * h * w..(b + 1) * h * w].iter_mut().zip(plane) {
                *o += v;
            }
        }
    }
    for v in &mut out {
        *v /= c as f64;
    }
    Ok((n, h, w, out))
}

/// Mean over 8x8 windows (stride 4) of luminance x contrast x structure on
/// the channel-mean image.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(EvalError::Shape(x.shape().to_vec(), y.shape().to_vec()));
    }
    let (n, h, w, gx) = grayscale(x)?;
    let (_, _, _, gy) = grayscale(y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::TooSmall(h, w));
    }
    let area = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        let px = &gx[b * h * w..(b + 1) * h * w];
        let py = &gy[b * h * w..(b + 1) * h * w];
        let window = |p: &[f64], r0: usize, c0: usize| {
            (r0..r0 + SSIM_WINDOW).flat_map(move |r| (c0..c0 + SSIM_WINDOW).map(move |c| r * w + c)).map(|i| p[i]).collect::<Vec<f64>>()
        };
        for r0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for c0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let wx = window(px, r0, c0);
                let wy = window(py, r0, c0);
                let mx = wx.iter().sum::<f64>() / area;
                let my = wy.iter().sum::<f64>() / area;
                // population moments; one routine for variance and covariance keeps ssim(x, x) exact
                let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / area;
                let vx = cov(&wx, mx, &wx, mx);
                let vy = cov(&wy, my, &wy, my);
                let vxy = cov(&wx, mx, &wy, my);
                let sxsy = (vx * vy).sqrt();
                let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
                let c = (2.0 * sxsy + C2) / (vx + vy + C2);
                let s = (vxy + C3) / (sxsy + C3);
                total += l * c * s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Denoise,
    Sr2x,
    JDenSr2x,
    Jdd,
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "denoise" => Ok(Self::Denoise),
            "sr2x" => Ok(Self::Sr2x),
            "jdensr2x" => Ok(Self::JDenSr2x),
            "jdd" => Ok(Self::Jdd),
            _ => Err(format!("unknown task `{s}`")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Denoise => "denoise",
            Self::Sr2x => "sr2x",
            Self::JDenSr2x => "jdensr2x",
            Self::Jdd => "jdd",
        })
    }
}

impl Task {
    pub fn head(self) -> HeadKind {
        match self {
            Task::Denoise | Task::Jdd => HeadKind::Identity,
            Task::Sr2x | Task::JDenSr2x => HeadKind::Upsample2x,
        }
    }

    pub fn input_channels(self) -> usize {
        if self == Task::Jdd {
            1
        } else {
            3
        }
    }

    /// `(input, target)` for one sample.
    pub fn pair(self, s: &Sample) -> Result<(Tensor, Tensor)> {
        Ok(match self {
            Task::Denoise => (s.noisy.clone(), s.clean.clone()),
            Task::Sr2x => (downsample2x(&s.clean)?, s.clean.clone()),
            Task::JDenSr2x => {
                let low = downsample2x(&s.clean)?;
                (apply_nlf_noise(&low, s.params, &mut derive_rng(s.noise_seed, 3)), s.clean.clone())
            }
            Task::Jdd => (s.noisy_raw()?, s.clean.clone()),
        })
    }

    pub fn pairs(self, data: &Dataset) -> Result<Vec<(Tensor, Tensor)>> {
        data.samples.iter().map(|s| self.pair(s)).collect()
    }

    /// Rejects networks whose input channels or architecture cannot serve this task.
    pub fn check(self, net: &RestorerNet) -> Result<()> {
        if net.in_channels != self.input_channels() {
            return Err(EvalError::HeadMismatch(format!(
                "{self} needs {}-channel input, network takes {}",
                self.input_channels(),
                net.in_channels
            )));
        }
        if self.head() == HeadKind::Upsample2x && net.architecture == crate::nn::Architecture::DncnnSmall {
            return Err(EvalError::HeadMismatch(format!("{self} needs an upsampling head, which dncnn-small lacks")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub trial: usize,
    pub per_image_psnr: Vec<f64>,
    pub per_image_ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// Restores every input and scores it against its target.
pub fn evaluate_pairs(net: &RestorerNet, pairs: &[(Tensor, Tensor)], task: &str, method: &str, seed: u64, trial: usize) -> Result<MetricsReport> {
    let mut p = Vec::with_capacity(pairs.len());
    let mut s = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        let out = net.predict(x)?;
        p.push(psnr(&out, y)?);
        s.push(ssim(&out, y)?);
    }
    Ok(report(task, method, seed, trial, p, s))
}

/// Scores the inputs themselves (no network).
pub fn evaluate_inputs(pairs: &[(Tensor, Tensor)], task: &str, method: &str) -> Result<MetricsReport> {
    let mut p = Vec::with_capacity(pairs.len());
    let mut s = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        p.push(psnr(x, y)?);
        s.push(ssim(x, y)?);
    }
    Ok(report(task, method, 0, 0, p, s))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn report(task: &str, method: &str, seed: u64, trial: usize, p: Vec<f64>, s: Vec<f64>) -> MetricsReport {
    MetricsReport {
        task: task.to_string(),
        method: method.to_string(),
        seed,
        trial,
        psnr_mean: mean(&p),
        ssim_mean: mean(&s),
        per_image_psnr: p,
        per_image_ssim: s,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyResult {
    pub trials: Vec<MetricsReport>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// Per trial: fresh task head, body frozen, head fine-tuned on the labelled
/// set, then scored on the test set. Trial `t` uses seed `cfg.seed + t`.
pub fn proxy_evaluate(
    pretrained: &RestorerNet,
    task: Task,
    labeled_train: &[(Tensor, Tensor)],
    test: &[(Tensor, Tensor)],
    trials: usize,
    cfg: &FinetuneConfig,
    method: &str,
) -> Result<ProxyResult> {
    if trials == 0 {
        return Err(EvalError::Invalid("trials must be at least 1".into()));
    }
    task.check(pretrained)?;
    let mut reports = Vec::with_capacity(trials);
    for t in 0..trials {
        let seed = cfg.seed.wrapping_add(t as u64);
        let fcfg = FinetuneConfig { seed, freeze_body: true, head: task.head(), out_channels: 3, ..cfg.clone() };
        let tuned = finetune(pretrained, labeled_train, &fcfg)?;
        reports.push(evaluate_pairs(&tuned, test, &task.to_string(), method, seed, t)?);
    }
    let psnr_mean = mean(&reports.iter().map(|r| r.psnr_mean).collect::<Vec<_>>());
    let ssim_mean = mean(&reports.iter().map(|r| r.ssim_mean).collect::<Vec<_>>());
    Ok(ProxyResult { trials: reports, psnr_mean, ssim_mean })
}

/// Columns: `task,method,trial,seed,images,psnr,ssim`; a final row with
/// trial `mean` averages the trials.
pub fn write_metrics_csv<W: Write>(out: W, result: &ProxyResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "method", "trial", "seed", "images", "psnr", "ssim"])?;
    for r in &result.trials {
        w.write_record([
            r.task.clone(),
            r.method.clone(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.per_image_psnr.len().to_string(),
            format_metric(r.psnr_mean),
            format_metric(r.ssim_mean),
        ])?;
    }
    if let Some(first) = result.trials.first() {
        w.write_record([
            first.task.clone(),
            first.method.clone(),
            "mean".to_string(),
            String::new(),
            first.per_image_psnr.len().to_string(),
            format_metric(result.psnr_mean),
            format_metric(result.ssim_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `task,method,trial,image,psnr,ssim`.
pub fn write_per_image_csv<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "method", "trial", "image", "psnr", "ssim"])?;
    for r in reports {
        for (i, (p, s)) in r.per_image_psnr.iter().zip(&r.per_image_ssim).enumerate() {
            w.write_record([r.task.clone(), r.method.clone(), r.trial.to_string(), i.to_string(), format_metric(*p), format_metric(*s)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityPhase {
    TrueNoise,
    PreTraining,
    PostTraining,
}

impl fmt::Display for DensityPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TrueNoise => "true-noise",
            Self::PreTraining => "pre-training",
            Self::PostTraining => "post-training",
        })
    }
}

/// `EMD(query, negative) - EMD(query, positive)` per sampled triple.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityRecord {
    pub phase: DensityPhase,
    pub values: Vec<f64>,
}

impl DensityRecord {
    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().filter(|&&v| v > 0.0).count() as f64 / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityConfig {
    pub crop: usize,
    pub overlap_min: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self { crop: 32, overlap_min: 0.25 }
    }
}

/// Samples anchor/positive crops from one image and a negative crop from
/// another. Residuals come from `net` (`x - reconstruction`) or, without a
/// network, from the injected noise. Triples depend only on `seed`, so
/// phases evaluated with one seed see the same crops.
pub fn density_analysis(net: Option<&RestorerNet>, phase: DensityPhase, data: &Dataset, n_triples: usize, cfg: DensityConfig, seed: u64) -> Result<DensityRecord> {
    if n_triples == 0 {
        return Ok(DensityRecord { phase, values: Vec::new() });
    }
    if data.len() < 2 {
        return Err(EvalError::Invalid("density analysis needs at least two images".into()));
    }
    if let Some(n) = net {
        if n.in_channels != 3 || n.out_channels != 3 || n.head != HeadKind::Identity {
            return Err(EvalError::HeadMismatch("density analysis needs an RGB-to-RGB network".into()));
        }
    }
    let c = cfg.crop;
    let resid = |s: &Sample, o: (usize, usize)| -> Result<Vec<f64>> {
        match net {
            None => Ok(s.true_noise().crop(o.0, o.1, c, c)?.into_data()),
            Some(n) => {
                let x = s.noisy.crop(o.0, o.1, c, c)?;
                Ok(x.sub(&n.predict(&x)?)?.into_data())
            }
        }
    };
    let mut rng = derive_rng(seed, 0xDE57);
    let mut values = Vec::with_capacity(n_triples);
    for _ in 0..n_triples {
        let i = rng.random_range(0..data.len());
        let j = (i + rng.random_range(1..data.len())) % data.len();
        let (_, h, w) = data.samples[i].noisy.chw().expect("image");
        let (a, b) = sample_pair_origins(h, w, c, cfg.overlap_min, 1, &mut rng)?;
        let (_, hj, wj) = data.samples[j].noisy.chw().expect("image");
        if hj < c || wj < c {
            return Err(EvalError::Train(TrainError::ImageTooSmall { h: hj, w: wj, crop: c }));
        }
        let o = (rng.random_range(0..=hj - c), rng.random_range(0..=wj - c));
        let q = resid(&data.samples[i], a)?;
        let p = resid(&data.samples[i], b)?;
        let n = resid(&data.samples[j], o)?;
        values.push(emd(&q, &n)? - emd(&q, &p)?);
    }
    Ok(DensityRecord { phase, values })
}

/// Columns: `phase,index,emd_difference`.
pub fn write_density_csv<W: Write>(out: W, records: &[DensityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "index", "emd_difference"])?;
    for r in records {
        for (i, v) in r.values.iter().enumerate() {
            w.write_record([r.phase.to_string(), i.to_string(), format!("{v:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub count: usize,
    /// Supervised from scratch; absent for zero labels.
    pub sl: Option<(f64, f64)>,
    pub rcl_sl: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

/// Nested labelled subsets: the first `k` entries of one seeded permutation.
pub fn nested_subset(pool_len: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > pool_len {
        return Err(EvalError::InsufficientLabels { requested: k, available: pool_len });
    }
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(&mut derive_rng(seed, 0x5B5E));
    order.truncate(k);
    Ok(order)
}

/// Denoising label-efficiency table. For each count: a network trained from
/// scratch on the subset, and the pretrained network fully fine-tuned on the
/// same subset with the same seed. Count zero scores the pretrained network
/// as is.
pub fn label_efficiency_sweep(pretrained: &RestorerNet, pool: &[(Tensor, Tensor)], test: &[(Tensor, Tensor)], counts: &[usize], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    Task::Denoise.check(pretrained)?;
    let max = counts.iter().copied().max().unwrap_or(0);
    let order = nested_subset(pool.len(), max, cfg.seed)?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        if count == 0 {
            let r = evaluate_pairs(pretrained, test, "denoise", "rcl", cfg.seed, 0)?;
            rows.push(SweepRow { count, sl: None, rcl_sl: (r.psnr_mean, r.ssim_mean) });
            continue;
        }
        let subset: Vec<_> = order[..count].iter().map(|&i| pool[i].clone()).collect();
        let fcfg = FinetuneConfig { freeze_body: false, head: HeadKind::Identity, out_channels: 3, seed: cfg.seed, ..cfg.finetune.clone() };
        let scratch_net = RestorerNet::new(pretrained.architecture, 3, 3, HeadKind::Identity, Init::HeUniform { seed: cfg.seed })?;
        let sl = finetune(&scratch_net, &subset, &fcfg)?;
        let rcl = finetune(pretrained, &subset, &fcfg)?;
        let a = evaluate_pairs(&sl, test, "denoise", "sl", cfg.seed, 0)?;
        let b = evaluate_pairs(&rcl, test, "denoise", "rcl+sl", cfg.seed, 0)?;
        rows.push(SweepRow { count, sl: Some((a.psnr_mean, a.ssim_mean)), rcl_sl: (b.psnr_mean, b.ssim_mean) });
    }
    Ok(rows)
}

/// Columns: `labels,sl_psnr,sl_ssim,rcl_sl_psnr,rcl_sl_ssim`; empty cells
/// where a method does not apply.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["labels", "sl_psnr", "sl_ssim", "rcl_sl_psnr", "rcl_sl_ssim"])?;
    for r in rows {
        let (sp, ss) = match r.sl {
            Some((p, s)) => (format_metric(p), format_metric(s)),
            None => (String::new(), String::new()),
        };
        w.write_record([r.count.to_string(), sp, ss, format_metric(r.rcl_sl.0), format_metric(r.rcl_sl.1)])?;
    }
    w.flush()?;
    Ok(())
}

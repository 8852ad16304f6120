//! Datasets, contrastive batches, pre-training loops and fine-tuning.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{
    consistency_loss, contrastive_loss, jdd_consistency_loss, l1_loss, n2n_loss, n2s_masked_loss, residual, total_loss,
    ContrastiveConfig, DistanceKind, Distances, LossError, ResidualMode, DEFAULT_ALPHA, DEFAULT_DISTANCE_SCALE, DEFAULT_TAU,
};
use crate::nn::{AdamConfig, AdamState, Architecture, FeatureEncoder, HeadKind, Init, NnError, RestorerNet};
use crate::noise::{
    apply_nlf_noise, derive_rng, gen_procedural_image, mosaic, sample_nlf_params, NoiseError, NoiseParams, NoiseRange,
};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch needs {needed} distinct images, dataset has {available}")]
    NotEnoughImages { needed: usize, available: usize },
    #[error("image {h}x{w} is smaller than crop {crop}")]
    ImageTooSmall { h: usize, w: usize, crop: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task head mismatch: {0}")]
    HeadMismatch(String),
    #[error("batch invariant violated: {0}")]
    Batch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One clean image and its simulated noisy observation.
///
/// `noisy == apply_nlf_noise(clean, params, ChaCha8Rng::seed_from_u64(noise_seed))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub params: NoiseParams,
    pub noise_seed: u64,
}

impl Sample {
    pub fn simulate(clean: Tensor, params: NoiseParams, noise_seed: u64) -> Self {
        let noisy = apply_nlf_noise(&clean, params, &mut ChaCha8Rng::seed_from_u64(noise_seed));
        Self { clean, noisy, params, noise_seed }
    }

    /// A second, independent noisy view with the same parameters.
    pub fn second_view(&self) -> Tensor {
        apply_nlf_noise(&self.clean, self.params, &mut derive_rng(self.noise_seed, 1))
    }

    /// Noisy single-channel RGGB observation of the clean image.
    pub fn noisy_raw(&self) -> Result<Tensor> {
        Ok(apply_nlf_noise(&mosaic(&self.clean)?, self.params, &mut derive_rng(self.noise_seed, 2)))
    }

    pub fn true_noise(&self) -> Tensor {
        self.noisy.sub(&self.clean).expect("same shape")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// `count` procedural `h x w` images, each with its own noise parameters.
    pub fn synthesize(count: usize, h: usize, w: usize, range: NoiseRange, seed: u64) -> Result<Self> {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = derive_rng(seed, i as u64);
            let image_seed: u64 = rng.random();
            let noise_seed: u64 = rng.random();
            let params = sample_nlf_params(range, &mut rng)?;
            let clean = gen_procedural_image(image_seed, h, w)?;
            samples.push(Sample::simulate(clean, params, noise_seed));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let tail = self.samples.split_off(self.samples.len().saturating_sub(n));
        (self, Self { samples: tail })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Rcl,
    N2n,
    N2s,
    ConsistencyOnly,
    Supervised,
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rcl" => Ok(Self::Rcl),
            "n2n" => Ok(Self::N2n),
            "n2s" => Ok(Self::N2s),
            "consistency-only" => Ok(Self::ConsistencyOnly),
            "supervised" => Ok(Self::Supervised),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rcl => "rcl",
            Self::N2n => "n2n",
            Self::N2s => "n2s",
            Self::ConsistencyOnly => "consistency-only",
            Self::Supervised => "supervised",
        })
    }
}

/// RGB images, or single-channel RGGB observations restored to RGB.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Rgb,
    Raw,
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "raw" => Ok(Self::Raw),
            _ => Err(format!("unknown domain `{s}`")),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rgb => "rgb",
            Self::Raw => "raw",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub architecture: Architecture,
    pub domain: Domain,
    /// Pairs per batch (`N + 1`).
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
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: TrainMode::Rcl,
            architecture: Architecture::UnetSmall,
            domain: Domain::Rgb,
            batch_size: 8,
            crop: 32,
            steps: 2000,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            distance: DistanceKind::Emd,
            distance_scale: DEFAULT_DISTANCE_SCALE,
            lr: 1e-3,
            overlap_min: 0.25,
            encoder_seed: 0x5EED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (one query and one negative)");
        }
        if self.crop == 0 || self.crop % 8 != 0 {
            return bad("crop must be a positive multiple of 8");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be nonnegative");
        }
        if !(self.distance_scale > 0.0) {
            return bad("distance_scale must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.overlap_min) {
            return bad("overlap_min must lie in [0, 1)");
        }
        if self.domain == Domain::Raw && self.architecture == Architecture::DncnnSmall {
            return bad("raw-domain training needs unet-small (1 input channel, 3 outputs)");
        }
        if self.domain == Domain::Raw && !matches!(self.mode, TrainMode::Rcl | TrainMode::ConsistencyOnly) {
            return bad("raw-domain pre-training supports rcl and consistency-only");
        }
        Ok(())
    }

    pub fn channels(&self) -> (usize, usize) {
        match self.domain {
            Domain::Rgb => (3, 3),
            Domain::Raw => (1, 3),
        }
    }

    pub fn residual_mode(&self) -> ResidualMode {
        match (self.domain, self.architecture) {
            (Domain::Raw, _) => ResidualMode::Mosaic,
            (Domain::Rgb, Architecture::DncnnSmall) => ResidualMode::ResidualNet,
            (Domain::Rgb, Architecture::UnetSmall) => ResidualMode::Direct,
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.mode == TrainMode::ConsistencyOnly {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn init_net(&self) -> Result<RestorerNet> {
        let (cin, cout) = self.channels();
        Ok(RestorerNet::new(self.architecture, cin, cout, HeadKind::Identity, Init::HeUniform { seed: self.seed })?)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Top-left corner of a crop.
pub type Origin = (usize, usize);

pub fn overlap_area(a: Origin, b: Origin, crop: usize) -> usize {
    let dy = crop.saturating_sub(a.0.abs_diff(b.0));
    let dx = crop.saturating_sub(a.1.abs_diff(b.1));
    dy * dx
}

/// Origins of two `crop x crop` windows of an `h x w` image overlapping by at
/// least `overlap_min * crop^2`. With `align = 2` both origins are even.
pub fn sample_pair_origins<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    crop: usize,
    overlap_min: f64,
    align: usize,
    rng: &mut R,
) -> Result<(Origin, Origin)> {
    if !(0.0..1.0).contains(&overlap_min) {
        return Err(TrainError::Config(format!("overlap_min {overlap_min} must lie in [0, 1)")));
    }
    if h < crop || w < crop {
        return Err(TrainError::ImageTooSmall { h, w, crop });
    }
    let align = align.max(1);
    let pick = |rng: &mut R, lo: usize, hi: usize| -> usize { rng.random_range(lo / align..=hi / align) * align };
    let a = (pick(rng, 0, h - crop), pick(rng, 0, w - crop));
    let need = overlap_min * (crop * crop) as f64;
    let (ylo, yhi) = (a.0.saturating_sub(crop - 1), (a.0 + crop - 1).min(h - crop));
    let (xlo, xhi) = (a.1.saturating_sub(crop - 1), (a.1 + crop - 1).min(w - crop));
    for _ in 0..10_000 {
        let b = (pick(rng, ylo.div_ceil(align) * align, yhi), pick(rng, xlo.div_ceil(align) * align, xhi));
        if overlap_area(a, b, crop) as f64 >= need {
            return Ok((a, b));
        }
    }
    Ok((a, a))
}

/// Two overlapping crops of one `[1, C, H, W]` image.
pub fn sample_positive_pair<R: Rng + ?Sized>(image: &Tensor, crop: usize, overlap_min: f64, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = image.chw().ok_or_else(|| TrainError::Config(format!("expected an image, got {:?}", image.shape())))?;
    let (a, b) = sample_pair_origins(h, w, crop, overlap_min, 1, rng)?;
    Ok((image.crop(a.0, a.1, crop, crop)?, image.crop(b.0, b.1, crop, crop)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub a: Tensor,
    pub b: Tensor,
    pub instance: usize,
    pub origin_a: Origin,
    pub origin_b: Origin,
}

/// `N + 1` positive pairs from distinct instances.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub pairs: Vec<CropPair>,
    pub crop: usize,
}

impl TrainBatch {
    pub fn negatives_per_query(&self) -> usize {
        self.pairs.len().saturating_sub(1)
    }

    /// Draws `cfg.batch_size` distinct images and one overlapping crop pair from each.
    pub fn sample<R: Rng + ?Sized>(inputs: &[Tensor], cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        if inputs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if inputs.len() < cfg.batch_size {
            return Err(TrainError::NotEnoughImages { needed: cfg.batch_size, available: inputs.len() });
        }
        let align = if cfg.domain == Domain::Raw { 2 } else { 1 };
        let mut pairs = Vec::with_capacity(cfg.batch_size);
        for instance in index::sample(rng, inputs.len(), cfg.batch_size) {
            let img = &inputs[instance];
            let (_, h, w) = img.chw().ok_or_else(|| TrainError::Config("dataset holds a non-image tensor".into()))?;
            let (oa, ob) = sample_pair_origins(h, w, cfg.crop, cfg.overlap_min, align, rng)?;
            pairs.push(CropPair {
                a: img.crop(oa.0, oa.1, cfg.crop, cfg.crop)?,
                b: img.crop(ob.0, ob.1, cfg.crop, cfg.crop)?,
                instance,
                origin_a: oa,
                origin_b: ob,
            });
        }
        let batch = Self { pairs, crop: cfg.crop };
        batch.validate(cfg.overlap_min)?;
        Ok(batch)
    }

    /// Distinct instances across pairs and sufficient overlap within each pair.
    pub fn validate(&self, overlap_min: f64) -> Result<()> {
        let mut ids: Vec<usize> = self.pairs.iter().map(|p| p.instance).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.pairs.len() {
            return Err(TrainError::Batch("two pairs share an instance".into()));
        }
        if self.pairs.len() < 2 {
            return Err(TrainError::Batch("a batch needs at least two pairs".into()));
        }
        for p in &self.pairs {
            if (overlap_area(p.origin_a, p.origin_b, self.crop) as f64) < overlap_min * (self.crop * self.crop) as f64 {
                return Err(TrainError::Batch(format!("pair from instance {} overlaps too little", p.instance)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub contrastive: f64,
    pub consistency: f64,
    pub contrastive_terms: usize,
    pub negatives_per_term: usize,
    pub distance_evaluations: usize,
    pub forward_passes: usize,
}

/// One contrastive step: every crop goes through the network once, pair `j`
/// supplies query and positive, the second crops of all other pairs are the
/// negatives. Returns the loss and gradients for every trainable parameter.
pub fn rcl_step(batch: &TrainBatch, net: &RestorerNet, enc: &FeatureEncoder, cfg: &TrainConfig) -> Result<(StepStats, HashMap<String, Tensor>)> {
    let (g, loss, stats) = rcl_graph(batch, net, enc, cfg)?;
    let grads = g.backward(loss)?.into_map();
    Ok((stats, grads))
}

/// The loss graph of [`rcl_step`] with trainable parameters as leaves.
pub fn rcl_graph(batch: &TrainBatch, net: &RestorerNet, enc: &FeatureEncoder, cfg: &TrainConfig) -> Result<(Graph, NodeId, StepStats)> {
    let mode = cfg.residual_mode();
    let mut g = Graph::new();
    let p = net.params.bind(&mut g)?;
    let ep = enc.bind(&mut g)?;
    let mut stats = StepStats::default();
    let mut res_a = Vec::with_capacity(batch.pairs.len());
    let mut res_b = Vec::with_capacity(batch.pairs.len());
    let mut consistency = Vec::with_capacity(2 * batch.pairs.len());
    for pair in &batch.pairs {
        for (crop, out) in [(&pair.a, &mut res_a), (&pair.b, &mut res_b)] {
            let x = g.constant(crop.clone())?;
            let f = net.forward(&mut g, &p, x)?;
            stats.forward_passes += 1;
            out.push(residual(&mut g, x, f, mode)?);
            let c = match mode {
                ResidualMode::Direct => consistency_loss(&mut g, enc, &ep, x, f)?,
                ResidualMode::ResidualNet => {
                    let recon = g.sub(x, f)?;
                    consistency_loss(&mut g, enc, &ep, x, recon)?
                }
                ResidualMode::Mosaic => jdd_consistency_loss(&mut g, x, f)?,
            };
            consistency.push(c);
        }
    }
    let mut dist = Distances::new(cfg.distance, cfg.seed);
    let ccfg = ContrastiveConfig { tau: cfg.tau, distance_scale: cfg.distance_scale };
    let mut terms = Vec::with_capacity(batch.pairs.len());
    for j in 0..batch.pairs.len() {
        let negatives: Vec<_> = (0..batch.pairs.len()).filter(|&k| k != j).map(|k| res_b[k]).collect();
        stats.negatives_per_term = negatives.len();
        terms.push(contrastive_loss(&mut g, &mut dist, res_a[j], res_b[j], &negatives, ccfg)?);
    }
    stats.contrastive_terms = terms.len();
    stats.distance_evaluations = dist.evaluations();
    let contrastive = sum_nodes(&mut g, &terms)?;
    let cons_sum = sum_nodes(&mut g, &consistency)?;
    let cons_mean = g.scale(cons_sum, 1.0 / consistency.len() as f64)?;
    let loss = total_loss(&mut g, contrastive, cons_mean, cfg.effective_alpha())?;
    stats.loss = g.value(loss).item();
    stats.contrastive = g.value(contrastive).item();
    stats.consistency = g.value(cons_mean).item();
    Ok((g, loss, stats))
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = *nodes.first().ok_or_else(|| TrainError::Batch("nothing to sum".into()))?;
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Concatenates `[1, C, H, W]` tensors along the batch axis.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(TrainError::EmptyDataset)?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for t in images {
        if t.shape()[1..] != shape[1..] {
            return Err(TrainError::Config(format!("cannot stack {:?} with {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] = images.iter().map(|t| t.shape()[0]).sum();
    Ok(Tensor::new(shape, data)?)
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub net: RestorerNet,
    pub losses: Vec<f64>,
}

/// The network input for every sample under `cfg.domain`.
pub fn domain_inputs(data: &Dataset, domain: Domain) -> Result<Vec<Tensor>> {
    data.samples
        .iter()
        .map(|s| match domain {
            Domain::Rgb => Ok(s.noisy.clone()),
            Domain::Raw => s.noisy_raw(),
        })
        .collect()
}

/// Runs `cfg.steps` optimisation steps from a seeded initialisation.
pub fn pretrain(data: &Dataset, cfg: &TrainConfig) -> Result<PretrainOutput> {
    pretrain_with(data, cfg, &FeatureEncoder::new(cfg.encoder_seed), |_, _| {})
}

/// [`pretrain`] with an explicit consistency encoder and a per-step hook.
pub fn pretrain_with(data: &Dataset, cfg: &TrainConfig, enc: &FeatureEncoder, mut on_step: impl FnMut(usize, &StepStats)) -> Result<PretrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.mode == TrainMode::Supervised {
        return Err(TrainError::Config("supervised training goes through finetune".into()));
    }
    let mut net = cfg.init_net()?;
    let mut opt = AdamState::new(cfg.adam());
    let mut rng = derive_rng(cfg.seed, 0xBA7C);
    let inputs = domain_inputs(data, cfg.domain)?;
    let second: Vec<Tensor> = if cfg.mode == TrainMode::N2n { data.samples.iter().map(Sample::second_view).collect() } else { Vec::new() };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (stats, grads) = match cfg.mode {
            TrainMode::Rcl | TrainMode::ConsistencyOnly => {
                let batch = TrainBatch::sample(&inputs, cfg, &mut rng)?;
                rcl_step(&batch, &net, enc, cfg)?
            }
            TrainMode::N2n | TrainMode::N2s => {
                let mut x1 = Vec::with_capacity(cfg.batch_size);
                let mut x2 = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let i = rng.random_range(0..inputs.len());
                    let (_, h, w) = inputs[i].chw().expect("image");
                    let (o, _) = sample_pair_origins(h, w, cfg.crop, 0.0, 1, &mut rng)?;
                    x1.push(inputs[i].crop(o.0, o.1, cfg.crop, cfg.crop)?);
                    if cfg.mode == TrainMode::N2n {
                        x2.push(second[i].crop(o.0, o.1, cfg.crop, cfg.crop)?);
                    }
                }
                let x1 = stack(&x1)?;
                let mut g = Graph::new();
                let p = net.params.bind(&mut g)?;
                let loss = if cfg.mode == TrainMode::N2n {
                    n2n_loss(&mut g, &net, &p, &x1, &stack(&x2)?)?
                } else {
                    n2s_masked_loss(&mut g, &net, &p, &x1, step % 4)?
                };
                let stats = StepStats { loss: g.value(loss).item(), forward_passes: 1, ..StepStats::default() };
                (stats, g.backward(loss)?.into_map())
            }
            TrainMode::Supervised => unreachable!("rejected above"),
        };
        opt.step(&mut net.params, &grads)?;
        losses.push(stats.loss);
        on_step(step, &stats);
    }
    Ok(PretrainOutput { net, losses })
}

pub fn write_loss_csv<W: Write>(out: W, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    write_loss_csv(std::fs::File::create(path)?, losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Train only the freshly initialised head.
    pub freeze_body: bool,
    pub head: HeadKind,
    pub out_channels: usize,
    /// Optional square training crop, measured on the input.
    pub crop: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-3, seed: 0, freeze_body: true, head: HeadKind::Identity, out_channels: 3, crop: None }
    }
}

/// Replaces the last layer with a fresh task head and trains with L1 on
/// `(input, target)` pairs. With no labels the head is returned untrained.
pub fn finetune(net: &RestorerNet, labeled: &[(Tensor, Tensor)], cfg: &FinetuneConfig) -> Result<RestorerNet> {
    let mut net = net.clone();
    net.replace_head(cfg.head, cfg.out_channels, Init::HeUniform { seed: cfg.seed })
        .map_err(|e| TrainError::HeadMismatch(e.to_string()))?;
    if cfg.freeze_body {
        net.freeze_all_but_head();
    } else {
        net.params.set_all_trainable(true);
    }
    for (x, y) in labeled {
        let expected = expected_output_shape(&net, x.shape())?;
        if y.shape() != expected {
            return Err(TrainError::HeadMismatch(format!("target {:?} but the {} head produces {expected:?}", y.shape(), cfg.head)));
        }
    }
    if labeled.is_empty() || cfg.steps == 0 {
        net.params.set_all_trainable(true);
        return Ok(net);
    }
    let scale = if cfg.head == HeadKind::Upsample2x { 2 } else { 1 };
    let mut opt = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = derive_rng(cfg.seed, 0xF17E);
    for _ in 0..cfg.steps {
        let (x, y) = &labeled[rng.random_range(0..labeled.len())];
        let (x, y) = match cfg.crop {
            Some(c) => {
                let (_, h, w) = x.chw().expect("checked");
                if h < c || w < c {
                    return Err(TrainError::ImageTooSmall { h, w, crop: c });
                }
                // keep Bayer phase for raw inputs
                let oy = rng.random_range(0..=(h - c) / 2) * 2;
                let ox = rng.random_range(0..=(w - c) / 2) * 2;
                (x.crop(oy, ox, c, c)?, y.crop(oy * scale, ox * scale, c * scale, c * scale)?)
            }
            None => (x.clone(), y.clone()),
        };
        let mut g = Graph::new();
        let p = net.params.bind(&mut g)?;
        let xi = g.constant(x)?;
        let yi = g.constant(y)?;
        let out = net.reconstruct(&mut g, &p, xi)?;
        let loss = l1_loss(&mut g, out, yi)?;
        let grads = g.backward(loss)?.into_map();
        opt.step(&mut net.params, &grads)?;
    }
    net.params.set_all_trainable(true);
    Ok(net)
}

pub fn expected_output_shape(net: &RestorerNet, input: &[usize]) -> Result<Vec<usize>> {
    net.check_input(input).map_err(|e| TrainError::HeadMismatch(e.to_string()))?;
    let s = if net.head == HeadKind::Upsample2x { 2 } else { 1 };
    Ok(vec![input[0], net.out_channels, input[2] * s, input[3] * s])
}

/// Mean L1 of `net` over labelled pairs.
pub fn l1_error(net: &RestorerNet, labeled: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in labeled {
        let out = net.predict(x)?;
        total += out.zip_with(y, |a, b| (a - b).abs())?.mean();
    }
    Ok(total / labeled.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_bounds() {
        assert!(sample_pair_origins(64, 64, 32, 1.0, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = sample_pair_origins(32, 32, 32, 0.9, 1, &mut rng).unwrap();
        assert_eq!((a, b), ((0, 0), (0, 0)));
        for _ in 0..1000 {
            let (a, b) = sample_pair_origins(64, 48, 16, 0.25, 2, &mut rng).unwrap();
            assert!(overlap_area(a, b, 16) * 4 >= 256);
            assert!(a.0 % 2 == 0 && a.1 % 2 == 0 && b.0 % 2 == 0 && b.1 % 2 == 0);
        }
    }

    #[test]
    fn zero_steps_keep_initialisation() {
        let data = Dataset::synthesize(4, 16, 16, NoiseRange::default(), 3).unwrap();
        let cfg = TrainConfig { steps: 0, batch_size: 2, crop: 16, ..TrainConfig::default() };
        let out = pretrain(&data, &cfg).unwrap();
        assert_eq!(out.net, cfg.init_net().unwrap());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn stored_noise_regenerates() {
        let data = Dataset::synthesize(2, 16, 16, NoiseRange::default(), 9).unwrap();
        let s = &data.samples[1];
        let again = Sample::simulate(s.clean.clone(), s.params, s.noise_seed);
        assert_eq!(&again, s);
    }
}

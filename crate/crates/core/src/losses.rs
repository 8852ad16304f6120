//! Residuals, distribution distances and every training objective, built as
//! graph nodes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{FeatureEncoder, NnError, ParamNodes, RestorerNet};
use crate::noise::{mosaic_node, NoiseError};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sample counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("Bhattacharyya distance needs positive sample variance (got {0})")]
    ZeroVariance(f64),
    #[error("Bhattacharyya distance needs at least 2 samples")]
    TooFewSamples,
    #[error("contrastive loss needs at least one negative")]
    EmptyNegatives,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_DISTANCE_SCALE: f64 = 100.0;
pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const MMD_MAX_SAMPLES: usize = 256;
const MMD_BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualMode {
    /// `x - f(x)`
    Direct,
    /// The network already predicts the residual.
    ResidualNet,
    /// `x_raw - mosaic(f(x))`
    Mosaic,
}

impl FromStr for ResidualMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "direct" => Ok(Self::Direct),
            "residual-net" => Ok(Self::ResidualNet),
            "mosaic" => Ok(Self::Mosaic),
            _ => Err(format!("unknown residual mode `{s}`")),
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::ResidualNet => "residual-net",
            Self::Mosaic => "mosaic",
        })
    }
}

/// Flattened residual of one crop.
pub fn residual(g: &mut Graph, x: NodeId, f_out: NodeId, mode: ResidualMode) -> Result<NodeId> {
    let r = match mode {
        ResidualMode::Direct => {
            if g.shape(x) != g.shape(f_out) {
                return Err(LossError::Shape(format!("direct residual of {:?} and {:?}", g.shape(x), g.shape(f_out))));
            }
            g.sub(x, f_out)?
        }
        ResidualMode::ResidualNet => f_out,
        ResidualMode::Mosaic => {
            let (xs, fs) = (g.shape(x).to_vec(), g.shape(f_out).to_vec());
            let ok = xs.len() == 4 && fs.len() == 4 && xs[1] == 1 && fs[1] == 3 && xs[0] == fs[0] && xs[2..] == fs[2..];
            if !ok {
                return Err(LossError::Shape(format!("mosaic residual needs 1-channel x and 3-channel output, got {xs:?} and {fs:?}")));
            }
            let m = mosaic_node(g, f_out)?;
            g.sub(x, m)?
        }
    };
    Ok(g.flatten(r)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    Emd,
    Bd,
    Mmd,
}

impl FromStr for DistanceKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "emd" => Ok(Self::Emd),
            "bd" => Ok(Self::Bd),
            "mmd" => Ok(Self::Mmd),
            _ => Err(format!("unknown distance `{s}`")),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Emd => "emd",
            Self::Bd => "bd",
            Self::Mmd => "mmd",
        })
    }
}

/// Builds distance nodes, reusing per-residual intermediates (sorted
/// samples, moments, subsamples) and counting evaluations.
#[derive(Debug)]
pub struct Distances {
    pub kind: DistanceKind,
    mmd_seed: u64,
    sorted: HashMap<NodeId, NodeId>,
    moments: HashMap<NodeId, (NodeId, NodeId)>,
    subsampled: HashMap<NodeId, NodeId>,
    evaluations: usize,
}

impl Distances {
    pub fn new(kind: DistanceKind, mmd_seed: u64) -> Self {
        Self {
            kind,
            mmd_seed,
            sorted: HashMap::new(),
            moments: HashMap::new(),
            subsampled: HashMap::new(),
            evaluations: 0,
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn distance(&mut self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = (g.value(a).numel(), g.value(b).numel());
        if na != nb {
            return Err(LossError::CountMismatch(na, nb));
        }
        self.evaluations += 1;
        match self.kind {
            DistanceKind::Emd => self.emd(g, a, b),
            DistanceKind::Bd => self.bd(g, a, b),
            DistanceKind::Mmd => self.mmd(g, a, b),
        }
    }

    fn sorted(&mut self, g: &mut Graph, a: NodeId) -> Result<NodeId> {
        if let Some(&s) = self.sorted.get(&a) {
            return Ok(s);
        }
        let s = g.sort(a)?;
        self.sorted.insert(a, s);
        Ok(s)
    }

    /// Mean of `|sort(a) - sort(b)|`.
    fn emd(&mut self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.sorted(g, a)?;
        let sb = self.sorted(g, b)?;
        let d = g.sub(sa, sb)?;
        let d = g.abs(d)?;
        Ok(g.mean(d)?)
    }

    /// Sample mean and unbiased sample variance.
    fn moments(&mut self, g: &mut Graph, a: NodeId) -> Result<(NodeId, NodeId)> {
        if let Some(&m) = self.moments.get(&a) {
            return Ok(m);
        }
        let n = g.value(a).numel();
        if n < 2 {
            return Err(LossError::TooFewSamples);
        }
        let mu = g.mean(a)?;
        let centred = g.sub(a, mu)?;
        let sq = g.square(centred)?;
        let ss = g.sum(sq)?;
        let var = g.scale(ss, 1.0 / (n - 1) as f64)?;
        let v = g.value(var).item();
        if !(v > 0.0) {
            return Err(LossError::ZeroVariance(v));
        }
        self.moments.insert(a, (mu, var));
        Ok((mu, var))
    }

    fn bd(&mut self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mp, vp) = self.moments(g, a)?;
        let (mq, vq) = self.moments(g, b)?;
        let r1 = g.div(vp, vq)?;
        let r2 = g.div(vq, vp)?;
        let s = g.add(r1, r2)?;
        let two = g.scalar(2.0)?;
        let s = g.add(s, two)?;
        let s = g.scale(s, 0.25)?;
        let t1 = g.ln(s)?;
        let dm = g.sub(mp, mq)?;
        let dm2 = g.square(dm)?;
        let vs = g.add(vp, vq)?;
        let t2 = g.div(dm2, vs)?;
        let both = g.add(t1, t2)?;
        Ok(g.scale(both, 0.25)?)
    }

    /// At most `MMD_MAX_SAMPLES` elements; the index set depends only on the
    /// length, so `d(a, b) = d(b, a)`.
    fn subsample(&mut self, g: &mut Graph, a: NodeId) -> Result<NodeId> {
        if let Some(&s) = self.subsampled.get(&a) {
            return Ok(s);
        }
        let n = g.value(a).numel();
        let s = if n <= MMD_MAX_SAMPLES {
            a
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.mmd_seed ^ (n as u64).rotate_left(32));
            let mut idx = index::sample(&mut rng, n, MMD_MAX_SAMPLES).into_vec();
            idx.sort_unstable();
            let idx: Arc<[usize]> = idx.into();
            g.gather(a, idx, &[MMD_MAX_SAMPLES])?
        };
        self.subsampled.insert(a, s);
        Ok(s)
    }

    fn mmd(&mut self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.subsample(g, a)?;
        let sb = self.subsample(g, b)?;
        let pooled: Vec<f64> = g.value(sa).data().iter().chain(g.value(sb).data()).copied().collect();
        let h = median_pairwise_distance(&pooled).max(MMD_BANDWIDTH_FLOOR);
        let gamma = -1.0 / (2.0 * h * h);
        let mut kernel_mean = |x: NodeId, y: NodeId| -> Result<NodeId> {
            let d = g.pairwise_diff(x, y)?;
            let d2 = g.square(d)?;
            let e = g.scale(d2, gamma)?;
            let k = g.exp(e)?;
            Ok(g.mean(k)?)
        };
        let kaa = kernel_mean(sa, sa)?;
        let kbb = kernel_mean(sb, sb)?;
        let kab = kernel_mean(sa, sb)?;
        let s = g.add(kaa, kbb)?;
        let cross = g.scale(kab, 2.0)?;
        Ok(g.sub(s, cross)?)
    }
}

/// Median of `|x_i - x_j|` over unordered pairs `i < j`.
pub fn median_pairwise_distance(x: &[f64]) -> f64 {
    let mut d = Vec::with_capacity(x.len() * x.len().saturating_sub(1) / 2);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push((x[i] - x[j]).abs());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if d.len() % 2 == 1 {
        m
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + m)
    }
}

/// Evaluates one distance between two sample vectors outside any training graph.
pub fn distance_value(kind: DistanceKind, a: &[f64], b: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let an = g.constant(Tensor::from_vec(a.to_vec()))?;
    let bn = g.constant(Tensor::from_vec(b.to_vec()))?;
    let d = Distances::new(kind, 0).distance(&mut g, an, bn)?;
    Ok(g.value(d).item())
}

pub fn emd(a: &[f64], b: &[f64]) -> Result<f64> {
    distance_value(DistanceKind::Emd, a, b)
}

pub fn bd(a: &[f64], b: &[f64]) -> Result<f64> {
    distance_value(DistanceKind::Bd, a, b)
}

pub fn mmd(a: &[f64], b: &[f64]) -> Result<f64> {
    distance_value(DistanceKind::Mmd, a, b)
}

/// Closed form on Gaussian moments `(mean, variance)`.
pub fn bd_from_moments(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (mp, vp) = p;
    let (mq, vq) = q;
    0.25 * (0.25 * (vp / vq + vq / vp + 2.0)).ln() + 0.25 * (mp - mq).powi(2) / (vp + vq)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub distance_scale: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, distance_scale: DEFAULT_DISTANCE_SCALE }
    }
}

/// `-log softmax` of the positive among `-s * d / tau`, via log-sum-exp.
pub fn contrastive_from_distances(g: &mut Graph, d_pos: NodeId, d_negs: &[NodeId], cfg: ContrastiveConfig) -> Result<NodeId> {
    if d_negs.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    if !(cfg.tau > 0.0) {
        return Err(LossError::InvalidTemperature(cfg.tau));
    }
    let k = cfg.distance_scale / cfg.tau;
    let mut logits = Vec::with_capacity(d_negs.len() + 1);
    for &d in std::iter::once(&d_pos).chain(d_negs) {
        let l = g.scale(d, -k)?;
        logits.push(g.reshape(l, &[1])?);
    }
    let all = g.concat(&logits, 0)?;
    let lse = g.log_sum_exp(all)?;
    let pos = g.scale(d_pos, k)?;
    Ok(g.add(lse, pos)?)
}

pub fn contrastive_loss(
    g: &mut Graph,
    dist: &mut Distances,
    query: NodeId,
    positive: NodeId,
    negatives: &[NodeId],
    cfg: ContrastiveConfig,
) -> Result<NodeId> {
    if negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    let d_pos = dist.distance(g, query, positive)?;
    let d_negs = negatives.iter().map(|&n| dist.distance(g, query, n)).collect::<Result<Vec<_>>>()?;
    contrastive_from_distances(g, d_pos, &d_negs, cfg)
}

/// Plain-number form of the contrastive loss.
pub fn contrastive_value(d_pos: f64, d_negs: &[f64], cfg: ContrastiveConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.scalar(d_pos)?;
    let n = d_negs.iter().map(|&d| g.scalar(d)).collect::<std::result::Result<Vec<_>, _>>()?;
    let l = contrastive_from_distances(&mut g, p, &n, cfg)?;
    Ok(g.value(l).item())
}

/// Squared L2 distance between encoder features of `x` and `f_out`.
pub fn consistency_loss(g: &mut Graph, enc: &FeatureEncoder, enc_nodes: &ParamNodes, x: NodeId, f_out: NodeId) -> Result<NodeId> {
    if g.shape(x) != g.shape(f_out) {
        return Err(LossError::Shape(format!("consistency of {:?} and {:?}", g.shape(x), g.shape(f_out))));
    }
    let fx = enc.features(g, enc_nodes, x)?;
    let ff = enc.features(g, enc_nodes, f_out)?;
    let d = g.sub(fx, ff)?;
    let d = g.square(d)?;
    Ok(g.sum(d)?)
}

/// Mean absolute difference between the raw input and the re-mosaicked output.
pub fn jdd_consistency_loss(g: &mut Graph, x_raw: NodeId, f_out_rgb: NodeId) -> Result<NodeId> {
    let r = residual(g, x_raw, f_out_rgb, ResidualMode::Mosaic)?;
    let r = g.abs(r)?;
    Ok(g.mean(r)?)
}

/// `alpha * contrastive + consistency`.
pub fn total_loss(g: &mut Graph, contrastive: NodeId, consistency: NodeId, alpha: f64) -> Result<NodeId> {
    if !(alpha >= 0.0) {
        return Err(LossError::Shape(format!("alpha must be nonnegative, got {alpha}")));
    }
    let c = g.scale(contrastive, alpha)?;
    Ok(g.add(c, consistency)?)
}

/// Mean absolute difference, the L1 objective used by every supervised and
/// self-supervised baseline.
pub fn l1_loss(g: &mut Graph, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    if g.shape(prediction) != g.shape(target) {
        return Err(LossError::Shape(format!("L1 of {:?} and {:?}", g.shape(prediction), g.shape(target))));
    }
    let d = g.sub(prediction, target)?;
    let d = g.abs(d)?;
    Ok(g.mean(d)?)
}

/// `|x2 - f(x1)|` averaged over pixels.
pub fn n2n_loss(g: &mut Graph, net: &RestorerNet, p: &ParamNodes, x1: &Tensor, x2: &Tensor) -> Result<NodeId> {
    let a = g.constant(x1.clone())?;
    let b = g.constant(x2.clone())?;
    let y = net.reconstruct(g, p, a)?;
    l1_loss(g, y, b)
}

/// Whether pixel `(row, col)` is masked in `phase` (0..4).
pub fn n2s_is_masked(row: usize, col: usize, phase: usize) -> bool {
    row % 2 == phase / 2 && col % 2 == phase % 2
}

/// Replaces every masked pixel by the mean of its in-bounds 4-neighbours.
pub fn n2s_infill(x: &Tensor, phase: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(LossError::Shape(format!("expected NCHW, got {:?}", x.shape())));
    };
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..h {
            for col in 0..w {
                if !n2s_is_masked(r, col, phase % 4) {
                    continue;
                }
                let (mut acc, mut cnt) = (0.0, 0usize);
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (rr, cc) = (r as isize + dr, col as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += src[base + rr as usize * w + cc as usize];
                        cnt += 1;
                    }
                }
                dst[base + r * w + col] = if cnt == 0 { 0.0 } else { acc / cnt as f64 };
            }
        }
    }
    Ok(out)
}

/// Flat indices of the masked pixels (all channels) of an NCHW tensor.
pub fn n2s_mask_indices(shape: &[usize], phase: usize) -> Vec<usize> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let mut idx = Vec::new();
    for plane in 0..n * c {
        for r in 0..h {
            for col in 0..w {
                if n2s_is_masked(r, col, phase % 4) {
                    idx.push((plane * h + r) * w + col);
                }
            }
        }
    }
    idx
}

/// L1 between `f(infill(x))` and `x` on the masked pixels of `phase` only.
pub fn n2s_masked_loss(g: &mut Graph, net: &RestorerNet, p: &ParamNodes, x: &Tensor, phase: usize) -> Result<NodeId> {
    let infilled = n2s_infill(x, phase)?;
    let xin = g.constant(infilled)?;
    let y = net.reconstruct(g, p, xin)?;
    if g.shape(y) != x.shape() {
        return Err(LossError::Shape("masked loss needs an identity-resolution network".into()));
    }
    let idx: Arc<[usize]> = n2s_mask_indices(x.shape(), phase).into();
    if idx.is_empty() {
        return Err(LossError::Shape("mask selects no pixels".into()));
    }
    let target = Tensor::from_vec(idx.iter().map(|&i| x.data()[i]).collect());
    let t = g.constant(target)?;
    let len = idx.len();
    let yp = g.gather(y, idx, &[len])?;
    l1_loss(g, yp, t)
}

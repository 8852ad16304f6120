//! Signal-dependent noise, RGGB mosaicking and procedural test images.
//!
//! Images are `[1, C, H, W]` tensors with intensities nominally in `[0, 1]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("negative noise parameters ({0}, {1})")]
    InvalidParams(f64, f64),
    #[error("image dimensions {0}x{1} must be even")]
    OddDimension(usize, usize),
    #[error("image {0}x{1} is smaller than 16x16")]
    TooSmall(usize, usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NoiseError>;

/// Per-image noise level function: variance `lambda_shot * y + lambda_read`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub lambda_shot: f64,
    pub lambda_read: f64,
}

impl NoiseParams {
    pub fn new(lambda_shot: f64, lambda_read: f64) -> Result<Self> {
        if !(lambda_shot >= 0.0 && lambda_read >= 0.0 && lambda_shot.is_finite() && lambda_read.is_finite()) {
            return Err(NoiseError::InvalidParams(lambda_shot, lambda_read));
        }
        Ok(Self { lambda_shot, lambda_read })
    }

    pub fn zero() -> Self {
        Self { lambda_shot: 0.0, lambda_read: 0.0 }
    }

    pub fn variance_at(&self, y: f64) -> f64 {
        (self.lambda_shot * y + self.lambda_read).max(0.0)
    }
}

/// Standard-deviation range in normalised intensity units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRange {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseRange {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(0.0 <= sigma_min && sigma_min <= sigma_max && sigma_max.is_finite()) {
            return Err(NoiseError::InvalidRange(sigma_min, sigma_max));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    /// Range given on the 8-bit scale, e.g. `(0, 20)`.
    pub fn from_8bit(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo / 255.0, hi / 255.0)
    }
}

impl Default for NoiseRange {
    fn default() -> Self {
        Self { sigma_min: 0.0, sigma_max: 20.0 / 255.0 }
    }
}

/// Independent ChaCha8 stream for item `index` of a run.
pub fn derive_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// `sqrt(lambda)` is uniform on `[sigma_min, sigma_max] / sqrt(2)`, independently for both terms.
pub fn sample_nlf_params<R: Rng + ?Sized>(range: NoiseRange, rng: &mut R) -> Result<NoiseParams> {
    let NoiseRange { sigma_min, sigma_max } = NoiseRange::new(range.sigma_min, range.sigma_max)?;
    let mut draw = || {
        let t: f64 = rng.random();
        // an interval of width zero reproduces sigma_min exactly
        let s = sigma_min + t * (sigma_max - sigma_min);
        s * s / 2.0
    };
    let lambda_shot = draw();
    let lambda_read = draw();
    Ok(NoiseParams { lambda_shot, lambda_read })
}

/// Noise realisation `n` with `n_i ~ N(0, lambda_shot * y_i + lambda_read)`.
pub fn sample_nlf_noise<R: Rng + ?Sized>(y: &Tensor, p: NoiseParams, rng: &mut R) -> Tensor {
    let data = y
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            p.variance_at(v).sqrt() * z
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// `y + n`; not clipped.
pub fn apply_nlf_noise<R: Rng + ?Sized>(y: &Tensor, p: NoiseParams, rng: &mut R) -> Tensor {
    let n = sample_nlf_noise(y, p, rng);
    y.zip_with(&n, |a, b| a + b).expect("same shape")
}

/// Two independent noisy views of `y` sharing one sampled parameter set.
pub fn make_noisy_pair<R: Rng + ?Sized>(y: &Tensor, range: NoiseRange, rng: &mut R) -> Result<(Tensor, Tensor, NoiseParams)> {
    let p = sample_nlf_params(range, rng)?;
    let x1 = apply_nlf_noise(y, p, rng);
    let x2 = apply_nlf_noise(y, p, rng);
    Ok((x1, x2, p))
}

fn even_dims(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    let &[n, c, h, w] = shape else {
        return Err(NoiseError::Shape(format!("expected NCHW, got {shape:?}")));
    };
    if c != channels {
        return Err(NoiseError::Shape(format!("expected {channels} channels, got {c}")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NoiseError::OddDimension(h, w));
    }
    Ok((n, h, w))
}

/// RGGB channel sampled at `(row, col)`.
pub fn bayer_channel(row: usize, col: usize) -> usize {
    match (row % 2, col % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Flat indices into a `[n, 3, h, w]` tensor selecting the RGGB samples.
pub fn mosaic_indices(n: usize, h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                idx.push(((b * 3 + bayer_channel(r, c)) * h + r) * w + c);
            }
        }
    }
    idx
}

/// `[N, 3, H, W] -> [N, 1, H, W]`.
pub fn mosaic(rgb: &Tensor) -> Result<Tensor> {
    let (n, h, w) = even_dims(rgb.shape(), 3)?;
    let data = mosaic_indices(n, h, w).into_iter().map(|i| rgb.data()[i]).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

/// Differentiable mosaic of a 3-channel graph node.
pub fn mosaic_node(g: &mut Graph, rgb: NodeId) -> Result<NodeId> {
    let (n, h, w) = even_dims(g.shape(rgb), 3)?;
    let idx: Arc<[usize]> = mosaic_indices(n, h, w).into();
    Ok(g.gather(rgb, idx, &[n, 1, h, w])?)
}

/// `[N, 1, H, W] -> [N, 3, H, W]`. Sampled positions pass through; each
/// missing value is the mean of the same-colour samples in its 3x3
/// neighbourhood (all equidistant under RGGB), using whichever exist at borders.
pub fn demosaic_bilinear(raw: &Tensor) -> Result<Tensor> {
    let (n, h, w) = even_dims(raw.shape(), 1)?;
    let src = raw.data();
    let mut out = vec![0.0; n * 3 * h * w];
    for b in 0..n {
        let plane = &src[b * h * w..(b + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let here = bayer_channel(r, c);
                for ch in 0..3 {
                    let v = if ch == here {
                        plane[r * w + c]
                    } else {
                        let (mut acc, mut cnt) = (0.0, 0usize);
                        for dr in -1isize..=1 {
                            for dc in -1isize..=1 {
                                let (rr, cc) = (r as isize + dr, c as isize + dc);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                let (rr, cc) = (rr as usize, cc as usize);
                                if bayer_channel(rr, cc) == ch {
                                    acc += plane[rr * w + cc];
                                    cnt += 1;
                                }
                            }
                        }
                        acc / cnt as f64
                    };
                    out[((b * 3 + ch) * h + r) * w + c] = v;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, 3, h, w], out)?)
}

fn bilinear_grid<R: Rng + ?Sized>(cells: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = r as f64 / (h - 1) as f64 * cells as f64;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for c in 0..w {
            let fx = c as f64 / (w - 1) as f64 * cells as f64;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Deterministic `[1, 3, h, w]` test image: three octaves of smooth value
/// noise per channel plus a few flat rectangles, clipped to `[0, 1]`.
pub fn gen_procedural_image(seed: u64, h: usize, w: usize) -> Result<Tensor> {
    if h < 16 || w < 16 {
        return Err(NoiseError::TooSmall(h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for (octave, amp) in [(2usize, 0.6), (5, 0.3), (11, 0.15)] {
            let layer = bilinear_grid(octave, h, w, &mut rng);
            for (p, l) in plane.iter_mut().zip(layer) {
                *p += amp * (l - 0.5);
            }
        }
        let base: f64 = rng.random_range(0.3..0.7);
        for p in plane.iter_mut() {
            *p += base;
        }
    }
    let rects = rng.random_range(2..=5);
    for _ in 0..rects {
        let rh = rng.random_range(h / 8..=h / 2);
        let rw = rng.random_range(w / 8..=w / 2);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let opacity: f64 = rng.random_range(0.4..0.9);
        for (ch, &col) in color.iter().enumerate() {
            for r in y0..y0 + rh {
                for c in x0..x0 + rw {
                    let p = &mut data[(ch * h + r) * w + c];
                    *p = (1.0 - opacity) * *p + opacity * col;
                }
            }
        }
    }
    for p in &mut data {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(Tensor::new(vec![1, 3, h, w], data)?)
}

/// 2x2 average pooling of an image tensor (the low-resolution SR input).
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(NoiseError::Shape(format!("expected NCHW, got {:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NoiseError::OddDimension(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
        let (plane, rem) = (i / (oh * ow), i % (oh * ow));
        let (r, col) = (2 * (rem / ow), 2 * (rem % ow));
        let base = plane * h * w;
        0.25 * (src[base + r * w + col] + src[base + r * w + col + 1] + src[base + (r + 1) * w + col] + src[base + (r + 1) * w + col + 1])
    });
    Ok(out)
}

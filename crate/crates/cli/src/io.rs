//! On-disk formats: `RCT1` tensors, PNG ingestion and dataset manifests.
//!
//! `RCT1` layout, little-endian: magic, rank u32, rank x extent u32, f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rcl_core::noise::NoiseParams;
use rcl_core::tensor::Tensor;
use rcl_core::train::{Dataset, Sample};

pub const TENSOR_MAGIC: &[u8; 4] = b"RCT1";

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<Tensor> {
    ensure!(buf.len() >= 8 && &buf[..4] == TENSOR_MAGIC, "not an RCT1 tensor file");
    let rd = |at: usize| -> Result<u32> {
        let b = buf.get(at..at + 4).ok_or_else(|| anyhow!("tensor file is truncated"))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let rank = rd(4)? as usize;
    let shape = (0..rank).map(|i| rd(8 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    ensure!(buf.len() == start + 8 * n, "tensor file holds {} value bytes, expected {}", buf.len().saturating_sub(start), 8 * n);
    let data = buf[start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    tensor_from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// 8-bit grayscale or RGB PNG as a `[1, 3, H, W]` tensor in `[0, 1]`.
/// Grayscale is replicated to three channels; the image is cropped to
/// multiples of 8 from the top-left.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| anyhow!("{} is too large", path.display()))?];
    let info = reader.next_frame(&mut buf).with_context(|| format!("decoding {}", path.display()))?;
    if info.bit_depth != png::BitDepth::Eight {
        bail!("{}: only 8-bit PNGs are supported", path.display());
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => bail!("{}: unsupported colour type {other:?} (grayscale or RGB only)", path.display()),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let (ch, cw) = (h / 8 * 8, w / 8 * 8);
    ensure!(ch >= 16 && cw >= 16, "{}: image {w}x{h} is smaller than 16x16", path.display());
    let bytes = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let t = Tensor::from_fn(&[1, 3, ch, cw], |i| {
        let (c, rem) = (i / (ch * cw), i % (ch * cw));
        let (r, col) = (rem / cw, rem % cw);
        let src = if channels == 1 { 0 } else { c };
        bytes[r * stride + col * channels + src] as f64 / 255.0
    });
    Ok(t)
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    ensure!(!files.is_empty(), "no PNG files in {}", dir.display());
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noisy: Option<PathBuf>,
    pub params: Option<NoiseParams>,
    pub noise_seed: Option<u64>,
}

/// One entry per line: `clean,noisy,lambda_shot,lambda_read,noise_seed`;
/// paths are relative to `root` and every field after `clean` may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn image_kind(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        _ => read_tensor(path),
    }
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (n, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).filter(|s| !s.is_empty());
            let clean = field(0).ok_or_else(|| anyhow!("manifest line {}: missing clean path", n + 1))?;
            let num = |i: usize| -> Result<Option<f64>> {
                field(i).map(|s| s.parse::<f64>().with_context(|| format!("manifest line {}: bad number `{s}`", n + 1))).transpose()
            };
            let params = match (num(2)?, num(3)?) {
                (Some(s), Some(r)) => Some(NoiseParams::new(s, r)?),
                (None, None) => None,
                _ => bail!("manifest line {}: give both noise parameters or neither", n + 1),
            };
            let noise_seed = field(4).map(|s| s.parse::<u64>().with_context(|| format!("manifest line {}: bad seed `{s}`", n + 1))).transpose()?;
            entries.push(ManifestEntry { clean: PathBuf::from(clean), noisy: field(1).map(PathBuf::from), params, noise_seed });
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for e in &self.entries {
            let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let (s, r) = e.params.map(|p| (format!("{:?}", p.lambda_shot), format!("{:?}", p.lambda_read))).unwrap_or_default();
            w.write_record([e.clean.display().to_string(), p(&e.noisy), s, r, e.noise_seed.map(|s| s.to_string()).unwrap_or_default()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    /// Loads every image. Entries without a noisy file are re-simulated from
    /// their recorded parameters and seed.
    pub fn load_dataset(&self) -> Result<Dataset> {
        ensure!(!self.entries.is_empty(), "manifest has no entries");
        let mut samples = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let clean = image_kind(&self.root.join(&e.clean))?;
            let (params, seed) = match (e.params, e.noise_seed) {
                (Some(p), Some(s)) => (p, s),
                _ => bail!("manifest entry {} ({}) lacks noise parameters or seed", i + 1, e.clean.display()),
            };
            let sample = match &e.noisy {
                Some(n) => {
                    let noisy = image_kind(&self.root.join(n))?;
                    ensure!(noisy.shape() == clean.shape(), "entry {}: noisy shape {:?} differs from clean {:?}", i + 1, noisy.shape(), clean.shape());
                    Sample { clean, noisy, params, noise_seed: seed }
                }
                None => Sample::simulate(clean, params, seed),
            };
            if let Some(first) = samples.first() {
                let first: &Sample = first;
                ensure!(first.clean.shape()[1] == sample.clean.shape()[1], "entry {}: channel count differs from the first entry", i + 1);
            }
            samples.push(sample);
        }
        Ok(Dataset::new(samples))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.1 - 0.3);
        assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap(), t);
        let b = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&b[..b.len() - 1]).is_err());
        assert!(tensor_from_bytes(b"XXXX\0\0\0\0").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            root: PathBuf::from("/data"),
            entries: vec![
                ManifestEntry {
                    clean: "a.rct".into(),
                    noisy: Some("b.rct".into()),
                    params: Some(NoiseParams::new(1e-4, 3.3e-5).unwrap()),
                    noise_seed: Some(42),
                },
                ManifestEntry { clean: "c.png".into(), noisy: None, params: None, noise_seed: None },
            ],
        };
        assert_eq!(Manifest::parse(&m.render(), Path::new("/data")).unwrap(), m);
    }
}

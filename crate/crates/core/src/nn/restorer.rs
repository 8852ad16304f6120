use std::fmt;
use std::str::FromStr;

use super::{init_conv, init_rng, Init, ModelParams, NnError, ParamNodes, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Two-level U-Net, widths 16/32, bottleneck 64.
    UnetSmall,
    /// Six conv(3x3, 16)-relu blocks predicting the residual.
    DncnnSmall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// 1x1 conv at input resolution (3x3 for dncnn).
    Identity,
    /// Nearest-neighbour 2x upsample followed by a 3x3 conv.
    Upsample2x,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::UnetSmall => "unet-small",
            Architecture::DncnnSmall => "dncnn-small",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unet-small" => Ok(Self::UnetSmall),
            "dncnn-small" => Ok(Self::DncnnSmall),
            _ => Err(format!("unknown architecture `{s}`")),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Identity => "identity-resolution",
            HeadKind::Upsample2x => "upsample-2x",
        })
    }
}

const UNET_BODY: &[(&str, usize, usize)] = &[
    // (layer, in-channel source, out-channels); in = 0 means the network input
    ("enc1.conv1", 0, 16),
    ("enc1.conv2", 16, 16),
    ("enc2.conv1", 16, 32),
    ("enc2.conv2", 32, 32),
    ("mid.conv1", 32, 64),
    ("mid.conv2", 64, 64),
    ("dec2.conv1", 64 + 32, 32),
    ("dec2.conv2", 32, 32),
    ("dec1.conv1", 32 + 16, 16),
    ("dec1.conv2", 16, 16),
];

const DNCNN_DEPTH: usize = 6;
const DNCNN_WIDTH: usize = 16;

/// Prefix of the replaceable last layer.
pub const HEAD_PREFIX: &str = "head.";

/// A restoration network `f_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorerNet {
    pub architecture: Architecture,
    pub in_channels: usize,
    pub out_channels: usize,
    pub head: HeadKind,
    pub params: ModelParams,
}

impl RestorerNet {
    pub fn new(architecture: Architecture, in_channels: usize, out_channels: usize, head: HeadKind, init: Init) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(NnError::Shape("channel counts must be positive".into()));
        }
        if architecture == Architecture::DncnnSmall {
            if head != HeadKind::Identity {
                return Err(NnError::Shape("dncnn-small predicts a residual and needs an identity head".into()));
            }
            if in_channels != out_channels {
                return Err(NnError::Shape("dncnn-small needs equal input and output channels".into()));
            }
        }
        let mut rng = init_rng(init, 1);
        let mut params = ModelParams::new();
        let mut add = |params: &mut ModelParams, name: &str, cout, cin, k| -> Result<()> {
            let (w, b) = init_conv(cout, cin, k, init, &mut rng);
            params.push(&format!("{name}.weight"), w)?;
            params.push(&format!("{name}.bias"), b)
        };
        match architecture {
            Architecture::UnetSmall => {
                for &(name, cin, cout) in UNET_BODY {
                    add(&mut params, name, cout, if cin == 0 { in_channels } else { cin }, 3)?;
                }
            }
            Architecture::DncnnSmall => {
                for i in 0..DNCNN_DEPTH {
                    let cin = if i == 0 { in_channels } else { DNCNN_WIDTH };
                    add(&mut params, &format!("block{i}.conv"), DNCNN_WIDTH, cin, 3)?;
                }
            }
        }
        let mut net = Self { architecture, in_channels, out_channels, head, params };
        net.init_head(head, out_channels, init)?;
        Ok(net)
    }

    fn head_kernel(&self, head: HeadKind) -> usize {
        match (self.architecture, head) {
            (Architecture::UnetSmall, HeadKind::Identity) => 1,
            _ => 3,
        }
    }

    fn feature_width(&self) -> usize {
        match self.architecture {
            Architecture::UnetSmall => 16,
            Architecture::DncnnSmall => DNCNN_WIDTH,
        }
    }

    fn init_head(&mut self, head: HeadKind, out_channels: usize, init: Init) -> Result<()> {
        let k = self.head_kernel(head);
        let mut rng = init_rng(init, 2);
        let (w, b) = init_conv(out_channels, self.feature_width(), k, init, &mut rng);
        self.params.remove_prefix(HEAD_PREFIX);
        self.params.push("head.weight", w)?;
        self.params.push("head.bias", b)?;
        self.head = head;
        self.out_channels = out_channels;
        Ok(())
    }

    /// Swaps the last layer for a freshly initialised task head.
    pub fn replace_head(&mut self, head: HeadKind, out_channels: usize, init: Init) -> Result<()> {
        if self.architecture == Architecture::DncnnSmall && (head != HeadKind::Identity || out_channels != self.in_channels) {
            return Err(NnError::Shape(format!("dncnn-small cannot take a {head} head with {out_channels} outputs")));
        }
        self.init_head(head, out_channels, init)
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with(HEAD_PREFIX)
    }

    /// Only the last layer stays trainable.
    pub fn freeze_all_but_head(&mut self) {
        self.params.freeze_all_except(HEAD_PREFIX);
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(NnError::Shape(format!("expected NCHW input, got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(NnError::Shape(format!("input has {c} channels, network expects {}", self.in_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(NnError::Shape(format!("spatial size {h}x{w} is not divisible by 4")));
        }
        Ok(())
    }

    fn conv(g: &mut Graph, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        Ok(g.conv2d(x, w, Some(b))?)
    }

    fn conv_relu(g: &mut Graph, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
        let y = Self::conv(g, p, name, x)?;
        Ok(g.relu(y)?)
    }

    /// Raw network output: the restored image for unet-small, the predicted
    /// residual for dncnn-small.
    pub fn forward(&self, g: &mut Graph, p: &ParamNodes, x: NodeId) -> Result<NodeId> {
        self.check_input(g.shape(x))?;
        let features = match self.architecture {
            Architecture::UnetSmall => {
                let e1 = Self::conv_relu(g, p, "enc1.conv1", x)?;
                let e1 = Self::conv_relu(g, p, "enc1.conv2", e1)?;
                let d1 = g.avg_pool2x(e1)?;
                let e2 = Self::conv_relu(g, p, "enc2.conv1", d1)?;
                let e2 = Self::conv_relu(g, p, "enc2.conv2", e2)?;
                let d2 = g.avg_pool2x(e2)?;
                let m = Self::conv_relu(g, p, "mid.conv1", d2)?;
                let m = Self::conv_relu(g, p, "mid.conv2", m)?;
                let u2 = g.upsample2x(m)?;
                let c2 = g.concat(&[u2, e2], 1)?;
                let r2 = Self::conv_relu(g, p, "dec2.conv1", c2)?;
                let r2 = Self::conv_relu(g, p, "dec2.conv2", r2)?;
                let u1 = g.upsample2x(r2)?;
                let c1 = g.concat(&[u1, e1], 1)?;
                let r1 = Self::conv_relu(g, p, "dec1.conv1", c1)?;
                Self::conv_relu(g, p, "dec1.conv2", r1)?
            }
            Architecture::DncnnSmall => {
                let mut h = x;
                for i in 0..DNCNN_DEPTH {
                    h = Self::conv_relu(g, p, &format!("block{i}.conv"), h)?;
                }
                h
            }
        };
        let features = match self.head {
            HeadKind::Identity => features,
            HeadKind::Upsample2x => g.upsample2x(features)?,
        };
        Self::conv(g, p, "head", features)
    }

    /// The restored image: `f(x)` for unet-small, `x - f(x)` for dncnn-small.
    pub fn reconstruct(&self, g: &mut Graph, p: &ParamNodes, x: NodeId) -> Result<NodeId> {
        let out = self.forward(g, p, x)?;
        Ok(match self.architecture {
            Architecture::UnetSmall => out,
            Architecture::DncnnSmall => g.sub(x, out)?,
        })
    }

    /// Inference-only reconstruction of a `[N, C, H, W]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g)?;
        let xi = g.constant(x.clone())?;
        let y = self.reconstruct(&mut g, &p, xi)?;
        Ok(g.value(y).clone())
    }

    /// Inference-only raw output.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g)?;
        let xi = g.constant(x.clone())?;
        let y = self.forward(&mut g, &p, xi)?;
        Ok(g.value(y).clone())
    }

    /// Rebuilds a network of the given layout around loaded parameters,
    /// checking that every expected tensor is present with the right shape.
    pub fn from_params(architecture: Architecture, in_channels: usize, out_channels: usize, head: HeadKind, params: ModelParams) -> Result<Self> {
        let template = Self::new(architecture, in_channels, out_channels, head, Init::Zeros)?;
        for e in template.params.entries() {
            match params.get(&e.name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                Some(t) => {
                    return Err(NnError::Shape(format!("`{}` has shape {:?}, expected {:?}", e.name, t.shape(), e.tensor.shape())))
                }
                None => return Err(NnError::UnknownParam(e.name.clone())),
            }
        }
        if params.len() != template.params.len() {
            return Err(NnError::Shape(format!("{} tensors, expected {}", params.len(), template.params.len())));
        }
        Ok(Self { architecture, in_channels, out_channels, head, params })
    }

    /// Infers the layout of a checkpoint produced by this module.
    pub fn from_checkpoint_params(params: ModelParams) -> Result<Self> {
        let arch = if params.get("enc1.conv1.weight").is_some() {
            Architecture::UnetSmall
        } else if params.get("block0.conv.weight").is_some() {
            Architecture::DncnnSmall
        } else {
            return Err(NnError::Shape("checkpoint holds no known architecture".into()));
        };
        let first = if arch == Architecture::UnetSmall { "enc1.conv1.weight" } else { "block0.conv.weight" };
        let in_channels = params.get(first).expect("checked").shape()[1];
        let head = params.get("head.weight").ok_or_else(|| NnError::UnknownParam("head.weight".into()))?;
        let out_channels = head.shape()[0];
        let kind = if arch == Architecture::UnetSmall && head.shape()[2] == 3 { HeadKind::Upsample2x } else { HeadKind::Identity };
        Self::from_params(arch, in_channels, out_channels, kind, params)
    }
}

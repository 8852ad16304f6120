use super::{init_conv, init_rng, Init, ModelParams, NnError, ParamNodes, Result};
use crate::tensor::{Graph, NodeId, Tensor};

const WIDTHS: [usize; 3] = [8, 16, 32];

/// Fixed random-weight convolutional encoder used by the consistency loss.
///
/// Three levels of conv3x3-relu-avgpool; the feature vector concatenates the
/// spatial mean of every level's output channels (56 values per image).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    params: ModelParams,
    seed: u64,
}

impl FeatureEncoder {
    pub fn new(seed: u64) -> Self {
        let init = Init::HeUniform { seed };
        let mut rng = init_rng(init, 7);
        let mut params = ModelParams::new();
        let mut cin = 3;
        for (level, &cout) in WIDTHS.iter().enumerate() {
            let (w, b) = init_conv(cout, cin, 3, init, &mut rng);
            params.push(&format!("level{level}.weight"), w).expect("unique");
            params.push(&format!("level{level}.bias"), b).expect("unique");
            cin = cout;
        }
        params.set_all_trainable(false);
        Self { params, seed }
    }

    /// Uses externally supplied weights with the same layout.
    pub fn from_params(mut params: ModelParams) -> Result<Self> {
        let template = Self::new(0);
        for e in template.params.entries() {
            match params.get(&e.name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                _ => return Err(NnError::Shape(format!("encoder tensor `{}` missing or misshapen", e.name))),
            }
        }
        params.set_all_trainable(false);
        Ok(Self { params, seed: 0 })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn feature_len(&self) -> usize {
        WIDTHS.iter().sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<ParamNodes> {
        self.params.bind_constant(g)
    }

    /// `[N, 3, H, W] -> [N, 56]`; H and W must be divisible by 8.
    pub fn features(&self, g: &mut Graph, p: &ParamNodes, x: NodeId) -> Result<NodeId> {
        let &[_, c, h, w] = g.shape(x) else {
            return Err(NnError::Shape(format!("encoder expects NCHW, got {:?}", g.shape(x))));
        };
        if c != 3 {
            return Err(NnError::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(NnError::Shape(format!("encoder input {h}x{w} not divisible by 8")));
        }
        let mut h = x;
        let mut pooled = Vec::with_capacity(WIDTHS.len());
        for level in 0..WIDTHS.len() {
            let wt = p.get(&format!("level{level}.weight"))?;
            let b = p.get(&format!("level{level}.bias"))?;
            let y = g.conv2d(h, wt, Some(b))?;
            let y = g.relu(y)?;
            h = g.avg_pool2x(y)?;
            pooled.push(g.spatial_mean(h)?);
        }
        Ok(g.concat(&pooled, 1)?)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let xi = g.constant(x.clone())?;
        let f = self.features(&mut g, &p, xi)?;
        Ok(g.value(f).data().to_vec())
    }
}

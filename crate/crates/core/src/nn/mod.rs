//! Restoration networks, the fixed feature encoder, Adam and checkpoints.

mod adam;
mod checkpoint;
mod encoder;
mod restorer;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, params_from_bytes, params_to_bytes, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::FeatureEncoder;
pub use restorer::{Architecture, HeadKind, RestorerNet};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint has wrong magic bytes")]
    CorruptMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter tensors with a trainable mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable: true });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name && e.trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.clone()).collect()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    /// Marks only entries whose name starts with `prefix` as trainable.
    pub fn freeze_all_except(&mut self, prefix: &str) {
        for e in &mut self.entries {
            e.trainable = e.name.starts_with(prefix);
        }
    }

    /// Replaces (or appends) one entry, keeping its position if it exists.
    pub fn replace(&mut self, name: &str, tensor: Tensor) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => e.tensor = tensor,
            None => self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable: true }),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|e| !e.name.starts_with(prefix));
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Adds every entry to `graph`: trainable entries as named leaves,
    /// frozen entries as constants.
    pub fn bind(&self, graph: &mut Graph) -> Result<ParamNodes> {
        let mut nodes = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = if e.trainable {
                graph.leaf(&e.name, e.tensor.clone())?
            } else {
                graph.constant(e.tensor.clone())?
            };
            nodes.insert(e.name.clone(), id);
        }
        Ok(ParamNodes(nodes))
    }

    /// Adds every entry as a constant (inference only).
    pub fn bind_constant(&self, graph: &mut Graph) -> Result<ParamNodes> {
        let mut nodes = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            nodes.insert(e.name.clone(), graph.constant(e.tensor.clone())?);
        }
        Ok(ParamNodes(nodes))
    }
}

/// Graph nodes for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes(HashMap<String, NodeId>);

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }
}

/// Parameter initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` for weights, zero biases.
    HeUniform { seed: u64 },
    Zeros,
}

/// Conv weight `[cout, cin, k, k]` and bias `[cout]`.
pub(crate) fn init_conv(cout: usize, cin: usize, k: usize, init: Init, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let shape = [cout, cin, k, k];
    let w = match init {
        Init::Zeros => Tensor::zeros(&shape),
        Init::HeUniform { .. } => {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
        }
    };
    (w, Tensor::zeros(&[cout]))
}

pub(crate) fn init_rng(init: Init, salt: u64) -> ChaCha8Rng {
    let seed = match init {
        Init::HeUniform { seed } => seed,
        Init::Zeros => 0,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

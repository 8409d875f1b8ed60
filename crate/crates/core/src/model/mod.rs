//! Network assembly: strategies, injection points, the shared-vs-speaker
//! parameter registry, whole-network forward/backward, folding and
//! parameter accounting.

mod network;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Activation;

pub use network::{build_network, Block, Core, LayerSource, Network, ParamCounts, SpeakerParams, Trace};
pub use params::{Field, Gradients, Owner, ParamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(pub u32);

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk{}", self.0)
    }
}

/// How speaker-specific parameters enter the network.
///
/// `p` is the scaling-code length, `q` the bias-code length and `n` the
/// bottleneck width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// No speaker parameters at all.
    Vanilla,
    Bias { q: usize },
    Scale { p: usize },
    Affine { p: usize, q: usize },
    /// Bias code and scaling code at two different layers.
    Level { p: usize, q: usize },
    Bottle { p: usize, q: usize, n: usize },
    /// Speaker-specific copies of the injected layers.
    FullFinetune,
    Lhuc,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Bias { .. } => "bias",
            Strategy::Scale { .. } => "scale",
            Strategy::Affine { .. } => "affine",
            Strategy::Level { .. } => "level",
            Strategy::Bottle { .. } => "bottle",
            Strategy::FullFinetune => "full_finetune",
            Strategy::Lhuc => "lhuc",
        }
    }

    pub fn scale_len(&self) -> Option<usize> {
        match *self {
            Strategy::Scale { p } | Strategy::Affine { p, .. } | Strategy::Level { p, .. } | Strategy::Bottle { p, .. } => {
                Some(p)
            }
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            Strategy::Bias { q } | Strategy::Affine { q, .. } | Strategy::Level { q, .. } | Strategy::Bottle { q, .. } => {
                Some(q)
            }
            _ => None,
        }
    }

    /// True when speakers carry a scaling and/or bias code.
    pub fn has_codes(&self) -> bool {
        self.scale_len().is_some() || self.bias_len().is_some()
    }

    pub fn is_foldable(&self) -> bool {
        !matches!(self, Strategy::Bottle { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.scale_len(), self.bias_len()];
        if sizes.iter().flatten().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("{self}: code sizes must be positive")));
        }
        if let Strategy::Bottle { n: 0, .. } = self {
            return Err(Error::InvalidConfig("bottle: bottleneck width must be positive".into()));
        }
        Ok(())
    }

    /// The five code strategies with the sizes used for the full-scale
    /// 1024-unit network.
    pub fn table_sizes() -> [Strategy; 5] {
        [
            Strategy::Bias { q: 64 },
            Strategy::Scale { p: 64 },
            Strategy::Affine { p: 32, q: 32 },
            Strategy::Level { p: 32, q: 32 },
            Strategy::Bottle { p: 64, q: 32, n: 512 },
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    /// Adapters on hidden layers followed by a squashing activation.
    Nonlinear,
    /// Adapters where every remaining operation is linear.
    Linear,
}

impl InjectionMode {
    pub fn name(&self) -> &'static str {
        match self {
            InjectionMode::Nonlinear => "nonlinear",
            InjectionMode::Linear => "linear",
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where speaker transformations are injected. `layers: None` picks the
/// default placement for the mode and strategy; for `level`, an explicit list
/// is `[bias_layer, scale_layer]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub mode: InjectionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

impl Injection {
    pub fn nonlinear() -> Self {
        Injection {
            mode: InjectionMode::Nonlinear,
            layers: None,
        }
    }

    pub fn linear() -> Self {
        Injection {
            mode: InjectionMode::Linear,
            layers: None,
        }
    }

    pub fn of(mode: InjectionMode) -> Self {
        Injection { mode, layers: None }
    }
}

fn default_hidden_activation() -> Activation {
    Activation::Sigmoid
}

/// `depth` hidden layers of `width` units, then a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub depth: usize,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    pub strategy: Strategy,
    pub injection: Injection,
    pub seed: u64,
}

impl NetworkConfig {
    /// Five sigmoid layers of 1024 units followed by a linear output layer.
    pub fn full_scale(input_dim: usize, output_dim: usize, strategy: Strategy, injection: Injection) -> Self {
        NetworkConfig {
            input_dim,
            output_dim,
            width: 1024,
            depth: 5,
            hidden_activation: Activation::Sigmoid,
            strategy,
            injection,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("network dimensions must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        self.strategy.validate()
    }
}

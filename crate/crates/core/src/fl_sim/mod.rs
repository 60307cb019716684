//! Federated training engine: round loop, local SGD over embeddings,
//! sample-count or similarity-driven aggregation, FedAvg / FedAvgM server
//! updates, and per-client evaluation.

mod eval;
mod experiment;
mod local;
mod server;

pub use eval::{evaluate, EvalReport, Split};
pub use experiment::{run_experiment, write_round_csv, RoundLog};
pub use local::{local_train, ClientUpdate};
pub use server::{aggregate, server_step_fedavg, server_step_fedavgm};

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::enhancements::EnhancementConfig;
use crate::error::{Error, Result};
use crate::smallnet::{
    mlp_forward, Activation, DenseParams, Matrix, MlpParams, ParamTensors, TensorRole,
};

/// The global classifier: an MLP backbone producing penultimate features and
/// a dense head producing class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub backbone: MlpParams,
    pub head: DenseParams,
}

impl GlobalModel {
    pub fn init(
        d_emb: usize,
        hidden_dim: usize,
        n_classes: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        Ok(GlobalModel {
            backbone: MlpParams::init(&[(d_emb, hidden_dim, Activation::Tanh)], rng)?,
            head: DenseParams::init(hidden_dim, n_classes, rng),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Penultimate features for a batch.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        mlp_forward(&self.backbone, x)
    }

    /// Class logits for a batch.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.head.forward(&self.features(x)?)
    }
}

impl ParamTensors for GlobalModel {
    fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        let mut t = self.backbone.tensors();
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Server-side optimizer.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerOpt {
    #[default]
    FedAvg,
    FedAvgM {
        momentum: f64,
    },
}

/// Federated-experiment configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Width of the backbone's feature layer.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub server: ServerOpt,
    /// Train the selected clients of one round in parallel. Each client has
    /// its own derived random stream and results are merged in ascending
    /// client order, so the outcome is identical to sequential execution.
    #[serde(default)]
    pub parallel_clients: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Populated by the experiment runner; not part of the `fl` section.
    #[serde(skip)]
    pub enhancements: EnhancementConfig,
}

fn default_rounds() -> usize {
    100
}

fn default_fraction() -> f64 {
    0.1
}

fn default_local_epochs() -> usize {
    5
}

fn default_learning_rate() -> f64 {
    1e-2
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-5
}

fn default_batch_size() -> usize {
    64
}

fn default_hidden_dim() -> usize {
    64
}

impl Default for FlConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction = {} must be in (0, 1]",
                self.fraction
            )));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "batch_size and hidden_dim must be >= 1".into(),
            ));
        }
        if self.learning_rate < 0.0
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(format!(
                "bad optimizer settings: lr={}, momentum={}, weight_decay={}",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        if let ServerOpt::FedAvgM { momentum } = self.server {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(Error::Config(format!(
                    "server momentum {momentum} must be in [0, 1]"
                )));
            }
        }
        if self.seed.is_none() {
            return Err(Error::Config("fl config has no resolved seed".into()));
        }
        Ok(())
    }

    /// Clients per round.
    pub fn cohort_size(&self, n_clients: usize) -> usize {
        ((self.fraction * n_clients as f64).ceil() as usize).clamp(1, n_clients)
    }
}

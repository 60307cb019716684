//! Synthetic embedding datasets and client shards.
//!
//! Every datum is an [`EmbeddingPair`]: a unit-norm image embedding, the
//! unit-norm embedding of its label, and the integer label. The generator
//! composes each image embedding from its class direction, an optional
//! per-domain direction orthogonal to every class, and Gaussian noise, so
//! label shift (via Dirichlet class proportions) and feature shift (via
//! domain directions) are independently controllable.

mod partition;
mod shard_io;
mod synth;

pub use partition::dirichlet_partition;
pub use shard_io::{load_shards, save_shards};
pub use synth::{dirichlet_proportions, synth_client_shards, synth_label_embeddings};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smallnet::Matrix;

/// One sample: image embedding `D`, label embedding `L`, and label `y`.
/// Both embeddings are unit-norm; `L` is identical across all pairs that
/// share a label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub image_emb: Vec<f64>,
    pub label_emb: Vec<f64>,
    pub label: u32,
}

/// One client's dataset plus identity. `class_embeddings` holds the label
/// embedding of every class (row `y` = embedding of label `y`), including
/// classes the client happens to own no samples of.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    pub domain_id: u32,
    pub class_embeddings: Matrix,
    pub pairs: Vec<EmbeddingPair>,
}

/// Train fraction of the per-client split. The split is positional: sample
/// order is randomized at generation time, so the leading `ceil(0.8 n)`
/// samples form the train split and the remainder the test split.
pub const TRAIN_FRACTION: f64 = 0.8;

impl ClientShard {
    pub fn n_samples(&self) -> usize {
        self.pairs.len()
    }

    pub fn d_emb(&self) -> usize {
        self.class_embeddings.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_embeddings.rows()
    }

    pub fn n_train(&self) -> usize {
        ((self.pairs.len() as f64) * TRAIN_FRACTION).ceil() as usize
    }

    pub fn train_pairs(&self) -> &[EmbeddingPair] {
        &self.pairs[..self.n_train()]
    }

    pub fn test_pairs(&self) -> &[EmbeddingPair] {
        &self.pairs[self.n_train()..]
    }

    /// Image embeddings of `pairs` stacked into a `n x d_emb` matrix.
    pub fn image_matrix(pairs: &[EmbeddingPair]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.image_emb.clone()).collect();
        Matrix::from_rows(&rows)
    }

    /// Label embeddings of `pairs` stacked into a `n x d_emb` matrix.
    pub fn label_matrix(pairs: &[EmbeddingPair]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.label_emb.clone()).collect();
        Matrix::from_rows(&rows)
    }

    pub fn labels(pairs: &[EmbeddingPair]) -> Vec<usize> {
        pairs.iter().map(|p| p.label as usize).collect()
    }
}

/// Parameters of the synthetic dataset generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    pub n_classes: u32,
    pub n_domains: u32,
    pub clients_per_domain: u32,
    /// Inclusive `[min, max]` range of samples per client.
    pub samples_per_client: [u32; 2],
    #[serde(default = "default_d_emb")]
    pub d_emb: u32,
    /// Strength of the class direction in each image embedding, in `[0, 1]`.
    #[serde(default = "default_label_align")]
    pub label_align: f64,
    /// Strength of the per-domain direction.
    #[serde(default)]
    pub domain_strength: f64,
    /// Standard deviation of the Gaussian noise term.
    #[serde(default)]
    pub noise_sigma: f64,
    /// When set, each client's class proportions are drawn from
    /// `Dirichlet(alpha)`; otherwise classes are uniform.
    #[serde(default)]
    pub dirichlet_alpha: Option<f64>,
    /// Generator seed. Optional in config files (derived from the top-level
    /// seed when absent); always set after resolution.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_d_emb() -> u32 {
    32
}

fn default_label_align() -> f64 {
    1.0
}

impl SynthesisSpec {
    pub fn n_clients(&self) -> u32 {
        self.n_domains * self.clients_per_domain
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_domains == 0 || self.clients_per_domain == 0 {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if self.samples_per_client[0] == 0
            || self.samples_per_client[0] > self.samples_per_client[1]
        {
            return Err(Error::Config(format!(
                "samples_per_client range [{}, {}] is invalid",
                self.samples_per_client[0], self.samples_per_client[1]
            )));
        }
        if self.d_emb < self.n_classes + self.n_domains {
            return Err(Error::Config(format!(
                "d_emb = {} must be >= n_classes + n_domains = {} so class and \
                 domain directions can be mutually orthogonal",
                self.d_emb,
                self.n_classes + self.n_domains
            )));
        }
        if !(0.0..=1.0).contains(&self.label_align) {
            return Err(Error::Config(format!(
                "label_align = {} must be in [0, 1]",
                self.label_align
            )));
        }
        if self.domain_strength < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(
                "domain_strength and noise_sigma must be >= 0".into(),
            ));
        }
        if let Some(alpha) = self.dirichlet_alpha {
            if alpha <= 0.0 {
                return Err(Error::Config(format!(
                    "dirichlet_alpha = {alpha} must be > 0"
                )));
            }
        }
        if self.seed.is_none() {
            return Err(Error::Config("synthesis spec has no resolved seed".into()));
        }
        Ok(())
    }
}

//! Client-index generation.
//!
//! A decomposition network maps each image embedding (presented as the
//! concatenation `[D, D]`) to a data encoding `z` and a sample feature index
//! `u`; a reconstruction head maps `[z, u]` back to the embedding. Training
//! minimizes four terms: cosine alignment of `z` with the label embedding,
//! an L1 orthogonality penalty between `z` and `u`, reconstruction error,
//! and a diversity term that keeps the feature indices of a batch from
//! collapsing onto one vector.
//!
//! After training, every client's feature index `beta_f` is the mean of its
//! sample feature indices and its label index `beta_l` is the mean of its
//! label embeddings; `[beta_f; beta_l]` is the client's index vector.

mod io;
mod losses;
mod train;

pub use io::{
    load_index_params, read_index_csv, save_index_params, write_index_csv, IndexRecord,
};
pub use losses::{loss_div, loss_orth, loss_recon, loss_sim, total_loss};
pub use train::{epoch_batches, train_federated, train_global};

use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::ClientShard;
use crate::error::{Error, Result};
use crate::smallnet::{mlp_forward, Activation, Matrix, MlpParams, ParamTensors, TensorRole};

/// Decomposition block and reconstruction head.
#[derive(Clone, Debug, PartialEq)]
pub struct DsaIgnParams {
    /// `2 d_emb -> 2 d_index`; output columns `0..d_index` are the data
    /// encodings, columns `d_index..` the sample feature indices.
    pub decomposition: MlpParams,
    /// `2 d_index -> d_emb`.
    pub reconstruction: MlpParams,
    pub d_emb: usize,
    pub d_index: usize,
}

impl DsaIgnParams {
    /// Three-layer tanh MLP decomposition block; linear reconstruction head
    /// by default, or a one-hidden-layer MLP when `recon_hidden` is set.
    pub fn init(
        d_emb: usize,
        d_index: usize,
        recon_hidden: Option<usize>,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if d_emb == 0 || d_index == 0 {
            return Err(Error::Config("index dimensions must be >= 1".into()));
        }
        let h = 2 * d_emb;
        let decomposition = MlpParams::init(
            &[
                (2 * d_emb, h, Activation::Tanh),
                (h, h, Activation::Tanh),
                (h, 2 * d_index, Activation::Identity),
            ],
            rng,
        )?;
        let reconstruction = match recon_hidden {
            None => MlpParams::init(&[(2 * d_index, d_emb, Activation::Identity)], rng)?,
            Some(hidden) => MlpParams::init(
                &[
                    (2 * d_index, hidden, Activation::Tanh),
                    (hidden, d_emb, Activation::Identity),
                ],
                rng,
            )?,
        };
        Ok(DsaIgnParams {
            decomposition,
            reconstruction,
            d_emb,
            d_index,
        })
    }
}

impl ParamTensors for DsaIgnParams {
    fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        let mut t = self.decomposition.tensors();
        t.extend(self.reconstruction.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        let mut t = self.decomposition.tensors_mut();
        t.extend(self.reconstruction.tensors_mut());
        t
    }
}

/// Decomposition output for a batch: data encodings and feature indices,
/// one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleIndexBatch {
    pub encodings: Matrix,
    pub feature_indices: Matrix,
}

/// A client's index vector: feature part and label part.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientIndex {
    pub beta_f: Vec<f64>,
    pub beta_l: Vec<f64>,
}

impl ClientIndex {
    /// `[beta_f; beta_l]` concatenated.
    pub fn full(&self) -> Vec<f64> {
        let mut v = self.beta_f.clone();
        v.extend_from_slice(&self.beta_l);
        v
    }
}

/// Which part of the index a similarity matrix or CSV export refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexPart {
    Feature,
    Label,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Global,
    Federated,
}

/// Training configuration for the index network.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IndexGenConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight")]
    pub w_sim: f64,
    #[serde(default = "default_weight")]
    pub w_orth: f64,
    #[serde(default = "default_weight")]
    pub w_recon: f64,
    #[serde(default = "default_weight")]
    pub w_div: f64,
    /// Divide the orthogonality penalty by the squared batch size so its
    /// scale does not depend on batching; switch off to use the raw sum.
    #[serde(default = "default_true")]
    pub orth_normalized: bool,
    #[serde(default)]
    pub strategy: Strategy,
    /// Federated strategy: number of communication rounds.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Federated strategy: fraction of clients per round.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Federated strategy: local epochs per selected client.
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// Index dimension; defaults to the embedding dimension.
    #[serde(default)]
    pub d_index: Option<usize>,
    /// Hidden width of the reconstruction head; linear head when absent.
    #[serde(default)]
    pub recon_hidden: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_epochs() -> usize {
    200
}

fn default_batch_size() -> usize {
    128
}

fn default_learning_rate() -> f64 {
    1e-2
}

fn default_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_rounds() -> usize {
    100
}

fn default_fraction() -> f64 {
    0.1
}

fn default_local_epochs() -> usize {
    10
}

impl Default for IndexGenConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl IndexGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_sim < 0.0 || self.w_orth < 0.0 || self.w_recon < 0.0 || self.w_div < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction = {} must be in (0, 1]",
                self.fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.seed.is_none() {
            return Err(Error::Config("index config has no resolved seed".into()));
        }
        Ok(())
    }
}

/// Splits a batch of image embeddings into data encodings and sample feature
/// indices. The network consumes the concatenation `[D, D]`.
pub fn decompose(params: &DsaIgnParams, image_batch: &Matrix) -> Result<SampleIndexBatch> {
    if image_batch.cols() != params.d_emb {
        return Err(Error::Shape(format!(
            "decompose: batch has {} columns, network expects {}",
            image_batch.cols(),
            params.d_emb
        )));
    }
    let doubled = image_batch.concat_cols(image_batch)?;
    let out = mlp_forward(&params.decomposition, &doubled)?;
    Ok(SampleIndexBatch {
        encodings: out.slice_cols(0, params.d_index)?,
        feature_indices: out.slice_cols(params.d_index, 2 * params.d_index)?,
    })
}

/// Reconstructs image embeddings from `[z, u]`.
pub fn reconstruct(params: &DsaIgnParams, batch: &SampleIndexBatch) -> Result<Matrix> {
    let cat = batch.encodings.concat_cols(&batch.feature_indices)?;
    mlp_forward(&params.reconstruction, &cat)
}

/// Computes one client's index: `beta_f` averages the sample feature indices
/// over the whole shard, `beta_l` averages the label embeddings. Summation
/// runs in ascending sample order, so results are bitwise stable.
pub fn compute_client_index(params: &DsaIgnParams, shard: &ClientShard) -> Result<ClientIndex> {
    if shard.pairs.is_empty() {
        return Err(Error::Empty(format!(
            "client {} has no samples to index",
            shard.client_id
        )));
    }
    let images = ClientShard::image_matrix(&shard.pairs)?;
    let batch = decompose(params, &images)?;
    let n = shard.pairs.len() as f64;

    let mut beta_f = batch.feature_indices.col_sums();
    for v in &mut beta_f {
        *v /= n;
    }
    let mut beta_l = vec![0.0; shard.d_emb()];
    for pair in &shard.pairs {
        for (b, l) in beta_l.iter_mut().zip(&pair.label_emb) {
            *b += l;
        }
    }
    for v in &mut beta_l {
        *v /= n;
    }
    Ok(ClientIndex { beta_f, beta_l })
}

/// Indices for every shard, in ascending client order. Shards are
/// independent, so they are processed in parallel.
pub fn compute_all_indices(
    params: &DsaIgnParams,
    shards: &[ClientShard],
) -> Result<Vec<ClientIndex>> {
    shards
        .par_iter()
        .map(|s| compute_client_index(params, s))
        .collect()
}

/// Pairwise cosine-similarity matrix of the selected index part. Symmetric
/// with unit diagonal.
pub fn index_similarity_matrix(indices: &[ClientIndex], part: IndexPart) -> Result<Matrix> {
    let vectors: Vec<Vec<f64>> = indices
        .iter()
        .map(|idx| match part {
            IndexPart::Feature => idx.beta_f.clone(),
            IndexPart::Label => idx.beta_l.clone(),
            IndexPart::Full => idx.full(),
        })
        .collect();
    let m = vectors.len();
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let c = crate::smallnet::cosine_sim(&vectors[i], &vectors[j])?;
            out.set(i, j, c);
            out.set(j, i, c);
        }
    }
    Ok(out)
}

//! Local-training regularizer.
//!
//! Features from the model backbone are projected by a trainable matrix into
//! index space, where two penalties apply: an L1 orthogonality term against
//! the frozen matrix of all clients' feature indices, and a distillation term
//! tying the projection head's predictions to the main head's (the main
//! branch acts as a fixed teacher by default, so the projection preserves the
//! information the classifier actually uses).

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_gen::ClientIndex;
use crate::smallnet::ops::softmax_rows;
use crate::smallnet::tape::{Tape, Var};
use crate::smallnet::{DenseParams, Matrix, ParamTensors, TensorRole};

/// Which branch acts as the fixed (stop-gradient) teacher in the
/// distillation term.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DistillDirection {
    /// KL(main || projection): the main logits are the constant target.
    #[default]
    MainTeachesProjection,
    /// KL(projection || main): gradients flow into the main branch instead.
    ProjectionTeachesMain,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LocalRegConfig {
    /// Weight of the whole regularizer in the local objective.
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Divide the L1 orthogonality term by batch-size x index-count.
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default)]
    pub distill: DistillDirection,
}

fn default_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for LocalRegConfig {
    fn default() -> Self {
        LocalRegConfig {
            weight: default_weight(),
            normalized: true,
            distill: DistillDirection::default(),
        }
    }
}

/// The trainable tensors: projection matrix and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalRegTrainable {
    /// `feature_dim x d_index`.
    pub projection: Matrix,
    /// `d_index -> n_classes`.
    pub proj_head: DenseParams,
}

impl ParamTensors for LocalRegTrainable {
    fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        let mut t = vec![(TensorRole::Weight, self.projection.data())];
        t.extend(self.proj_head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        let mut t = vec![(TensorRole::Weight, self.projection.data_mut())];
        t.extend(self.proj_head.tensors_mut());
        t
    }
}

/// Regularizer state for one client: trainable projection plus the frozen
/// `d_index x M` matrix whose columns are all clients' feature indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalRegParams {
    pub trainable: LocalRegTrainable,
    pub feature_indices: Matrix,
    pub config: LocalRegConfig,
}

impl LocalRegParams {
    /// Builds the frozen index matrix from all clients' `beta_f` and
    /// initializes the trainable tensors from `rng`.
    pub fn init(
        feature_dim: usize,
        n_classes: usize,
        indices: &[ClientIndex],
        config: LocalRegConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("no client indices for the regularizer".into()));
        }
        if config.weight < 0.0 {
            return Err(Error::Config(format!(
                "regularizer weight {} must be >= 0",
                config.weight
            )));
        }
        let d_index = indices[0].beta_f.len();
        let mut feature_indices = Matrix::zeros(d_index, indices.len());
        for (col, idx) in indices.iter().enumerate() {
            if idx.beta_f.len() != d_index {
                return Err(Error::Shape(format!(
                    "client {col} has index dimension {}, expected {d_index}",
                    idx.beta_f.len()
                )));
            }
            for (row, &v) in idx.beta_f.iter().enumerate() {
                feature_indices.set(row, col, v);
            }
        }
        Ok(LocalRegParams {
            trainable: LocalRegTrainable {
                projection: glorot(feature_dim, d_index, rng),
                proj_head: DenseParams::init(d_index, n_classes, rng),
            },
            feature_indices,
            config,
        })
    }

    pub fn d_index(&self) -> usize {
        self.feature_indices.rows()
    }

    pub fn n_index_columns(&self) -> usize {
        self.feature_indices.cols()
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    use rand::Rng;
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

pub(crate) struct RegVars {
    pub projection: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    pub index_matrix: Var,
}

pub(crate) fn register_reg(tape: &mut Tape, params: &LocalRegParams) -> RegVars {
    RegVars {
        projection: tape.leaf(params.trainable.projection.clone()),
        head_weight: tape.leaf(params.trainable.proj_head.weight.clone()),
        head_bias: tape.leaf(
            Matrix::from_vec(
                1,
                params.trainable.proj_head.bias.len(),
                params.trainable.proj_head.bias.clone(),
            )
            .expect("bias row"),
        ),
        index_matrix: tape.leaf(params.feature_indices.clone()),
    }
}

/// Appends the regularizer to the tape and returns its scalar node:
/// `weight * (orth + dist)` where `orth = ||z_P B_f||_1 / (B M)` (or the raw
/// sum when unnormalized) and `dist` is the KL distillation term.
pub(crate) fn build_reg_term(
    tape: &mut Tape,
    vars: &RegVars,
    features: Var,
    logits_main: Var,
    config: &LocalRegConfig,
) -> Result<Var> {
    let projected = tape.matmul(features, vars.projection)?;

    let against_indices = tape.matmul(projected, vars.index_matrix)?;
    let b = tape.value(against_indices).rows();
    let m = tape.value(against_indices).cols();
    let abs = tape.abs(against_indices);
    let sum = tape.sum_all(abs);
    let orth = if config.normalized {
        tape.scale(sum, 1.0 / (b * m) as f64)
    } else {
        sum
    };

    let proj_logits = tape.dense(projected, vars.head_weight, vars.head_bias)?;
    let dist = match config.distill {
        DistillDirection::MainTeachesProjection => {
            let teacher = tape.leaf(softmax_rows(tape.value(logits_main)));
            tape.kl_teacher_mean(teacher, proj_logits)?
        }
        DistillDirection::ProjectionTeachesMain => {
            let teacher = tape.leaf(softmax_rows(tape.value(proj_logits)));
            tape.kl_teacher_mean(teacher, logits_main)?
        }
    };

    let total = tape.add(orth, dist)?;
    Ok(tape.scale(total, config.weight))
}

/// Value and gradients of the regularizer for one batch.
pub struct RegLossOutput {
    pub value: f64,
    pub grad_projection: Matrix,
    pub grad_proj_head: DenseParams,
    /// Gradient flowing back into the backbone features.
    pub grad_features: Matrix,
}

/// Standalone evaluation of the regularizer on a feature batch (`B x d`)
/// with the corresponding main-head logits. With weight zero, the value and
/// all gradients are zero.
pub fn local_reg_loss(
    features: &Matrix,
    logits_main: &Matrix,
    params: &LocalRegParams,
) -> Result<RegLossOutput> {
    if features.cols() != params.trainable.projection.rows() {
        return Err(Error::Shape(format!(
            "features have {} columns, projection expects {}",
            features.cols(),
            params.trainable.projection.rows()
        )));
    }
    if params.config.weight == 0.0 {
        return Ok(RegLossOutput {
            value: 0.0,
            grad_projection: Matrix::zeros(
                params.trainable.projection.rows(),
                params.trainable.projection.cols(),
            ),
            grad_proj_head: DenseParams::zeros(
                params.trainable.proj_head.in_dim(),
                params.trainable.proj_head.out_dim(),
            ),
            grad_features: Matrix::zeros(features.rows(), features.cols()),
        });
    }
    let mut tape = Tape::new();
    let vars = register_reg(&mut tape, params);
    let features_var = tape.leaf(features.clone());
    let logits_var = tape.leaf(logits_main.clone());
    let loss = build_reg_term(&mut tape, &vars, features_var, logits_var, &params.config)?;
    let value = tape.value(loss).scalar();
    let grads = tape.backward(loss)?;
    Ok(RegLossOutput {
        value,
        grad_projection: grads.get(&tape, vars.projection),
        grad_proj_head: DenseParams {
            weight: grads.get(&tape, vars.head_weight),
            bias: grads.get(&tape, vars.head_bias).data().to_vec(),
        },
        grad_features: grads.get(&tape, features_var),
    })
}

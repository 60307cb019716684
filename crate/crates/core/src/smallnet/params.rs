//! Dense-layer and MLP parameter containers with seeded initialization,
//! plain forward evaluation, and flat-vector views used by the optimizer,
//! parameter averaging, and serialization.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::smallnet::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub(crate) fn code(&self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Activation> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Whether a tensor is a weight matrix or a bias vector. Weight decay applies
/// to weights only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
}

/// One dense layer: `y = x W + b` with `W` of shape `in_dim x out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseParams {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-bound..bound));
        DenseParams {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `x W + b` broadcast over rows.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer {
    pub params: DenseParams,
    pub activation: Activation,
}

/// A stack of dense layers with per-layer activations.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
}

impl MlpParams {
    /// Builds an MLP from `(in, out, activation)` layer specs; adjacent
    /// dimensions must chain.
    pub fn init(layer_specs: &[(usize, usize, Activation)], rng: &mut ChaCha20Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(layer_specs.len());
        for (idx, &(in_dim, out_dim, activation)) in layer_specs.iter().enumerate() {
            if idx > 0 && layer_specs[idx - 1].1 != in_dim {
                return Err(Error::Shape(format!(
                    "layer {idx} expects input {in_dim} but layer {} outputs {}",
                    idx - 1,
                    layer_specs[idx - 1].1
                )));
            }
            layers.push(MlpLayer {
                params: DenseParams::init(in_dim, out_dim, rng),
                activation,
            });
        }
        Ok(MlpParams { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.params.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.params.out_dim())
    }

    /// Replaces every tensor with zeros of the same shape (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| MlpLayer {
                    params: DenseParams::zeros(l.params.in_dim(), l.params.out_dim()),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// Forward pass through the whole stack. Dimension mismatches report the
/// offending layer.
pub fn mlp_forward(params: &MlpParams, input: &Matrix) -> Result<Matrix> {
    let mut x = input.clone();
    for (idx, layer) in params.layers.iter().enumerate() {
        if x.cols() != layer.params.in_dim() {
            return Err(Error::Shape(format!(
                "mlp layer {idx}: input has {} columns, layer expects {}",
                x.cols(),
                layer.params.in_dim()
            )));
        }
        x = layer.params.forward(&x)?;
        if layer.activation != Activation::Identity {
            x = x.map(|v| layer.activation.apply(v));
        }
    }
    Ok(x)
}

/// Stable enumeration of a model's tensors, used to zip parameters with
/// gradients and optimizer state.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(TensorRole, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[pos..pos + t.len()]);
            pos += t.len();
        }
        Ok(())
    }
}

impl ParamTensors for DenseParams {
    fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        vec![
            (TensorRole::Weight, self.weight.data()),
            (TensorRole::Bias, self.bias.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        vec![
            (TensorRole::Weight, self.weight.data_mut()),
            (TensorRole::Bias, self.bias.as_mut_slice()),
        ]
    }
}

impl ParamTensors for MlpParams {
    fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        self.layers
            .iter()
            .flat_map(|l| l.params.tensors())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.tensors_mut())
            .collect()
    }
}

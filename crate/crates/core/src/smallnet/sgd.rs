//! SGD with momentum and decoupled-from-bias weight decay.

use crate::error::{Error, Result};
use crate::smallnet::params::{ParamTensors, TensorRole};

/// Optimizer state: one velocity buffer per parameter tensor.
///
/// Update rule per tensor:
/// `v <- momentum * v + (grad + weight_decay * param)` (decay on weights only),
/// then `param <- param - learning_rate * v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate < 0.0 || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "sgd: lr={learning_rate}, momentum={momentum}, weight_decay={weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }
}

/// One SGD step over all tensors of a model. Velocity buffers are allocated
/// lazily on the first step and must then keep matching the model's shapes.
pub fn sgd_step<P: ParamTensors>(params: &mut P, grads: &P, state: &mut SgdState) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} gradient tensors for {} parameter tensors",
            grad_tensors.len(),
            param_tensors.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = param_tensors
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
    }
    if state.velocity.len() != param_tensors.len() {
        return Err(Error::Shape(
            "sgd_step: optimizer state does not match model".into(),
        ));
    }

    for (((role, param), (grole, grad)), vel) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(&mut state.velocity)
    {
        if param.len() != grad.len() || param.len() != vel.len() || role != grole {
            return Err(Error::Shape(format!(
                "sgd_step: tensor sizes {} / {} / {}",
                param.len(),
                grad.len(),
                vel.len()
            )));
        }
        let decay = if *role == TensorRole::Weight {
            state.weight_decay
        } else {
            0.0
        };
        for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
            *v = state.momentum * *v + (g + decay * *p);
            *p -= state.learning_rate * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smallnet::matrix::Matrix;
    use crate::smallnet::params::DenseParams;

    fn scalar_params(w: f64) -> DenseParams {
        DenseParams {
            weight: Matrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![0.0],
        }
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = scalar_params(1.0);
        let g = scalar_params(0.25);
        let mut s = SgdState::new(1.0, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.weight.get(0, 0), 0.75);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut p = scalar_params(2.0);
        let g = scalar_params(0.0);
        let mut s = SgdState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.weight.get(0, 0), 2.0);
    }

    #[test]
    fn momentum_and_decay_match_hand_computation() {
        // One step of the stated recurrence on a scalar weight.
        let (w0, g0, lr, m, wd) = (0.8, 0.3, 0.05, 0.9, 5e-5);
        let mut p = scalar_params(w0);
        let g = scalar_params(g0);
        let mut s = SgdState::new(lr, m, wd).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        let v1 = m * 0.0 + (g0 + wd * w0);
        let w1 = w0 - lr * v1;
        assert_eq!(p.weight.get(0, 0), w1);

        // Second step uses the accumulated velocity.
        sgd_step(&mut p, &g, &mut s).unwrap();
        let v2 = m * v1 + (g0 + wd * w1);
        let w2 = w1 - lr * v2;
        assert_eq!(p.weight.get(0, 0), w2);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = DenseParams {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![1.0],
        };
        let g = DenseParams::zeros(1, 1);
        let mut s = SgdState::new(1.0, 0.0, 0.1).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert!((p.weight.get(0, 0) - 0.9).abs() < 1e-15);
        assert_eq!(p.bias[0], 1.0);
    }

    #[test]
    fn determinism_is_bitwise() {
        let run = || {
            let mut p = scalar_params(0.123456789);
            let g = scalar_params(-0.987654321);
            let mut s = SgdState::new(0.01, 0.9, 5e-5).unwrap();
            for _ in 0..100 {
                sgd_step(&mut p, &g, &mut s).unwrap();
            }
            p.weight.get(0, 0).to_bits()
        };
        assert_eq!(run(), run());
    }
}

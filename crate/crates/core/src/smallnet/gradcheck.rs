//! Finite-difference gradient checker.
//!
//! Rebuilds the loss from scratch at perturbed parameter values, so the
//! numeric side never touches the backward pass it is checking.

use crate::error::Result;
use crate::smallnet::matrix::Matrix;
use crate::smallnet::tape::{Tape, Var};

/// Compares the tape gradient of a loss against central finite differences.
///
/// `build` receives a fresh tape and one leaf per entry of `params` and must
/// return the scalar loss node. Returns the maximum relative error over all
/// coordinates, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(build: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).scalar())
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.get(&tape, v)).collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for t in 0..params.len() {
        for idx in 0..params[t].data().len() {
            let orig = work[t].data()[idx];
            work[t].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[t].data()[idx];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((numeric - exact).abs() / denom);
        }
    }
    Ok(max_rel)
}

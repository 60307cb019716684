//! Server-side aggregation and update rules.

use crate::error::{Error, Result};
use crate::smallnet::ParamTensors;

use super::{ClientUpdate, GlobalModel};

/// Parameterwise weighted mean of the updates. Weights must align with
/// `updates` and sum to one within 1e-9; accumulation runs in ascending
/// client-id order regardless of input order.
pub fn aggregate(updates: &[ClientUpdate], weights: &[f64]) -> Result<GlobalModel> {
    if updates.is_empty() {
        return Err(Error::Empty("aggregate: no updates".into()));
    }
    if updates.len() != weights.len() {
        return Err(Error::Shape(format!(
            "aggregate: {} updates vs {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }

    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);

    let n_params = updates[0].model.param_count();
    let mut acc = vec![0.0; n_params];
    for &i in &order {
        let flat = updates[i].model.to_flat();
        if flat.len() != n_params {
            return Err(Error::Shape(format!(
                "aggregate: update from client {} has {} params, expected {n_params}",
                updates[i].client_id,
                flat.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(flat) {
            *a += weights[i] * v;
        }
    }
    let mut out = updates[0].model.clone();
    out.load_flat(&acc)?;
    Ok(out)
}

/// FedAvg server step: the aggregate replaces the model.
pub fn server_step_fedavg(_prev: &GlobalModel, aggregated: GlobalModel) -> GlobalModel {
    aggregated
}

/// FedAvgM server step: `delta = prev - aggregated`,
/// `buffer <- momentum * buffer + delta`, `new = prev - buffer`.
/// The buffer is allocated on first use.
///
/// The model update is evaluated in the algebraically identical form
/// `new = aggregated - momentum * old_buffer`, which makes the
/// zero-momentum case reduce to the FedAvg step exactly instead of up to
/// rounding.
pub fn server_step_fedavgm(
    prev: &GlobalModel,
    aggregated: &GlobalModel,
    buffer: &mut Vec<f64>,
    momentum: f64,
) -> Result<GlobalModel> {
    let prev_flat = prev.to_flat();
    let agg_flat = aggregated.to_flat();
    if prev_flat.len() != agg_flat.len() {
        return Err(Error::Shape(
            "server_step_fedavgm: model shapes differ".into(),
        ));
    }
    if buffer.is_empty() {
        *buffer = vec![0.0; prev_flat.len()];
    }
    if buffer.len() != prev_flat.len() {
        return Err(Error::Shape(
            "server_step_fedavgm: momentum buffer does not match model".into(),
        ));
    }
    let mut next = vec![0.0; prev_flat.len()];
    for i in 0..prev_flat.len() {
        next[i] = agg_flat[i] - momentum * buffer[i];
        buffer[i] = momentum * buffer[i] + (prev_flat[i] - agg_flat[i]);
    }
    let mut out = prev.clone();
    out.load_flat(&next)?;
    Ok(out)
}

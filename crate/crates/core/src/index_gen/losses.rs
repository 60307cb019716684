//! The four-term index-network objective: plain evaluators plus the tape
//! graph used for training.

use crate::error::{Error, Result};
use crate::smallnet::ops::cosine_sim;
use crate::smallnet::tape::{mlp_forward_tape, mlp_grads, register_mlp, Tape, TapeMlp, Var};
use crate::smallnet::{log_sum_exp, Matrix, MlpParams};

use super::{decompose, reconstruct, DsaIgnParams, IndexGenConfig};

/// Mean `1 - cos(z_j, l_j)` over corresponding rows. In `[0, 2]`.
pub fn loss_sim(encodings: &Matrix, label_batch: &Matrix) -> Result<f64> {
    if encodings.rows() != label_batch.rows() {
        return Err(Error::Shape(format!(
            "loss_sim: {} vs {} rows",
            encodings.rows(),
            label_batch.rows()
        )));
    }
    let mut total = 0.0;
    for i in 0..encodings.rows() {
        total += 1.0 - cosine_sim(encodings.row(i), label_batch.row(i))?;
    }
    Ok(total / encodings.rows() as f64)
}

/// Sum of `|z_j . u_k|` over all row pairs, divided by the number of pairs.
pub fn loss_orth(encodings: &Matrix, feature_indices: &Matrix) -> Result<f64> {
    let raw = loss_orth_raw(encodings, feature_indices)?;
    Ok(raw / (encodings.rows() * feature_indices.rows()) as f64)
}

/// Unnormalized orthogonality penalty: the entrywise L1 norm of `Z U^T`.
pub fn loss_orth_raw(encodings: &Matrix, feature_indices: &Matrix) -> Result<f64> {
    let zu = encodings.matmul_nt(feature_indices)?;
    Ok(zu.data().iter().map(|v| v.abs()).sum())
}

/// Mean squared entrywise error between reconstruction and original.
pub fn loss_recon(reconstructed: &Matrix, original: &Matrix) -> Result<f64> {
    if reconstructed.rows() != original.rows() || reconstructed.cols() != original.cols() {
        return Err(Error::Shape(format!(
            "loss_recon: {}x{} vs {}x{}",
            reconstructed.rows(),
            reconstructed.cols(),
            original.rows(),
            original.cols()
        )));
    }
    let n = (original.rows() * original.cols()) as f64;
    let total: f64 = reconstructed
        .data()
        .iter()
        .zip(original.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / n)
}

/// Mean over rows `j` of `log sum_{k != j} exp(cos(u_j, u_k))`. Low when the
/// feature indices of a batch spread apart, maximal when they coincide.
pub fn loss_div(feature_indices: &Matrix) -> Result<f64> {
    let b = feature_indices.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let mut total = 0.0;
    for j in 0..b {
        let sims: Vec<f64> = (0..b)
            .filter(|&k| k != j)
            .map(|k| cosine_sim(feature_indices.row(j), feature_indices.row(k)))
            .collect::<Result<_>>()?;
        total += log_sum_exp(&sims);
    }
    Ok(total / b as f64)
}

/// Weighted sum of the four terms on a batch, using `decompose` and
/// `reconstruct` under the given parameters. Terms with zero weight are not
/// evaluated; the diversity term additionally requires at least two samples
/// and contributes nothing on smaller batches (its pair sum is empty).
pub fn total_loss(
    params: &DsaIgnParams,
    image_batch: &Matrix,
    label_batch: &Matrix,
    config: &IndexGenConfig,
) -> Result<f64> {
    let batch = decompose(params, image_batch)?;
    let mut total = 0.0;
    if config.w_sim > 0.0 {
        total += config.w_sim * loss_sim(&batch.encodings, label_batch)?;
    }
    if config.w_orth > 0.0 {
        let orth = if config.orth_normalized {
            loss_orth(&batch.encodings, &batch.feature_indices)?
        } else {
            loss_orth_raw(&batch.encodings, &batch.feature_indices)?
        };
        total += config.w_orth * orth;
    }
    if config.w_recon > 0.0 {
        let reconstructed = reconstruct(params, &batch)?;
        total += config.w_recon * loss_recon(&reconstructed, image_batch)?;
    }
    if config.w_div > 0.0 && image_batch.rows() >= 2 {
        total += config.w_div * loss_div(&batch.feature_indices)?;
    }
    Ok(total)
}

pub(crate) struct ObjectiveVars {
    pub decomposition: TapeMlp,
    pub reconstruction: TapeMlp,
}

pub(crate) fn register_objective(tape: &mut Tape, params: &DsaIgnParams) -> ObjectiveVars {
    ObjectiveVars {
        decomposition: register_mlp(tape, &params.decomposition),
        reconstruction: register_mlp(tape, &params.reconstruction),
    }
}

/// Builds the training objective on the tape and returns the scalar loss
/// node. Mirrors [`total_loss`] exactly.
pub(crate) fn build_objective(
    tape: &mut Tape,
    vars: &ObjectiveVars,
    d_index: usize,
    image_batch: &Matrix,
    label_batch: &Matrix,
    config: &IndexGenConfig,
) -> Result<Var> {
    let b = image_batch.rows();
    let doubled = image_batch.concat_cols(image_batch)?;
    let x = tape.leaf(doubled);
    let out = mlp_forward_tape(tape, &vars.decomposition, x)?;
    let z = tape.slice_cols(out, 0, d_index)?;
    let u = tape.slice_cols(out, d_index, 2 * d_index)?;

    let mut terms: Vec<Var> = Vec::new();
    if config.w_sim > 0.0 {
        let labels = tape.leaf(label_batch.clone());
        let cos = tape.cosine_rows(z, labels)?;
        let mean = tape.mean_all(cos);
        let neg = tape.scale(mean, -config.w_sim);
        terms.push(tape.add_const(neg, config.w_sim));
    }
    if config.w_orth > 0.0 {
        let zu = tape.matmul_nt(z, u)?;
        let abs = tape.abs(zu);
        let sum = tape.sum_all(abs);
        let scale = if config.orth_normalized {
            config.w_orth / (b * b) as f64
        } else {
            config.w_orth
        };
        terms.push(tape.scale(sum, scale));
    }
    if config.w_recon > 0.0 {
        let cat = tape.concat_cols(z, u)?;
        let reconstructed = mlp_forward_tape(tape, &vars.reconstruction, cat)?;
        let target = tape.leaf(image_batch.clone());
        let diff = tape.sub(reconstructed, target)?;
        let sq = tape.square(diff);
        let mse = tape.mean_all(sq);
        terms.push(tape.scale(mse, config.w_recon));
    }
    if config.w_div > 0.0 && b >= 2 {
        let unit = tape.rows_unit(u)?;
        let cos = tape.matmul_nt(unit, unit)?;
        let lse = tape.log_sum_exp_off_diag_rows(cos)?;
        let mean = tape.mean_all(lse);
        terms.push(tape.scale(mean, config.w_div));
    }

    match terms.split_first() {
        None => Ok(tape.leaf(Matrix::zeros(1, 1))),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Gradient of the objective with respect to all parameters, shaped like the
/// parameters themselves. Returns the loss value alongside.
pub(crate) fn objective_gradients(
    params: &DsaIgnParams,
    image_batch: &Matrix,
    label_batch: &Matrix,
    config: &IndexGenConfig,
) -> Result<(f64, DsaIgnParams)> {
    let mut tape = Tape::new();
    let vars = register_objective(&mut tape, params);
    let loss = build_objective(
        &mut tape,
        &vars,
        params.d_index,
        image_batch,
        label_batch,
        config,
    )?;
    let value = tape.value(loss).scalar();
    let grads = tape.backward(loss)?;
    let decomposition: MlpParams = mlp_grads(&grads, &tape, &vars.decomposition);
    let reconstruction: MlpParams = mlp_grads(&grads, &tape, &vars.reconstruction);
    Ok((
        value,
        DsaIgnParams {
            decomposition,
            reconstruction,
            d_emb: params.d_emb,
            d_index: params.d_index,
        },
    ))
}

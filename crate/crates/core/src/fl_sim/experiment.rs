//! The experiment round loop.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::embeddings::ClientShard;
use crate::enhancements::{AggregatorState, LocalRegParams, SamplerState};
use crate::error::{Error, Result};
use crate::index_gen::ClientIndex;
use crate::rng::{ns, sample_without_replacement, stream};

use super::{
    aggregate, evaluate, local_train, server_step_fedavg, server_step_fedavgm, ClientUpdate,
    FlConfig, GlobalModel, ServerOpt, Split,
};

/// Everything recorded about one communication round. `probabilities` and
/// `aggregation_weights` align with `selected`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    pub selected: Vec<u32>,
    pub probabilities: Vec<f64>,
    pub aggregation_weights: Vec<f64>,
    pub mean_accuracy: f64,
    pub per_client_accuracy: Vec<(u32, Option<f64>)>,
}

/// Runs the configured number of rounds and logs each one. `indices` must
/// cover every client (ascending, aligned with `shards`) whenever any
/// enhancement is enabled.
pub fn run_experiment(
    shards: &[ClientShard],
    indices: Option<&[ClientIndex]>,
    config: &FlConfig,
) -> Result<Vec<RoundLog>> {
    config.validate()?;
    if shards.is_empty() {
        return Err(Error::Empty("run_experiment: no shards".into()));
    }
    if shards.windows(2).any(|w| w[0].client_id >= w[1].client_id) {
        return Err(Error::Config(
            "shards must be sorted by ascending client_id".into(),
        ));
    }
    let enhancements = &config.enhancements;
    let indices = match (enhancements.any_enabled(), indices) {
        (true, None) => return Err(Error::MissingIndices),
        (_, idx) => idx,
    };
    if let Some(idx) = indices {
        if idx.len() != shards.len() {
            return Err(Error::Shape(format!(
                "{} indices for {} clients",
                idx.len(),
                shards.len()
            )));
        }
    }

    let seed = config.seed.expect("validated");
    let m = shards.len();
    let k = config.cohort_size(m);
    let d_emb = shards[0].d_emb();
    let n_classes = shards[0].n_classes();
    let sample_counts: Vec<usize> = shards.iter().map(ClientShard::n_samples).collect();

    let mut init_rng = stream(seed, ns::FL_INIT, 0, 0);
    let mut model = GlobalModel::init(d_emb, config.hidden_dim, n_classes, &mut init_rng)?;

    let mut sampler = match &enhancements.sampling {
        Some(cfg) => Some(SamplerState::new(m, cfg)?),
        None => None,
    };
    let mut aggregator = match &enhancements.aggregation {
        Some(cfg) => Some(AggregatorState::new(m, cfg)?),
        None => None,
    };
    // Regularizer state persists per client across the rounds it is selected
    // in; it is created lazily from the client's own stream.
    let mut reg_slots: Vec<Option<LocalRegParams>> = vec![None; m];
    let mut server_buffer: Vec<f64> = Vec::new();

    let mut logs = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds as u32 {
        let mut select_rng = stream(seed, ns::FL_SELECT, round as u64, 0);
        let (selected, probabilities) = match (&mut sampler, indices) {
            (Some(state), Some(idx)) => {
                let outcome = state.sample(idx, &sample_counts, k, round, &mut select_rng)?;
                let probs = outcome
                    .selected
                    .iter()
                    .map(|&id| outcome.probabilities[id as usize])
                    .collect();
                (outcome.selected, probs)
            }
            _ => {
                let picks = sample_without_replacement(m, k, &mut select_rng);
                let uniform = 1.0 / m as f64;
                (
                    picks.iter().map(|&i| i as u32).collect::<Vec<u32>>(),
                    vec![uniform; picks.len()],
                )
            }
        };

        // Local training, optionally in parallel; merge order is fixed by the
        // ascending `selected` list either way.
        if let (Some(reg_cfg), Some(idx)) = (&enhancements.local_reg, indices) {
            for &id in &selected {
                if reg_slots[id as usize].is_none() {
                    let mut reg_rng = stream(seed, ns::FL_REG_INIT, id as u64, 0);
                    reg_slots[id as usize] = Some(LocalRegParams::init(
                        config.hidden_dim,
                        n_classes,
                        idx,
                        *reg_cfg,
                        &mut reg_rng,
                    )?);
                }
            }
        }
        let jobs: Vec<(usize, Option<LocalRegParams>)> = selected
            .iter()
            .map(|&id| (id as usize, reg_slots[id as usize].take()))
            .collect();
        let run_one = |(shard_idx, mut reg): (usize, Option<LocalRegParams>)| {
            let shard = &shards[shard_idx];
            let mut rng = stream(seed, ns::FL_LOCAL, round as u64, shard.client_id as u64);
            let update = local_train(&model, shard, config, reg.as_mut(), &mut rng)?;
            Ok::<_, Error>((shard_idx, update, reg))
        };
        let results: Vec<(usize, ClientUpdate, Option<LocalRegParams>)> =
            if config.parallel_clients {
                jobs.into_par_iter().map(run_one).collect::<Result<_>>()?
            } else {
                jobs.into_iter().map(run_one).collect::<Result<_>>()?
            };
        let mut updates = Vec::with_capacity(results.len());
        for (shard_idx, update, reg) in results {
            reg_slots[shard_idx] = reg;
            updates.push(update);
        }

        let cohort: Vec<(u32, usize)> = updates
            .iter()
            .map(|u| (u.client_id, u.n_samples))
            .collect();
        let weights = match (&mut aggregator, indices) {
            (Some(state), Some(idx)) => {
                state.update(idx, &cohort)?;
                state.weights(&cohort)?
            }
            _ => {
                let total: usize = cohort.iter().map(|&(_, n)| n).sum();
                cohort
                    .iter()
                    .map(|&(_, n)| n as f64 / total as f64)
                    .collect()
            }
        };
        let weight_sum: f64 = weights.iter().sum();
        if (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::NonFinite(format!(
                "aggregation weights sum to {weight_sum} in round {round}"
            )));
        }

        let aggregated = aggregate(&updates, &weights)?;
        model = match config.server {
            ServerOpt::FedAvg => server_step_fedavg(&model, aggregated),
            ServerOpt::FedAvgM { momentum } => {
                server_step_fedavgm(&model, &aggregated, &mut server_buffer, momentum)?
            }
        };

        let report = evaluate(&model, shards, Split::Test)?;
        logs.push(RoundLog {
            round,
            selected,
            probabilities,
            aggregation_weights: weights,
            mean_accuracy: report.mean_accuracy,
            per_client_accuracy: report.per_client,
        });
    }
    Ok(logs)
}

/// Writes the round stream as CSV: one row per round with `;`-joined
/// per-client fields. Float formatting is shortest-round-trip, so identical
/// runs produce byte-identical files.
pub fn write_round_csv(logs: &[RoundLog], path: &Path) -> Result<()> {
    let mut out = String::from("round,client_ids,probs,agg_weights,mean_acc\n");
    for log in logs {
        let ids = log
            .selected
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let probs = log
            .probabilities
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let weights = log
            .aggregation_weights
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{ids},{probs},{weights},{}\n",
            log.round, log.mean_accuracy
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

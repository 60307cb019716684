//! Training strategies for the index network.
//!
//! Global: every client contributes one batch of samples to a server-side
//! pool, which is trained centrally. Federated: standard parameter averaging
//! over locally trained copies, with uniform client selection.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;

use crate::embeddings::ClientShard;
use crate::error::{Error, Result};
use crate::rng::{ns, sample_without_replacement, stream};
use crate::smallnet::{sgd_step, Matrix, ParamTensors, SgdState};

use super::losses::objective_gradients;
use super::{DsaIgnParams, IndexGenConfig};

/// Shuffled minibatch index plan for one epoch: a fresh permutation of
/// `0..n`, chunked into batches of `batch_size` (last batch may be short).
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Plain SGD over `(images, labels)` for `epochs` epochs, reshuffling every
/// epoch from `rng`. Aborts on the first non-finite loss.
pub(crate) fn train_epochs(
    params: &mut DsaIgnParams,
    images: &Matrix,
    labels: &Matrix,
    epochs: usize,
    config: &IndexGenConfig,
    state: &mut SgdState,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    for epoch in 0..epochs {
        for batch in epoch_batches(images.rows(), config.batch_size, rng) {
            let d = images.gather_rows(&batch);
            let l = labels.gather_rows(&batch);
            let (value, grads) = objective_gradients(params, &d, &l, config)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "index objective at epoch {epoch}"
                )));
            }
            sgd_step(params, &grads, state)?;
        }
    }
    Ok(())
}

fn validate_shards(shards: &[ClientShard]) -> Result<usize> {
    if shards.is_empty() {
        return Err(Error::Empty("no client shards".into()));
    }
    let d_emb = shards[0].d_emb();
    for shard in shards {
        if shard.pairs.is_empty() {
            return Err(Error::Empty(format!(
                "client {} has no samples",
                shard.client_id
            )));
        }
        if shard.d_emb() != d_emb {
            return Err(Error::Shape(format!(
                "client {} has d_emb {}, expected {d_emb}",
                shard.client_id,
                shard.d_emb()
            )));
        }
    }
    Ok(d_emb)
}

fn init_params(d_emb: usize, config: &IndexGenConfig, seed: u64) -> Result<DsaIgnParams> {
    let d_index = config.d_index.unwrap_or(d_emb);
    let mut rng = stream(seed, ns::INDEX_INIT, 0, 0);
    DsaIgnParams::init(d_emb, d_index, config.recon_hidden, &mut rng)
}

/// Global strategy: each client contributes `min(batch_size, n_i)` samples
/// drawn without replacement to a server pool, which is then trained with
/// shuffled minibatch SGD for `config.epochs` epochs.
pub fn train_global(shards: &[ClientShard], config: &IndexGenConfig) -> Result<DsaIgnParams> {
    config.validate()?;
    let d_emb = validate_shards(shards)?;
    let seed = config.seed.expect("validated");
    let mut params = init_params(d_emb, config, seed)?;

    let mut image_rows: Vec<Vec<f64>> = Vec::new();
    let mut label_rows: Vec<Vec<f64>> = Vec::new();
    for shard in shards {
        let k = config.batch_size.min(shard.pairs.len());
        let mut rng = stream(seed, ns::INDEX_POOL, shard.client_id as u64, 0);
        for idx in sample_without_replacement(shard.pairs.len(), k, &mut rng) {
            image_rows.push(shard.pairs[idx].image_emb.clone());
            label_rows.push(shard.pairs[idx].label_emb.clone());
        }
    }
    let images = Matrix::from_rows(&image_rows)?;
    let labels = Matrix::from_rows(&label_rows)?;

    let mut state = SgdState::new(config.learning_rate, 0.0, 0.0)?;
    let mut rng = stream(seed, ns::INDEX_SHUFFLE, 0, 0);
    train_epochs(
        &mut params,
        &images,
        &labels,
        config.epochs,
        config,
        &mut state,
        &mut rng,
    )?;
    Ok(params)
}

/// Federated strategy: per round, a uniform sample of `ceil(fraction * M)`
/// clients runs `local_epochs` of SGD on its own pairs; the server replaces
/// the parameters with the sample-count-weighted average.
pub fn train_federated(shards: &[ClientShard], config: &IndexGenConfig) -> Result<DsaIgnParams> {
    config.validate()?;
    let d_emb = validate_shards(shards)?;
    let seed = config.seed.expect("validated");
    let mut params = init_params(d_emb, config, seed)?;

    let client_data: Vec<(Matrix, Matrix)> = shards
        .iter()
        .map(|s| {
            Ok((
                ClientShard::image_matrix(&s.pairs)?,
                ClientShard::label_matrix(&s.pairs)?,
            ))
        })
        .collect::<Result<_>>()?;

    let m = shards.len();
    let k = ((config.fraction * m as f64).ceil() as usize).clamp(1, m);
    for round in 0..config.rounds {
        let mut select_rng = stream(seed, ns::INDEX_SELECT, round as u64, 0);
        let selected = sample_without_replacement(m, k, &mut select_rng);

        let total_samples: usize = selected.iter().map(|&i| shards[i].pairs.len()).sum();
        let mut averaged = vec![0.0; params.param_count()];
        for &idx in &selected {
            let shard = &shards[idx];
            let mut local = params.clone();
            let mut state = SgdState::new(config.learning_rate, 0.0, 0.0)?;
            let mut rng = stream(seed, ns::INDEX_LOCAL, round as u64, shard.client_id as u64);
            let (images, labels) = &client_data[idx];
            train_epochs(
                &mut local,
                images,
                labels,
                config.local_epochs,
                config,
                &mut state,
                &mut rng,
            )?;
            let weight = shard.pairs.len() as f64 / total_samples as f64;
            for (acc, v) in averaged.iter_mut().zip(local.to_flat()) {
                *acc += weight * v;
            }
        }
        params.load_flat(&averaged)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{synth_client_shards, SynthesisSpec};
    use crate::index_gen::total_loss;

    fn shards(n_clients: u32, samples: [u32; 2], seed: u64) -> Vec<ClientShard> {
        synth_client_shards(&SynthesisSpec {
            n_classes: 3,
            n_domains: 1,
            clients_per_domain: n_clients,
            samples_per_client: samples,
            d_emb: 8,
            label_align: 1.0,
            domain_strength: 0.0,
            noise_sigma: 0.3,
            dirichlet_alpha: None,
            seed: Some(seed),
        })
        .unwrap()
    }

    fn config(epochs: usize) -> IndexGenConfig {
        IndexGenConfig {
            epochs,
            batch_size: 16,
            seed: Some(7),
            ..IndexGenConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = shards(3, [5, 8], 1);
        let trained = train_global(&data, &config(0)).unwrap();
        let fresh = init_params(8, &config(0), 7).unwrap();
        assert_eq!(trained, fresh);
    }

    #[test]
    fn single_sample_single_epoch_takes_one_step() {
        let data = shards(1, [1, 1], 2);
        let trained = train_global(&data, &config(1)).unwrap();
        let fresh = init_params(8, &config(1), 7).unwrap();
        assert_ne!(trained, fresh);
    }

    #[test]
    fn training_reduces_the_objective() {
        let data = shards(4, [20, 20], 3);
        let cfg = config(60);
        let initial = init_params(8, &cfg, 7).unwrap();
        let trained = train_global(&data, &cfg).unwrap();

        let mut image_rows = Vec::new();
        let mut label_rows = Vec::new();
        for s in &data {
            for p in &s.pairs {
                image_rows.push(p.image_emb.clone());
                label_rows.push(p.label_emb.clone());
            }
        }
        let images = Matrix::from_rows(&image_rows).unwrap();
        let labels = Matrix::from_rows(&label_rows).unwrap();
        let before = total_loss(&initial, &images, &labels, &cfg).unwrap();
        let after = total_loss(&trained, &images, &labels, &cfg).unwrap();
        assert!(
            after < before,
            "loss did not decrease: {before} -> {after}"
        );
    }

    #[test]
    fn federated_zero_rounds_returns_initial_params() {
        let data = shards(3, [5, 8], 4);
        let cfg = IndexGenConfig {
            rounds: 0,
            ..config(0)
        };
        let trained = train_federated(&data, &cfg).unwrap();
        assert_eq!(trained, init_params(8, &cfg, 7).unwrap());
    }

    #[test]
    fn degenerate_federation_matches_sequential_local_training() {
        // One client at fraction 1: each round is exactly local_epochs of SGD
        // on that client, and the weighted average of one model is itself.
        let data = shards(1, [12, 12], 5);
        let cfg = IndexGenConfig {
            rounds: 3,
            local_epochs: 2,
            fraction: 1.0,
            ..config(0)
        };
        let federated = train_federated(&data, &cfg).unwrap();

        let mut reference = init_params(8, &cfg, 7).unwrap();
        let images = ClientShard::image_matrix(&data[0].pairs).unwrap();
        let labels = ClientShard::label_matrix(&data[0].pairs).unwrap();
        for round in 0..3u64 {
            let mut state = SgdState::new(cfg.learning_rate, 0.0, 0.0).unwrap();
            let mut rng = stream(7, ns::INDEX_LOCAL, round, 0);
            train_epochs(
                &mut reference,
                &images,
                &labels,
                2,
                &cfg,
                &mut state,
                &mut rng,
            )
            .unwrap();
        }
        assert_eq!(federated, reference);
    }

    #[test]
    fn federated_average_with_equal_counts_is_the_plain_mean() {
        // Check the parameter averaging against a direct mean computed here.
        let data = shards(4, [10, 10], 6);
        let cfg = IndexGenConfig {
            rounds: 1,
            local_epochs: 1,
            fraction: 1.0,
            ..config(0)
        };
        let federated = train_federated(&data, &cfg).unwrap();

        let initial = init_params(8, &cfg, 7).unwrap();
        let mut locals = Vec::new();
        for shard in &data {
            let mut local = initial.clone();
            let mut state = SgdState::new(cfg.learning_rate, 0.0, 0.0).unwrap();
            let mut rng = stream(7, ns::INDEX_LOCAL, 0, shard.client_id as u64);
            let images = ClientShard::image_matrix(&shard.pairs).unwrap();
            let labels = ClientShard::label_matrix(&shard.pairs).unwrap();
            train_epochs(&mut local, &images, &labels, 1, &cfg, &mut state, &mut rng).unwrap();
            locals.push(local.to_flat());
        }
        let direct: Vec<f64> = (0..locals[0].len())
            .map(|i| {
                let mut acc = 0.0;
                for l in &locals {
                    acc += 0.25 * l[i];
                }
                acc
            })
            .collect();
        let got = federated.to_flat();
        for (a, b) in got.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_shard_list_is_an_error() {
        assert!(train_global(&[], &config(1)).is_err());
        assert!(train_federated(&[], &config(1)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = shards(3, [8, 12], 8);
        let cfg = config(3);
        assert_eq!(
            train_global(&data, &cfg).unwrap(),
            train_global(&data, &cfg).unwrap()
        );
        let fed_cfg = IndexGenConfig {
            rounds: 2,
            local_epochs: 1,
            fraction: 0.5,
            ..cfg
        };
        assert_eq!(
            train_federated(&data, &fed_cfg).unwrap(),
            train_federated(&data, &fed_cfg).unwrap()
        );
    }

    #[test]
    fn epoch_batches_cover_all_indices() {
        let mut rng = stream(1, 50, 0, 0);
        let batches = epoch_batches(10, 3, &mut rng);
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

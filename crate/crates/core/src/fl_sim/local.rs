//! Local client training: minibatch SGD on cross-entropy, optionally with
//! the index regularizer added to the objective.

use rand_chacha::ChaCha20Rng;

use crate::embeddings::ClientShard;
use crate::enhancements::local_reg::{build_reg_term, register_reg};
use crate::enhancements::{LocalRegParams, LocalRegTrainable};
use crate::error::{Error, Result};
use crate::index_gen::epoch_batches;
use crate::smallnet::tape::{mlp_forward_tape, mlp_grads, register_mlp, Tape};
use crate::smallnet::{sgd_step, DenseParams, Matrix, SgdState};

use super::{FlConfig, GlobalModel};

/// One client's contribution to a round: full post-training parameters, its
/// sample count, and the mean training loss over all local steps.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub model: GlobalModel,
    pub n_samples: usize,
    pub train_loss: f64,
}

/// Runs `local_epochs` of minibatch SGD on the shard's train split, starting
/// from a copy of `model` (the input is not mutated). When `reg` is supplied
/// its trainable tensors are updated in place alongside the model.
pub fn local_train(
    model: &GlobalModel,
    shard: &ClientShard,
    config: &FlConfig,
    mut reg: Option<&mut LocalRegParams>,
    rng: &mut ChaCha20Rng,
) -> Result<ClientUpdate> {
    let train = shard.train_pairs();
    if train.is_empty() {
        return Err(Error::Empty(format!(
            "client {} has no training samples",
            shard.client_id
        )));
    }
    let images = ClientShard::image_matrix(train)?;
    let labels = ClientShard::labels(train);

    let mut local = model.clone();
    let mut model_state = SgdState::new(config.learning_rate, config.momentum, config.weight_decay)?;
    let mut reg_state = SgdState::new(config.learning_rate, config.momentum, config.weight_decay)?;

    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..config.local_epochs {
        for batch in epoch_batches(train.len(), config.batch_size, rng) {
            let x = images.gather_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let backbone_vars = register_mlp(&mut tape, &local.backbone);
            let head_w = tape.leaf(local.head.weight.clone());
            let head_b = tape.leaf(
                Matrix::from_vec(1, local.head.bias.len(), local.head.bias.clone())
                    .expect("bias row"),
            );
            let xv = tape.leaf(x);
            let features = mlp_forward_tape(&mut tape, &backbone_vars, xv)?;
            let logits = tape.dense(features, head_w, head_b)?;
            let ce = tape.cross_entropy_mean(logits, &y)?;

            let (loss, reg_vars) = match reg.as_deref() {
                Some(reg_params) if reg_params.config.weight > 0.0 => {
                    let vars = register_reg(&mut tape, reg_params);
                    let term =
                        build_reg_term(&mut tape, &vars, features, logits, &reg_params.config)?;
                    (tape.add(ce, term)?, Some(vars))
                }
                _ => (ce, None),
            };

            let value = tape.value(loss).scalar();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "local objective on client {}",
                    shard.client_id
                )));
            }
            loss_sum += value;
            steps += 1;

            let grads = tape.backward(loss)?;
            let model_grads = GlobalModel {
                backbone: mlp_grads(&grads, &tape, &backbone_vars),
                head: DenseParams {
                    weight: grads.get(&tape, head_w),
                    bias: grads.get(&tape, head_b).data().to_vec(),
                },
            };
            sgd_step(&mut local, &model_grads, &mut model_state)?;

            if let (Some(reg_params), Some(vars)) = (reg.as_deref_mut(), reg_vars) {
                let reg_grads = LocalRegTrainable {
                    projection: grads.get(&tape, vars.projection),
                    proj_head: DenseParams {
                        weight: grads.get(&tape, vars.head_weight),
                        bias: grads.get(&tape, vars.head_bias).data().to_vec(),
                    },
                };
                sgd_step(&mut reg_params.trainable, &reg_grads, &mut reg_state)?;
            }
        }
    }

    Ok(ClientUpdate {
        client_id: shard.client_id,
        model: local,
        n_samples: shard.n_samples(),
        train_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{synth_client_shards, SynthesisSpec};
    use crate::rng::{ns, stream};
    use crate::smallnet::ParamTensors;

    fn shard() -> ClientShard {
        synth_client_shards(&SynthesisSpec {
            n_classes: 3,
            n_domains: 1,
            clients_per_domain: 1,
            samples_per_client: [20, 20],
            d_emb: 8,
            label_align: 0.9,
            domain_strength: 0.0,
            noise_sigma: 0.2,
            dirichlet_alpha: None,
            seed: Some(6),
        })
        .unwrap()
        .remove(0)
    }

    fn config() -> FlConfig {
        FlConfig {
            local_epochs: 2,
            batch_size: 8,
            hidden_dim: 8,
            seed: Some(1),
            ..FlConfig::default()
        }
    }

    fn model(cfg: &FlConfig) -> GlobalModel {
        let mut r = stream(1, ns::FL_INIT, 0, 0);
        GlobalModel::init(8, cfg.hidden_dim, 3, &mut r).unwrap()
    }

    #[test]
    fn zero_epochs_returns_the_global_model() {
        let cfg = FlConfig {
            local_epochs: 0,
            ..config()
        };
        let m = model(&cfg);
        let mut rng = stream(1, ns::FL_LOCAL, 1, 0);
        let update = local_train(&m, &shard(), &cfg, None, &mut rng).unwrap();
        assert_eq!(update.model, m);
        assert_eq!(update.n_samples, 20);
    }

    #[test]
    fn zero_learning_rate_keeps_params_but_reports_loss() {
        let cfg = FlConfig {
            learning_rate: 0.0,
            ..config()
        };
        let m = model(&cfg);
        let mut rng = stream(2, ns::FL_LOCAL, 1, 0);
        let update = local_train(&m, &shard(), &cfg, None, &mut rng).unwrap();
        assert_eq!(update.model, m);
        assert!(update.train_loss > 0.0);
    }

    #[test]
    fn single_full_batch_step_matches_manual_sgd() {
        // One epoch, full batch, no momentum: the update must equal a single
        // hand-applied step on the batch gradient.
        let cfg = FlConfig {
            local_epochs: 1,
            batch_size: 64,
            momentum: 0.0,
            weight_decay: 0.0,
            ..config()
        };
        let m = model(&cfg);
        let s = shard();
        let mut rng = stream(3, ns::FL_LOCAL, 1, 0);
        let update = local_train(&m, &s, &cfg, None, &mut rng).unwrap();

        // Recreate the same batch order.
        let mut rng2 = stream(3, ns::FL_LOCAL, 1, 0);
        let train = s.train_pairs();
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut rng2);
        assert_eq!(batches.len(), 1);
        let images = ClientShard::image_matrix(train).unwrap();
        let labels = ClientShard::labels(train);
        let x = images.gather_rows(&batches[0]);
        let y: Vec<usize> = batches[0].iter().map(|&i| labels[i]).collect();

        let mut tape = Tape::new();
        let bb = register_mlp(&mut tape, &m.backbone);
        let hw = tape.leaf(m.head.weight.clone());
        let hb = tape.leaf(Matrix::from_vec(1, m.head.bias.len(), m.head.bias.clone()).unwrap());
        let xv = tape.leaf(x);
        let f = mlp_forward_tape(&mut tape, &bb, xv).unwrap();
        let logits = tape.dense(f, hw, hb).unwrap();
        let ce = tape.cross_entropy_mean(logits, &y).unwrap();
        let grads = tape.backward(ce).unwrap();
        let g = GlobalModel {
            backbone: mlp_grads(&grads, &tape, &bb),
            head: DenseParams {
                weight: grads.get(&tape, hw),
                bias: grads.get(&tape, hb).data().to_vec(),
            },
        };
        let mut expected = m.clone();
        let mut state = SgdState::new(cfg.learning_rate, 0.0, 0.0).unwrap();
        sgd_step(&mut expected, &g, &mut state).unwrap();
        assert_eq!(update.model, expected);
    }

    #[test]
    fn regularized_training_updates_projection_params() {
        use crate::enhancements::LocalRegConfig;
        use crate::index_gen::ClientIndex;

        let cfg = config();
        let m = model(&cfg);
        let indices = vec![ClientIndex {
            beta_f: vec![0.5; 4],
            beta_l: vec![0.5; 8],
        }];
        let mut reg_rng = stream(4, ns::FL_REG_INIT, 0, 0);
        let mut reg = LocalRegParams::init(
            cfg.hidden_dim,
            3,
            &indices,
            LocalRegConfig::default(),
            &mut reg_rng,
        )
        .unwrap();
        let before = reg.trainable.to_flat();
        let mut rng = stream(4, ns::FL_LOCAL, 1, 0);
        let update = local_train(&m, &shard(), &cfg, Some(&mut reg), &mut rng).unwrap();
        assert_ne!(before, reg.trainable.to_flat());
        assert!(update.train_loss.is_finite());
    }
}

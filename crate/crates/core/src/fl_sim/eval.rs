//! Per-client evaluation on the fixed train/test split.

use crate::embeddings::ClientShard;
use crate::error::{Error, Result};
use crate::smallnet::Matrix;

use super::GlobalModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Accuracy per client plus the unweighted mean over clients that have data
/// in the split. Clients with an empty split are excluded and recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub per_client: Vec<(u32, Option<f64>)>,
    /// Clients skipped because their split is empty.
    pub excluded: Vec<u32>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &GlobalModel, shards: &[ClientShard], split: Split) -> Result<EvalReport> {
    if shards.is_empty() {
        return Err(Error::Empty("evaluate: no shards".into()));
    }
    let mut per_client = Vec::with_capacity(shards.len());
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for shard in shards {
        let pairs = match split {
            Split::Train => shard.train_pairs(),
            Split::Test => shard.test_pairs(),
        };
        if pairs.is_empty() {
            excluded.push(shard.client_id);
            per_client.push((shard.client_id, None));
            continue;
        }
        let x = ClientShard::image_matrix(pairs)?;
        let logits = model.logits(&x)?;
        let mut correct = 0usize;
        for (i, pair) in pairs.iter().enumerate() {
            if argmax(logits.row(i)) == pair.label as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / pairs.len() as f64;
        per_client.push((shard.client_id, Some(acc)));
        total += acc;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Empty(
            "evaluate: every client has an empty split".into(),
        ));
    }
    Ok(EvalReport {
        mean_accuracy: total / counted as f64,
        per_client,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{synth_client_shards, EmbeddingPair, SynthesisSpec};
    use crate::rng::stream;
    use crate::smallnet::{Activation, DenseParams, MlpLayer, MlpParams};

    fn shards() -> Vec<ClientShard> {
        synth_client_shards(&SynthesisSpec {
            n_classes: 2,
            n_domains: 1,
            clients_per_domain: 3,
            samples_per_client: [20, 20],
            d_emb: 8,
            label_align: 1.0,
            domain_strength: 0.0,
            noise_sigma: 0.0,
            dirichlet_alpha: None,
            seed: Some(3),
        })
        .unwrap()
    }

    /// Backbone = identity, head rows = class embeddings: logits are cosine
    /// scores, so noiseless aligned data is classified perfectly.
    fn oracle_model(shard: &ClientShard) -> GlobalModel {
        let d = shard.d_emb();
        let backbone = MlpParams {
            layers: vec![MlpLayer {
                params: DenseParams {
                    weight: Matrix::identity(d),
                    bias: vec![0.0; d],
                },
                activation: Activation::Identity,
            }],
        };
        let head = DenseParams {
            weight: shard.class_embeddings.transpose(),
            bias: vec![0.0; shard.n_classes()],
        };
        GlobalModel { backbone, head }
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        let data = shards();
        let report = evaluate(&oracle_model(&data[0]), &data, Split::Test).unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn constant_predictor_gets_the_base_rate() {
        // A model that always predicts class 0 scores the class-0 fraction.
        let data = shards();
        let d = data[0].d_emb();
        let backbone = MlpParams {
            layers: vec![MlpLayer {
                params: DenseParams {
                    weight: Matrix::zeros(d, d),
                    bias: vec![0.0; d],
                },
                activation: Activation::Identity,
            }],
        };
        let head = DenseParams {
            weight: Matrix::zeros(d, 2),
            bias: vec![1.0, 0.0],
        };
        let model = GlobalModel { backbone, head };
        let report = evaluate(&model, &data, Split::Test).unwrap();
        for (client, acc) in &report.per_client {
            let shard = &data[*client as usize];
            let zeros = shard
                .test_pairs()
                .iter()
                .filter(|p| p.label == 0)
                .count() as f64;
            let expect = zeros / shard.test_pairs().len() as f64;
            assert_eq!(acc.unwrap(), expect);
        }
    }

    #[test]
    fn empty_test_split_excludes_the_client() {
        let mut data = shards();
        // One-sample client: ceil(0.8) = 1 train sample, empty test split.
        let lone = EmbeddingPair {
            image_emb: data[0].pairs[0].image_emb.clone(),
            label_emb: data[0].pairs[0].label_emb.clone(),
            label: data[0].pairs[0].label,
        };
        data.push(ClientShard {
            client_id: 99,
            domain_id: 0,
            class_embeddings: data[0].class_embeddings.clone(),
            pairs: vec![lone],
        });
        let report = evaluate(&oracle_model(&data[0]), &data, Split::Test).unwrap();
        assert_eq!(report.excluded, vec![99]);
        assert_eq!(report.per_client.last().unwrap().1, None);
        assert_eq!(report.mean_accuracy, 1.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = shards();
        let mut r = stream(9, 71, 0, 0);
        let model = GlobalModel::init(8, 6, 2, &mut r).unwrap();
        let a = evaluate(&model, &data, Split::Test).unwrap();
        let b = evaluate(&model, &data, Split::Test).unwrap();
        assert_eq!(a, b);
    }
}

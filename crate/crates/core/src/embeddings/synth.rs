//! Dataset synthesis: orthonormal class/domain directions plus seeded
//! per-client sampling of labels and image embeddings.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{ns, stream};
use crate::smallnet::ops::norm;
use crate::smallnet::Matrix;

use super::{ClientShard, EmbeddingPair, SynthesisSpec};

/// Draws `n` orthonormal vectors in `R^d` by Gram-Schmidt over seeded
/// Gaussian draws. Redraws a vector if it is numerically dependent on the
/// ones before it.
fn orthonormal_vectors(n: usize, d: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    debug_assert!(n <= d);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &basis {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let len = norm(&v);
        if len < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= len;
        }
        basis.push(v);
    }
    basis
}

/// Generates `n_classes` mutually orthonormal unit label embeddings,
/// deterministic per seed.
pub fn synth_label_embeddings(n_classes: u32, d_emb: u32, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_classes > d_emb {
        return Err(Error::Config(format!(
            "cannot fit {n_classes} orthonormal label embeddings in {d_emb} dimensions"
        )));
    }
    let mut rng = stream(seed, ns::LABEL_BASIS, 0, 0);
    Ok(orthonormal_vectors(n_classes as usize, d_emb as usize, &mut rng))
}

/// Draws a `Dirichlet(alpha, .., alpha)` proportion vector of length `n` by
/// normalizing Gamma(alpha, 1) draws.
pub fn dirichlet_proportions(alpha: f64, n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    for _ in 0..100 {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
    // All draws underflowed to zero 100 times in a row; with alpha > 0 this
    // is practically unreachable. Fall back to a point mass.
    let mut p = vec![0.0; n];
    p[0] = 1.0;
    p
}

fn sample_categorical(proportions: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    proportions.len() - 1
}

/// Generates the full client population for `spec`. Client ids group domains
/// contiguously: clients `0..clients_per_domain` belong to domain 0, the next
/// block to domain 1, and so on. Deterministic per spec (including seed).
pub fn synth_client_shards(spec: &SynthesisSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let seed = spec.seed.expect("validated");
    let (n_classes, n_domains) = (spec.n_classes as usize, spec.n_domains as usize);
    let d_emb = spec.d_emb as usize;

    // One basis stream yields class directions first, then domain directions,
    // so the class rows match `synth_label_embeddings` for the same seed.
    let mut basis_rng = stream(seed, ns::LABEL_BASIS, 0, 0);
    let basis = orthonormal_vectors(n_classes + n_domains, d_emb, &mut basis_rng);
    let (label_dirs, domain_dirs) = basis.split_at(n_classes);
    let class_embeddings = Matrix::from_rows(label_dirs)?;

    let mut shards = Vec::with_capacity(spec.n_clients() as usize);
    for client_id in 0..spec.n_clients() {
        let domain_id = client_id / spec.clients_per_domain;
        let e_domain = &domain_dirs[domain_id as usize];

        let [lo, hi] = spec.samples_per_client;
        let n_samples = stream(seed, ns::CLIENT_COUNT, client_id as u64, 0)
            .random_range(lo..=hi) as usize;

        let proportions = match spec.dirichlet_alpha {
            Some(alpha) => {
                let mut rng = stream(seed, ns::CLIENT_PROPORTIONS, client_id as u64, 0);
                dirichlet_proportions(alpha, n_classes, &mut rng)
            }
            None => vec![1.0 / n_classes as f64; n_classes],
        };

        let mut label_rng = stream(seed, ns::CLIENT_LABELS, client_id as u64, 0);
        let mut noise_rng = stream(seed, ns::CLIENT_NOISE, client_id as u64, 0);
        let mut pairs = Vec::with_capacity(n_samples);
        for sample_idx in 0..n_samples {
            let label = sample_categorical(&proportions, &mut label_rng);
            let label_emb = label_dirs[label].clone();

            let mut image: Vec<f64> = label_emb
                .iter()
                .zip(e_domain)
                .map(|(l, e)| spec.label_align * l + spec.domain_strength * e)
                .collect();
            if spec.noise_sigma > 0.0 {
                for v in &mut image {
                    *v += spec.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
                }
            }
            let len = norm(&image);
            if len == 0.0 {
                return Err(Error::ZeroNorm(format!(
                    "client {client_id} sample {sample_idx}: all signal strengths are zero"
                )));
            }
            for v in &mut image {
                *v /= len;
            }
            pairs.push(EmbeddingPair {
                image_emb: image,
                label_emb,
                label: label as u32,
            });
        }

        shards.push(ClientShard {
            client_id,
            domain_id,
            class_embeddings: class_embeddings.clone(),
            pairs,
        });
    }
    Ok(shards)
}

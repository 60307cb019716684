//! Aggregation weights from discounted historical similarity.
//!
//! Per round the accumulator folds the similarity of every client to the
//! selected cohort into `A_i <- gamma * A_i + S_i`, so `A_i` carries the
//! geometric series `sum_tau gamma^(t - tau) S(beta_i, C^tau)`. The weights
//! over the selected cohort maximize
//!
//! `sum_i p_i A_i + lambda1 * sum_i p_i log(q_i / p_i)` subject to
//! `sum p_i = 1`,
//!
//! whose closed form is `p_i ∝ q_i exp(A_i / lambda1)` with the
//! sample-count prior `q_i = n_i / N`. `oracle_solve_aggregation` maximizes
//! the same objective numerically and exists to verify the closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_gen::ClientIndex;

use super::sampler::similarity_to_selected;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    /// Discount on historical similarity, in `[0, 1]`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Heat parameter; larger pulls the weights toward the prior.
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_lambda1() -> f64 {
    1.0
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            gamma: default_gamma(),
            lambda1: default_lambda1(),
        }
    }
}

/// Per-client discounted similarity accumulators.
#[derive(Clone, Debug)]
pub struct AggregatorState {
    accumulators: Vec<f64>,
    gamma: f64,
    lambda1: f64,
}

impl AggregatorState {
    pub fn new(n_clients: usize, config: &AggregationConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.gamma) {
            return Err(Error::Config(format!(
                "gamma = {} must be in [0, 1]",
                config.gamma
            )));
        }
        if config.lambda1 <= 0.0 {
            return Err(Error::Config(format!(
                "lambda1 = {} must be > 0",
                config.lambda1
            )));
        }
        Ok(AggregatorState {
            accumulators: vec![0.0; n_clients],
            gamma: config.gamma,
            lambda1: config.lambda1,
        })
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accumulators
    }

    /// Folds the current round's cohort into every client's accumulator:
    /// `A_i <- gamma * A_i + S(beta_i, cohort)`. Call once per round, right
    /// after selection.
    pub fn update(&mut self, indices: &[ClientIndex], cohort: &[(u32, usize)]) -> Result<()> {
        if indices.len() != self.accumulators.len() {
            return Err(Error::Shape(format!(
                "aggregator has {} clients, got {} indices",
                self.accumulators.len(),
                indices.len()
            )));
        }
        let cohort_refs: Vec<(&ClientIndex, usize)> = cohort
            .iter()
            .map(|&(id, n)| (&indices[id as usize], n))
            .collect();
        for (i, acc) in self.accumulators.iter_mut().enumerate() {
            let s = similarity_to_selected(&indices[i], &cohort_refs)?;
            *acc = self.gamma * *acc + s;
        }
        Ok(())
    }

    /// Aggregation weights over the cohort: `p_i ∝ q_i exp(A_i / lambda1)`
    /// with `q_i = n_i / N`, computed with max-subtraction in the exponent.
    /// Positive, sum to one.
    pub fn weights(&self, cohort: &[(u32, usize)]) -> Result<Vec<f64>> {
        if cohort.is_empty() {
            return Err(Error::Empty("aggregation over an empty cohort".into()));
        }
        let total: usize = cohort.iter().map(|&(_, n)| n).sum();
        if total == 0 {
            return Err(Error::Empty("cohort has zero samples".into()));
        }
        let exponents: Vec<f64> = cohort
            .iter()
            .map(|&(id, _)| self.accumulators[id as usize] / self.lambda1)
            .collect();
        let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnormalized: Vec<f64> = cohort
            .iter()
            .zip(&exponents)
            .map(|(&(_, n), &e)| (n as f64 / total as f64) * (e - max).exp())
            .collect();
        let z: f64 = unnormalized.iter().sum();
        Ok(unnormalized.into_iter().map(|w| w / z).collect())
    }
}

/// Euclidean projection of `v` onto the probability simplex.
fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn aggregation_objective(p: &[f64], a: &[f64], q: &[f64], lambda1: f64) -> f64 {
    let mut obj = 0.0;
    for ((&pi, &ai), &qi) in p.iter().zip(a).zip(q) {
        obj += pi * ai;
        if pi > 0.0 {
            obj += lambda1 * pi * (qi.max(1e-300).ln() - pi.ln());
        }
    }
    obj
}

/// Numerically maximizes the aggregation objective over the probability
/// simplex by projected gradient ascent (10^4 iterations, step 1e-2).
/// `discounted` holds each cohort member's accumulated similarity and
/// `prior` the sample-count prior `q`. Flags non-convergence when the final
/// iteration still moves the objective by more than 1e-10.
pub fn oracle_solve_aggregation(
    discounted: &[f64],
    prior: &[f64],
    lambda1: f64,
) -> Result<Vec<f64>> {
    if discounted.is_empty() || discounted.len() != prior.len() {
        return Err(Error::Shape(format!(
            "oracle: {} similarities vs {} priors",
            discounted.len(),
            prior.len()
        )));
    }
    if lambda1 <= 0.0 {
        return Err(Error::Config("oracle: lambda1 must be > 0".into()));
    }
    let n = discounted.len();
    let mut p = vec![1.0 / n as f64; n];
    let mut prev_obj = aggregation_objective(&p, discounted, prior, lambda1);
    let mut last_change = f64::INFINITY;
    for _ in 0..10_000 {
        let grad: Vec<f64> = p
            .iter()
            .zip(discounted)
            .zip(prior)
            .map(|((&pi, &ai), &qi)| {
                ai + lambda1 * (qi.max(1e-300).ln() - pi.max(1e-300).ln() - 1.0)
            })
            .collect();
        let stepped: Vec<f64> = p.iter().zip(&grad).map(|(&pi, &g)| pi + 1e-2 * g).collect();
        p = project_to_simplex(&stepped);
        let obj = aggregation_objective(&p, discounted, prior, lambda1);
        last_change = (obj - prev_obj).abs();
        prev_obj = obj;
    }
    if last_change > 1e-10 {
        return Err(Error::NotConverged(last_change));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn memoryless_accumulator_equals_current_similarity() {
        let indices = vec![
            ClientIndex {
                beta_f: vec![1.0, 0.0],
                beta_l: vec![1.0, 0.0],
            },
            ClientIndex {
                beta_f: vec![0.0, 1.0],
                beta_l: vec![0.0, 1.0],
            },
        ];
        let mut state = AggregatorState::new(
            2,
            &AggregationConfig {
                gamma: 0.0,
                lambda1: 1.0,
            },
        )
        .unwrap();
        let cohort = vec![(0u32, 4usize)];
        state.update(&indices, &cohort).unwrap();
        state.update(&indices, &cohort).unwrap();
        // gamma = 0 keeps only the latest similarity.
        assert!((state.accumulators()[0] - 1.0).abs() < 1e-12);
        assert!(state.accumulators()[1].abs() < 1e-12);
    }

    #[test]
    fn constant_similarity_accumulates_a_geometric_series() {
        let idx = ClientIndex {
            beta_f: vec![0.6, 0.8],
            beta_l: vec![0.6, 0.8],
        };
        let indices = vec![idx.clone(), idx];
        let gamma = 0.5;
        let mut state = AggregatorState::new(
            2,
            &AggregationConfig { gamma, lambda1: 1.0 },
        )
        .unwrap();
        let cohort = vec![(0u32, 1usize), (1u32, 1usize)];
        let t = 6;
        for _ in 0..t {
            state.update(&indices, &cohort).unwrap();
        }
        // S is identically 1 here, so A = (1 - gamma^t) / (1 - gamma).
        let expect = (1.0 - gamma.powi(t)) / (1.0 - gamma);
        assert!((state.accumulators()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn random_trace_matches_direct_double_sum() {
        let angles = [0.0f64, 0.4, 1.1, 2.0];
        let indices: Vec<ClientIndex> = angles
            .iter()
            .map(|&a| ClientIndex {
                beta_f: vec![a.cos(), a.sin()],
                beta_l: vec![(a * 0.5).cos(), (a * 0.5).sin()],
            })
            .collect();
        let gamma = 0.9;
        let cohorts: Vec<Vec<(u32, usize)>> = vec![
            vec![(0, 3), (2, 5)],
            vec![(1, 2)],
            vec![(2, 4), (3, 1)],
        ];
        let mut state = AggregatorState::new(
            4,
            &AggregationConfig { gamma, lambda1: 1.0 },
        )
        .unwrap();
        for cohort in &cohorts {
            state.update(&indices, cohort).unwrap();
        }
        for i in 0..4 {
            let mut direct = 0.0;
            let t = cohorts.len();
            for (tau, cohort) in cohorts.iter().enumerate() {
                let refs: Vec<(&ClientIndex, usize)> = cohort
                    .iter()
                    .map(|&(id, n)| (&indices[id as usize], n))
                    .collect();
                let s = similarity_to_selected(&indices[i], &refs).unwrap();
                direct += gamma.powi((t - 1 - tau) as i32) * s;
            }
            assert!(
                (state.accumulators()[i] - direct).abs() < 1e-12,
                "client {i}"
            );
        }
    }

    #[test]
    fn equal_accumulators_return_the_prior() {
        let state = AggregatorState {
            accumulators: vec![0.7; 4],
            gamma: 0.5,
            lambda1: 1.0,
        };
        let cohort = vec![(0u32, 1usize), (1, 2), (2, 3), (3, 4)];
        let w = state.weights(&cohort).unwrap();
        for (wi, &(_, n)) in w.iter().zip(&cohort) {
            assert!((wi - n as f64 / 10.0).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_lambda_returns_the_prior() {
        let state = AggregatorState {
            accumulators: vec![0.9, -0.5, 0.2],
            gamma: 0.5,
            lambda1: 1e9,
        };
        let cohort = vec![(0u32, 2usize), (1, 3), (2, 5)];
        let w = state.weights(&cohort).unwrap();
        for (wi, &(_, n)) in w.iter().zip(&cohort) {
            assert!((wi - n as f64 / 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn analytic_two_client_case() {
        // q = [1/2, 1/2], A = [0, ln 4], lambda = 1 -> weights [0.2, 0.8].
        let state = AggregatorState {
            accumulators: vec![0.0, 4.0f64.ln()],
            gamma: 0.5,
            lambda1: 1.0,
        };
        let w = state.weights(&[(0, 7), (1, 7)]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12);
        assert!((w[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn weights_invariant_to_rescaling_sample_counts() {
        let state = AggregatorState {
            accumulators: vec![0.3, -0.2, 0.8],
            gamma: 0.5,
            lambda1: 1.0,
        };
        let a = state.weights(&[(0, 2), (1, 5), (2, 3)]).unwrap();
        let b = state.weights(&[(0, 20), (1, 50), (2, 30)]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_projection_basics() {
        let p = project_to_simplex(&[0.5, 0.5]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        let p = project_to_simplex(&[2.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let p = project_to_simplex(&[-1.0, -2.0, 4.0]);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_uniform_instance_is_uniform() {
        let w = oracle_solve_aggregation(&[0.4; 5], &[0.2; 5], 1.0).unwrap();
        for v in &w {
            assert!((v - 0.2).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_large_lambda_approaches_the_prior() {
        // The entropy term dominates at large lambda, pulling the maximizer
        // onto the prior. (Lambda is bounded here because the pinned fixed
        // step of the ascent cannot track gradients that scale with lambda.)
        let q = [0.2, 0.3, 0.5];
        let w = oracle_solve_aggregation(&[0.01, -0.02, 0.015], &q, 10.0).unwrap();
        for (wi, qi) in w.iter().zip(&q) {
            assert!((wi - qi).abs() < 5e-3, "{wi} vs {qi}");
        }
    }

    #[test]
    fn closed_form_matches_the_numerical_maximizer() {
        let mut rng = crate::rng::stream(123, 81, 0, 0);
        for case in 0..20 {
            let n = rng.random_range(2..=8usize);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw_q: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let qt: f64 = raw_q.iter().sum();
            let q: Vec<f64> = raw_q.iter().map(|v| v / qt).collect();
            let lambda1 = [1.0, 2.0][case % 2];

            let numeric = oracle_solve_aggregation(&a, &q, lambda1).unwrap();
            // Closed form computed directly here.
            let unnorm: Vec<f64> = a
                .iter()
                .zip(&q)
                .map(|(&ai, &qi)| qi * (ai / lambda1).exp())
                .collect();
            let z: f64 = unnorm.iter().sum();
            for (num, closed) in numeric.iter().zip(unnorm.iter().map(|u| u / z)) {
                assert!(
                    (num - closed).abs() < 1e-5,
                    "case {case}: {num} vs {closed}"
                );
            }
        }
    }
}

//! Similarity-guided client sampling with a reselection cooldown.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_gen::ClientIndex;
use crate::smallnet::cosine_sim;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Temperature of the selection softmax; larger means flatter.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { tau: default_tau() }
    }
}

/// Sample-count-weighted mean similarity of `index` to a selected cohort:
/// `(1 / 2N) * sum_j n_j * (cos(beta_f, beta_f_j) + cos(beta_l, beta_l_j))`
/// where `N = sum_j n_j`. Result lies in `[-1, 1]`.
pub fn similarity_to_selected(
    index: &ClientIndex,
    selected: &[(&ClientIndex, usize)],
) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::Empty(
            "similarity_to_selected: empty cohort".into(),
        ));
    }
    let total: usize = selected.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Empty(
            "similarity_to_selected: cohort has zero samples".into(),
        ));
    }
    let mut acc = 0.0;
    for (other, n) in selected {
        let cf = cosine_sim(&index.beta_f, &other.beta_f)?;
        let cl = cosine_sim(&index.beta_l, &other.beta_l)?;
        acc += (*n as f64) * (cf + cl);
    }
    Ok(acc / (2.0 * total as f64))
}

/// Softmax of `score / tau` over eligible clients (ineligible get probability
/// zero), computed with max-subtraction.
pub fn selection_probabilities(scores: &[Option<f64>], tau: f64) -> Vec<f64> {
    let max = scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| match s {
            Some(v) => ((v - max) / tau).exp(),
            None => 0.0,
        })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One round's selection: the chosen clients (ascending) and the selection
/// distribution over all clients at draw time.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutcome {
    pub selected: Vec<u32>,
    pub probabilities: Vec<f64>,
}

/// Sampler bookkeeping across rounds: per-round cohorts with their sample
/// counts, and each client's last selection round for the cooldown rule.
#[derive(Clone, Debug)]
pub struct SamplerState {
    tau: f64,
    n_clients: usize,
    history: Vec<(u32, Vec<(u32, usize)>)>,
    last_selected: Vec<Option<u32>>,
}

impl SamplerState {
    pub fn new(n_clients: usize, config: &SamplingConfig) -> Result<Self> {
        if config.tau <= 0.0 {
            return Err(Error::Config(format!("tau = {} must be > 0", config.tau)));
        }
        if n_clients == 0 {
            return Err(Error::Config("sampler needs at least one client".into()));
        }
        Ok(SamplerState {
            tau: config.tau,
            n_clients,
            history: Vec::new(),
            last_selected: vec![None; n_clients],
        })
    }

    /// Cooldown window `floor(M / (2 |C^{t-1}|))`: clients selected fewer than
    /// this many rounds ago are excluded.
    pub fn cooldown_window(&self) -> u32 {
        match self.history.last() {
            Some((_, cohort)) if !cohort.is_empty() => {
                (self.n_clients as u32) / (2 * cohort.len() as u32)
            }
            _ => 0,
        }
    }

    pub fn history(&self) -> &[(u32, Vec<(u32, usize)>)] {
        &self.history
    }

    /// Draws `k` distinct clients for `round`. The first round (no history)
    /// samples uniformly; later rounds weight clients by their similarity to
    /// the previous cohort, with cooled-down clients excluded. Draws are
    /// sequential without replacement with renormalization after each pick.
    pub fn sample(
        &mut self,
        indices: &[ClientIndex],
        sample_counts: &[usize],
        k: usize,
        round: u32,
        rng: &mut ChaCha20Rng,
    ) -> Result<SelectionOutcome> {
        if indices.len() != self.n_clients || sample_counts.len() != self.n_clients {
            return Err(Error::Shape(format!(
                "sampler has {} clients, got {} indices and {} counts",
                self.n_clients,
                indices.len(),
                sample_counts.len()
            )));
        }
        if k == 0 || k > self.n_clients {
            return Err(Error::Config(format!(
                "cannot select {k} of {} clients",
                self.n_clients
            )));
        }
        if let Some((last_round, _)) = self.history.last() {
            if round <= *last_round {
                return Err(Error::Config(format!(
                    "sampling round {round} is not after round {last_round}"
                )));
            }
        }

        let probabilities = match self.history.last() {
            None => vec![1.0 / self.n_clients as f64; self.n_clients],
            Some((_, cohort)) => {
                let window = self.cooldown_window();
                let eligible: Vec<bool> = self
                    .last_selected
                    .iter()
                    .map(|last| match last {
                        Some(r) => round - r >= window,
                        None => true,
                    })
                    .collect();
                let n_eligible = eligible.iter().filter(|&&e| e).count();
                if n_eligible < k {
                    return Err(Error::Cooldown {
                        eligible: n_eligible,
                        requested: k,
                        window,
                    });
                }
                let cohort_refs: Vec<(&ClientIndex, usize)> = cohort
                    .iter()
                    .map(|&(id, n)| (&indices[id as usize], n))
                    .collect();
                let scores: Vec<Option<f64>> = (0..self.n_clients)
                    .map(|i| {
                        if eligible[i] {
                            similarity_to_selected(&indices[i], &cohort_refs).map(Some)
                        } else {
                            Ok(None)
                        }
                    })
                    .collect::<Result<_>>()?;
                selection_probabilities(&scores, self.tau)
            }
        };

        let mut current = probabilities.clone();
        let mut selected: Vec<u32> = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = current.iter().sum();
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in current.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                if u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding at the upper edge falls back to the last positive entry.
            let pick = pick.unwrap_or_else(|| {
                current
                    .iter()
                    .rposition(|&p| p > 0.0)
                    .expect("some probability mass remains")
            });
            selected.push(pick as u32);
            current[pick] = 0.0;
        }
        selected.sort_unstable();

        for &id in &selected {
            self.last_selected[id as usize] = Some(round);
        }
        let cohort: Vec<(u32, usize)> = selected
            .iter()
            .map(|&id| (id, sample_counts[id as usize]))
            .collect();
        self.history.push((round, cohort));

        Ok(SelectionOutcome {
            selected,
            probabilities,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn unit_index(angle: f64) -> ClientIndex {
        ClientIndex {
            beta_f: vec![angle.cos(), angle.sin()],
            beta_l: vec![angle.cos(), angle.sin()],
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let idx = unit_index(0.7);
        let s = similarity_to_selected(&idx, &[(&idx, 5)]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_cohort_gives_zero() {
        let a = unit_index(0.0);
        let b = unit_index(std::f64::consts::FRAC_PI_2);
        let s = similarity_to_selected(&a, &[(&b, 3)]).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn weighted_cohort_matches_direct_formula() {
        // Two selected clients with n = (1, 3) and hand-set cosines.
        let target = unit_index(0.0);
        let b = unit_index(0.5);
        let c = unit_index(1.2);
        let s = similarity_to_selected(&target, &[(&b, 1), (&c, 3)]).unwrap();
        let direct = (1.0 * (2.0 * 0.5f64.cos()) + 3.0 * (2.0 * 1.2f64.cos())) / (2.0 * 4.0);
        assert!((s - direct).abs() < 1e-12);
    }

    #[test]
    fn empty_cohort_is_an_error() {
        let idx = unit_index(0.1);
        assert!(similarity_to_selected(&idx, &[]).is_err());
    }

    #[test]
    fn probabilities_match_analytic_two_client_case() {
        // Scores 0 and tau * ln 2 give probabilities 1/3 and 2/3.
        let tau = 0.7;
        let p = selection_probabilities(&[Some(0.0), Some(tau * 2.0f64.ln())], tau);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_are_shift_invariant() {
        let base = selection_probabilities(&[Some(0.1), Some(0.6), None, Some(-0.3)], 0.5);
        let shifted =
            selection_probabilities(&[Some(100.1), Some(100.6), None, Some(99.7)], 0.5);
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(base[2], 0.0);
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_tau_flattens_the_distribution() {
        let scores: Vec<Option<f64>> = (0..8).map(|i| Some(i as f64 * 0.2)).collect();
        let p = selection_probabilities(&scores, 1e6);
        for v in &p {
            assert!((v - 0.125).abs() < 1e-3);
        }
    }

    fn make_population(m: usize) -> (Vec<ClientIndex>, Vec<usize>) {
        let indices: Vec<ClientIndex> = (0..m).map(|i| unit_index(i as f64 * 0.3)).collect();
        let counts: Vec<usize> = (0..m).map(|i| 10 + i).collect();
        (indices, counts)
    }

    #[test]
    fn round_one_is_uniform_and_distinct() {
        let (indices, counts) = make_population(10);
        let mut state = SamplerState::new(10, &SamplingConfig::default()).unwrap();
        let mut rng = stream(3, 77, 0, 0);
        let out = state.sample(&indices, &counts, 4, 1, &mut rng).unwrap();
        assert_eq!(out.selected.len(), 4);
        let mut dedup = out.selected.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
        for p in &out.probabilities {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn cooldown_is_respected_over_a_long_trace() {
        // M = 20, K = 2: no client reappears within floor(20/4) = 5 rounds.
        let (indices, counts) = make_population(20);
        let mut state = SamplerState::new(20, &SamplingConfig { tau: 0.5 }).unwrap();
        let mut last_seen: Vec<Option<u32>> = vec![None; 20];
        for round in 1..=200u32 {
            let mut rng = stream(9, 78, round as u64, 0);
            let out = state.sample(&indices, &counts, 2, round, &mut rng).unwrap();
            let total: f64 = out.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for &id in &out.selected {
                if let Some(prev) = last_seen[id as usize] {
                    assert!(
                        round - prev >= 5,
                        "client {id} reselected after {} rounds",
                        round - prev
                    );
                }
                last_seen[id as usize] = Some(round);
            }
        }
    }

    #[test]
    fn too_small_eligible_pool_reports_window() {
        let (indices, counts) = make_population(4);
        let mut state = SamplerState::new(4, &SamplingConfig::default()).unwrap();
        let mut rng = stream(4, 79, 0, 0);
        // Round 1 selects 2 of 4; window is floor(4/4) = 1, so round 2 only
        // excludes clients selected in round 1 if window > gap. With window 1
        // everyone is eligible again; force a clash by selecting everyone.
        state.sample(&indices, &counts, 4, 1, &mut rng).unwrap();
        // window = floor(4 / 8) = 0: no exclusion; all four eligible.
        let out = state.sample(&indices, &counts, 4, 2, &mut rng).unwrap();
        assert_eq!(out.selected.len(), 4);

        let mut strict = SamplerState::new(4, &SamplingConfig::default()).unwrap();
        strict.sample(&indices, &counts, 1, 1, &mut rng).unwrap();
        // window = floor(4/2) = 2: the round-1 pick is excluded in round 2.
        let err = strict.sample(&indices, &counts, 4, 2, &mut rng).unwrap_err();
        match err {
            Error::Cooldown {
                eligible,
                requested,
                window,
            } => {
                assert_eq!((eligible, requested, window), (3, 4, 2));
            }
            other => panic!("expected cooldown error, got {other}"),
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let (indices, counts) = make_population(12);
        let run = || {
            let mut state = SamplerState::new(12, &SamplingConfig::default()).unwrap();
            let mut trace = Vec::new();
            for round in 1..=30u32 {
                let mut rng = stream(5, 80, round as u64, 0);
                trace.push(
                    state
                        .sample(&indices, &counts, 3, round, &mut rng)
                        .unwrap()
                        .selected,
                );
            }
            trace
        };
        assert_eq!(run(), run());
    }
}

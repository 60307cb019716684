//! Dirichlet (LDA-style) label partitioning of a global sample pool.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{ns, stream};

use super::synth::dirichlet_proportions;

/// Assigns every sample index to exactly one of `n_clients` clients, with
/// per-class allocation proportions drawn from `Dirichlet(alpha)` across
/// clients. Smaller `alpha` means more skew.
///
/// No client is left empty: full fresh draws are attempted up to 100 times;
/// if skew still starves some client, single samples are moved over from the
/// currently largest client.
pub fn dirichlet_partition(
    labels: &[u32],
    alpha: f64,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::Config("dirichlet_partition: zero clients".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Config(format!(
            "dirichlet_partition: alpha = {alpha} must be > 0"
        )));
    }
    if labels.len() < n_clients {
        return Err(Error::Config(format!(
            "dirichlet_partition: {} samples cannot cover {} clients",
            labels.len(),
            n_clients
        )));
    }

    let n_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (idx, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(idx);
    }

    let mut rng = stream(seed, ns::PARTITION, 0, 0);
    let mut assignment: Vec<Vec<usize>> = Vec::new();
    for _attempt in 0..100 {
        assignment = vec![Vec::new(); n_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(&mut rng);
            let proportions = dirichlet_proportions(alpha, n_clients, &mut rng);
            // Split points at floor(cumsum * n) mirror the usual LDA recipe.
            let n = shuffled.len();
            let mut cut_prev = 0usize;
            let mut acc = 0.0;
            for (client, &p) in proportions.iter().enumerate() {
                acc += p;
                let cut = if client + 1 == n_clients {
                    n
                } else {
                    ((acc * n as f64).floor() as usize).min(n)
                };
                assignment[client].extend_from_slice(&shuffled[cut_prev..cut.max(cut_prev)]);
                cut_prev = cut.max(cut_prev);
            }
        }
        if assignment.iter().all(|c| !c.is_empty()) {
            return Ok(assignment);
        }
    }

    // Rebalance the last attempt: donate one sample at a time from the
    // largest client.
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else {
            break;
        };
        let donor = assignment
            .iter()
            .enumerate()
            .max_by_key(|(_, c)| c.len())
            .map(|(i, _)| i)
            .expect("nonempty assignment");
        let moved = assignment[donor].pop().expect("largest client nonempty");
        assignment[empty].push(moved);
    }
    Ok(assignment)
}

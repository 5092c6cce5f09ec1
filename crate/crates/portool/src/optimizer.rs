//! Clipped policy-gradient objective over trajectory trees.
//!
//! The batch objective averages, over queries and trajectories, a
//! length-normalized token sum of clipped importance-ratio terms. Shared
//! steps are evaluated once per node: regrouping the per-trajectory sums
//! gives each node a closed-form weight per advantage branch.
//!
//! Trajectory branch: weight `(1/(Q n)) sum_{k in m(s)} 1/|tau_k|` on
//! `min(rho A, clip(rho) A)` with the membership-mean trajectory advantage.
//! Fork branch (coefficient-rule modes): the per-trajectory `|tau_j|` in the
//! fork coefficient cancels against the length normalization, leaving weight
//! `1/(Q |s| |C(parent)| n_forks)` on the unscaled fork advantage. Constant
//! coefficients instead fold into a single min alongside the trajectory term.

use thiserror::Error;

use crate::advantage::{AdvantageMode, AdvantageTable};
use crate::policy::{PolicyError, PolicyParams, StepScorer};
use crate::rollout::{TrajectoryTree, TreeMaps};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("policy evaluation failed: {0}")]
    Policy(#[from] PolicyError),
    #[error("empty query batch")]
    EmptyBatch,
    #[error("advantage table has {got} nodes, tree has {expected}")]
    TableMismatch { expected: usize, got: usize },
    #[error("objective diverged to a non-finite value")]
    Diverged,
}

/// One clipped surrogate term: `min(ratio * a, clamp(ratio) * a)`.
pub fn token_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// One query's contribution to a batch: a rolled-out tree, its index maps,
/// and the advantage table computed for it.
pub struct QueryBatchItem<'a> {
    pub tree: &'a TrajectoryTree,
    pub maps: &'a TreeMaps,
    pub adv: &'a AdvantageTable,
}

/// Evaluates the batch surrogate objective and its exact gradient in the
/// current parameters. `params_old` is the behavior snapshot the importance
/// ratios are taken against; gradients flow only through unclipped terms.
pub fn batch_objective(
    items: &[QueryBatchItem],
    params: &PolicyParams,
    params_old: &PolicyParams,
    epsilon: f64,
) -> Result<(f64, Vec<f64>), OptimizerError> {
    if items.is_empty() {
        return Err(OptimizerError::EmptyBatch);
    }
    let q = items.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; params.theta.len()];

    for item in items {
        let tree = item.tree;
        let maps = item.maps;
        if item.adv.nodes.len() != tree.nodes.len() {
            return Err(OptimizerError::TableMismatch {
                expected: tree.nodes.len(),
                got: item.adv.nodes.len(),
            });
        }
        let n = tree.trajectories.len() as f64;
        let tau: Vec<f64> = tree
            .trajectories
            .iter()
            .map(|path| path.iter().map(|&id| tree.nodes[id].tokens.len()).sum::<usize>() as f64)
            .collect();

        for node in &tree.nodes {
            let rec = &item.adv.nodes[node.id];
            let w_trj = maps.m[node.id].iter().map(|&k| 1.0 / tau[k]).sum::<f64>() / (q * n);
            // Branch list per mode: (advantage, weight) pairs, each taking
            // its own min.
            let mut branches: [(f64, f64); 2] = [(0.0, 0.0); 2];
            let mut n_branches = 0;
            let mut push = |a: f64, w: f64| {
                if a != 0.0 && w != 0.0 {
                    branches[n_branches] = (a, w);
                    n_branches += 1;
                }
            };
            let fork_weight = || {
                if maps.n_forks == 0 {
                    return 0.0;
                }
                let siblings = match node.parent {
                    Some(p) => maps.child_nodes[p].len(),
                    None => maps.root_children.len(),
                };
                1.0 / (q * node.tokens.len() as f64 * siblings as f64 * maps.n_forks as f64)
            };
            match item.adv.mode {
                AdvantageMode::Portool => {
                    push(rec.a_trj_mean, w_trj);
                    push(rec.a_fork, fork_weight());
                }
                AdvantageMode::ForkOnly => push(rec.a_fork, fork_weight()),
                AdvantageMode::TrajectoryOnly
                | AdvantageMode::NoScale
                | AdvantageMode::Grpo
                | AdvantageMode::GrpoFm => push(rec.value, w_trj),
            }
            if n_branches == 0 {
                continue;
            }

            let hist = tree.history_for(node.id);
            let scorer_new = StepScorer::new(params, &tree.query, &hist);
            let scorer_old = StepScorer::new(params_old, &tree.query, &hist);
            for (o, &tok) in node.tokens.iter().enumerate() {
                let lp_new = scorer_new.logprob(o, tok)?;
                let lp_old = scorer_old.logprob(o, tok)?;
                let rho = (lp_new - lp_old).exp();
                let clamp = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
                for &(a, w) in &branches[..n_branches] {
                    let unclipped = rho * a;
                    let clipped = clamp * a;
                    total += w * unclipped.min(clipped);
                    if unclipped <= clipped {
                        scorer_new.add_scaled_grad(
                            o,
                            tok,
                            w * a * rho,
                            &tree.query,
                            &hist,
                            &mut grad,
                        )?;
                    }
                }
            }
        }
    }
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimizerError::Diverged);
    }
    Ok((total, grad))
}

/// In-place gradient ascent step.
pub fn ascend(params: &mut PolicyParams, grad: &[f64], lr: f64) {
    for (w, g) in params.theta.iter_mut().zip(grad) {
        *w += lr * g;
    }
}

//! Advantages: trajectory-relative and fork-relative z-scores combined into
//! per-token advantages, plus the group-baseline modes.
//!
//! A node's stored advantage is `omega1 * mean_{k in m(s)} A_trj(k) +
//! omega2(s) * A_fork(s)`. The fork coefficient follows the closed form
//! `n |tau_j| / (|m(s)| |s| |C(parent)| n_forks)`; the per-trajectory factor
//! `|tau_j|` is applied inside the optimizer's surrogate sum, so the value
//! recorded here uses the membership mean of `|tau_k|` for reporting.

use serde::Serialize;
use thiserror::Error;

use crate::rollout::{TrajectoryTree, TreeMaps};
use crate::toolenv::Verdict;

#[derive(Debug, Error)]
pub enum AdvantageError {
    #[error("empty population for z-score")]
    EmptyPopulation,
    #[error("{what} has {got} entries, tree expects {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite advantage at node {0}")]
    NonFinite(usize),
}

/// Advantage composition mode. The first four act on shared-prefix trees;
/// the last two are independent-chain group baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageMode {
    /// omega1 = 1, omega2 per the closed-form coefficient rule.
    Portool,
    /// omega1 = 1, omega2 = 0.
    TrajectoryOnly,
    /// omega1 = 0, omega2 per the closed-form coefficient rule.
    ForkOnly,
    /// omega1 = 1, omega2 = constant 1.
    NoScale,
    /// Per-trajectory z-scored outcome, uniform across the trajectory.
    Grpo,
    /// As Grpo, scoring outcome + mean rescaled step formatting reward.
    GrpoFm,
}

impl AdvantageMode {
    pub fn is_group_baseline(self) -> bool {
        matches!(self, AdvantageMode::Grpo | AdvantageMode::GrpoFm)
    }
}

impl std::str::FromStr for AdvantageMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "portool" => Ok(AdvantageMode::Portool),
            "trajectory_only" => Ok(AdvantageMode::TrajectoryOnly),
            "fork_only" => Ok(AdvantageMode::ForkOnly),
            "no_scale" => Ok(AdvantageMode::NoScale),
            "grpo" => Ok(AdvantageMode::Grpo),
            "grpo_fm" => Ok(AdvantageMode::GrpoFm),
            other => Err(format!("unknown advantage mode: {other}")),
        }
    }
}

impl std::fmt::Display for AdvantageMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdvantageMode::Portool => "portool",
            AdvantageMode::TrajectoryOnly => "trajectory_only",
            AdvantageMode::ForkOnly => "fork_only",
            AdvantageMode::NoScale => "no_scale",
            AdvantageMode::Grpo => "grpo",
            AdvantageMode::GrpoFm => "grpo_fm",
        })
    }
}

/// Z-score against a population, with population standard deviation and a
/// degenerate guard: all-equal populations give 0.
pub fn zscore(value: f64, population: &[f64]) -> Result<f64, AdvantageError> {
    if population.is_empty() {
        return Err(AdvantageError::EmptyPopulation);
    }
    let n = population.len() as f64;
    let mean = population.iter().sum::<f64>() / n;
    let var = population.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        Ok(0.0)
    } else {
        Ok((value - mean) / std)
    }
}

/// Trajectory-relative advantages: z-scores of the outcome group.
pub fn trajectory_advantage(outcomes: &[f64]) -> Vec<f64> {
    outcomes
        .iter()
        .map(|&v| zscore(v, outcomes).expect("non-empty by construction"))
        .collect()
}

/// Fork-relative advantages: per node, the z-score of its step reward
/// against its sibling group (the distinct children of its parent, virtual
/// root included). Singleton groups give 0.
pub fn fork_advantage(
    tree: &TrajectoryTree,
    maps: &TreeMaps,
    step_rewards: &[f64],
) -> Result<Vec<f64>, AdvantageError> {
    if step_rewards.len() != tree.nodes.len() {
        return Err(AdvantageError::LengthMismatch {
            what: "step rewards",
            expected: tree.nodes.len(),
            got: step_rewards.len(),
        });
    }
    let mut out = vec![0.0; tree.nodes.len()];
    let groups = std::iter::once(&maps.root_children).chain(maps.child_nodes.iter());
    for group in groups.filter(|g| !g.is_empty()) {
        let pop: Vec<f64> = group.iter().map(|&id| step_rewards[id]).collect();
        for &id in group {
            out[id] = zscore(step_rewards[id], &pop)?;
        }
    }
    Ok(out)
}

/// Token length of one trajectory: total generated tokens along its path.
pub fn trajectory_token_len(tree: &TrajectoryTree, trajectory: usize) -> usize {
    tree.trajectories[trajectory]
        .iter()
        .map(|&id| tree.nodes[id].tokens.len())
        .sum()
}

/// The fork coefficient for one node, scored for one member trajectory:
/// `n |tau_j| / (|m(s)| |s| |C(parent)| n_forks)`. Zero when the tree has no
/// forks.
pub fn omega2(tree: &TrajectoryTree, maps: &TreeMaps, node_id: usize, trajectory: usize) -> f64 {
    if maps.n_forks == 0 {
        return 0.0;
    }
    let node = &tree.nodes[node_id];
    let siblings = match node.parent {
        Some(p) => maps.child_nodes[p].len(),
        None => maps.root_children.len(),
    };
    let tau = trajectory_token_len(tree, trajectory) as f64;
    tree.n as f64 * tau
        / (maps.m[node_id].len() as f64
            * node.tokens.len() as f64
            * siblings as f64
            * maps.n_forks as f64)
}

/// Reporting variant of the fork coefficient: membership mean of the
/// per-trajectory values.
pub fn omega2_mean(tree: &TrajectoryTree, maps: &TreeMaps, node_id: usize) -> f64 {
    let m = &maps.m[node_id];
    if m.is_empty() {
        return 0.0;
    }
    m.iter().map(|&k| omega2(tree, maps, node_id, k)).sum::<f64>() / m.len() as f64
}

/// Per-node advantage record.
#[derive(Debug, Clone, Copy)]
pub struct TokenAdvantage {
    pub node_id: usize,
    /// Membership mean of the trajectory advantages.
    pub a_trj_mean: f64,
    pub a_fork: f64,
    /// Reported fork coefficient (mean over membership; constant modes
    /// report their constant).
    pub omega2: f64,
    /// Combined advantage, uniform across the step's tokens.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct AdvantageTable {
    pub mode: AdvantageMode,
    pub nodes: Vec<TokenAdvantage>,
    /// Per-trajectory group scores: trajectory advantages for tree modes,
    /// group z-scores for the baselines.
    pub trajectory: Vec<f64>,
}

/// Builds the per-node advantage table for a tree (or chain set) under a
/// composition mode.
pub fn token_advantages(
    tree: &TrajectoryTree,
    maps: &TreeMaps,
    step_rewards: &[f64],
    fm: &[f64],
    outcomes: &[f64],
    mode: AdvantageMode,
) -> Result<AdvantageTable, AdvantageError> {
    if outcomes.len() != tree.trajectories.len() {
        return Err(AdvantageError::LengthMismatch {
            what: "outcomes",
            expected: tree.trajectories.len(),
            got: outcomes.len(),
        });
    }
    if fm.len() != tree.nodes.len() {
        return Err(AdvantageError::LengthMismatch {
            what: "formatting rewards",
            expected: tree.nodes.len(),
            got: fm.len(),
        });
    }

    let trajectory: Vec<f64> = if mode == AdvantageMode::GrpoFm {
        // Outcome plus the trajectory's mean rescaled step formatting.
        let scores: Vec<f64> = tree
            .trajectories
            .iter()
            .zip(outcomes)
            .map(|(path, &outcome)| {
                let mean_fm =
                    path.iter().map(|&id| fm[id]).sum::<f64>() / path.len().max(1) as f64;
                outcome + mean_fm
            })
            .collect();
        scores.iter().map(|&s| zscore(s, &scores)).collect::<Result<_, _>>()?
    } else {
        trajectory_advantage(outcomes)
    };

    let forks = if mode.is_group_baseline() {
        vec![0.0; tree.nodes.len()]
    } else {
        fork_advantage(tree, maps, step_rewards)?
    };

    let mut nodes = Vec::with_capacity(tree.nodes.len());
    for id in 0..tree.nodes.len() {
        let m = &maps.m[id];
        let a_trj_mean = m.iter().map(|&k| trajectory[k]).sum::<f64>() / m.len().max(1) as f64;
        let a_fork = forks[id];
        let (omega1, w2) = match mode {
            AdvantageMode::Portool | AdvantageMode::ForkOnly => {
                let w = omega2_mean(tree, maps, id);
                (f64::from(mode == AdvantageMode::Portool), w)
            }
            AdvantageMode::TrajectoryOnly => (1.0, 0.0),
            AdvantageMode::NoScale => (1.0, 1.0),
            AdvantageMode::Grpo | AdvantageMode::GrpoFm => (1.0, 0.0),
        };
        let value = omega1 * a_trj_mean + w2 * a_fork;
        if !value.is_finite() {
            return Err(AdvantageError::NonFinite(id));
        }
        nodes.push(TokenAdvantage { node_id: id, a_trj_mean, a_fork, omega2: w2, value });
    }
    Ok(AdvantageTable { mode, nodes, trajectory })
}

/// Shortcut from verdicts: maps outcomes and reuses the tree's formatting.
pub fn token_advantages_from_verdicts(
    tree: &TrajectoryTree,
    maps: &TreeMaps,
    step_rewards: &[f64],
    verdicts: &[Verdict],
    mode: AdvantageMode,
) -> Result<AdvantageTable, AdvantageError> {
    let outcomes: Vec<f64> = verdicts.iter().map(|&v| crate::reward::outcome_reward(v)).collect();
    let fm: Vec<f64> = crate::reward::node_formatting(tree).iter().map(|f| f.rescaled).collect();
    token_advantages(tree, maps, step_rewards, &fm, &outcomes, mode)
}

/// JSONL dump: one line per node.
pub fn advantages_to_jsonl(table: &AdvantageTable) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        node_id: usize,
        a_trj_mean: f64,
        a_fork: f64,
        omega2: f64,
        value: f64,
        mode: &'a str,
    }
    let mode = table.mode.to_string();
    let mut out = String::new();
    for n in &table.nodes {
        let row = Row {
            node_id: n.node_id,
            a_trj_mean: n.a_trj_mean,
            a_fork: n.a_fork,
            omega2: n.omega2,
            value: n.value,
            mode: &mode,
        };
        out.push_str(&serde_json::to_string(&row).expect("serializable"));
        out.push('\n');
    }
    out
}

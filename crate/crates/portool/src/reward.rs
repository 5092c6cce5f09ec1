//! Rewards: trajectory outcomes, the formatting rubric, and adaptive
//! step-wise rewards over a trajectory tree.
//!
//! A step's reward aggregates, over every trajectory through it, the
//! trajectory's outcome discounted by distance-to-end, plus the step's own
//! formatting reward. The aggregation operator is chosen per sibling group:
//! max by default; avg when the max view cannot tell siblings apart.

use serde::Serialize;
use thiserror::Error;

use crate::rollout::{parse_step, TrajectoryTree, TreeMaps};
use crate::toolenv::{ToolResult, Verdict};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("missing verdict for trajectory {0}")]
    MissingVerdict(usize),
    #[error("formatting rewards cover {got} nodes, tree has {expected}")]
    FmCount { expected: usize, got: usize },
    #[error("gamma {0} outside [0, 1]")]
    InvalidGamma(f64),
    #[error("node {0} has empty membership")]
    EmptyMembership(usize),
}

/// Outcome reward of a judged trajectory.
pub fn outcome_reward(verdict: Verdict) -> f64 {
    match verdict {
        Verdict::True => 1.0,
        Verdict::False => -1.0,
        Verdict::UnableToAnswer => 0.0,
    }
}

/// Formatting rubric result with per-criterion breakdown. Credits are
/// sequential gates: each is zero unless all earlier ones were earned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormattingReward {
    pub raw: f64,
    pub rescaled: f64,
    pub think: bool,
    pub tag: bool,
    pub json: bool,
    pub fields: bool,
    pub success_fraction: f64,
}

/// Scores one rendered step against the rubric: think block 0.2, tool tags
/// 0.1, JSON array of objects 0.1, name/arguments fields 0.05, then 0.55
/// times the fraction of successful tool calls (0 when no call ran).
pub fn formatting_reward(rendered: &str, tool_results: &[ToolResult]) -> FormattingReward {
    let parsed = parse_step(rendered);
    let think = parsed.has_think;
    let tag = think && parsed.has_tags;
    let json = tag && parsed.json_ok;
    let fields = json && parsed.fields_ok;
    let success_fraction = if fields && !tool_results.is_empty() {
        tool_results.iter().filter(|r| r.ok).count() as f64 / tool_results.len() as f64
    } else {
        0.0
    };
    let raw = 0.2 * f64::from(think)
        + 0.1 * f64::from(tag)
        + 0.1 * f64::from(json)
        + 0.05 * f64::from(fields)
        + 0.55 * success_fraction;
    FormattingReward {
        raw,
        rescaled: (raw - 0.5) / 2.0,
        think,
        tag,
        json,
        fields,
        success_fraction,
    }
}

/// Per-node formatting rewards for a whole tree.
pub fn node_formatting(tree: &TrajectoryTree) -> Vec<FormattingReward> {
    tree.nodes
        .iter()
        .map(|node| formatting_reward(&node.rendered, &node.results))
        .collect()
}

/// Aggregation operator actually used for a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GOp {
    Max,
    Avg,
}

/// Aggregation strategy for the step reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GVariant {
    /// Provisional max per sibling; avg iff all sibling provisional values
    /// and all sibling formatting rewards are exactly equal.
    Adaptive,
    Max,
    Avg,
    /// Adaptive test on the discounted outcomes only; the formatting reward
    /// is added outside the aggregation.
    Mix2,
}

impl std::str::FromStr for GVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(GVariant::Adaptive),
            "max" => Ok(GVariant::Max),
            "avg" => Ok(GVariant::Avg),
            "mix2" => Ok(GVariant::Mix2),
            other => Err(format!("unknown G variant: {other}")),
        }
    }
}

impl std::fmt::Display for GVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GVariant::Adaptive => "adaptive",
            GVariant::Max => "max",
            GVariant::Avg => "avg",
            GVariant::Mix2 => "mix2",
        })
    }
}

/// One node's step reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRewardRec {
    pub node_id: usize,
    pub value: f64,
    pub operator: GOp,
}

/// `gamma^e` with the 0^0 = 1 convention, so the terminal step keeps its
/// undiscounted outcome even at gamma = 0.
fn pow0(gamma: f64, e: i32) -> f64 {
    if e == 0 {
        1.0
    } else {
        gamma.powi(e)
    }
}

fn maxv(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn avgv(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Step rewards from precomputed per-trajectory outcome values and per-node
/// rescaled formatting rewards.
pub fn assign_tree_rewards_with(
    tree: &TrajectoryTree,
    maps: &TreeMaps,
    outcomes: &[f64],
    fm: &[f64],
    gamma: f64,
    variant: GVariant,
) -> Result<Vec<StepRewardRec>, RewardError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RewardError::InvalidGamma(gamma));
    }
    if outcomes.len() != tree.trajectories.len() {
        return Err(RewardError::MissingVerdict(outcomes.len()));
    }
    if fm.len() != tree.nodes.len() {
        return Err(RewardError::FmCount { expected: tree.nodes.len(), got: fm.len() });
    }
    let t_len: Vec<usize> = tree.trajectories.iter().map(Vec::len).collect();
    let candidates = |id: usize, with_fm: bool| -> Result<Vec<f64>, RewardError> {
        if maps.m[id].is_empty() {
            return Err(RewardError::EmptyMembership(id));
        }
        Ok(maps.m[id]
            .iter()
            .map(|&k| {
                let e = (t_len[k] - tree.nodes[id].depth) as i32;
                pow0(gamma, e) * outcomes[k] + if with_fm { fm[id] } else { 0.0 }
            })
            .collect())
    };

    let mut out: Vec<Option<StepRewardRec>> = vec![None; tree.nodes.len()];
    let groups = std::iter::once(&maps.root_children).chain(maps.child_nodes.iter());
    for group in groups.filter(|g| !g.is_empty()) {
        // Aggregation inputs per sibling, with and without fm.
        let mut with_fm = Vec::with_capacity(group.len());
        let mut outcome_only = Vec::with_capacity(group.len());
        for &id in group {
            with_fm.push(candidates(id, true)?);
            outcome_only.push(candidates(id, false)?);
        }
        let all_eq = |values: &[f64]| values.windows(2).all(|w| w[0] == w[1]);
        for (slot, &id) in group.iter().enumerate() {
            let (value, operator) = match variant {
                GVariant::Max => (maxv(&with_fm[slot]), GOp::Max),
                GVariant::Avg => (avgv(&with_fm[slot]), GOp::Avg),
                GVariant::Adaptive => {
                    let provisional: Vec<f64> = with_fm.iter().map(|c| maxv(c)).collect();
                    let fms: Vec<f64> = group.iter().map(|&g| fm[g]).collect();
                    if all_eq(&provisional) && all_eq(&fms) {
                        (avgv(&with_fm[slot]), GOp::Avg)
                    } else {
                        (maxv(&with_fm[slot]), GOp::Max)
                    }
                }
                GVariant::Mix2 => {
                    let provisional: Vec<f64> = outcome_only.iter().map(|c| maxv(c)).collect();
                    if all_eq(&provisional) {
                        (avgv(&outcome_only[slot]) + fm[id], GOp::Avg)
                    } else {
                        (maxv(&outcome_only[slot]) + fm[id], GOp::Max)
                    }
                }
            };
            out[id] = Some(StepRewardRec { node_id: id, value, operator });
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(id, rec)| rec.ok_or(RewardError::EmptyMembership(id)))
        .collect()
}

/// Step rewards straight from verdicts; formatting rewards are computed per
/// node from its rendered text and results.
pub fn assign_tree_rewards(
    tree: &TrajectoryTree,
    maps: &TreeMaps,
    verdicts: &[Verdict],
    gamma: f64,
    variant: GVariant,
) -> Result<Vec<StepRewardRec>, RewardError> {
    if verdicts.len() != tree.trajectories.len() {
        return Err(RewardError::MissingVerdict(verdicts.len()));
    }
    let outcomes: Vec<f64> = verdicts.iter().map(|&v| outcome_reward(v)).collect();
    let fm: Vec<f64> = node_formatting(tree).iter().map(|f| f.rescaled).collect();
    assign_tree_rewards_with(tree, maps, &outcomes, &fm, gamma, variant)
}

/// Single-node view of `assign_tree_rewards`.
pub fn step_reward(
    tree: &TrajectoryTree,
    maps: &TreeMaps,
    node_id: usize,
    verdicts: &[Verdict],
    gamma: f64,
    variant: GVariant,
) -> Result<StepRewardRec, RewardError> {
    Ok(assign_tree_rewards(tree, maps, verdicts, gamma, variant)?[node_id])
}

/// JSONL dump: one line per node, then one line per trajectory.
pub fn rewards_to_jsonl(
    fms: &[FormattingReward],
    recs: &[StepRewardRec],
    outcomes: &[f64],
) -> String {
    #[derive(Serialize)]
    struct NodeRow {
        node_id: usize,
        fm_raw: f64,
        fm_rescaled: f64,
        operator: GOp,
        value: f64,
    }
    #[derive(Serialize)]
    struct TrajRow {
        index: usize,
        outcome: f64,
    }
    let mut out = String::new();
    for (fm, rec) in fms.iter().zip(recs) {
        let row = NodeRow {
            node_id: rec.node_id,
            fm_raw: fm.raw,
            fm_rescaled: fm.rescaled,
            operator: rec.operator,
            value: rec.value,
        };
        out.push_str(&serde_json::to_string(&row).expect("serializable"));
        out.push('\n');
    }
    for (index, &outcome) in outcomes.iter().enumerate() {
        let row = TrajRow { index, outcome };
        out.push_str(&serde_json::to_string(&row).expect("serializable"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::build_maps;

    fn okr() -> ToolResult {
        ToolResult::ok(serde_json::json!(1.0))
    }

    fn errr() -> ToolResult {
        ToolResult::err("boom")
    }

    const COMPLIANT: &str = r#"<think> r </think> <tool_call> [{"name": "lookup", "arguments": {"key": "k0"}}, {"name": "lookup", "arguments": {"key": "k1"}}] </tool_call>"#;

    #[test]
    fn outcome_mapping_is_exact() {
        assert_eq!(outcome_reward(Verdict::True), 1.0);
        assert_eq!(outcome_reward(Verdict::False), -1.0);
        assert_eq!(outcome_reward(Verdict::UnableToAnswer), 0.0);
    }

    #[test]
    fn rubric_full_credit_and_gating() {
        let fm = formatting_reward(COMPLIANT, &[okr(), okr()]);
        assert_eq!(fm.raw, 1.0);
        assert_eq!(fm.rescaled, 0.25);

        let fm = formatting_reward("<tool_call> [] </tool_call>", &[]);
        assert_eq!(fm.raw, 0.0);
        assert_eq!(fm.rescaled, -0.25);
        assert!(!fm.think);
    }

    #[test]
    fn rubric_partial_success_by_hand() {
        // 0.2 + 0.1 + 0.1 + 0.05 + 0.55 * 0.5 = 0.725 -> 0.1125 rescaled.
        let fm = formatting_reward(COMPLIANT, &[okr(), errr()]);
        assert!((fm.raw - 0.725).abs() < 1e-15);
        assert!((fm.rescaled - 0.1125).abs() < 1e-15);
        assert_eq!(fm.success_fraction, 0.5);
    }

    fn chain3() -> TrajectoryTree {
        TrajectoryTree::synthetic(&[None, Some(0), Some(1)], &[vec![0, 1, 2]])
    }

    #[test]
    fn single_chain_values_by_hand() {
        let tree = chain3();
        let maps = build_maps(&tree).unwrap();
        let recs = assign_tree_rewards_with(
            &tree,
            &maps,
            &[1.0],
            &[0.25, 0.25, 0.25],
            0.95,
            GVariant::Adaptive,
        )
        .unwrap();
        let want = [0.95f64.powi(2) + 0.25, 0.95 + 0.25, 1.0 + 0.25];
        for (rec, w) in recs.iter().zip(want) {
            assert!((rec.value - w).abs() < 1e-15);
            assert_eq!(rec.operator, GOp::Avg, "singleton sibling groups use avg");
        }
        assert!((recs[0].value - 1.1525).abs() < 1e-15);
        assert!((recs[2].value - 1.25).abs() < 1e-15);
    }

    #[test]
    fn fork_with_differing_outcomes_uses_max() {
        // Two one-step trajectories forking at the root.
        let tree = TrajectoryTree::synthetic(&[None, None], &[vec![0], vec![1]]);
        let maps = build_maps(&tree).unwrap();
        let recs = assign_tree_rewards_with(
            &tree,
            &maps,
            &[1.0, -1.0],
            &[0.0, 0.0],
            0.95,
            GVariant::Adaptive,
        )
        .unwrap();
        assert_eq!(recs[0].operator, GOp::Max);
        assert_eq!(recs[1].operator, GOp::Max);
        assert_eq!(recs[0].value, 1.0);
        assert_eq!(recs[1].value, -1.0);
    }

    #[test]
    fn adaptive_tie_switches_to_avg() {
        let tree = TrajectoryTree::synthetic(&[None, None], &[vec![0], vec![1]]);
        let maps = build_maps(&tree).unwrap();
        let recs = assign_tree_rewards_with(
            &tree,
            &maps,
            &[1.0, 1.0],
            &[0.25, 0.25],
            0.95,
            GVariant::Adaptive,
        )
        .unwrap();
        assert_eq!(recs[0].operator, GOp::Avg);
        assert_eq!(recs[1].operator, GOp::Avg);
        assert_eq!(recs[0].value, 1.25);
    }

    #[test]
    fn mix2_tests_outcomes_only() {
        // Equal discounted outcomes, different fm: adaptive keeps max,
        // mix2 averages and adds fm outside.
        let tree = TrajectoryTree::synthetic(&[None, None], &[vec![0], vec![1]]);
        let maps = build_maps(&tree).unwrap();
        let adaptive = assign_tree_rewards_with(
            &tree, &maps, &[1.0, 1.0], &[0.25, 0.0], 0.95, GVariant::Adaptive,
        )
        .unwrap();
        assert_eq!(adaptive[0].operator, GOp::Max);
        let mix2 = assign_tree_rewards_with(
            &tree, &maps, &[1.0, 1.0], &[0.25, 0.0], 0.95, GVariant::Mix2,
        )
        .unwrap();
        assert_eq!(mix2[0].operator, GOp::Avg);
        assert_eq!(mix2[0].value, 1.25);
        assert_eq!(mix2[1].value, 1.0);
    }

    #[test]
    fn gamma_zero_keeps_only_the_terminal_outcome() {
        let tree = chain3();
        let maps = build_maps(&tree).unwrap();
        let recs = assign_tree_rewards_with(
            &tree,
            &maps,
            &[1.0],
            &[0.25, 0.25, 0.25],
            0.0,
            GVariant::Adaptive,
        )
        .unwrap();
        assert_eq!(recs[0].value, 0.25);
        assert_eq!(recs[1].value, 0.25);
        assert_eq!(recs[2].value, 1.25, "0^0 = 1 keeps the terminal outcome");
    }

    #[test]
    fn invalid_inputs_error() {
        let tree = chain3();
        let maps = build_maps(&tree).unwrap();
        assert!(matches!(
            assign_tree_rewards_with(&tree, &maps, &[], &[0.0; 3], 0.95, GVariant::Adaptive),
            Err(RewardError::MissingVerdict(0))
        ));
        assert!(matches!(
            assign_tree_rewards_with(&tree, &maps, &[1.0], &[0.0], 0.95, GVariant::Adaptive),
            Err(RewardError::FmCount { expected: 3, got: 1 })
        ));
        assert!(matches!(
            assign_tree_rewards_with(&tree, &maps, &[1.0], &[0.0; 3], 1.5, GVariant::Adaptive),
            Err(RewardError::InvalidGamma(_))
        ));
    }

    #[test]
    fn jsonl_dump_has_one_line_per_node_and_trajectory() {
        let tree = chain3();
        let maps = build_maps(&tree).unwrap();
        let outcomes = [1.0];
        let fm = [0.0, 0.0, 0.0];
        let recs =
            assign_tree_rewards_with(&tree, &maps, &outcomes, &fm, 0.95, GVariant::Adaptive)
                .unwrap();
        let fms = vec![formatting_reward("", &[]); 3];
        let dump = rewards_to_jsonl(&fms, &recs, &outcomes);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 4);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["node_id"], 0);
        assert_eq!(first["operator"], "avg");
        let last: serde_json::Value = serde_json::from_str(lines[3]).unwrap();
        assert_eq!(last["index"], 0);
        assert_eq!(last["outcome"], 1.0);
    }
}

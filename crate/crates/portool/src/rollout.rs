//! Tree rollout: shared-prefix trajectory sampling over the tool
//! environment.
//!
//! Each round, every incomplete trajectory proposes `f` candidate next steps
//! sampled from the policy; `n - n_completed` candidates survive a uniform
//! draw without replacement; identical surviving siblings merge into one
//! node, and only surviving steps execute their tool calls. Trajectories end
//! when a step contains a successful respond_gen call or the depth cap is
//! reached. Nodes no surviving trajectory passes through are pruned, so the
//! final arena is exactly the union of the trajectory paths.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::policy::{sample_step, HistStep, PolicyError, PolicyParams};
use crate::toolenv::{
    execute_tool_calls, tool_index, QuerySpec, Registry, ToolCall, ToolResult, WorldState,
};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout configuration: {0}")]
    InvalidConfig(String),
    #[error("candidate pool exhausted: needed {needed}, pool holds {available}")]
    PoolExhausted { needed: usize, available: usize },
    #[error("node {0} lies on no trajectory")]
    OrphanNode(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Everything a rollout needs from the outside world.
pub struct RolloutEnv<'a> {
    pub registry: &'a Registry,
    pub world: &'a WorldState,
    pub vocab: &'a Vocabulary,
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    /// Trajectory budget per query.
    pub n: usize,
    /// Branching factor: candidate steps proposed per incomplete trajectory.
    pub f: usize,
    /// Depth cap in steps.
    pub t_max: usize,
    pub temperature: f64,
    pub max_step_tokens: usize,
    /// Also run tool calls for discarded candidates. The environment is
    /// pure, so this changes cost only, never the resulting tree.
    pub execute_all: bool,
}

/// One step of one or more trajectories.
#[derive(Debug, Clone)]
pub struct StepNode {
    pub id: usize,
    /// Parent node id; None for depth-1 nodes (children of the root query).
    pub parent: Option<usize>,
    /// 1-based step depth.
    pub depth: usize,
    pub tokens: Vec<TokenId>,
    /// Behavior-policy log-probabilities recorded at sampling time.
    pub logprobs: Vec<f64>,
    pub rendered: String,
    /// Format gates all passed and the call list was executed.
    pub parsed_ok: bool,
    /// Executed calls, with `$`-references already resolved.
    pub calls: Vec<ToolCall>,
    pub results: Vec<ToolResult>,
    /// A respond_gen call succeeded in this step.
    pub terminal: bool,
    /// Payload of the first successful respond_gen call, if any.
    pub final_answer: Option<Value>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryTree {
    pub query: QuerySpec,
    pub nodes: Vec<StepNode>,
    /// Node-id paths, one per trajectory, root child first.
    pub trajectories: Vec<Vec<usize>>,
    pub n: usize,
    pub f: usize,
    pub t_max: usize,
    /// Bookkeeping only; set by the caller that owns the seed.
    pub seed: u64,
}

/// Derived index structures over a tree.
#[derive(Debug, Clone)]
pub struct TreeMaps {
    /// Trajectory indices passing through each node.
    pub m: Vec<BTreeSet<usize>>,
    /// Child node ids per node.
    pub child_nodes: Vec<Vec<usize>>,
    /// Depth-1 node ids (children of the virtual root).
    pub root_children: Vec<usize>,
    /// One representative trajectory index per distinct child, per node.
    pub c_reps: Vec<Vec<usize>>,
    /// Representatives of the root's distinct children.
    pub root_c_reps: Vec<usize>,
    /// Nodes (virtual root included) with two or more distinct children.
    pub n_forks: usize,
}

// --- step parsing -----------------------------------------------------------

/// Format-gate decomposition of one rendered step. Gates are sequential:
/// each later gate is only meaningful when all earlier ones passed.
#[derive(Debug, Clone, Default)]
pub struct ParsedStep {
    /// Starts with <think> and closes it.
    pub has_think: bool,
    /// Contains a <tool_call> block with a closing tag after it.
    pub has_tags: bool,
    /// Block content is a JSON array whose elements are all objects.
    pub json_ok: bool,
    /// Every element carries a string `name` and a dictionary `arguments`.
    pub fields_ok: bool,
    /// The parsed calls, unresolved.
    pub calls: Vec<ToolCall>,
}

impl ParsedStep {
    pub fn gates_passed(&self) -> bool {
        self.has_think && self.has_tags && self.json_ok && self.fields_ok
    }
}

/// Parses the first think block and the first tool_call block of a rendered
/// step. Trailing text after the blocks is ignored.
pub fn parse_step(rendered: &str) -> ParsedStep {
    let mut out = ParsedStep::default();
    let trimmed = rendered.trim_start();
    let Some(after_think) = trimmed.strip_prefix("<think>") else {
        return out;
    };
    if !after_think.contains("</think>") {
        return out;
    }
    out.has_think = true;

    let Some(open) = rendered.find("<tool_call>") else {
        return out;
    };
    let after_open = &rendered[open + "<tool_call>".len()..];
    let Some(close) = after_open.find("</tool_call>") else {
        return out;
    };
    out.has_tags = true;

    let content = &after_open[..close];
    let Ok(Value::Array(items)) = serde_json::from_str::<Value>(content) else {
        return out;
    };
    if !items.iter().all(Value::is_object) {
        return out;
    }
    out.json_ok = true;

    let mut calls = Vec::with_capacity(items.len());
    for item in &items {
        let obj = item.as_object().expect("all objects");
        let Some(name) = obj.get("name").and_then(Value::as_str) else {
            return out;
        };
        let Some(arguments) = obj.get("arguments").and_then(Value::as_object) else {
            return out;
        };
        calls.push(ToolCall { name: name.to_string(), arguments: arguments.clone() });
    }
    out.fields_ok = true;
    out.calls = calls;
    out
}

/// Resolves `$`-references in call arguments. `$q0`/`$q1` become the query's
/// slot keys; `$p0`/`$p1` become the first/second successful payloads of the
/// immediately preceding step. Unresolvable references pass through
/// literally and fail schema validation downstream.
pub fn resolve_refs(
    calls: &[ToolCall],
    query: &QuerySpec,
    prev_payloads: &[Value],
) -> Vec<ToolCall> {
    let slots = query.slots();
    let lookup = |s: &str| -> Option<Value> {
        match s {
            "$q0" => slots.first().map(|k| Value::String(k.clone())),
            "$q1" => slots.get(1).map(|k| Value::String(k.clone())),
            "$p0" => prev_payloads.first().cloned(),
            "$p1" => prev_payloads.get(1).cloned(),
            _ => None,
        }
    };
    calls
        .iter()
        .map(|call| {
            let arguments = call
                .arguments
                .iter()
                .map(|(k, v)| {
                    let resolved = match v.as_str().and_then(lookup) {
                        Some(r) => r,
                        None => v.clone(),
                    };
                    (k.clone(), resolved)
                })
                .collect();
            ToolCall { name: call.name.clone(), arguments }
        })
        .collect()
}

/// Successful payloads of a step, in call order. Null payloads count: a
/// lookup of a missing key succeeds with a null payload.
fn ok_payloads(results: &[ToolResult]) -> Vec<Value> {
    results
        .iter()
        .filter(|r| r.ok)
        .map(|r| r.payload.clone().unwrap_or(Value::Null))
        .collect()
}

struct ExecutedStep {
    parsed_ok: bool,
    calls: Vec<ToolCall>,
    results: Vec<ToolResult>,
    terminal: bool,
    final_answer: Option<Value>,
}

/// Parses, resolves and executes one rendered step against the environment.
/// Steps failing the format gates get a single synthetic error result and
/// run nothing.
fn run_step(
    rendered: &str,
    query: &QuerySpec,
    prev_payloads: &[Value],
    env: &RolloutEnv,
) -> ExecutedStep {
    let parsed = parse_step(rendered);
    if !parsed.gates_passed() {
        return ExecutedStep {
            parsed_ok: false,
            calls: vec![],
            results: vec![ToolResult::err("invalid output format")],
            terminal: false,
            final_answer: None,
        };
    }
    let calls = resolve_refs(&parsed.calls, query, prev_payloads);
    let results = execute_tool_calls(env.registry, &calls, env.world);
    let final_answer = calls
        .iter()
        .zip(&results)
        .find(|(c, r)| c.name == "respond_gen" && r.ok)
        .map(|(_, r)| r.payload.clone().unwrap_or(Value::Null));
    ExecutedStep {
        parsed_ok: true,
        terminal: final_answer.is_some(),
        calls,
        results,
        final_answer,
    }
}

// --- sampling helpers -------------------------------------------------------

/// Uniform draw of `take` slots, without replacement, from the pool formed
/// by duplicating each of `incomplete` trajectory slots `f` times. Returns
/// sorted pool indices; pool index p refers to copy p % f of slot p / f.
pub fn dup_and_samp(
    incomplete: usize,
    f: usize,
    take: usize,
    rng: &mut impl rand::RngExt,
) -> Result<Vec<usize>, RolloutError> {
    let pool = incomplete
        .checked_mul(f)
        .ok_or_else(|| RolloutError::InvalidConfig("pool size overflow".into()))?;
    if take > pool {
        return Err(RolloutError::PoolExhausted { needed: take, available: pool });
    }
    let mut indices: Vec<usize> = (0..pool).collect();
    for i in 0..take {
        let j = rng.random_range(i..pool);
        indices.swap(i, j);
    }
    let mut selected = indices[..take].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

impl TrajectoryTree {
    /// History digest (one per completed ancestor step, oldest first) for
    /// the step context at `node`, or at a new child of `leaf` when called
    /// with a prospective parent.
    pub fn history_for(&self, node: usize) -> Vec<HistStep> {
        self.history_above(self.nodes[node].parent)
    }

    /// History digests for all strict ancestors of a prospective child of
    /// `leaf` (None means the root context).
    pub fn history_above(&self, leaf: Option<usize>) -> Vec<HistStep> {
        let mut chain = Vec::new();
        let mut cur = leaf;
        while let Some(id) = cur {
            chain.push(id);
            cur = self.nodes[id].parent;
        }
        chain
            .iter()
            .rev()
            .map(|&id| hist_digest(&self.nodes[id]))
            .collect()
    }

    /// Per-step judge view for a trajectory.
    pub fn step_outcomes(&self, trajectory: usize) -> Vec<crate::toolenv::StepOutcome> {
        self.trajectories[trajectory]
            .iter()
            .map(|&id| {
                let node = &self.nodes[id];
                crate::toolenv::StepOutcome {
                    tool_results: node.results.clone(),
                    terminal: node.terminal,
                    final_answer: node.final_answer.clone(),
                }
            })
            .collect()
    }

    pub fn is_completed(&self, trajectory: usize) -> bool {
        self.trajectories[trajectory]
            .last()
            .map(|&id| self.nodes[id].terminal)
            .unwrap_or(false)
    }

    /// Same node structure with trajectory indices relabeled:
    /// `new[i] = old[perm[i]]`.
    pub fn relabeled(&self, perm: &[usize]) -> TrajectoryTree {
        let mut out = self.clone();
        out.trajectories = perm.iter().map(|&src| self.trajectories[src].clone()).collect();
        out
    }

    /// Bare tree for reward-level tests: structure only, synthetic tokens
    /// distinct per node, no rendered text or results.
    pub fn synthetic(parents: &[Option<usize>], paths: &[Vec<usize>]) -> TrajectoryTree {
        let mut depth = vec![0usize; parents.len()];
        let nodes = parents
            .iter()
            .enumerate()
            .map(|(id, &parent)| {
                depth[id] = match parent {
                    Some(p) => depth[p] + 1,
                    None => 1,
                };
                StepNode {
                    id,
                    parent,
                    depth: depth[id],
                    tokens: vec![(id + 1) as TokenId],
                    logprobs: vec![],
                    rendered: String::new(),
                    parsed_ok: false,
                    calls: vec![],
                    results: vec![],
                    terminal: false,
                    final_answer: None,
                }
            })
            .collect();
        TrajectoryTree {
            query: QuerySpec {
                id: "synthetic".into(),
                template_id: "lookup-fact:k0".into(),
                text: String::new(),
                ground_truth: crate::toolenv::Answer::None,
                time_sensitive: false,
                answerable: false,
            },
            nodes,
            trajectories: paths.to_vec(),
            n: paths.len(),
            f: 1,
            t_max: depth.iter().copied().max().unwrap_or(1),
            seed: 0,
        }
    }

    /// JSONL form: header line, node lines, trajectory lines.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            query_id: &'a str,
            n: usize,
            f: usize,
            #[serde(rename = "T_max")]
            t_max: usize,
            seed: u64,
        }
        #[derive(Serialize)]
        struct NodeRow<'a> {
            node_id: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            parent_id: Option<usize>,
            depth: usize,
            tokens: &'a [TokenId],
            rendered_text: &'a str,
            tool_results: &'a [ToolResult],
            terminal: bool,
        }
        #[derive(Serialize)]
        struct TrajRow<'a> {
            index: usize,
            node_path: &'a [usize],
        }
        let mut out = String::new();
        let header = Header {
            query_id: &self.query.id,
            n: self.n,
            f: self.f,
            t_max: self.t_max,
            seed: self.seed,
        };
        out.push_str(&serde_json::to_string(&header).expect("serializable"));
        out.push('\n');
        for node in &self.nodes {
            let row = NodeRow {
                node_id: node.id,
                parent_id: node.parent,
                depth: node.depth,
                tokens: &node.tokens,
                rendered_text: &node.rendered,
                tool_results: &node.results,
                terminal: node.terminal,
            };
            out.push_str(&serde_json::to_string(&row).expect("serializable"));
            out.push('\n');
        }
        for (index, path) in self.trajectories.iter().enumerate() {
            let row = TrajRow { index, node_path: path };
            out.push_str(&serde_json::to_string(&row).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

fn hist_digest(node: &StepNode) -> HistStep {
    let tool = node
        .calls
        .first()
        .and_then(|c| tool_index(&c.name));
    let ran_any = !node.results.is_empty();
    HistStep {
        tool,
        parsed_ok: node.parsed_ok,
        all_ok: node.parsed_ok && ran_any && node.results.iter().all(|r| r.ok),
        any_err: node.results.iter().any(|r| !r.ok),
        any_null: node
            .results
            .iter()
            .any(|r| r.ok && matches!(r.payload, Some(Value::Null) | None)),
    }
}

// --- tree construction ------------------------------------------------------

/// Shared-prefix rollout of `n` trajectories with branching factor `f`.
pub fn tree_rollout(
    query: &QuerySpec,
    params: &PolicyParams,
    env: &RolloutEnv,
    opts: &RolloutOptions,
    rng: &mut impl rand::RngExt,
) -> Result<TrajectoryTree, RolloutError> {
    validate_opts(opts)?;
    let mut tree = TrajectoryTree {
        query: query.clone(),
        nodes: vec![],
        trajectories: vec![],
        n: opts.n,
        f: opts.f,
        t_max: opts.t_max,
        seed: 0,
    };
    // Leaf node per live trajectory; None = still at the root.
    let mut alive: Vec<Option<usize>> = vec![None; opts.n];
    let mut completed: Vec<usize> = Vec::new();

    for depth in 1..=opts.t_max {
        if alive.is_empty() {
            break;
        }
        // Candidate steps for the full duplicated pool, slot-major.
        let mut candidates: Vec<(Vec<TokenId>, Vec<f64>)> =
            Vec::with_capacity(alive.len() * opts.f);
        for &leaf in &alive {
            let history = tree.history_above(leaf);
            for _ in 0..opts.f {
                candidates.push(sample_step(
                    params,
                    query,
                    &history,
                    opts.temperature,
                    opts.max_step_tokens,
                    rng,
                )?);
            }
        }
        let take = opts.n - completed.len();
        let selected = dup_and_samp(alive.len(), opts.f, take, rng)?;
        let selected_set: BTreeSet<usize> = selected.iter().copied().collect();

        // Merge selected candidates: one node per (parent, tokens) pair.
        let mut new_alive: Vec<Option<usize>> = Vec::with_capacity(take);
        let mut merged: BTreeMap<(Option<usize>, Vec<TokenId>), usize> = BTreeMap::new();
        for &pool_idx in &selected {
            let parent = alive[pool_idx / opts.f];
            let (tokens, logprobs) = candidates[pool_idx].clone();
            let key = (parent, tokens);
            let node_id = match merged.get(&key) {
                Some(&id) => id,
                None => {
                    let id = tree.nodes.len();
                    let rendered = env.vocab.render(&key.1);
                    let prev_payloads = match parent {
                        Some(p) => ok_payloads(&tree.nodes[p].results),
                        None => vec![],
                    };
                    let run = run_step(&rendered, query, &prev_payloads, env);
                    tree.nodes.push(StepNode {
                        id,
                        parent,
                        depth,
                        tokens: key.1.clone(),
                        logprobs,
                        rendered,
                        parsed_ok: run.parsed_ok,
                        calls: run.calls,
                        results: run.results,
                        terminal: run.terminal,
                        final_answer: run.final_answer,
                    });
                    merged.insert(key, id);
                    id
                }
            };
            new_alive.push(Some(node_id));
        }
        // Discarded candidates optionally execute too; the environment is
        // pure, so outputs are dropped.
        if opts.execute_all {
            for pool_idx in 0..candidates.len() {
                if selected_set.contains(&pool_idx) {
                    continue;
                }
                let parent = alive[pool_idx / opts.f];
                let rendered = env.vocab.render(&candidates[pool_idx].0);
                let prev_payloads = match parent {
                    Some(p) => ok_payloads(&tree.nodes[p].results),
                    None => vec![],
                };
                let _ = run_step(&rendered, query, &prev_payloads, env);
            }
        }
        // Terminal steps retire their trajectories.
        alive = Vec::new();
        for leaf in new_alive {
            let id = leaf.expect("assigned above");
            if tree.nodes[id].terminal {
                completed.push(id);
            } else {
                alive.push(Some(id));
            }
        }
    }

    // Completed trajectories first, truncated survivors after.
    let leaves: Vec<usize> = completed
        .into_iter()
        .chain(alive.into_iter().map(|l| l.expect("past depth 1")))
        .collect();
    tree.trajectories = leaves
        .iter()
        .map(|&leaf| {
            let mut path = Vec::new();
            let mut cur = Some(leaf);
            while let Some(id) = cur {
                path.push(id);
                cur = tree.nodes[id].parent;
            }
            path.reverse();
            path
        })
        .collect();
    prune(&mut tree);
    Ok(tree)
}

/// Independent chains: `n` trajectories sampled separately, no duplication,
/// no merging, no shared prefixes.
pub fn independent_rollout(
    query: &QuerySpec,
    params: &PolicyParams,
    env: &RolloutEnv,
    opts: &RolloutOptions,
    rng: &mut impl rand::RngExt,
) -> Result<TrajectoryTree, RolloutError> {
    validate_opts(opts)?;
    let mut tree = TrajectoryTree {
        query: query.clone(),
        nodes: vec![],
        trajectories: vec![],
        n: opts.n,
        f: opts.f,
        t_max: opts.t_max,
        seed: 0,
    };
    for _ in 0..opts.n {
        let mut path = Vec::new();
        let mut parent: Option<usize> = None;
        for depth in 1..=opts.t_max {
            let history = tree.history_above(parent);
            let (tokens, logprobs) = sample_step(
                params,
                query,
                &history,
                opts.temperature,
                opts.max_step_tokens,
                rng,
            )?;
            let rendered = env.vocab.render(&tokens);
            let prev_payloads = match parent {
                Some(p) => ok_payloads(&tree.nodes[p].results),
                None => vec![],
            };
            let run = run_step(&rendered, query, &prev_payloads, env);
            let id = tree.nodes.len();
            tree.nodes.push(StepNode {
                id,
                parent,
                depth,
                tokens,
                logprobs,
                rendered,
                parsed_ok: run.parsed_ok,
                calls: run.calls,
                results: run.results,
                terminal: run.terminal,
                final_answer: run.final_answer,
            });
            path.push(id);
            if tree.nodes[id].terminal {
                break;
            }
            parent = Some(id);
        }
        tree.trajectories.push(path);
    }
    Ok(tree)
}

fn validate_opts(opts: &RolloutOptions) -> Result<(), RolloutError> {
    if opts.n == 0 || opts.f == 0 || opts.t_max == 0 || opts.max_step_tokens == 0 {
        return Err(RolloutError::InvalidConfig(format!(
            "n={}, f={}, t_max={}, max_step_tokens={} must all be positive",
            opts.n, opts.f, opts.t_max, opts.max_step_tokens
        )));
    }
    if !(opts.temperature >= 0.0) {
        return Err(RolloutError::InvalidConfig(format!(
            "temperature {} must be non-negative",
            opts.temperature
        )));
    }
    Ok(())
}

/// Drops nodes no trajectory passes through and compacts ids, preserving
/// relative order.
fn prune(tree: &mut TrajectoryTree) {
    let mut keep = vec![false; tree.nodes.len()];
    for path in &tree.trajectories {
        for &id in path {
            keep[id] = true;
        }
    }
    if keep.iter().all(|&k| k) {
        return;
    }
    let mut remap = vec![usize::MAX; tree.nodes.len()];
    let mut next = 0usize;
    for (id, &kept) in keep.iter().enumerate() {
        if kept {
            remap[id] = next;
            next += 1;
        }
    }
    tree.nodes.retain(|node| keep[node.id]);
    for node in tree.nodes.iter_mut() {
        node.id = remap[node.id];
        node.parent = node.parent.map(|p| remap[p]);
    }
    for path in tree.trajectories.iter_mut() {
        for id in path.iter_mut() {
            *id = remap[*id];
        }
    }
}

/// Builds membership, child and fork maps. Requires every node to lie on at
/// least one trajectory (rollout output is pruned to guarantee this).
pub fn build_maps(tree: &TrajectoryTree) -> Result<TreeMaps, RolloutError> {
    let n_nodes = tree.nodes.len();
    let mut m: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_nodes];
    for (j, path) in tree.trajectories.iter().enumerate() {
        for &id in path {
            m[id].insert(j);
        }
    }
    if let Some(orphan) = m.iter().position(BTreeSet::is_empty) {
        return Err(RolloutError::OrphanNode(orphan));
    }
    let mut child_nodes: Vec<Vec<usize>> = vec![vec![]; n_nodes];
    let mut root_children: Vec<usize> = Vec::new();
    for node in &tree.nodes {
        match node.parent {
            Some(p) => child_nodes[p].push(node.id),
            None => root_children.push(node.id),
        }
    }
    let rep = |ids: &[usize]| -> Vec<usize> {
        ids.iter()
            .map(|&c| *m[c].iter().next().expect("membership checked non-empty"))
            .collect()
    };
    let c_reps: Vec<Vec<usize>> = child_nodes.iter().map(|c| rep(c)).collect();
    let root_c_reps = rep(&root_children);
    let n_forks = usize::from(root_children.len() > 1)
        + child_nodes.iter().filter(|c| c.len() > 1).count();
    Ok(TreeMaps { m, child_nodes, root_children, c_reps, root_c_reps, n_forks })
}

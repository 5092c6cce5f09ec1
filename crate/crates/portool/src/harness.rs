//! Experiment orchestration: configuration, dataset construction, the
//! training loop, greedy evaluation, paired comparisons, ablation sweeps,
//! and artifact persistence.
//!
//! Every run is fully determined by its config: the world, the dataset and
//! all rollout seeds derive from `seed` through a splitmix chain, so a rerun
//! reproduces the metric artifacts byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{RngExt, SeedableRng};

use crate::advantage::{
    advantages_to_jsonl, token_advantages, AdvantageError, AdvantageMode,
};
use crate::optimizer::{ascend, batch_objective, OptimizerError, QueryBatchItem};
use crate::policy::{PolicyError, PolicyParams};
use crate::reward::{
    assign_tree_rewards_with, node_formatting, outcome_reward, rewards_to_jsonl, GVariant,
    RewardError,
};
use crate::rollout::{
    build_maps, independent_rollout, tree_rollout, RolloutEnv, RolloutError, RolloutOptions,
    TrajectoryTree, TreeMaps,
};
use crate::toolenv::{
    default_registry, generate_query, judge, EnvError, Family, QuerySpec, Registry, Verdict,
    WorldState, FAMILIES,
};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("config encode: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("training diverged to a non-finite objective at round {0}")]
    Diverged(usize),
}

/// splitmix64 step; the seed-derivation primitive for all run randomness.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x51_7c_c1_b7_27_22_0a_95, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const WORLD_TAG: u64 = 1;
const DATA_TAG: u64 = 2;
const ROLLOUT_TAG: u64 = 3;
const DUMP_TAG: u64 = 4;

/// Full experiment configuration. Serialized as TOML; missing keys fall
/// back to the defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Rollouts per query.
    pub n: usize,
    /// Branching factor per alive trajectory per step.
    pub f: usize,
    /// Maximum tree depth for training rollouts.
    pub t_max: usize,
    /// Step-reward decay.
    pub gamma: f64,
    /// Surrogate clip radius.
    pub epsilon: f64,
    /// Advantage composition mode (portool, trajectory_only, fork_only,
    /// no_scale, grpo, grpo_fm).
    pub mode: String,
    /// Step-reward aggregation variant (adaptive, max, avg, mix2).
    pub g_variant: String,
    pub train_queries: usize,
    pub eval_queries: usize,
    /// Queries per training round.
    pub batch_size: usize,
    pub rounds: usize,
    /// Step cap for greedy evaluation trajectories.
    pub eval_step_cap: usize,
    pub learning_rate: f64,
    /// Gradient passes per round over the round's batch.
    pub passes: usize,
    /// Sampling temperature for training rollouts.
    pub temperature: f64,
    pub max_step_tokens: usize,
    /// Initial parameters: "warm" biases steps toward one macro call then
    /// EOS; "zeros" starts from the uniform policy.
    pub init: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            n: 8,
            f: 2,
            t_max: 5,
            gamma: 0.95,
            epsilon: 0.2,
            mode: "portool".to_string(),
            g_variant: "adaptive".to_string(),
            train_queries: 256,
            eval_queries: 32,
            batch_size: 32,
            rounds: 200,
            eval_step_cap: 6,
            learning_rate: 2.0,
            passes: 4,
            temperature: 1.2,
            max_step_tokens: 48,
            init: "warm".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return bad("temperature must be finite and non-negative");
        }
        if self.n == 0 || self.f == 0 || self.t_max == 0 {
            return bad("n, f and t_max must be at least 1");
        }
        if self.train_queries == 0 || self.eval_queries == 0 {
            return bad("dataset sizes must be at least 1");
        }
        if self.batch_size == 0 || self.rounds == 0 || self.passes == 0 {
            return bad("batch_size, rounds and passes must be at least 1");
        }
        if self.eval_step_cap == 0 || self.max_step_tokens == 0 {
            return bad("eval_step_cap and max_step_tokens must be at least 1");
        }
        if self.init != "warm" && self.init != "zeros" {
            return bad("init must be \"warm\" or \"zeros\"");
        }
        self.advantage_mode()?;
        self.reward_variant()?;
        Ok(())
    }

    pub fn advantage_mode(&self) -> Result<AdvantageMode, HarnessError> {
        self.mode.parse().map_err(HarnessError::Config)
    }

    pub fn reward_variant(&self) -> Result<GVariant, HarnessError> {
        self.g_variant.parse().map_err(HarnessError::Config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, toml::to_string_pretty(self).map_err(HarnessError::TomlSer)?)?;
        Ok(())
    }

    pub fn initial_params(&self, vocab: &Vocabulary) -> PolicyParams {
        if self.init == "warm" {
            PolicyParams::warm_start(vocab)
        } else {
            PolicyParams::zeros(vocab.len())
        }
    }

    fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            n: self.n,
            f: self.f,
            t_max: self.t_max,
            temperature: self.temperature,
            max_step_tokens: self.max_step_tokens,
            execute_all: false,
        }
    }
}

/// Owned environment bundle for one experiment.
pub struct ExperimentEnv {
    pub world: WorldState,
    pub registry: Registry,
    pub vocab: Vocabulary,
}

impl ExperimentEnv {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        ExperimentEnv {
            world: WorldState::from_seed(derive_seed(&[cfg.seed, WORLD_TAG])),
            registry: default_registry(),
            vocab: Vocabulary::standard(),
        }
    }

    pub fn rollout_env(&self) -> RolloutEnv<'_> {
        RolloutEnv {
            registry: &self.registry,
            world: &self.world,
            vocab: &self.vocab,
        }
    }
}

/// Per-round evaluation metrics; one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub mean_outcome: f64,
    pub accuracy: f64,
    pub mean_steps: f64,
    pub unanswerable_rate: f64,
    /// Mean raw (unrescaled) formatting rubric value in [0, 1].
    pub mean_fm: f64,
    /// On-policy surrogate value of the round's batch before the update.
    pub objective_value: f64,
}

/// The 93 distinct template ids over the world's key universe: ordered
/// numeric pairs for the two-fact families, numeric and text lookups, the
/// clock pair, value x rate conversions, and the missing-key family.
pub fn template_pool() -> Vec<String> {
    const NUM_KEYS: [&str; 6] = ["k0", "k1", "k2", "k3", "k4", "k5"];
    const RATE_KEYS: [&str; 2] = ["k6", "k7"];
    const TEXT_KEYS: [&str; 4] = ["k12", "k13", "k14", "k15"];
    const MISSING_KEYS: [&str; 4] = ["k8", "k9", "k10", "k11"];
    let mut pool = Vec::new();
    for a in NUM_KEYS {
        for b in NUM_KEYS {
            if a != b {
                pool.push(format!("sum-two-facts:{a}:{b}"));
            }
        }
    }
    for a in NUM_KEYS {
        for b in NUM_KEYS {
            if a != b {
                pool.push(format!("compare-facts:{a}:{b}"));
            }
        }
    }
    for a in NUM_KEYS.iter().chain(TEXT_KEYS.iter()) {
        pool.push(format!("lookup-fact:{a}"));
    }
    pool.push("clock-now".to_string());
    for a in NUM_KEYS {
        pool.push(format!("clock-plus-fact:{a}"));
    }
    for a in NUM_KEYS {
        for r in RATE_KEYS {
            pool.push(format!("convert-fact:{a}:{r}"));
        }
    }
    for a in MISSING_KEYS {
        pool.push(format!("unanswerable-missing-key:{a}"));
    }
    pool
}

/// Draws disjoint train/eval query sets. Templates repeat when the count
/// exceeds the pool, but query ids stay unique; families are cycled so both
/// splits mix every query kind.
pub fn make_dataset(
    seed: u64,
    train_count: usize,
    eval_count: usize,
    world: &WorldState,
) -> Result<(Vec<QuerySpec>, Vec<QuerySpec>), HarnessError> {
    if train_count == 0 || eval_count == 0 {
        return Err(HarnessError::Config("dataset sizes must be at least 1".into()));
    }
    let pool = template_pool();
    let mut by_family: Vec<Vec<&str>> = vec![Vec::new(); FAMILIES.len()];
    for tid in &pool {
        let family = tid
            .split(':')
            .next()
            .and_then(Family::from_str)
            .expect("pool ids are well-formed");
        by_family[family.index()].push(tid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize, tag: &str| -> Result<Vec<QuerySpec>, HarnessError> {
        (0..count)
            .map(|i| {
                let options = &by_family[i % FAMILIES.len()];
                let tid = options[rng.random_range(0..options.len())];
                let mut q = generate_query(tid, world)?;
                q.id = format!("{tid}#{tag}{i:04}");
                Ok(q)
            })
            .collect()
    };
    let train = draw(train_count, "t")?;
    let eval = draw(eval_count, "e")?;
    Ok((train, eval))
}

/// Greedy evaluation: one temperature-0 trajectory per query, capped at
/// `step_cap` steps. Accuracy is the fraction judged true; the unanswerable
/// rate is the fraction with no final answer within the cap; truncated
/// trajectories count `step_cap` steps; mean_fm averages the raw rubric per
/// query, then across queries.
pub fn evaluate(
    params: &PolicyParams,
    queries: &[QuerySpec],
    env: &RolloutEnv,
    step_cap: usize,
    max_step_tokens: usize,
) -> Result<MetricRecord, HarnessError> {
    if queries.is_empty() {
        return Err(HarnessError::Config("evaluation set is empty".into()));
    }
    let opts = RolloutOptions {
        n: 1,
        f: 1,
        t_max: step_cap,
        temperature: 0.0,
        max_step_tokens,
        execute_all: false,
    };
    // Greedy decoding consumes no randomness; the rng only satisfies the
    // rollout signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut outcome, mut correct, mut steps, mut unable, mut fm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for query in queries {
        let chain = independent_rollout(query, params, env, &opts, &mut rng)?;
        let verdict = judge(query, &chain.step_outcomes(0));
        outcome += outcome_reward(verdict);
        if matches!(verdict, Verdict::True) {
            correct += 1.0;
        }
        let path = &chain.trajectories[0];
        steps += path.len() as f64;
        if !chain.nodes[*path.last().expect("paths are non-empty")].terminal {
            unable += 1.0;
        }
        let fms = node_formatting(&chain);
        fm += fms.iter().map(|f| f.raw).sum::<f64>() / fms.len() as f64;
    }
    let nq = queries.len() as f64;
    Ok(MetricRecord {
        round: 0,
        mean_outcome: outcome / nq,
        accuracy: correct / nq,
        mean_steps: steps / nq,
        unanswerable_rate: unable / nq,
        mean_fm: fm / nq,
        objective_value: 0.0,
    })
}

/// Final state of a training run.
pub struct TrainState {
    pub params: PolicyParams,
    pub round: usize,
    pub metric_history: Vec<MetricRecord>,
}

struct ScoredTree {
    tree: TrajectoryTree,
    maps: TreeMaps,
    outcomes: Vec<f64>,
    fm_rescaled: Vec<f64>,
    step_rewards: Vec<f64>,
}

fn score_tree(
    tree: TrajectoryTree,
    gamma: f64,
    variant: GVariant,
) -> Result<ScoredTree, HarnessError> {
    let maps = build_maps(&tree)?;
    let outcomes: Vec<f64> = (0..tree.trajectories.len())
        .map(|j| outcome_reward(judge(&tree.query, &tree.step_outcomes(j))))
        .collect();
    let fm_rescaled: Vec<f64> = node_formatting(&tree).iter().map(|f| f.rescaled).collect();
    let step_rewards: Vec<f64> =
        assign_tree_rewards_with(&tree, &maps, &outcomes, &fm_rescaled, gamma, variant)?
            .iter()
            .map(|r| r.value)
            .collect();
    Ok(ScoredTree { tree, maps, outcomes, fm_rescaled, step_rewards })
}

/// Runs the full training loop and persists config snapshot, metrics CSV
/// and the final parameter checkpoint under `outdir`.
pub fn run_train(cfg: &ExperimentConfig, outdir: &Path) -> Result<TrainState, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(outdir)?;
    cfg.save(&outdir.join("config.toml"))?;
    let mode = cfg.advantage_mode()?;
    let variant = cfg.reward_variant()?;
    let exp = ExperimentEnv::from_config(cfg);
    let env = exp.rollout_env();
    let (train_set, eval_set) = make_dataset(
        derive_seed(&[cfg.seed, DATA_TAG]),
        cfg.train_queries,
        cfg.eval_queries,
        &exp.world,
    )?;
    let opts = cfg.rollout_options();
    let mut params = cfg.initial_params(&exp.vocab);
    let mut history: Vec<MetricRecord> = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        // Frozen behavior snapshot: rollouts, rewards and advantages for
        // the round are all taken under params_old.
        let params_old = params.clone();
        let base = (round * cfg.batch_size) % train_set.len();
        let mut scored: Vec<ScoredTree> = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let qi = (base + k) % train_set.len();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                cfg.seed,
                ROLLOUT_TAG,
                round as u64,
                qi as u64,
            ]));
            let tree = if mode.is_group_baseline() {
                independent_rollout(&train_set[qi], &params_old, &env, &opts, &mut rng)?
            } else {
                tree_rollout(&train_set[qi], &params_old, &env, &opts, &mut rng)?
            };
            scored.push(score_tree(tree, cfg.gamma, variant)?);
        }
        let tables = scored
            .iter()
            .map(|s| {
                token_advantages(&s.tree, &s.maps, &s.step_rewards, &s.fm_rescaled, &s.outcomes, mode)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let items: Vec<QueryBatchItem> = scored
            .iter()
            .zip(&tables)
            .map(|(s, adv)| QueryBatchItem { tree: &s.tree, maps: &s.maps, adv })
            .collect();

        // The first pass is on-policy; its value is the round's objective.
        let mut objective = 0.0;
        for pass in 0..cfg.passes {
            let (j, grad) = batch_objective(&items, &params, &params_old, cfg.epsilon)
                .map_err(|e| match e {
                    OptimizerError::Diverged => HarnessError::Diverged(round),
                    other => HarnessError::Optimizer(other),
                })?;
            if pass == 0 {
                objective = j;
            }
            ascend(&mut params, &grad, cfg.learning_rate);
        }

        let mut rec = evaluate(&params, &eval_set, &env, cfg.eval_step_cap, cfg.max_step_tokens)?;
        rec.round = round;
        rec.objective_value = objective;
        history.push(rec);
    }

    write_metrics_csv(&outdir.join("metrics.csv"), &history)?;
    params.save(&outdir.join("params.json"))?;
    Ok(TrainState { params, round: cfg.rounds, metric_history: history })
}

/// Loads a checkpoint and evaluates it on the config's eval split.
pub fn run_eval(cfg: &ExperimentConfig, params_path: &Path) -> Result<MetricRecord, HarnessError> {
    cfg.validate()?;
    let exp = ExperimentEnv::from_config(cfg);
    let (_, eval_set) = make_dataset(
        derive_seed(&[cfg.seed, DATA_TAG]),
        cfg.train_queries,
        cfg.eval_queries,
        &exp.world,
    )?;
    let params = PolicyParams::load(params_path)?;
    evaluate(&params, &eval_set, &exp.rollout_env(), cfg.eval_step_cap, cfg.max_step_tokens)
}

fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One labeled run of a sweep.
pub struct LabeledRun {
    pub label: String,
    pub state: TrainState,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: &'a str,
    round: usize,
    mean_outcome: f64,
    accuracy: f64,
    mean_steps: f64,
    unanswerable_rate: f64,
    mean_fm: f64,
    objective_value: f64,
}

fn write_summary_csv(path: &Path, runs: &[LabeledRun]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for run in runs {
        for r in &run.state.metric_history {
            w.serialize(SummaryRow {
                label: &run.label,
                round: r.round,
                mean_outcome: r.mean_outcome,
                accuracy: r.accuracy,
                mean_steps: r.mean_steps,
                unanswerable_rate: r.unanswerable_rate,
                mean_fm: r.mean_fm,
                objective_value: r.objective_value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_labeled<F>(
    base: &ExperimentConfig,
    labels: &[String],
    outdir: &Path,
    apply: F,
) -> Result<Vec<LabeledRun>, HarnessError>
where
    F: Fn(&mut ExperimentConfig, &str),
{
    if labels.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one setting".into()));
    }
    fs::create_dir_all(outdir)?;
    let mut runs = Vec::with_capacity(labels.len());
    for label in labels {
        let mut cfg = base.clone();
        apply(&mut cfg, label);
        let state = run_train(&cfg, &outdir.join(label))?;
        runs.push(LabeledRun { label: label.clone(), state });
    }
    write_summary_csv(&outdir.join("summary.csv"), &runs)?;
    Ok(runs)
}

/// Paired comparison over advantage modes: identical seed, dataset and
/// rollout seed chain; one run directory per mode plus a joined summary.
pub fn run_compare(
    base: &ExperimentConfig,
    modes: &[String],
    outdir: &Path,
) -> Result<Vec<LabeledRun>, HarnessError> {
    run_labeled(base, modes, outdir, |cfg, label| cfg.mode = label.to_string())
}

/// Decay sweep at fixed mode; labels are `gamma-<value>`.
pub fn ablate_gamma(
    base: &ExperimentConfig,
    gammas: &[f64],
    outdir: &Path,
) -> Result<Vec<LabeledRun>, HarnessError> {
    if gammas.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one setting".into()));
    }
    let labels: Vec<String> = gammas.iter().map(|g| format!("gamma-{g}")).collect();
    let mut runs = Vec::with_capacity(gammas.len());
    fs::create_dir_all(outdir)?;
    for (label, &gamma) in labels.iter().zip(gammas) {
        let mut cfg = base.clone();
        cfg.gamma = gamma;
        let state = run_train(&cfg, &outdir.join(label))?;
        runs.push(LabeledRun { label: label.clone(), state });
    }
    write_summary_csv(&outdir.join("summary.csv"), &runs)?;
    Ok(runs)
}

/// Advantage-composition sweep: the tree modes against each other.
pub fn ablate_advantage(
    base: &ExperimentConfig,
    outdir: &Path,
) -> Result<Vec<LabeledRun>, HarnessError> {
    let modes: Vec<String> = ["portool", "trajectory_only", "fork_only", "no_scale"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    run_compare(base, &modes, outdir)
}

/// Aggregation-variant sweep at fixed mode; labels are `g-<variant>`.
pub fn ablate_gfn(base: &ExperimentConfig, outdir: &Path) -> Result<Vec<LabeledRun>, HarnessError> {
    let variants = ["adaptive", "max", "avg", "mix2"];
    let labels: Vec<String> = variants.iter().map(|v| format!("g-{v}")).collect();
    let mut runs = Vec::with_capacity(variants.len());
    fs::create_dir_all(outdir)?;
    for (label, variant) in labels.iter().zip(variants) {
        let mut cfg = base.clone();
        cfg.g_variant = variant.to_string();
        let state = run_train(&cfg, &outdir.join(label))?;
        runs.push(LabeledRun { label: label.clone(), state });
    }
    write_summary_csv(&outdir.join("summary.csv"), &runs)?;
    Ok(runs)
}

/// Writes the train/eval query splits as JSONL.
pub fn gen_data(cfg: &ExperimentConfig, outdir: &Path) -> Result<(), HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(outdir)?;
    let exp = ExperimentEnv::from_config(cfg);
    let (train, eval) = make_dataset(
        derive_seed(&[cfg.seed, DATA_TAG]),
        cfg.train_queries,
        cfg.eval_queries,
        &exp.world,
    )?;
    let dump = |queries: &[QuerySpec]| {
        let mut out = String::new();
        for q in queries {
            out.push_str(&serde_json::to_string(q).expect("serializable"));
            out.push('\n');
        }
        out
    };
    fs::write(outdir.join("train.jsonl"), dump(&train))?;
    fs::write(outdir.join("eval.jsonl"), dump(&eval))?;
    Ok(())
}

/// Rolls out one tree for a template and dumps tree, reward and advantage
/// JSONL artifacts. With no checkpoint the configured initial policy is used.
pub fn dump_tree(
    cfg: &ExperimentConfig,
    template_id: Option<&str>,
    params_path: Option<&Path>,
    outdir: &Path,
) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(outdir)?;
    let mode = cfg.advantage_mode()?;
    let variant = cfg.reward_variant()?;
    let exp = ExperimentEnv::from_config(cfg);
    let env = exp.rollout_env();
    let tid = template_id.unwrap_or("sum-two-facts:k0:k1");
    let query = generate_query(tid, &exp.world)?;
    let params = match params_path {
        Some(p) => PolicyParams::load(p)?,
        None => cfg.initial_params(&exp.vocab),
    };
    let seed = derive_seed(&[cfg.seed, DUMP_TAG]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = tree_rollout(&query, &params, &env, &cfg.rollout_options(), &mut rng)?;
    tree.seed = seed;
    let scored = score_tree(tree, cfg.gamma, variant)?;
    let adv = token_advantages(
        &scored.tree,
        &scored.maps,
        &scored.step_rewards,
        &scored.fm_rescaled,
        &scored.outcomes,
        mode,
    )?;
    let fms = node_formatting(&scored.tree);
    let recs = assign_tree_rewards_with(
        &scored.tree,
        &scored.maps,
        &scored.outcomes,
        &scored.fm_rescaled,
        cfg.gamma,
        variant,
    )?;
    fs::write(outdir.join("tree.jsonl"), scored.tree.to_jsonl())?;
    fs::write(outdir.join("rewards.jsonl"), rewards_to_jsonl(&fms, &recs, &scored.outcomes))?;
    fs::write(outdir.join("advantages.jsonl"), advantages_to_jsonl(&adv))?;
    Ok(outdir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            n: 2,
            f: 2,
            t_max: 2,
            train_queries: 8,
            eval_queries: 4,
            batch_size: 4,
            rounds: 2,
            eval_step_cap: 3,
            max_step_tokens: 8,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_and_partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.mode, cfg.mode);
        assert_eq!(back.rounds, 200);

        let partial: ExperimentConfig = toml::from_str("seed = 11\nmode = \"grpo\"\n").unwrap();
        assert_eq!(partial.seed, 11);
        assert_eq!(partial.mode, "grpo");
        assert_eq!(partial.gamma, 0.95);
        assert_eq!(partial.batch_size, 32);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.epsilon = 1.5;
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig::default();
        cfg.mode = "not-a-mode".into();
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig::default();
        cfg.gamma = -0.1;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn template_pool_is_complete_and_instantiable() {
        let pool = template_pool();
        assert_eq!(pool.len(), 93);
        let distinct: std::collections::BTreeSet<&String> = pool.iter().collect();
        assert_eq!(distinct.len(), 93);
        let world = WorldState::from_seed(5);
        for tid in &pool {
            generate_query(tid, &world).unwrap_or_else(|e| panic!("{tid}: {e}"));
        }
    }

    #[test]
    fn dataset_is_disjoint_and_mixes_families() {
        let world = WorldState::from_seed(9);
        let (train, eval) = make_dataset(42, 14, 7, &world).unwrap();
        assert_eq!(train.len(), 14);
        assert_eq!(eval.len(), 7);
        let ids: std::collections::BTreeSet<&String> =
            train.iter().chain(eval.iter()).map(|q| &q.id).collect();
        assert_eq!(ids.len(), 21, "query ids must be globally unique");
        // Family cycling covers every family in each split of size >= 7.
        for split in [&train, &eval] {
            let fams: std::collections::BTreeSet<usize> = split
                .iter()
                .filter_map(|q| q.family().map(|f| f.index()))
                .collect();
            assert_eq!(fams.len(), FAMILIES.len());
        }
        // Determinism.
        let (train2, _) = make_dataset(42, 14, 7, &world).unwrap();
        assert_eq!(train[0].id, train2[0].id);
        assert_eq!(train[5].template_id, train2[5].template_id);
    }

    #[test]
    fn evaluate_zero_policy_is_finite_and_capped() {
        let cfg = tiny_config();
        let exp = ExperimentEnv::from_config(&cfg);
        let (_, eval_set) = make_dataset(1, 4, 4, &exp.world).unwrap();
        let params = PolicyParams::zeros(exp.vocab.len());
        let rec = evaluate(&params, &eval_set, &exp.rollout_env(), 3, 6).unwrap();
        assert!(rec.mean_steps <= 3.0 + 1e-12);
        assert!((0.0..=1.0).contains(&rec.accuracy));
        assert!((0.0..=1.0).contains(&rec.unanswerable_rate));
        assert!((0.0..=1.0).contains(&rec.mean_fm));
        assert!(rec.mean_outcome.is_finite());
        let again = evaluate(&params, &eval_set, &exp.rollout_env(), 3, 6).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn run_train_writes_artifacts_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let state = run_train(&tiny_config(), dir.path()).unwrap();
        assert_eq!(state.metric_history.len(), 2);
        assert_eq!(state.round, 2);
        assert!(dir.path().join("config.toml").is_file());
        assert!(dir.path().join("params.json").is_file());
        let csv_text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,mean_outcome,accuracy,mean_steps,unanswerable_rate,mean_fm,objective_value"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn zero_learning_rate_keeps_metrics_flat() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        cfg.init = "zeros".to_string();
        let state = run_train(&cfg, dir.path()).unwrap();
        let h = &state.metric_history;
        assert_eq!(h[0].mean_outcome, h[1].mean_outcome);
        assert_eq!(h[0].accuracy, h[1].accuracy);
        assert!(state.params.theta.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn identical_seeds_reproduce_metrics_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_train(&tiny_config(), d1.path()).unwrap();
        run_train(&tiny_config(), d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("metrics.csv")).unwrap();
        let m2 = fs::read(d2.path().join("metrics.csv")).unwrap();
        assert!(!m1.is_empty());
        assert_eq!(m1, m2);
    }

    #[test]
    fn compare_pairs_runs_and_writes_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.rounds = 1;
        let runs = run_compare(
            &cfg,
            &["portool".to_string(), "grpo".to_string()],
            dir.path(),
        )
        .unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].state.metric_history.len(), runs[1].state.metric_history.len());
        assert!(dir.path().join("summary.csv").is_file());
        assert!(dir.path().join("portool/metrics.csv").is_file());
        assert!(dir.path().join("grpo/metrics.csv").is_file());
    }

    #[test]
    fn dump_tree_emits_three_jsonl_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        dump_tree(&cfg, Some("lookup-fact:k2"), None, dir.path()).unwrap();
        for name in ["tree.jsonl", "rewards.jsonl", "advantages.jsonl"] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            assert!(!text.trim().is_empty(), "{name} must not be empty");
            for line in text.lines() {
                serde_json::from_str::<serde_json::Value>(line).unwrap();
            }
        }
    }

    #[test]
    fn gen_data_round_trips_queries() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.train_queries = 9;
        cfg.eval_queries = 7;
        gen_data(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 9);
        let q: QuerySpec = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(!q.id.is_empty());
        let eval_text = fs::read_to_string(dir.path().join("eval.jsonl")).unwrap();
        assert_eq!(eval_text.lines().count(), 7);
    }
}

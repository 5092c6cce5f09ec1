//! Command-line entry point: dataset generation, training, evaluation,
//! paired comparisons, ablation sweeps and tree dumps.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use portool::harness::{
    ablate_advantage, ablate_gamma, ablate_gfn, dump_tree, gen_data, run_compare, run_eval,
    run_train, ExperimentConfig, LabeledRun,
};

#[derive(Parser)]
#[command(
    name = "portool",
    version,
    about = "Desk-scale tree-rollout RL for tool-use policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus inline overrides; overrides win over the file, the file
/// wins over defaults.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rollouts per query.
    #[arg(long)]
    n: Option<usize>,
    /// Branching factor per step.
    #[arg(long)]
    f: Option<usize>,
    /// Maximum tree depth for training rollouts.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Advantage mode: portool, trajectory_only, fork_only, no_scale,
    /// grpo, grpo_fm.
    #[arg(long)]
    mode: Option<String>,
    /// Step-reward aggregation: adaptive, max, avg, mix2.
    #[arg(long)]
    g_variant: Option<String>,
    #[arg(long)]
    train_queries: Option<usize>,
    #[arg(long)]
    eval_queries: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    eval_step_cap: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Gradient passes per round.
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_step_tokens: Option<usize>,
    /// Initial parameters: warm, zeros.
    #[arg(long)]
    init: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        apply!(
            seed, n, f, t_max, gamma, epsilon, mode, g_variant, train_queries, eval_queries,
            batch_size, rounds, eval_step_cap, learning_rate, passes, temperature,
            max_step_tokens, init
        );
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/eval query splits as JSONL.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/data")]
        out: PathBuf,
    },
    /// Train a policy; writes config snapshot, metrics CSV and checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a saved checkpoint on the config's eval split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parameter checkpoint (params.json from a training run).
        #[arg(long)]
        params: PathBuf,
    },
    /// Paired comparison across advantage modes (same seeds and data).
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "portool,grpo,grpo_fm")]
        modes: Vec<String>,
    },
    /// Step-reward decay sweep.
    AblateGamma {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/ablate-gamma")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.9,0.95,1.0")]
        gammas: Vec<f64>,
    },
    /// Advantage-composition sweep over the tree modes.
    AblateAdvantage {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/ablate-advantage")]
        out: PathBuf,
    },
    /// Aggregation-variant sweep (adaptive, max, avg, mix2).
    AblateGfn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/ablate-gfn")]
        out: PathBuf,
    },
    /// Roll out one tree and dump tree/reward/advantage JSONL.
    DumpTree {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/dump")]
        out: PathBuf,
        /// Template id, e.g. sum-two-facts:k0:k1.
        #[arg(long)]
        template: Option<String>,
        /// Optional checkpoint; defaults to the initial policy.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

fn print_sweep(runs: &[LabeledRun]) {
    for run in runs {
        if let Some(last) = run.state.metric_history.last() {
            println!(
                "{}: final accuracy {:.3}, mean outcome {:.3}, unanswerable {:.3}",
                run.label, last.accuracy, last.mean_outcome, last.unanswerable_rate
            );
        }
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData { cfg, out } => {
            gen_data(&cfg.resolve()?, &out)?;
            println!("wrote train.jsonl and eval.jsonl under {}", out.display());
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let state = run_train(&cfg, &out)?;
            let last = state.metric_history.last().expect("at least one round");
            println!(
                "trained {} rounds; final accuracy {:.3}, mean outcome {:.3}, artifacts in {}",
                state.round,
                last.accuracy,
                last.mean_outcome,
                out.display()
            );
        }
        Command::Eval { cfg, params } => {
            let rec = run_eval(&cfg.resolve()?, &params)?;
            println!(
                "accuracy {:.4} mean_outcome {:.4} mean_steps {:.3} unanswerable {:.4} mean_fm {:.4}",
                rec.accuracy, rec.mean_outcome, rec.mean_steps, rec.unanswerable_rate, rec.mean_fm
            );
        }
        Command::Compare { cfg, out, modes } => {
            let runs = run_compare(&cfg.resolve()?, &modes, &out)?;
            print_sweep(&runs);
            println!("summary in {}", out.join("summary.csv").display());
        }
        Command::AblateGamma { cfg, out, gammas } => {
            let runs = ablate_gamma(&cfg.resolve()?, &gammas, &out)?;
            print_sweep(&runs);
            println!("summary in {}", out.join("summary.csv").display());
        }
        Command::AblateAdvantage { cfg, out } => {
            let runs = ablate_advantage(&cfg.resolve()?, &out)?;
            print_sweep(&runs);
            println!("summary in {}", out.join("summary.csv").display());
        }
        Command::AblateGfn { cfg, out } => {
            let runs = ablate_gfn(&cfg.resolve()?, &out)?;
            print_sweep(&runs);
            println!("summary in {}", out.join("summary.csv").display());
        }
        Command::DumpTree { cfg, out, template, params } => {
            let dir = dump_tree(
                &cfg.resolve()?,
                template.as_deref(),
                params.as_deref(),
                &out,
            )?;
            println!("wrote tree.jsonl, rewards.jsonl, advantages.jsonl under {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

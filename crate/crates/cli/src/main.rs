//! Command-line harness for the toy diffusion fine-tuning laboratory.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime
//! error. `ADASCOPE_OUTPUT_DIR` overrides the configured output root.

use std::path::PathBuf;
use std::process::ExitCode;

use adascope::experiment::{median, Experiment, RewardName, RunConfig};
use adascope::finetune::ScopeMode;
use adascope::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "adascope", version, about = "Adaptive-scope RL fine-tuning of a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the denoiser and save a checkpoint.
    Pretrain(Common),
    /// Fine-tune with a scope mode and write metrics.csv.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// adaptive, full or fixed:A,B.
        #[arg(long, value_parser = parse_scope)]
        scope: Option<ScopeMode>,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure the gain series and the detected scope for every prompt.
    ProbeScope {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic and Monte-Carlo inter-step correlations.
    AnalyzeCorr(Common),
    /// Run every configured scope mode over the ablation seeds.
    Ablate(Common),
    /// Summarize all runs under the output root into CSV and SVG.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RewardArg {
    Proximity,
    Compress,
    Incompress,
    Composite,
}

impl From<RewardArg> for RewardName {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Proximity => RewardName::Proximity,
            RewardArg::Compress => RewardName::Compress,
            RewardArg::Incompress => RewardName::Incompress,
            RewardArg::Composite => RewardName::Composite,
        }
    }
}

fn parse_scope(s: &str) -> Result<ScopeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigKeys(_) => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

/// Loads and overrides the config, validating before anything is written.
fn experiment(common: &Common, scope: Option<ScopeMode>) -> Result<(Experiment, u64), Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds.seed = seed;
    }
    if let Some(r) = common.reward {
        cfg.reward.name = r.into();
    }
    if let Some(n) = common.rounds {
        cfg.finetune.rounds = n;
    }
    if let Some(s) = scope {
        cfg.finetune.scope = s;
    }
    let seed = cfg.seeds.seed;
    let exp = Experiment::with_env_root(cfg).map_err(Failure::Config)?;
    Ok((exp, seed))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Pretrain(common) => {
            let (exp, seed) = experiment(&common, None)?;
            let run = exp.pretrain(seed)?;
            let o = &run.outcome;
            println!(
                "pretrain seed {seed}: loss {:.4} -> {:.4} ({})",
                o.initial_loss,
                o.final_smoothed_loss,
                if o.success { "converged" } else { "below target" }
            );
            println!("wrote {}", run.dir.display());
        }
        Command::Finetune {
            common,
            scope,
            checkpoint,
        } => {
            let (exp, seed) = experiment(&common, scope)?;
            let scope = exp.config.finetune.scope;
            let run = exp.finetune(checkpoint.as_deref(), scope, seed)?;
            if let Some(last) = run.rounds.last() {
                println!(
                    "finetune {scope} seed {seed}: final mean reward {:.4}, grad steps {}",
                    last.mean_reward, last.grad_steps_cum
                );
            }
            println!(
                "evaluation: mean reward {:.4}, diversity {:.4}",
                run.evaluation.mean_reward, run.evaluation.diversity
            );
            println!("wrote {}", run.dir.display());
        }
        Command::ProbeScope { common, checkpoint } => {
            let (exp, seed) = experiment(&common, None)?;
            let run = exp.probe_scope(checkpoint.as_deref(), seed)?;
            for d in &run.decisions {
                println!(
                    "prompt {}: t_start={} t_end={} start_fallback={} end_fallback={} trivial={}",
                    d.prompt,
                    d.t_start,
                    d.t_end,
                    d.start.fallback,
                    d.end.fallback,
                    d.start.trivial || d.end.trivial
                );
            }
            println!("wrote {}", run.dir.display());
        }
        Command::AnalyzeCorr(common) => {
            let (exp, seed) = experiment(&common, None)?;
            let rows = exp.analyze_corr(seed)?;
            let worst = rows
                .iter()
                .map(|r| (r.corr_analytic - r.corr_mc).abs() / r.std_error.max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            println!("{} rows; largest |analytic - mc| = {worst:.2} standard errors", rows.len());
            println!("wrote {}", exp.root.join("analyze-corr").display());
        }
        Command::Ablate(common) => {
            let seeds_given = common.seed.is_some();
            let (exp, seed) = experiment(&common, None)?;
            let seeds = if seeds_given {
                vec![seed]
            } else {
                exp.config.seeds.ablation.clone()
            };
            let ab = exp.ablate(&seeds)?;
            for &scope in &exp.config.ablate.grid {
                let rows = ab.rows_for(scope);
                let pick = |f: fn(&adascope::experiment::AblationRow) -> f64| {
                    median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                println!(
                    "{scope}: median final reward {:.4}, eval reward {:.4}, eval diversity {:.4}, grad steps {}",
                    pick(|r| r.final_mean_reward),
                    pick(|r| r.eval_mean_reward),
                    pick(|r| r.eval_diversity),
                    pick(|r| r.grad_steps_total as f64)
                );
            }
            println!("wrote {}", ab.dir.display());
        }
        Command::Report(common) => {
            let (exp, _) = experiment(&common, None)?;
            for p in exp.report()? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

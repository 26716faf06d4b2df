//! Experiment harness: configuration, persistence and the runners behind
//! every CLI subcommand.
//!
//! All outputs of a command live under one directory below the output root:
//!
//! | command        | directory                              |
//! |----------------|----------------------------------------|
//! | `pretrain`     | `pretrain/seed-<s>/`                   |
//! | `finetune`     | `finetune/<scope>/seed-<s>/`           |
//! | `probe-scope`  | `probe-scope/seed-<s>/`                |
//! | `analyze-corr` | `analyze-corr/`                        |
//! | `ablate`       | `ablate/` (one `<scope>/seed-<s>/` per run) |
//! | `report`       | `report/`                              |
//!
//! Each directory receives `config.toml` first and `manifest.json` last.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

pub use checkpoint::Checkpoint;
pub use config::{RewardName, RunConfig};
pub use io::{read_metrics, write_atomic, MetricsRow, MetricsWriter, RunManifest, METRICS_COLUMNS};
use report::{line_chart, Series};

use crate::diffusion::{pretrain, DenoiserModel, PromptId, PretrainOutcome};
use crate::error::{Error, Result};
use crate::finetune::{finetune, EvalSummary, FinetuneConfig, FinetuneSetup, RoundMetrics, ScopeMode};
use crate::gauss::{corr_analytic, corr_monte_carlo, CorrQuery};
use crate::rng::SeedTree;
use crate::schedule::NoiseSchedule;
use crate::scope::{select_scope, ScopeDecision, StepRange};

pub const TOOL_NAME: &str = "adascope";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "ADASCOPE_OUTPUT_DIR";

/// Directory name for a scope mode, e.g. `fixed-5-32`.
pub fn scope_slug(mode: ScopeMode) -> String {
    match mode {
        ScopeMode::Fixed { start, end } => format!("fixed-{start}-{end}"),
        other => other.to_string(),
    }
}

/// Median with the midpoint rule for even counts; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Cumulative gradient steps spent before the first round whose mean reward
/// reaches `threshold`: the count at the end of the preceding round, or 0
/// when the first round already qualifies. `None` if never reached.
pub fn steps_to_threshold(curve: &[(f64, u64)], threshold: f64) -> Option<u64> {
    let i = curve.iter().position(|(r, _)| *r >= threshold)?;
    Some(if i == 0 { 0 } else { curve[i - 1].1 })
}

fn reward_curve(rows: &[RoundMetrics]) -> Vec<(f64, u64)> {
    rows.iter().map(|r| (r.mean_reward, r.grad_steps_cum)).collect()
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub dir: PathBuf,
    pub outcome: PretrainOutcome,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub dir: PathBuf,
    pub scope: ScopeMode,
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
    pub evaluation: EvalSummary,
    pub decisions: Vec<(usize, ScopeDecision)>,
    pub model: DenoiserModel,
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub dir: PathBuf,
    pub decisions: Vec<ScopeDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrRow {
    pub t: usize,
    pub tau: usize,
    pub i: usize,
    pub j: usize,
    pub corr_analytic: f64,
    pub corr_mc: f64,
    pub std_error: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub scope: ScopeMode,
    pub seed: u64,
    pub final_mean_reward: f64,
    pub final_diversity: f64,
    pub eval_mean_reward: f64,
    pub eval_diversity: f64,
    pub grad_steps_total: u64,
    /// Gradient steps times parameter count.
    pub compute: f64,
    pub mean_scope_width: f64,
    pub steps_to_threshold: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub dir: PathBuf,
    pub runs: Vec<FinetuneRun>,
    pub rows: Vec<AblationRow>,
    /// 90% of the median final mean reward of the full-scope runs, when
    /// the grid contains `full`.
    pub threshold: Option<f64>,
}

impl Ablation {
    pub fn rows_for(&self, scope: ScopeMode) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.scope == scope).collect()
    }
}

/// A validated configuration bound to an output root.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Experiment {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            root: root.into(),
        })
    }

    /// Output root from `ADASCOPE_OUTPUT_DIR` if set, else `output.dir`.
    pub fn with_env_root(config: RunConfig) -> Result<Self> {
        let root = std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| config.output.dir.clone());
        Self::new(config, root)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    fn begin(&self, dir: &Path, command: &str, seeds: Vec<u64>) -> Result<RunManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.save(dir.join("config.toml"))?;
        Ok(RunManifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config_hash: self.config.content_hash()?,
            config: toml::Table::try_from(&self.config).map_err(|e| Error::Config(e.to_string()))?,
            seeds,
            started_at: io::now(),
            finished_at: String::new(),
            notes: Default::default(),
            files: Vec::new(),
        })
    }

    fn pretrain_model(&self, seed: u64) -> Result<PretrainOutcome> {
        let data = self.config.data()?;
        let s = self.schedule()?;
        pretrain(self.config.init_model(seed)?, &data, &s, &self.config.pretrain, seed)
    }

    /// `pretrain/seed-<s>/`: checkpoint.json, loss.csv.
    pub fn pretrain(&self, seed: u64) -> Result<PretrainRun> {
        let dir = self.root.join("pretrain").join(format!("seed-{seed}"));
        let mut manifest = self.begin(&dir, "pretrain", vec![seed])?;
        let outcome = self.pretrain_model(seed)?;
        let mut csv = String::from("step,loss\n");
        for (n, l) in outcome.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{n},{l}\n"));
        }
        write_atomic(dir.join("loss.csv"), csv.as_bytes())?;
        self.checkpoint("pretrain", seed, None, &outcome.model)?
            .save(dir.join("checkpoint.json"))?;
        manifest.notes.insert("initial_loss".into(), json!(outcome.initial_loss));
        manifest.notes.insert("final_smoothed_loss".into(), json!(outcome.final_smoothed_loss));
        manifest.notes.insert("success".into(), json!(outcome.success));
        manifest.finish(&dir)?;
        Ok(PretrainRun { dir, outcome })
    }

    fn checkpoint(&self, stage: &str, seed: u64, round: Option<usize>, model: &DenoiserModel) -> Result<Checkpoint> {
        Ok(Checkpoint {
            stage: stage.into(),
            seed,
            round,
            schedule: self.schedule()?,
            model: model.clone(),
        })
    }

    /// Loads a checkpoint whose schedule and architecture match the config.
    pub fn load_model(&self, path: &Path) -> Result<DenoiserModel> {
        let ck = Checkpoint::load(path)?;
        if ck.schedule != self.schedule()? {
            return Err(Error::Config(format!(
                "{} was trained with a different noise schedule",
                path.display()
            )));
        }
        if ck.model.dims() != self.config.model_dims()? {
            return Err(Error::Config(format!(
                "{} has a different model architecture",
                path.display()
            )));
        }
        Ok(ck.model)
    }

    /// The checkpoint at `path`, or a fresh pretraining run for `seed`.
    pub fn starting_model(&self, path: Option<&Path>, seed: u64) -> Result<DenoiserModel> {
        match path {
            Some(p) => self.load_model(p),
            None => Ok(self.pretrain_model(seed)?.model),
        }
    }

    /// Runs fine-tuning from `model` into `dir`: metrics.csv,
    /// diagnostics.csv, scopes.csv, decisions.csv, evaluation.json,
    /// periodic `checkpoints/round-NNNN.json` and final.json.
    fn finetune_into(&self, dir: &Path, model: DenoiserModel, scope: ScopeMode, seed: u64) -> Result<FinetuneRun> {
        let s = self.schedule()?;
        let alignment = self.config.alignment()?;
        let mut reward = self.config.reward_fn()?;
        let cfg = FinetuneConfig {
            scope,
            ..self.config.finetune
        };
        let setup = FinetuneSetup {
            schedule: &s,
            alignment: &alignment,
            detect: &self.config.scope,
            config: &cfg,
            seed,
        };
        let mut writer = MetricsWriter::create(dir, self.config.output.wallclock_in_metrics)?;
        let every = self.config.output.checkpoint_every;
        let outcome = finetune(model, &mut reward, setup, |m, model| {
            writer.write_row(m)?;
            let done = m.round + 1;
            if every > 0 && done % every == 0 && done < cfg.rounds {
                self.checkpoint("finetune", seed, Some(done), model)?
                    .save(dir.join("checkpoints").join(format!("round-{done:04}.json")))?;
            }
            Ok(())
        })?;
        drop(writer);

        let mut scopes = String::from("round,prompt,start,end\n");
        for (round, per_prompt) in outcome.scopes.iter().enumerate() {
            for (z, r) in per_prompt.iter().enumerate() {
                scopes.push_str(&format!("{round},{z},{},{}\n", r.start, r.end));
            }
        }
        write_atomic(dir.join("scopes.csv"), scopes.as_bytes())?;
        let mut decisions =
            String::from("round,prompt,t_start,t_end,start_fallback,start_trivial,end_fallback,end_trivial\n");
        for (round, d) in &outcome.decisions {
            decisions.push_str(&format!(
                "{round},{},{},{},{},{},{},{}\n",
                d.prompt, d.t_start, d.t_end, d.start.fallback, d.start.trivial, d.end.fallback, d.end.trivial
            ));
        }
        write_atomic(dir.join("decisions.csv"), decisions.as_bytes())?;
        let eval = &outcome.evaluation;
        let eval_json = json!({
            "mean_reward": eval.mean_reward,
            "std_reward": eval.std_reward,
            "diversity": eval.diversity,
            "per_prompt_reward": eval.per_prompt_reward,
            "per_prompt_diversity": eval.per_prompt_diversity,
            "samples_per_prompt": cfg.eval_samples_per_prompt,
        });
        let text = serde_json::to_string_pretty(&eval_json).map_err(|e| Error::format(dir, e))?;
        write_atomic(dir.join("evaluation.json"), text.as_bytes())?;
        self.checkpoint("finetune", seed, Some(cfg.rounds), &outcome.model)?
            .save(dir.join("final.json"))?;
        Ok(FinetuneRun {
            dir: dir.to_path_buf(),
            scope,
            seed,
            rounds: outcome.rounds,
            evaluation: outcome.evaluation,
            decisions: outcome.decisions,
            model: outcome.model,
        })
    }

    /// `finetune/<scope>/seed-<s>/`. Starts from `checkpoint` or pretrains
    /// first (saving `pretrained.json`).
    pub fn finetune(&self, checkpoint: Option<&Path>, scope: ScopeMode, seed: u64) -> Result<FinetuneRun> {
        let dir = self.root.join("finetune").join(scope_slug(scope)).join(format!("seed-{seed}"));
        let model = match checkpoint {
            Some(p) => self.load_model(p)?,
            None => {
                let pre = self.pretrain_model(seed)?;
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                self.checkpoint("pretrain", seed, None, &pre.model)?
                    .save(dir.join("pretrained.json"))?;
                pre.model
            }
        };
        let mut manifest = self.begin(&dir, "finetune", vec![seed])?;
        let run = self.finetune_into(&dir, model, scope, seed)?;
        let last = run.rounds.last();
        manifest.notes.insert("scope".into(), json!(scope.to_string()));
        manifest.notes.insert("reward".into(), json!(self.config.reward_fn()?.name()));
        manifest.notes.insert("final_mean_reward".into(), json!(last.map(|r| r.mean_reward)));
        manifest.notes.insert("grad_steps_total".into(), json!(last.map(|r| r.grad_steps_cum)));
        manifest.notes.insert("eval_mean_reward".into(), json!(run.evaluation.mean_reward));
        manifest.notes.insert("eval_diversity".into(), json!(run.evaluation.diversity));
        manifest.finish(&dir)?;
        Ok(run)
    }

    /// `probe-scope/seed-<s>/`: one `probe-z<z>.csv` per prompt with the gain
    /// series and their differences, each ending in a `#` summary line, plus
    /// scopes.csv.
    pub fn probe_scope(&self, checkpoint: Option<&Path>, seed: u64) -> Result<ProbeRun> {
        let model = self.starting_model(checkpoint, seed)?;
        let dir = self.root.join("probe-scope").join(format!("seed-{seed}"));
        let manifest = self.begin(&dir, "probe-scope", vec![seed])?;
        let s = self.schedule()?;
        let alignment = self.config.alignment()?;
        let reward = self.config.reward_fn()?;
        let tree = SeedTree::new(seed);
        let mut decisions = Vec::new();
        let mut summary = String::from(
            "prompt,t_start,t_end,start_fallback,start_trivial,end_fallback,end_trivial,threshold_s,threshold_p\n",
        );
        for z in (0..self.config.data.prompts).map(PromptId) {
            let d = select_scope(
                &model,
                &s,
                z,
                &alignment,
                &reward,
                &self.config.scope,
                &tree,
                &format!("probe-scope/{z}"),
            )?;
            write_atomic(dir.join(format!("probe-z{z}.csv")), probe_csv(&d).as_bytes())?;
            summary.push_str(&format!(
                "{z},{},{},{},{},{},{},{},{}\n",
                d.t_start,
                d.t_end,
                d.start.fallback,
                d.start.trivial,
                d.end.fallback,
                d.end.trivial,
                d.start.threshold,
                d.end.threshold
            ));
            decisions.push(d);
        }
        write_atomic(dir.join("scopes.csv"), summary.as_bytes())?;
        manifest.finish(&dir)?;
        Ok(ProbeRun { dir, decisions })
    }

    /// Analytic and Monte-Carlo inter-step correlations for every `t` and
    /// configured lag.
    pub fn corr_rows(&self, seed: u64) -> Result<Vec<CorrRow>> {
        let s = self.schedule()?;
        let cov = self.config.covariance()?;
        let a = &self.config.analysis;
        let tree = SeedTree::new(seed);
        let mut rows = Vec::new();
        for &tau in &a.taus {
            for t in 0..=s.steps() - tau {
                let q = CorrQuery::new(t, tau, a.i, a.j);
                let analytic = corr_analytic(&s, &cov, q)?;
                let mc_seed = tree.subtree(&format!("corr/{tau}/{t}")).root();
                let mc = corr_monte_carlo(&s, &cov, q, a.mc_samples, mc_seed)?;
                let own = corr_analytic(&s, &cov, CorrQuery::new(t, tau, a.i, a.i))?;
                rows.push(CorrRow {
                    t,
                    tau,
                    i: a.i,
                    j: a.j,
                    corr_analytic: analytic,
                    corr_mc: mc.estimate,
                    std_error: mc.std_error,
                    uncertainty: 1.0 - own,
                });
            }
        }
        Ok(rows)
    }

    /// `analyze-corr/corr.csv`.
    pub fn analyze_corr(&self, seed: u64) -> Result<Vec<CorrRow>> {
        let dir = self.root.join("analyze-corr");
        let mut manifest = self.begin(&dir, "analyze-corr", vec![seed])?;
        let rows = self.corr_rows(seed)?;
        let mut csv = String::from("t,tau,i,j,corr_analytic,corr_mc,std_error,uncertainty\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t, r.tau, r.i, r.j, r.corr_analytic, r.corr_mc, r.std_error, r.uncertainty
            ));
        }
        write_atomic(dir.join("corr.csv"), csv.as_bytes())?;
        let worst = rows
            .iter()
            .map(|r| (r.corr_analytic - r.corr_mc).abs() / r.std_error.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        manifest.notes.insert("max_error_in_std_errors".into(), json!(worst));
        manifest.finish(&dir)?;
        Ok(rows)
    }

    /// `ablate/`: every grid scope for every seed, sharing one pretrained
    /// model per seed, plus summary.csv.
    pub fn ablate(&self, seeds: &[u64]) -> Result<Ablation> {
        let dir = self.root.join("ablate");
        let mut manifest = self.begin(&dir, "ablate", seeds.to_vec())?;
        let mut runs = Vec::new();
        for &seed in seeds {
            let pre = self.pretrain_model(seed)?;
            let seed_dir = dir.join("pretrained");
            self.checkpoint("pretrain", seed, None, &pre.model)?
                .save(seed_dir.join(format!("seed-{seed}.json")))?;
            for &scope in &self.config.ablate.grid {
                let run_dir = dir.join(scope_slug(scope)).join(format!("seed-{seed}"));
                runs.push(self.finetune_into(&run_dir, pre.model.clone(), scope, seed)?);
            }
        }
        let threshold = self.config.ablate.grid.contains(&ScopeMode::Full).then(|| {
            let finals: Vec<f64> = runs
                .iter()
                .filter(|r| r.scope == ScopeMode::Full)
                .filter_map(|r| r.rounds.last().map(|m| m.mean_reward))
                .collect();
            0.9 * median(&finals)
        });
        let params = self.config.model_dims()?.param_count() as f64;
        let rows: Vec<AblationRow> = runs
            .iter()
            .map(|r| {
                let last = r.rounds.last();
                let widths: Vec<f64> = r.rounds.iter().map(|m| m.scope_end - m.scope_start + 1.0).collect();
                let steps = last.map_or(0, |m| m.grad_steps_cum);
                AblationRow {
                    scope: r.scope,
                    seed: r.seed,
                    final_mean_reward: last.map_or(f64::NAN, |m| m.mean_reward),
                    final_diversity: last.map_or(f64::NAN, |m| m.diversity),
                    eval_mean_reward: r.evaluation.mean_reward,
                    eval_diversity: r.evaluation.diversity,
                    grad_steps_total: steps,
                    compute: steps as f64 * params,
                    mean_scope_width: widths.iter().sum::<f64>() / widths.len().max(1) as f64,
                    steps_to_threshold: threshold.and_then(|t| steps_to_threshold(&reward_curve(&r.rounds), t)),
                }
            })
            .collect();
        write_atomic(dir.join("summary.csv"), ablation_summary(&rows, &self.config.ablate.grid).as_bytes())?;
        if let Some(t) = threshold {
            manifest.notes.insert("threshold".into(), json!(t));
        }
        manifest.notes.insert("param_count".into(), json!(params));
        manifest.finish(&dir)?;
        Ok(Ablation {
            dir,
            runs,
            rows,
            threshold,
        })
    }

    /// `report/`: summary.csv over every metrics.csv under the root, and
    /// SVG charts of reward per round, reward against gradient steps, the
    /// probe gain series and the uncertainty series. Returns the files
    /// written.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join("report");
        let metrics = find_files(&self.root, &dir, |n| n == "metrics.csv")?;
        let probes = find_files(&self.root, &dir, |n| n.starts_with("probe-z") && n.ends_with(".csv"))?;
        let corr = find_files(&self.root, &dir, |n| n == "corr.csv")?;
        if metrics.is_empty() && probes.is_empty() && corr.is_empty() {
            return Err(Error::Invalid(format!(
                "nothing to report under {}: no metrics.csv, probe-z*.csv or corr.csv",
                self.root.display()
            )));
        }
        let manifest = self.begin(&dir, "report", vec![])?;
        let mut written = Vec::new();
        let mut put = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, body.as_bytes())?;
            written.push(p);
            Ok(())
        };

        if !metrics.is_empty() {
            let mut table = String::from(
                "run,rounds,first_mean_reward,final_mean_reward,best_mean_reward,final_diversity,grad_steps_total,mean_scope_start,mean_scope_end\n",
            );
            let mut by_round = Vec::new();
            let mut by_steps = Vec::new();
            for path in &metrics {
                let rows = read_metrics(path)?;
                let name = run_label(&self.root, path);
                let Some(last) = rows.last() else { continue };
                let n = rows.len() as f64;
                table.push_str(&format!(
                    "{name},{},{},{},{},{},{},{},{}\n",
                    rows.len(),
                    rows[0].mean_reward,
                    last.mean_reward,
                    rows.iter().map(|r| r.mean_reward).fold(f64::NEG_INFINITY, f64::max),
                    last.diversity,
                    last.grad_steps_cum,
                    rows.iter().map(|r| r.scope_start).sum::<f64>() / n,
                    rows.iter().map(|r| r.scope_end).sum::<f64>() / n,
                ));
                by_round.push(Series::new(
                    &name,
                    rows.iter().map(|r| (r.round as f64, r.mean_reward)).collect(),
                ));
                by_steps.push(Series::new(
                    &name,
                    rows.iter().map(|r| (r.grad_steps_cum as f64, r.mean_reward)).collect(),
                ));
            }
            put("summary.csv", table)?;
            put("reward.svg", line_chart("Mean reward per round", "round", "mean reward", &by_round))?;
            put(
                "reward_vs_steps.svg",
                line_chart("Mean reward against gradient steps", "cumulative gradient steps", "mean reward", &by_steps),
            )?;
        }

        if !probes.is_empty() {
            let mut gains = Vec::new();
            for path in &probes {
                let seed_dir = path.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().to_string());
                let stem = path.file_stem().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
                let name = format!("{} {}", seed_dir.unwrap_or_default(), stem.trim_start_matches("probe-"));
                let cols = read_columns(path, &["k", "delta_s_smoothed", "delta_p_smoothed"])?;
                let pick = |c: usize| -> Vec<(f64, f64)> {
                    cols.iter().filter_map(|r| Some((r[0]?, r[c]?))).collect()
                };
                gains.push(Series::new(format!("{name} ΔS"), pick(1)));
                gains.push(Series::new(format!("{name} ΔP"), pick(2)));
            }
            put(
                "gains.svg",
                line_chart("Smoothed structural and preference gains", "generation step k", "gain per step", &gains),
            )?;
        }

        if !corr.is_empty() {
            let horizon = self.config.schedule.steps as f64;
            let mut series = Vec::new();
            for path in &corr {
                let cols = read_columns(path, &["t", "tau", "uncertainty"])?;
                let mut taus: Vec<f64> = cols.iter().filter_map(|r| r[1]).collect();
                taus.sort_by(f64::total_cmp);
                taus.dedup();
                for tau in taus {
                    let pts = cols
                        .iter()
                        .filter(|r| r[1] == Some(tau))
                        .filter_map(|r| Some((horizon - tau - r[0]?, r[2]?)))
                        .collect();
                    series.push(Series::new(format!("τ = {tau}"), pts));
                }
            }
            put(
                "uncertainty.svg",
                line_chart("Uncertainty along generation", "generation step", "1 − correlation", &series),
            )?;
        }

        manifest.finish(&dir)?;
        Ok(written)
    }
}

fn probe_csv(d: &ScopeDecision) -> String {
    let ds = d.start.differences.as_slice();
    let dp = d.end.differences.as_slice();
    let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("k,delta_s_raw,delta_s_smoothed,delta_p_raw,delta_p_smoothed,d_s,d_p\n");
    for k in 0..d.horizon {
        let g = k.checked_sub(1);
        let at = |v: &[f64]| g.and_then(|p| v.get(p)).copied();
        out.push_str(&format!(
            "{k},{},{},{},{},{},{}\n",
            cell(at(&d.structural.values).as_ref()),
            cell(at(&d.structural.smoothed).as_ref()),
            cell(at(&d.preference.values).as_ref()),
            cell(at(&d.preference.smoothed).as_ref()),
            cell(ds.get(k)),
            cell(dp.get(k)),
        ));
    }
    out.push_str(&format!(
        "# prompt={} t_start={} t_end={} start_fallback={} start_trivial={} end_fallback={} end_trivial={}\n",
        d.prompt, d.t_start, d.t_end, d.start.fallback, d.start.trivial, d.end.fallback, d.end.trivial
    ));
    out
}

fn ablation_summary(rows: &[AblationRow], grid: &[ScopeMode]) -> String {
    let mut out = String::from(
        "scope,seed,final_mean_reward,final_diversity,eval_mean_reward,eval_diversity,grad_steps_total,compute,mean_scope_width,steps_to_threshold\n",
    );
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scope,
            r.seed,
            r.final_mean_reward,
            r.final_diversity,
            r.eval_mean_reward,
            r.eval_diversity,
            r.grad_steps_total,
            r.compute,
            r.mean_scope_width,
            opt(r.steps_to_threshold)
        ));
    }
    for &scope in grid {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.scope == scope).collect();
        let med = |f: &dyn Fn(&AblationRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let reach: Vec<f64> = sel
            .iter()
            .map(|r| r.steps_to_threshold.map_or(f64::INFINITY, |v| v as f64))
            .collect();
        let reach = median(&reach);
        out.push_str(&format!(
            "{scope},median,{},{},{},{},{},{},{},{}\n",
            med(&|r| r.final_mean_reward),
            med(&|r| r.final_diversity),
            med(&|r| r.eval_mean_reward),
            med(&|r| r.eval_diversity),
            med(&|r| r.grad_steps_total as f64),
            med(&|r| r.compute),
            med(&|r| r.mean_scope_width),
            if reach.is_finite() { reach.to_string() } else { String::new() },
        ));
    }
    out
}

/// Files below `root` (sorted, skipping `exclude`) whose name matches.
fn find_files(root: &Path, exclude: &Path, want: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Invalid(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::format(root, e))?;
        if entry.file_type().is_file()
            && !entry.path().starts_with(exclude)
            && want(&entry.file_name().to_string_lossy())
        {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Run directory of `file` relative to `root`, `/`-separated.
fn run_label(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file);
    rel.parent().map(|p| p.to_string_lossy().replace('\\', "/")).unwrap_or_default()
}

/// Reads the named numeric columns; empty or unparsable cells become `None`.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    let headers = r.headers().map_err(|e| Error::format(path, e))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| Error::format(path, format!("missing column {n}")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        rows.push(idx.iter().map(|&i| rec.get(i).and_then(|v| v.parse().ok())).collect());
    }
    Ok(rows)
}

/// The inclusive step range of a fixed or full scope, if not adaptive.
pub fn static_range(mode: ScopeMode, horizon: usize) -> Option<StepRange> {
    match mode {
        ScopeMode::Full => Some(StepRange::full(horizon)),
        ScopeMode::Fixed { start, end } => StepRange::new(start, end, horizon).ok(),
        ScopeMode::Adaptive => None,
    }
}

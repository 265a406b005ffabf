//! Batch experiment driver.
//!
//! Subcommands: gen-data, train, eval, verify, report, sweep. Every
//! subcommand is deterministic given the config and seed. Exit codes:
//! 0 success, 2 config error, 3 verification failure, 4 runtime divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cgo_lab::baselines::GoalPredictor;
use cgo_lab::config::{ConfigError, ExperimentConfig};
use cgo_lab::data::{DynDataset, GoalDataset};
use cgo_lab::envs::GridCgo;
use cgo_lab::eval::{emit_report, ExperimentReport, ReportRow};
use cgo_lab::experiment::{self, ExperimentError, TrainedMethod};
use cgo_lab::mdp::{ActionSpace, PolicyTable};
use cgo_lab::oracle::{
    random_policy, verify_bellman_reformulation, verify_kernel_stochasticity,
    verify_regret_equivalence, verify_value_equivalence, VerificationReport,
};
use cgo_lab::solvers::SolverError;

#[derive(Parser)]
#[command(
    name = "cgo-lab",
    version,
    about = "Offline RL laboratory for contextual goal-oriented gridworlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides of the form section.key=value; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed (overrides the config's `seed`). Mandatory when $CI is set.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `eval.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dynamics and context-goal datasets.
    GenData(CommonArgs),
    /// Train the configured method; writes policy and value artifacts.
    Train(TrainArgs),
    /// Evaluate a trained artifact and emit report rows.
    Eval(CommonArgs),
    /// Run the equivalence verification suites on the configured environment.
    Verify(VerifyArgs),
    /// Aggregate result rows into Markdown and SVG reports.
    Report(ReportArgs),
    /// Run the full per-seed pipeline over a swept config key.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sweep a config key over comma-separated values, running the full
    /// pipeline per value (e.g. method.goal_ratio=0.1,0.3,0.5).
    #[arg(long, value_name = "KEY=V1,V2,...")]
    sweep: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of random policies per suite.
    #[arg(long, default_value_t = 20)]
    checks: usize,
    /// Violation tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Verify a serialized MDP document instead of the configured environment.
    #[arg(long)]
    mdp: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Swept key and values (e.g. method.name=coda,pds,rp,oracle_reward).
    #[arg(long, value_name = "KEY=V1,V2,...")]
    param: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files produced by eval or sweep.
    #[arg(long = "rows", required = true)]
    rows: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Formats to write.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["csv".to_string(), "md".to_string(), "svg".to_string()])]
    formats: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("verification failed: {0} claim violations")]
    VerificationFailed(usize),
    #[error("missing artifact {0}; run `cgo-lab train` first")]
    MissingArtifact(PathBuf),
    #[error("--seed is required when running under CI")]
    SeedRequired,
    #[error("malformed results row {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::SeedRequired => 2,
            CliError::VerificationFailed(_) => 3,
            CliError::Experiment(ExperimentError::Solver(SolverError::Diverged { .. })) => 4,
            _ => 1,
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    if std::env::var_os("CI").is_some() && common.seed.is_none() {
        return Err(CliError::SeedRequired);
    }
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        overrides.push(format!("eval.out_dir={:?}", out.display().to_string()));
    }
    Ok(ExperimentConfig::load(
        common.config.as_deref(),
        &overrides,
    )?)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(common) => {
            let config = load_config(&common)?;
            let env = config.build_env()?;
            let out = prepare_out(&config)?;
            let (dyn_data, goal_data) =
                experiment::generate_data(&config, &env, 0).map_err(CliError::Experiment)?;
            dyn_data
                .save(&out.join("dyn.jsonl"))
                .map_err(ExperimentError::Data)?;
            goal_data
                .save(&out.join("goal.jsonl"))
                .map_err(ExperimentError::Data)?;
            let manifest = serde_json::json!({
                "version": 1,
                "dyn": "dyn.jsonl",
                "goal": "goal.jsonl",
                "config": config,
            });
            std::fs::write(
                out.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            println!(
                "wrote {} dynamics records and {} goal pairs to {}",
                dyn_data.records.len(),
                goal_data.records.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            if let Some(sweep) = &args.sweep {
                return run_sweep(&args.common, sweep);
            }
            let config = load_config(&args.common)?;
            let env = config.build_env()?;
            let out = prepare_out(&config)?;
            let (dyn_data, goal_data) = load_or_generate_data(&config, &env, &out)?;
            let trained = experiment::train(&config, &env, &dyn_data, &goal_data, 0)
                .map_err(CliError::Experiment)?;
            match &trained.method {
                TrainedMethod::Table { q, policy } => {
                    q.save(&out.join("qtable.json"))
                        .map_err(ExperimentError::Mdp)?;
                    policy
                        .save(&out.join("policy.json"))
                        .map_err(ExperimentError::Mdp)?;
                }
                TrainedMethod::GoalPred(predictor) => {
                    std::fs::write(
                        out.join("predictor.json"),
                        serde_json::to_string(predictor)?,
                    )?;
                }
            }
            if let Some(model) = &trained.reward_model {
                std::fs::write(
                    out.join("reward_eval.csv"),
                    cgo_lab::eval::reward_distribution_csv(&config.method.name, model, env.mdp()),
                )?;
            }
            std::fs::write(out.join("train_log.txt"), &trained.log)?;
            println!(
                "trained {} with {}; artifacts in {}",
                config.method.name,
                config.method.solver,
                out.display()
            );
            Ok(())
        }
        Command::Eval(common) => {
            let config = load_config(&common)?;
            let env = config.build_env()?;
            let out = prepare_out(&config)?;
            let trained = load_artifact(&config, &out)?;
            let mut report = ExperimentReport::default();
            for seed_index in 0..config.eval.seeds as u64 {
                let outcome = experiment::evaluate(&config, &env, &trained, seed_index)
                    .map_err(CliError::Experiment)?;
                let mut warnings = Vec::new();
                if let Some(frac) = outcome.infeasible_goal_fraction {
                    if frac > 0.0 {
                        warnings.push(format!(
                            "goal_pred: {:.0}% of predicted goals infeasible",
                            100.0 * frac
                        ));
                    }
                }
                report.push(ReportRow {
                    env: config.env_label(),
                    method: config.method.name.clone(),
                    seed: seed_index,
                    success_rate: outcome.success_rate,
                    episodes: outcome.episodes,
                    mean_steps: outcome.mean_steps,
                    warnings,
                });
            }
            emit_report(&report, &out, &["csv"]).map_err(ExperimentError::Eval)?;
            for cell in report.aggregate() {
                println!(
                    "{} {}: {:.1} ± {:.1}",
                    cell.env, cell.method, cell.mean, cell.se
                );
            }
            Ok(())
        }
        Command::Verify(args) => {
            let config = load_config(&args.common)?;
            let out = prepare_out(&config)?;
            let mdp = match &args.mdp {
                Some(path) => match cgo_lab::mdp::ContextualMdp::load(path) {
                    Ok(mdp) => mdp,
                    Err(err) => {
                        // A document that violates the kernel invariants is a
                        // verification failure, reported with the claim named.
                        println!("kernel_stochasticity: FAIL ({err})");
                        return Err(CliError::VerificationFailed(1));
                    }
                },
                None => config.build_env()?.mdp().clone(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut reports: Vec<VerificationReport> =
                vec![verify_kernel_stochasticity(&mdp, args.tol)];
            for _ in 0..args.checks {
                let pi = random_policy(&mdp, ActionSpace::Original, &mut rng);
                let xi = random_policy(&mdp, ActionSpace::Augmented, &mut rng);
                reports.push(
                    verify_value_equivalence(&mdp, &pi, args.tol).map_err(ExperimentError::Mdp)?,
                );
                reports.push(
                    verify_regret_equivalence(&mdp, &pi, &xi, args.tol)
                        .map_err(ExperimentError::Mdp)?,
                );
                reports.push(
                    verify_bellman_reformulation(&mdp, &pi, args.tol)
                        .map_err(ExperimentError::Mdp)?,
                );
            }
            let mut failures = 0;
            for suite in [
                "kernel_stochasticity",
                "value_equivalence",
                "regret_equivalence",
                "bellman_reformulation",
            ] {
                let worst = reports
                    .iter()
                    .filter(|r| r.suite == suite)
                    .map(|r| r.max_violation())
                    .fold(0.0, f64::max);
                let pass = reports.iter().filter(|r| r.suite == suite).all(|r| r.pass);
                println!(
                    "{}: {} (max violation {:.2e}, tol {:.0e})",
                    suite,
                    if pass { "PASS" } else { "FAIL" },
                    worst,
                    args.tol
                );
                failures += reports
                    .iter()
                    .filter(|r| r.suite == suite && !r.pass)
                    .count();
            }
            std::fs::write(
                out.join("verify.json"),
                serde_json::to_string_pretty(&reports)?,
            )?;
            if failures > 0 {
                return Err(CliError::VerificationFailed(failures));
            }
            Ok(())
        }
        Command::Report(args) => {
            let mut report = ExperimentReport::default();
            for path in &args.rows {
                read_rows(path, &mut report)?;
            }
            let formats: Vec<&str> = args.formats.iter().map(|s| s.as_str()).collect();
            let written =
                emit_report(&report, &args.out, &formats).map_err(ExperimentError::Eval)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Sweep(args) => run_sweep(&args.common, &args.param),
    }
}

fn run_sweep(common: &CommonArgs, param: &str) -> Result<(), CliError> {
    let (key, values) = param
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(param.to_string()))?;
    // Bare keys refer to the method section, where the swept
    // hyperparameters live.
    let key = if key.contains('.') {
        key.to_string()
    } else {
        format!("method.{key}")
    };
    let key = key.as_str();
    let base = load_config(common)?;
    let out = prepare_out(&base)?;
    let mut report = ExperimentReport::default();
    for value in values.split(',') {
        let mut overrides = common.overrides.clone();
        if let Some(seed) = common.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.push(format!("{key}={value}"));
        let config = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
        let mut cell = experiment::run_cell(&config).map_err(CliError::Experiment)?;
        // Tag rows with the swept value unless the sweep is over methods,
        // whose names already distinguish the rows.
        if key != "method.name" {
            for row in &mut cell.rows {
                row.method = format!("{}[{}={}]", row.method, key, value);
            }
        }
        report.merge(cell);
    }
    emit_report(&report, &out, &["csv", "md", "svg"]).map_err(ExperimentError::Eval)?;
    for cell in report.aggregate() {
        println!(
            "{} {}: {:.1} ± {:.1}",
            cell.env, cell.method, cell.mean, cell.se
        );
    }
    Ok(())
}

fn prepare_out(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = config.eval.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn load_or_generate_data(
    config: &ExperimentConfig,
    env: &GridCgo,
    out: &Path,
) -> Result<(DynDataset, GoalDataset), CliError> {
    let dyn_path = out.join("dyn.jsonl");
    let goal_path = out.join("goal.jsonl");
    if dyn_path.exists() && goal_path.exists() {
        let dyn_data = DynDataset::load(&dyn_path).map_err(ExperimentError::Data)?;
        let goal_data = GoalDataset::load(&goal_path).map_err(ExperimentError::Data)?;
        Ok((dyn_data, goal_data))
    } else {
        Ok(experiment::generate_data(config, env, 0).map_err(CliError::Experiment)?)
    }
}

fn load_artifact(config: &ExperimentConfig, out: &Path) -> Result<TrainedMethod, CliError> {
    if config.method.name == "goal_pred" {
        let path = out.join("predictor.json");
        if !path.exists() {
            return Err(CliError::MissingArtifact(path));
        }
        let predictor: GoalPredictor = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        Ok(TrainedMethod::GoalPred(predictor))
    } else {
        let path = out.join("policy.json");
        if !path.exists() {
            return Err(CliError::MissingArtifact(path));
        }
        let policy = PolicyTable::load(&path).map_err(ExperimentError::Mdp)?;
        let q = cgo_lab::oracle::QTable::load(&out.join("qtable.json"))
            .map_err(ExperimentError::Mdp)?;
        Ok(TrainedMethod::Table { q, policy })
    }
}

fn read_rows(path: &Path, report: &mut ExperimentReport) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CliError::BadRow {
                line: i + 1,
                reason: "expected 7 fields".into(),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, CliError> {
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse().map_err(|_| CliError::BadRow {
                line: i + 1,
                reason: format!("bad {what}"),
            })
        };
        report.push(ReportRow {
            env: fields[0].to_string(),
            method: fields[1].to_string(),
            seed: fields[2].parse().map_err(|_| CliError::BadRow {
                line: i + 1,
                reason: "bad seed".into(),
            })?,
            success_rate: parse_f(fields[3], "success_rate")?,
            episodes: fields[4].parse().map_err(|_| CliError::BadRow {
                line: i + 1,
                reason: "bad episodes".into(),
            })?,
            mean_steps: parse_f(fields[5], "mean_steps")?,
            warnings: if fields[6].is_empty() {
                vec![]
            } else {
                fields[6].split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, err))
    }
}

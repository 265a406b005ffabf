//! End-to-end experiment driver: generate the two datasets, train the
//! configured method through the shared solver backbone, evaluate by
//! rollouts, and assemble report rows with coverage diagnostics.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::baselines::{
    fit_goal_prediction, fit_pds, fit_rp, fit_uds_rp, BaselineError, GoalPredictor, RewardModel,
    LAPLACE_SMOOTHING, PDS_ENSEMBLE, PDS_KAPPA,
};
use crate::coda::{AugmentedBatchSampler, CodaError, LabeledTransition};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{collect_dyn, sample_goal_pairs, DataError, DynDataset, GoalDataset};
use crate::envs::{sample_test_contexts, EnvError, GridCgo};
use crate::eval::{
    estimate_concentrability, evaluate_policy, EvalError, EvalOutcome, ExperimentReport,
    GoalPredictionPolicy, ReportRow,
};
use crate::mdp::{ActionSpace, MdpError, MdpShape, PolicyTable};
use crate::oracle::{initial_value, policy_eval_exact, solve_optimal, QTable};
use crate::solvers::{
    solve_fqi_model, solve_iql_model, solve_pevi_model, solve_pspi, EmpiricalModel, PspiParams,
    SolverError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("solver {solver:?} is only defined for the coda method")]
    SolverMethodMismatch { solver: String },
}

/// Stage salts for deriving per-stage seeds from the base seed.
const SALT_DATA: u64 = 0xD47A;
const SALT_GOAL: u64 = 0x60A1;
const SALT_TRAIN: u64 = 0x7124;
const SALT_EVAL: u64 = 0xE7A1;
const SALT_CONTEXTS: u64 = 0xC072;

/// SplitMix64 step, for decorrelating stage seeds.
pub fn derive_seed(base: u64, salt: u64, index: u64) -> u64 {
    let mut z =
        base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A trained method ready for rollouts.
pub enum TrainedMethod {
    Table { q: QTable, policy: PolicyTable },
    GoalPred(GoalPredictor),
}

impl TrainedMethod {
    pub fn policy(&self) -> Option<&PolicyTable> {
        match self {
            TrainedMethod::Table { policy, .. } => Some(policy),
            TrainedMethod::GoalPred(_) => None,
        }
    }
}

pub struct TrainOutput {
    pub method: TrainedMethod,
    pub log: String,
    /// The game's own value estimate, when the solver produces one.
    pub value_estimate: Option<f64>,
    /// The fitted reward model, for the reward-prediction pipelines.
    pub reward_model: Option<RewardModel>,
}

pub fn generate_data(
    config: &ExperimentConfig,
    env: &GridCgo,
    seed_index: u64,
) -> Result<(DynDataset, GoalDataset), ExperimentError> {
    let dyn_seed = derive_seed(config.seed, SALT_DATA, seed_index);
    let goal_seed = derive_seed(config.seed, SALT_GOAL, seed_index);
    let dyn_data = collect_dyn(env, &config.behavior(), config.data.n_dyn, dyn_seed)?;
    let goal_data = sample_goal_pairs(env, config.data.n_goal, config.data.perturb, goal_seed)?;
    Ok((dyn_data, goal_data))
}

/// Streams `n` reward-labeled pairings of dynamics records with dataset
/// contexts, mirroring the sampler's dynamics slots so every method trains
/// on the same tuple budget.
fn model_from_labeler(
    dyn_data: &DynDataset,
    goal_data: &GoalDataset,
    shape: MdpShape,
    n: usize,
    seed: u64,
    positive: impl Fn(usize, usize) -> bool,
) -> EmpiricalModel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = EmpiricalModel::new(shape);
    for _ in 0..n {
        let d = &dyn_data.records[rng.random_range(0..dyn_data.records.len())];
        let c = goal_data.records[rng.random_range(0..goal_data.records.len())].c;
        let hit = positive(c, d.s2);
        model.add(&LabeledTransition {
            c,
            s: d.s,
            a: d.a,
            r: if hit { 1.0 } else { 0.0 },
            s2: d.s2,
            terminal: hit,
        });
    }
    model
}

fn solve_backbone(
    config: &ExperimentConfig,
    model: &EmpiricalModel,
) -> Result<(QTable, PolicyTable), SolverError> {
    let discount = config.env.discount;
    match config.method.solver.as_str() {
        "pevi" => solve_pevi_model(model, config.method.penalty, discount),
        "fqi" => solve_fqi_model(model, config.method.fqi_iters, discount),
        "iql" => solve_iql_model(
            model,
            config.method.expectile,
            config.method.inv_temp,
            discount,
            5000,
        ),
        other => unreachable!("validated solver {other}"),
    }
}

pub fn train(
    config: &ExperimentConfig,
    env: &GridCgo,
    dyn_data: &DynDataset,
    goal_data: &GoalDataset,
    seed_index: u64,
) -> Result<TrainOutput, ExperimentError> {
    let start = Instant::now();
    let shape = MdpShape::of(env.mdp());
    let train_seed = derive_seed(config.seed, SALT_TRAIN, seed_index);
    let samples = config.method.train_samples;
    let mut log = String::new();
    let mut value_estimate = None;
    let mut reward_model = None;

    let method = match config.method.name.as_str() {
        "coda" => {
            if config.method.solver == "pspi" {
                let mut sampler = AugmentedBatchSampler::new(
                    &dyn_data.records,
                    &goal_data.records,
                    shape,
                    config.method.goal_ratio,
                    train_seed,
                )?;
                let mut dyn_tuples = Vec::new();
                let mut goal_tuples = Vec::new();
                for _ in 0..samples {
                    let t = sampler.next_tuple();
                    if t.r > 0.0 {
                        goal_tuples.push(t);
                    } else {
                        dyn_tuples.push(t);
                    }
                }
                let init: Vec<(usize, usize, f64)> = env.mdp().init_support().collect();
                let params = PspiParams {
                    rounds: config.method.pspi_rounds,
                    eps_dyn: config.method.pspi_eps_dyn,
                    ..PspiParams::default()
                };
                let result = solve_pspi(
                    &dyn_tuples,
                    &goal_tuples,
                    &shape,
                    &init,
                    config.env.discount,
                    &params,
                )?;
                value_estimate = Some(result.value_estimate);
                writeln!(
                    log,
                    "pspi estimate={:.4} l_dyn={:.2e} l_goal={:.2e}",
                    result.value_estimate, result.final_loss_dyn, result.final_loss_goal
                )
                .ok();
                let q = QTable::zeros(
                    shape.n_contexts,
                    shape.n_states + 1,
                    shape.n_actions + 1,
                    ActionSpace::Augmented,
                );
                TrainedMethod::Table {
                    q,
                    policy: result.policy,
                }
            } else {
                // Exact expectation of the balanced minibatch process; the
                // lazy sampler serves the same distribution tuple by tuple.
                let model = EmpiricalModel::from_product(
                    &dyn_data.records,
                    &goal_data.records,
                    shape,
                    config.method.goal_ratio,
                    samples as f64,
                )?;
                let (q, policy) = solve_backbone(config, &model)?;
                TrainedMethod::Table { q, policy }
            }
        }
        "rp" | "uds_rp" | "pds" => {
            if config.method.solver == "pspi" {
                return Err(ExperimentError::SolverMethodMismatch {
                    solver: config.method.solver.clone(),
                });
            }
            let model: RewardModel = match config.method.name.as_str() {
                "rp" => fit_rp(&goal_data.records, &shape, LAPLACE_SMOOTHING, train_seed)?,
                "uds_rp" => fit_uds_rp(
                    &goal_data.records,
                    &dyn_data.records,
                    &shape,
                    LAPLACE_SMOOTHING,
                    train_seed,
                )?,
                _ => fit_pds(
                    &goal_data.records,
                    &shape,
                    PDS_ENSEMBLE,
                    PDS_KAPPA,
                    LAPLACE_SMOOTHING,
                    train_seed,
                )?,
            };
            writeln!(log, "reward model threshold={:.4}", model.threshold).ok();
            let labeled =
                model_from_labeler(dyn_data, goal_data, shape, samples, train_seed, |c, s2| {
                    model.is_positive(c, s2)
                });
            let (q, policy) = solve_backbone(config, &labeled)?;
            reward_model = Some(model);
            TrainedMethod::Table { q, policy }
        }
        "oracle_reward" => {
            if config.method.solver == "pspi" {
                return Err(ExperimentError::SolverMethodMismatch {
                    solver: config.method.solver.clone(),
                });
            }
            let mdp = env.mdp();
            let labeled =
                model_from_labeler(dyn_data, goal_data, shape, samples, train_seed, |c, s2| {
                    mdp.is_goal(c, s2)
                });
            let (q, policy) = solve_backbone(config, &labeled)?;
            TrainedMethod::Table { q, policy }
        }
        "goal_pred" => {
            let predictor = fit_goal_prediction(
                &goal_data.records,
                dyn_data,
                &shape,
                config.method.expectile,
                config.method.inv_temp,
                config.env.discount,
                train_seed,
            )?;
            TrainedMethod::GoalPred(predictor)
        }
        other => unreachable!("validated method {other}"),
    };
    writeln!(
        log,
        "method={} solver={} samples={} elapsed={:.2}s",
        config.method.name,
        config.method.solver,
        samples,
        start.elapsed().as_secs_f64()
    )
    .ok();
    Ok(TrainOutput {
        method,
        log,
        value_estimate,
        reward_model,
    })
}

pub fn evaluate(
    config: &ExperimentConfig,
    env: &GridCgo,
    trained: &TrainedMethod,
    seed_index: u64,
) -> Result<EvalOutcome, ExperimentError> {
    use rand::SeedableRng;
    let mut ctx_rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SALT_CONTEXTS, seed_index));
    let contexts = sample_test_contexts(
        env,
        config.test_mode()?,
        config.eval.n_test_contexts,
        &mut ctx_rng,
    )?;
    let horizon = config.eval.horizon.unwrap_or_else(|| env.default_horizon());
    let eval_seed = derive_seed(config.seed, SALT_EVAL, seed_index);
    let outcome = match trained {
        TrainedMethod::Table { policy, .. } => {
            policy.matches(env.mdp())?;
            let mut policy = policy.clone();
            evaluate_policy(
                env,
                &mut policy,
                &contexts,
                config.eval.episodes,
                horizon,
                eval_seed,
            )?
        }
        TrainedMethod::GoalPred(predictor) => {
            let mut agent = GoalPredictionPolicy::new(predictor);
            evaluate_policy(
                env,
                &mut agent,
                &contexts,
                config.eval.episodes,
                horizon,
                eval_seed,
            )?
        }
    };
    Ok(outcome)
}

/// Runs the configured method across the configured seed count and returns
/// one report row per seed, with coverage warnings attached where relevant.
pub fn run_cell(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let env = config.build_env()?;
    let mut report = ExperimentReport::default();
    // Coverage diagnostics are computed against the optimal policy once per
    // cell, on the first seed's datasets.
    let (_, pi_star) = solve_optimal(env.mdp(), ActionSpace::Original)?;
    for seed_index in 0..config.eval.seeds as u64 {
        let (dyn_data, goal_data) = generate_data(config, &env, seed_index)?;
        let mut warnings = Vec::new();
        if config.method.name == "coda" && seed_index == 0 {
            let coverage = estimate_concentrability(
                env.mdp(),
                &pi_star,
                &dyn_data.records,
                &goal_data.records,
            )?;
            if coverage.c_dyn.is_none() {
                warnings.push("coverage: dynamics data misses optimal-policy support".to_string());
            }
            if coverage.c_goal.is_none() {
                warnings.push("coverage: goal data misses optimal-policy goal support".to_string());
            }
        }
        let trained = train(config, &env, &dyn_data, &goal_data, seed_index)?;
        let outcome = evaluate(config, &env, &trained.method, seed_index)?;
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
    Ok(report)
}

/// Oracle regret of a policy on the true environment.
pub fn policy_regret(env: &GridCgo, policy: &PolicyTable) -> Result<f64, ExperimentError> {
    let (q_star, pi_star) = solve_optimal(env.mdp(), ActionSpace::Original)?;
    let j_star = initial_value(env.mdp(), &q_star, &pi_star);
    let q = policy_eval_exact(env.mdp(), policy)?;
    let j = initial_value(env.mdp(), &q, policy);
    Ok(j_star - j)
}

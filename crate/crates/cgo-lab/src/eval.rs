//! Rollout evaluation, success-rate statistics, concentrability diagnostics,
//! and report emission (CSV, Markdown, SVG).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::baselines::GoalPredictor;
use crate::data::{DynRecord, GoalRecord};
use crate::envs::{ContextRelation, GridCgo};
use crate::mdp::{ContextualMdp, PolicyTable};
use crate::numeric::{mean, solve_linear, standard_error};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test contexts supplied")]
    EmptyContexts,
    #[error("every supplied context is excluded by the evaluation protocol")]
    AllContextsExcluded,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mdp(#[from] crate::mdp::MdpError),
}

/// Something that can drive an episode: told the context at episode start,
/// then queried for actions. `begin_episode` may surface a predicted goal
/// state for feasibility accounting.
pub trait RolloutPolicy {
    fn begin_episode(&mut self, _context: usize, _rng: &mut ChaCha8Rng) -> Option<usize> {
        None
    }

    fn act(&mut self, context: usize, state: usize, rng: &mut ChaCha8Rng) -> usize;
}

impl RolloutPolicy for PolicyTable {
    fn act(&mut self, context: usize, state: usize, rng: &mut ChaCha8Rng) -> usize {
        self.sample_action(context, state, rng)
    }
}

/// Goal-prediction agent: samples one goal per episode from the conditional
/// model and then follows the goal-conditioned values greedily.
pub struct GoalPredictionPolicy<'a> {
    predictor: &'a GoalPredictor,
    current_goal: usize,
}

impl<'a> GoalPredictionPolicy<'a> {
    pub fn new(predictor: &'a GoalPredictor) -> Self {
        Self {
            predictor,
            current_goal: 0,
        }
    }
}

impl RolloutPolicy for GoalPredictionPolicy<'_> {
    fn begin_episode(&mut self, context: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        self.current_goal = self.predictor.sample_goal(context, rng);
        Some(self.current_goal)
    }

    fn act(&mut self, _context: usize, state: usize, _rng: &mut ChaCha8Rng) -> usize {
        self.predictor.act_toward(self.current_goal, state)
    }
}

/// Outcome of one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Percentage in [0, 100].
    pub success_rate: f64,
    pub episodes: usize,
    /// Mean steps to goal over successful episodes; NaN when none succeeded.
    pub mean_steps: f64,
    /// Fraction of episodes whose predicted goal fell outside the true goal
    /// set, when the policy predicts goals.
    pub infeasible_goal_fraction: Option<f64>,
}

/// Rolls episodes from the initial state marginal under the supplied test
/// contexts. Success means entering the goal set within the horizon. Under
/// the four-rooms relation, a context equal to the starting room is skipped
/// in favor of the next supplied context.
pub fn evaluate_policy(
    env: &GridCgo,
    policy: &mut dyn RolloutPolicy,
    contexts: &[usize],
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    if contexts.is_empty() {
        return Err(EvalError::EmptyContexts);
    }
    if horizon == 0 {
        return Err(EvalError::ZeroHorizon);
    }
    let mdp = env.mdp();
    let starts = env.start_states();
    let four_rooms = matches!(env.relation(), ContextRelation::FourRooms);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0usize;
    let mut steps_on_success = Vec::new();
    let mut predictions = 0usize;
    let mut infeasible = 0usize;
    let mut cursor = 0usize;
    for _ in 0..episodes {
        let s0 = starts[rng.random_range(0..starts.len())];
        // Skip contexts excluded by the protocol for this start.
        let mut ctx = None;
        for probe in 0..contexts.len() {
            let candidate = contexts[(cursor + probe) % contexts.len()];
            if four_rooms && env.room_of_state(s0) == candidate {
                continue;
            }
            ctx = Some(candidate);
            cursor = (cursor + probe + 1) % contexts.len();
            break;
        }
        let ctx = ctx.ok_or(EvalError::AllContextsExcluded)?;
        if let Some(predicted) = policy.begin_episode(ctx, &mut rng) {
            predictions += 1;
            if !mdp.is_goal(ctx, predicted) {
                infeasible += 1;
            }
        }
        let mut s = s0;
        if mdp.is_goal(ctx, s) {
            successes += 1;
            steps_on_success.push(0.0);
            continue;
        }
        for step in 0..horizon {
            let a = policy.act(ctx, s, &mut rng);
            let out = mdp.sample_step(ctx, s, a, &mut rng)?;
            if out.terminal {
                if out.reward > 0.0 {
                    successes += 1;
                    steps_on_success.push((step + 1) as f64);
                }
                break;
            }
            s = out.next_state;
        }
    }
    Ok(EvalOutcome {
        success_rate: 100.0 * successes as f64 / episodes as f64,
        episodes,
        mean_steps: if steps_on_success.is_empty() {
            f64::NAN
        } else {
            mean(&steps_on_success)
        },
        infeasible_goal_fraction: (predictions > 0).then(|| infeasible as f64 / predictions as f64),
    })
}

/// Tabular concentrability diagnostics: sup ratios of the policy's
/// pre-goal discounted occupancy against the empirical data distributions.
/// `None` flags uncovered support (an infinite coefficient).
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrabilityReport {
    pub c_dyn: Option<f64>,
    pub c_goal: Option<f64>,
}

impl ConcentrabilityReport {
    pub fn covered(&self) -> bool {
        self.c_dyn.is_some() && self.c_goal.is_some()
    }
}

/// Computes the occupancy measures exactly by a per-context linear solve and
/// compares them with the empirical frequencies of the two datasets.
///
/// The dynamics distribution is context-free, so its contextual form is the
/// product with the context marginal of the goal dataset, matching how the
/// augmentation pairs the two.
pub fn estimate_concentrability(
    mdp: &ContextualMdp,
    pi: &PolicyTable,
    dyn_records: &[DynRecord],
    goal_records: &[GoalRecord],
) -> Result<ConcentrabilityReport, EvalError> {
    if dyn_records.is_empty() || goal_records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = mdp.n_states();
    let gamma = mdp.discount();

    // Empirical frequencies.
    let mut freq_sa = vec![0.0; n * mdp.n_actions()];
    for d in dyn_records {
        freq_sa[d.s * mdp.n_actions() + d.a] += 1.0;
    }
    for f in &mut freq_sa {
        *f /= dyn_records.len() as f64;
    }
    let mut ctx_marginal = vec![0.0; mdp.n_contexts()];
    let mut freq_goal = vec![0.0; mdp.n_contexts() * n];
    for g in goal_records {
        ctx_marginal[g.c] += 1.0;
        freq_goal[g.c * n + g.s] += 1.0;
    }
    for f in ctx_marginal.iter_mut().chain(freq_goal.iter_mut()) {
        *f /= goal_records.len() as f64;
    }

    let mut c_dyn: f64 = 0.0;
    let mut c_goal: f64 = 0.0;
    let mut dyn_covered = true;
    let mut goal_covered = true;
    for c in 0..mdp.n_contexts() {
        // Pre-goal occupancy M solves (I - gamma P_pi^T restricted to
        // non-goal states) M = d0(. , c).
        let mut a_mat = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for s in 0..n {
            a_mat[s * n + s] += 1.0;
            b[s] = if mdp.is_goal(c, s) {
                0.0
            } else {
                mdp.init_prob(c, s)
            };
        }
        for s_prev in 0..n {
            if mdp.is_goal(c, s_prev) {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let pa = pi.prob(c, s_prev, a);
                if pa == 0.0 {
                    continue;
                }
                for (s, row_val) in mdp.transition_row(s_prev, a).iter().enumerate() {
                    if *row_val > 0.0 && !mdp.is_goal(c, s) {
                        a_mat[s * n + s_prev] -= gamma * pa * row_val;
                    }
                }
            }
        }
        let occupancy = solve_linear(a_mat, b);

        for s in 0..n {
            if mdp.is_goal(c, s) || occupancy[s] <= 1e-15 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let rho = occupancy[s] * pi.prob(c, s, a);
                if rho <= 1e-15 {
                    continue;
                }
                let mu = freq_sa[s * mdp.n_actions() + a] * ctx_marginal[c];
                if mu <= 0.0 {
                    dyn_covered = false;
                } else {
                    c_dyn = c_dyn.max(rho / mu);
                }
            }
        }

        // Goal-entry occupancy: discounted mass arriving at each goal state.
        for g in 0..n {
            if !mdp.is_goal(c, g) {
                continue;
            }
            let mut rho_g = 0.0;
            for (s, &occ) in occupancy.iter().enumerate() {
                if mdp.is_goal(c, s) || occ <= 1e-15 {
                    continue;
                }
                for a in 0..mdp.n_actions() {
                    let pa = pi.prob(c, s, a);
                    if pa > 0.0 {
                        rho_g += gamma * occupancy[s] * pa * mdp.prob(s, a, g);
                    }
                }
            }
            if rho_g <= 1e-15 {
                continue;
            }
            let mu = freq_goal[c * n + g];
            if mu <= 0.0 {
                goal_covered = false;
            } else {
                c_goal = c_goal.max(rho_g / mu);
            }
        }
    }
    Ok(ConcentrabilityReport {
        c_dyn: dyn_covered.then_some(c_dyn),
        c_goal: goal_covered.then_some(c_goal),
    })
}

/// One evaluated run.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub success_rate: f64,
    pub episodes: usize,
    pub mean_steps: f64,
    pub warnings: Vec<String>,
}

/// Per-method, per-environment success rates with seed statistics.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCell {
    pub env: String,
    pub method: String,
    pub mean: f64,
    pub se: f64,
    pub seeds: usize,
}

impl ExperimentReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn merge(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    /// Mean and standard error of the success rate across seeds, keyed and
    /// ordered by (env, method).
    pub fn aggregate(&self) -> Vec<AggregateCell> {
        let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            grouped
                .entry((row.env.clone(), row.method.clone()))
                .or_default()
                .push(row.success_rate);
        }
        grouped
            .into_iter()
            .map(|((env, method), vals)| AggregateCell {
                env,
                method,
                mean: mean(&vals),
                se: standard_error(&vals),
                seeds: vals.len(),
            })
            .collect()
    }

    pub fn mean_success(&self, env: &str, method: &str) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|cell| cell.env == env && cell.method == method)
            .map(|cell| cell.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("env,method,seed,success_rate,episodes,mean_steps,warnings\n");
        for row in &self.rows {
            let steps = if row.mean_steps.is_nan() {
                String::new()
            } else {
                format!("{:.2}", row.mean_steps)
            };
            out.push_str(&format!(
                "{},{},{},{:.1},{},{},{}\n",
                row.env,
                row.method,
                row.seed,
                row.success_rate,
                row.episodes,
                steps,
                row.warnings.join(";")
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let cells = self.aggregate();
        let mut envs: Vec<String> = cells.iter().map(|c| c.env.clone()).collect();
        envs.dedup();
        let mut methods: Vec<String> = cells.iter().map(|c| c.method.clone()).collect();
        methods.sort();
        methods.dedup();
        let mut out = String::from("| env |");
        for m in &methods {
            out.push_str(&format!(" {m} |"));
        }
        out.push('\n');
        out.push_str("|---|");
        out.push_str(&"---|".repeat(methods.len()));
        out.push('\n');
        for env in &envs {
            let row_cells: Vec<Option<&AggregateCell>> = methods
                .iter()
                .map(|m| cells.iter().find(|c| &c.env == env && &c.method == m))
                .collect();
            let best = row_cells
                .iter()
                .flatten()
                .map(|c| c.mean)
                .fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!("| {env} |"));
            let mut bolded = false;
            for cell in row_cells {
                match cell {
                    Some(c) => {
                        let text = format!("{:.1} ± {:.1}", c.mean, c.se);
                        if !bolded && (c.mean - best).abs() < 1e-9 {
                            out.push_str(&format!(" **{text}** |"));
                            bolded = true;
                        } else {
                            out.push_str(&format!(" {text} |"));
                        }
                    }
                    None => out.push_str(" |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let cells = self.aggregate();
        let mut envs: Vec<String> = cells.iter().map(|c| c.env.clone()).collect();
        envs.dedup();
        let mut methods: Vec<String> = cells.iter().map(|c| c.method.clone()).collect();
        methods.sort();
        methods.dedup();
        let palette = [
            "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2",
        ];
        let bar_w = 18.0;
        let group_w = bar_w * methods.len() as f64 + 30.0;
        let width = 80.0 + group_w * envs.len() as f64;
        let height = 260.0;
        let base = 200.0;
        let scale = 1.6; // pixels per success point
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\">\n"
        );
        svg.push_str(&format!(
            "<line x1=\"40\" y1=\"{base}\" x2=\"{:.0}\" y2=\"{base}\" stroke=\"black\"/>\n",
            width - 10.0
        ));
        for tick in [0.0, 50.0, 100.0] {
            let y = base - tick * scale;
            svg.push_str(&format!(
                "<text x=\"8\" y=\"{:.0}\" font-size=\"10\">{tick:.0}</text>\n",
                y + 3.0
            ));
        }
        for (ei, env) in envs.iter().enumerate() {
            let x0 = 50.0 + ei as f64 * group_w;
            for (mi, m) in methods.iter().enumerate() {
                if let Some(c) = cells.iter().find(|c| &c.env == env && &c.method == m) {
                    let h = c.mean * scale;
                    svg.push_str(&format!(
                        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                        x0 + mi as f64 * bar_w,
                        base - h,
                        palette[mi % palette.len()]
                    ));
                }
            }
            svg.push_str(&format!(
                "<text x=\"{x0:.0}\" y=\"{:.0}\" font-size=\"10\">{env}</text>\n",
                base + 14.0
            ));
        }
        for (mi, m) in methods.iter().enumerate() {
            svg.push_str(&format!(
                "<rect x=\"50\" y=\"{:.0}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"64\" y=\"{:.0}\" font-size=\"10\">{m}</text>\n",
                base + 22.0 + mi as f64 * 14.0,
                palette[mi % palette.len()],
                base + 31.0 + mi as f64 * 14.0,
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// CSV of a reward model's pessimistic scores split into positive (true
/// goal) and negative cells, for distribution comparisons across models.
pub fn reward_distribution_csv(
    model_name: &str,
    model: &crate::baselines::RewardModel,
    mdp: &ContextualMdp,
) -> String {
    let mut out = String::from("model,set,context,state,score\n");
    for c in 0..mdp.n_contexts() {
        for s in 0..mdp.n_states() {
            let set = if mdp.is_goal(c, s) {
                "positive"
            } else {
                "negative"
            };
            out.push_str(&format!(
                "{model_name},{set},{c},{s},{:.6}\n",
                model.pessimistic(c, s)
            ));
        }
    }
    out
}

/// Writes the selected formats into `out_dir`, returning the paths written.
/// Identical reports produce byte-identical files.
pub fn emit_report(
    report: &ExperimentReport,
    out_dir: &Path,
    formats: &[&str],
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for fmt in formats {
        let (name, body) = match *fmt {
            "csv" => ("results.csv", report.to_csv()),
            "md" => ("summary.md", report.to_markdown()),
            "svg" => ("chart.svg", report.to_svg()),
            other => {
                return Err(EvalError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    format!("unknown report format {other:?}"),
                )))
            }
        };
        let path = out_dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_cgo, builtin_map, parse_map, sample_test_contexts, TestContextMode};
    use crate::mdp::ActionSpace;
    use crate::oracle::solve_optimal;

    fn env_with(map_name: &str, relation: ContextRelation, slip: f64) -> GridCgo {
        let map = parse_map(builtin_map(map_name).unwrap())
            .unwrap()
            .with_slip(slip)
            .unwrap();
        build_cgo(&map, &relation, 0.99).unwrap()
    }

    #[test]
    fn oracle_policy_scores_perfect_on_noise_free_fixture() {
        let env = env_with("medium-analog", ContextRelation::FourRooms, 0.0);
        let (_, mut pi_star) = solve_optimal(env.mdp(), ActionSpace::Original).unwrap();
        let outcome = evaluate_policy(
            &env,
            &mut pi_star,
            &[0, 1, 2, 3],
            100,
            env.default_horizon(),
            0,
        )
        .unwrap();
        assert_eq!(outcome.success_rate, 100.0);
        assert_eq!(outcome.episodes, 100);
        assert!(outcome.mean_steps > 0.0);
        assert!(outcome.infeasible_goal_fraction.is_none());
    }

    #[test]
    fn uniform_policy_struggles_on_large_map() {
        let env = env_with(
            "large-analog",
            ContextRelation::RandomCells { radius: 2.0 },
            0.1,
        );
        let mut uniform = PolicyTable::uniform(
            env.mdp().n_contexts(),
            env.mdp().n_states(),
            env.mdp().n_actions(),
            ActionSpace::Original,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let contexts = sample_test_contexts(&env, TestContextMode::Shifted, 10, &mut rng).unwrap();
        let outcome =
            evaluate_policy(&env, &mut uniform, &contexts, 100, env.default_horizon(), 0).unwrap();
        assert!(outcome.success_rate < 20.0, "got {}", outcome.success_rate);
    }

    #[test]
    fn four_rooms_protocol_excludes_start_room() {
        let env = env_with("medium-analog", ContextRelation::FourRooms, 0.0);
        let (_, mut pi_star) = solve_optimal(env.mdp(), ActionSpace::Original).unwrap();
        // The single start sits in room 1 (context 0): it can never be used.
        let err =
            evaluate_policy(&env, &mut pi_star, &[0], 10, env.default_horizon(), 0).unwrap_err();
        assert!(matches!(err, EvalError::AllContextsExcluded));
        let ok = evaluate_policy(&env, &mut pi_star, &[0, 2], 10, env.default_horizon(), 0);
        assert!(ok.is_ok());
    }

    #[test]
    fn rejects_empty_contexts_and_zero_horizon() {
        let env = env_with("medium-analog", ContextRelation::FourRooms, 0.0);
        let (_, mut pi) = solve_optimal(env.mdp(), ActionSpace::Original).unwrap();
        assert!(matches!(
            evaluate_policy(&env, &mut pi, &[], 10, 10, 0),
            Err(EvalError::EmptyContexts)
        ));
        assert!(matches!(
            evaluate_policy(&env, &mut pi, &[1], 10, 0, 0),
            Err(EvalError::ZeroHorizon)
        ));
    }

    #[test]
    fn concentrability_zero_discount_closed_form() {
        // Two states, one action: s0 -> s1 (the goal). At gamma = 0 the
        // pre-goal occupancy is exactly the one-step initial mass.
        let mdp = crate::mdp::ContextualMdp::new(
            2,
            1,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![false, true],
            0.0,
            vec![1.0, 0.0],
        )
        .unwrap();
        let pi = PolicyTable::uniform(1, 2, 1, ActionSpace::Original);
        let dyn_records = vec![
            DynRecord {
                s: 0,
                a: 0,
                s2: 1,
                episode: 0,
                t: 0,
            },
            DynRecord {
                s: 1,
                a: 0,
                s2: 1,
                episode: 0,
                t: 1,
            },
        ];
        let goal_records = vec![GoalRecord { c: 0, s: 1 }];
        let report = estimate_concentrability(&mdp, &pi, &dyn_records, &goal_records).unwrap();
        // rho(s0, a0) = 1, mu = 0.5 (empirical) * 1.0 (context marginal).
        assert!((report.c_dyn.unwrap() - 2.0).abs() < 1e-12);
        // gamma = 0 leaves no discounted goal-entry mass.
        assert_eq!(report.c_goal, Some(0.0));
    }

    #[test]
    fn concentrability_flags_uncovered_goal_support() {
        // Goal set {1, 2}; the policy enters via state 1 but the goal data
        // only ever shows state 2.
        // Rows (one action): s0 -> s1, s1 self-loop, s2 self-loop.
        let transition = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mdp = crate::mdp::ContextualMdp::new(
            3,
            1,
            1,
            transition,
            vec![false, true, true],
            0.9,
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let pi = PolicyTable::uniform(1, 3, 1, ActionSpace::Original);
        let dyn_records = vec![DynRecord {
            s: 0,
            a: 0,
            s2: 1,
            episode: 0,
            t: 0,
        }];
        let goal_records = vec![GoalRecord { c: 0, s: 2 }];
        let report = estimate_concentrability(&mdp, &pi, &dyn_records, &goal_records).unwrap();
        assert!(report.c_goal.is_none());
        assert!(!report.covered());
        // Swapping in the entered goal covers it.
        let covered =
            estimate_concentrability(&mdp, &pi, &dyn_records, &[GoalRecord { c: 0, s: 1 }])
                .unwrap();
        assert!(covered.c_goal.is_some());
    }

    #[test]
    fn report_formats_are_stable_and_consistent() {
        let mut report = ExperimentReport::default();
        for (env, method, seed, rate) in [
            ("medium/four_rooms", "coda", 0, 90.0),
            ("medium/four_rooms", "coda", 1, 94.0),
            ("medium/four_rooms", "pds", 0, 70.0),
            ("medium/four_rooms", "pds", 1, 74.0),
            ("large/random_cells", "coda", 0, 60.0),
            ("large/random_cells", "pds", 0, 65.0),
        ] {
            report.push(ReportRow {
                env: env.into(),
                method: method.into(),
                seed,
                success_rate: rate,
                episodes: 100,
                mean_steps: 12.5,
                warnings: vec![],
            });
        }
        let cells = report.aggregate();
        assert_eq!(cells.len(), 4);
        assert_eq!(report.mean_success("medium/four_rooms", "coda"), Some(92.0));

        let md = report.to_markdown();
        // Bold marks the argmax per environment row.
        let medium_line = md.lines().find(|l| l.starts_with("| medium")).unwrap();
        assert!(medium_line.contains("**92.0 ± 2.0**"));
        let large_line = md.lines().find(|l| l.starts_with("| large")).unwrap();
        assert!(large_line.contains("**65.0 ± 0.0**"));

        let dir = tempfile::tempdir().unwrap();
        let first = emit_report(&report, dir.path(), &["csv", "md", "svg"]).unwrap();
        assert_eq!(first.len(), 3);
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
        emit_report(&report, dir.path(), &["csv", "md", "svg"]).unwrap();
        for (path, expected) in first.iter().zip(&bytes) {
            assert_eq!(&std::fs::read(path).unwrap(), expected);
        }
    }

    #[test]
    fn empty_report_emits_header_only_csv() {
        let report = ExperimentReport::default();
        assert_eq!(
            report.to_csv(),
            "env,method,seed,success_rate,episodes,mean_steps,warnings\n"
        );
    }

    #[test]
    fn rollouts_are_deterministic_per_seed() {
        let env = env_with("medium-analog", ContextRelation::FourRooms, 0.1);
        let (_, mut pi) = solve_optimal(env.mdp(), ActionSpace::Original).unwrap();
        let a = evaluate_policy(&env, &mut pi, &[1, 2, 3], 50, 40, 9).unwrap();
        let b = evaluate_policy(&env, &mut pi, &[1, 2, 3], 50, 40, 9).unwrap();
        assert_eq!(a.success_rate, b.success_rate);
        assert_eq!(a.mean_steps, b.mean_steps);
    }
}

//! Comparison pipelines: reward prediction (naive, with synthetic negatives,
//! and pessimistic ensembles), goal prediction with hindsight-trained
//! goal-conditioned values, and the oracle-reward skyline.
//!
//! Reward tables are fitted counts smoothed toward a random-init prior, so a
//! cell with no evidence keeps an arbitrary value in [0, 1] the way an
//! untrained network head would; ensembles disagree exactly there, which is
//! what the pessimistic combination exploits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coda::LabeledTransition;
use crate::data::{DynDataset, DynRecord, GoalRecord};
use crate::mdp::{ContextualMdp, MdpShape};
use crate::oracle::QTable;
use crate::solvers::{solve_iql_model, EmpiricalModel, SolverError};

/// Smoothing constant shared by reward and goal tables.
pub const LAPLACE_SMOOTHING: f64 = 0.01;

pub const RP_PERCENTILE: f64 = 5.0;
pub const PDS_PERCENTILE: f64 = 15.0;
pub const PDS_ENSEMBLE: usize = 10;
pub const PDS_KAPPA: f64 = 15.0;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no contexts supplied for labeling")]
    EmptyContexts,
    #[error("ensemble needs at least 2 members, got {0}")]
    SmallEnsemble(usize),
    #[error("dynamics dataset lacks episode tags; hindsight relabeling needs them")]
    MissingEpisodes,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Ensemble of reward tables with a pessimistic combination and a labeling
/// threshold calibrated on the context-goal dataset.
#[derive(Debug, Clone)]
pub struct RewardModel {
    n_states: usize,
    tables: Vec<Vec<f64>>,
    pub threshold: f64,
    pub kappa: f64,
}

impl RewardModel {
    pub fn k(&self) -> usize {
        self.tables.len()
    }

    pub fn mean(&self, c: usize, s: usize) -> f64 {
        let i = c * self.n_states + s;
        self.tables.iter().map(|t| t[i]).sum::<f64>() / self.tables.len() as f64
    }

    fn std(&self, c: usize, s: usize) -> f64 {
        if self.tables.len() < 2 {
            return 0.0;
        }
        let i = c * self.n_states + s;
        let mean = self.mean(c, s);
        let var = self
            .tables
            .iter()
            .map(|t| (t[i] - mean) * (t[i] - mean))
            .sum::<f64>()
            / self.tables.len() as f64;
        var.sqrt()
    }

    /// Ensemble mean minus `kappa` standard deviations.
    pub fn pessimistic(&self, c: usize, s: usize) -> f64 {
        self.mean(c, s) - self.kappa * self.std(c, s)
    }

    pub fn is_positive(&self, c: usize, s: usize) -> bool {
        self.pessimistic(c, s) >= self.threshold
    }
}

/// One table fitted to counts: positives pull a cell toward 1, negatives
/// toward 0, and the smoothing mass holds unvisited cells at their random
/// initialization.
fn fit_member(
    n_contexts: usize,
    n_states: usize,
    positives: &[GoalRecord],
    negatives: &[(usize, usize)],
    smoothing: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut pos = vec![0.0; n_contexts * n_states];
    let mut total = vec![0.0; n_contexts * n_states];
    for g in positives {
        pos[g.c * n_states + g.s] += 1.0;
        total[g.c * n_states + g.s] += 1.0;
    }
    for &(c, s) in negatives {
        total[c * n_states + s] += 1.0;
    }
    (0..n_contexts * n_states)
        .map(|i| {
            let init: f64 = rng.random();
            (pos[i] + smoothing * init) / (total[i] + smoothing)
        })
        .collect()
}

/// Nearest-rank percentile of the model's pessimistic score over the
/// context-goal records.
fn threshold_on_goal(model: &RewardModel, goal: &[GoalRecord], percentile: f64) -> f64 {
    let mut scores: Vec<f64> = goal.iter().map(|g| model.pessimistic(g.c, g.s)).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((percentile / 100.0) * (scores.len() - 1) as f64).floor() as usize;
    scores[idx]
}

/// Naive reward prediction: one table fitted to positives only, thresholded
/// at the 5th percentile of its scores on the context-goal dataset.
pub fn fit_rp(
    goal: &[GoalRecord],
    shape: &MdpShape,
    smoothing: f64,
    seed: u64,
) -> Result<RewardModel, BaselineError> {
    if goal.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = fit_member(
        shape.n_contexts,
        shape.n_states,
        goal,
        &[],
        smoothing,
        &mut rng,
    );
    let mut model = RewardModel {
        n_states: shape.n_states,
        tables: vec![table],
        threshold: 0.0,
        kappa: 0.0,
    };
    model.threshold = threshold_on_goal(&model, goal, RP_PERCENTILE);
    Ok(model)
}

/// Reward prediction with synthetic negatives: states drawn from the
/// dynamics dataset paired with dataset contexts, sampled one per positive
/// for a balanced fit.
pub fn fit_uds_rp(
    goal: &[GoalRecord],
    dyn_records: &[DynRecord],
    shape: &MdpShape,
    smoothing: f64,
    seed: u64,
) -> Result<RewardModel, BaselineError> {
    if goal.is_empty() || dyn_records.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives: Vec<(usize, usize)> = (0..goal.len())
        .map(|_| {
            let d = &dyn_records[rng.random_range(0..dyn_records.len())];
            let g = &goal[rng.random_range(0..goal.len())];
            (g.c, d.s)
        })
        .collect();
    let table = fit_member(
        shape.n_contexts,
        shape.n_states,
        goal,
        &negatives,
        smoothing,
        &mut rng,
    );
    let mut model = RewardModel {
        n_states: shape.n_states,
        tables: vec![table],
        threshold: 0.0,
        kappa: 0.0,
    };
    model.threshold = threshold_on_goal(&model, goal, RP_PERCENTILE);
    Ok(model)
}

/// Pessimistic ensemble reward model: independently initialized fits of the
/// full dataset, combined as mean minus `kappa` standard deviations and
/// thresholded at the 15th percentile. Members agree where data pinned them
/// and disagree at their random initializations, so the pessimistic
/// combination suppresses exactly the unsupported cells.
pub fn fit_pds(
    goal: &[GoalRecord],
    shape: &MdpShape,
    k_ensemble: usize,
    kappa: f64,
    smoothing: f64,
    seed: u64,
) -> Result<RewardModel, BaselineError> {
    if goal.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    if k_ensemble < 2 {
        return Err(BaselineError::SmallEnsemble(k_ensemble));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<Vec<f64>> = (0..k_ensemble)
        .map(|_| {
            fit_member(
                shape.n_contexts,
                shape.n_states,
                goal,
                &[],
                smoothing,
                &mut rng,
            )
        })
        .collect();
    let mut model = RewardModel {
        n_states: shape.n_states,
        tables,
        threshold: 0.0,
        kappa,
    };
    model.threshold = threshold_on_goal(&model, goal, PDS_PERCENTILE);
    Ok(model)
}

/// Labels the cross product of dynamics records and contexts with the
/// model's thresholded pessimistic reward; positive labels terminate.
pub fn label_with_reward(
    model: &RewardModel,
    dyn_records: &[DynRecord],
    contexts: &[usize],
) -> Result<Vec<LabeledTransition>, BaselineError> {
    label_transitions(dyn_records, contexts, |c, s2| model.is_positive(c, s2))
}

/// Skyline labeling with the true goal membership.
pub fn oracle_reward_label(
    mdp: &ContextualMdp,
    dyn_records: &[DynRecord],
    contexts: &[usize],
) -> Result<Vec<LabeledTransition>, BaselineError> {
    label_transitions(dyn_records, contexts, |c, s2| mdp.is_goal(c, s2))
}

fn label_transitions(
    dyn_records: &[DynRecord],
    contexts: &[usize],
    positive: impl Fn(usize, usize) -> bool,
) -> Result<Vec<LabeledTransition>, BaselineError> {
    if dyn_records.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    if contexts.is_empty() {
        return Err(BaselineError::EmptyContexts);
    }
    let mut out = Vec::with_capacity(dyn_records.len() * contexts.len());
    for d in dyn_records {
        for &c in contexts {
            let hit = positive(c, d.s2);
            out.push(LabeledTransition {
                c,
                s: d.s,
                a: d.a,
                r: if hit { 1.0 } else { 0.0 },
                s2: d.s2,
                terminal: hit,
            });
        }
    }
    Ok(out)
}

/// Conditional goal sampler plus a goal-conditioned value table trained on
/// hindsight-relabeled dynamics episodes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GoalPredictor {
    n_states: usize,
    n_actions: usize,
    /// Smoothed empirical conditional over goal states per context, rows
    /// summing to 1.
    cond: Vec<f64>,
    n_contexts: usize,
    /// Goal-conditioned values: the context axis indexes goal cells.
    gc_q: QTable,
}

/// Hindsight relabels per transition ("future" strategy).
pub const HER_RELABELS: usize = 4;

/// Fits the conditional goal table from the context-goal dataset and trains
/// goal-conditioned values on the dynamics episodes via hindsight
/// relabeling: each transition is re-labeled against future states of its
/// own episode, with reward 1 on arrival at the relabeled goal.
pub fn fit_goal_prediction(
    goal: &[GoalRecord],
    dyn_data: &DynDataset,
    shape: &MdpShape,
    expectile: f64,
    inv_temp: f64,
    discount: f64,
    seed: u64,
) -> Result<GoalPredictor, BaselineError> {
    if goal.is_empty() || dyn_data.records.is_empty() {
        return Err(BaselineError::EmptyDataset);
    }
    if !dyn_data.meta.has_episodes {
        return Err(BaselineError::MissingEpisodes);
    }
    let mut cond = vec![LAPLACE_SMOOTHING; shape.n_contexts * shape.n_states];
    for g in goal {
        cond[g.c * shape.n_states + g.s] += 1.0;
    }
    for row in cond.chunks_mut(shape.n_states) {
        let total: f64 = row.iter().sum();
        for w in row {
            *w /= total;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc_shape = MdpShape {
        n_states: shape.n_states,
        n_actions: shape.n_actions,
        n_contexts: shape.n_states,
    };
    let mut model = EmpiricalModel::new(gc_shape);
    for episode in dyn_data.episodes() {
        for (i, rec) in episode.iter().enumerate() {
            for _ in 0..HER_RELABELS {
                let future = &episode[rng.random_range(i..episode.len())];
                let relabeled_goal = future.s2;
                let hit = rec.s2 == relabeled_goal;
                model.add(&LabeledTransition {
                    c: relabeled_goal,
                    s: rec.s,
                    a: rec.a,
                    r: if hit { 1.0 } else { 0.0 },
                    s2: rec.s2,
                    terminal: hit,
                });
            }
        }
    }
    let (gc_q, _) = solve_iql_model(&model, expectile, inv_temp, discount, 5000)?;
    Ok(GoalPredictor {
        n_states: shape.n_states,
        n_actions: shape.n_actions,
        n_contexts: shape.n_contexts,
        cond,
        gc_q,
    })
}

impl GoalPredictor {
    /// Samples a goal state for a context from the conditional table.
    pub fn sample_goal(&self, context: usize, rng: &mut impl Rng) -> usize {
        crate::numeric::sample_categorical(
            &self.cond[context * self.n_states..(context + 1) * self.n_states],
            rng,
        )
    }

    pub fn goal_prob(&self, context: usize, s: usize) -> f64 {
        self.cond[context * self.n_states + s]
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    /// Greedy action toward a sampled goal under the goal-conditioned values.
    pub fn act_toward(&self, goal: usize, s: usize) -> usize {
        let row = &self.gc_q.row(goal, s)[..self.n_actions];
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            // No signal toward this goal from here; hold position.
            self.n_actions - 1
        } else {
            crate::numeric::argmax(row)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_dyn, sample_goal_pairs, BehaviorSpec};
    use crate::envs::{build_cgo, builtin_map, parse_map, ContextRelation, GridCgo};

    fn medium_env(relation: ContextRelation) -> GridCgo {
        let map = parse_map(builtin_map("medium-analog").unwrap())
            .unwrap()
            .with_slip(0.1)
            .unwrap();
        build_cgo(&map, &relation, 0.99).unwrap()
    }

    #[test]
    fn rp_scores_observed_pairs_near_one() {
        let env = medium_env(ContextRelation::FourRooms);
        let goal = sample_goal_pairs(&env, 100, false, 0).unwrap();
        let shape = MdpShape::of(env.mdp());
        let model = fit_rp(&goal.records, &shape, LAPLACE_SMOOTHING, 0).unwrap();
        for g in &goal.records {
            assert!(model.mean(g.c, g.s) > 0.98);
        }
        // The percentile threshold admits all but the bottom slice of the
        // observed positives.
        let positive = goal
            .records
            .iter()
            .filter(|g| model.is_positive(g.c, g.s))
            .count() as f64;
        assert!(positive >= 0.94 * goal.records.len() as f64);
    }

    #[test]
    fn threshold_is_percentile_on_goal_scores() {
        let env = medium_env(ContextRelation::FourRooms);
        let goal = sample_goal_pairs(&env, 200, false, 1).unwrap();
        let shape = MdpShape::of(env.mdp());
        let model = fit_rp(&goal.records, &shape, LAPLACE_SMOOTHING, 1).unwrap();
        let clearing = goal
            .records
            .iter()
            .filter(|g| model.pessimistic(g.c, g.s) >= model.threshold)
            .count();
        assert!(clearing as f64 >= 0.95 * goal.records.len() as f64);
    }

    #[test]
    fn uds_negatives_depress_frequent_dyn_goal_cells() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        // One positive example of a goal cell, and dynamics data that sits on
        // that same cell constantly.
        let goal_cell = env.goal_states(0)[0];
        let goal = vec![GoalRecord { c: 0, s: goal_cell }];
        let dyn_records: Vec<DynRecord> = (0..200)
            .map(|i| DynRecord {
                s: goal_cell,
                a: 4,
                s2: goal_cell,
                episode: 0,
                t: i,
            })
            .collect();
        let rp = fit_rp(&goal, &shape, LAPLACE_SMOOTHING, 3).unwrap();
        let uds = fit_uds_rp(&goal, &dyn_records, &shape, LAPLACE_SMOOTHING, 3).unwrap();
        assert!(uds.mean(0, goal_cell) < rp.mean(0, goal_cell));
    }

    #[test]
    fn uds_requires_both_datasets() {
        let shape = MdpShape {
            n_states: 4,
            n_actions: 2,
            n_contexts: 1,
        };
        let goal = vec![GoalRecord { c: 0, s: 1 }];
        assert!(matches!(
            fit_uds_rp(&goal, &[], &shape, LAPLACE_SMOOTHING, 0),
            Err(BaselineError::EmptyDataset)
        ));
        assert!(matches!(
            fit_rp(&[], &shape, LAPLACE_SMOOTHING, 0),
            Err(BaselineError::EmptyDataset)
        ));
    }

    #[test]
    fn pds_pessimism_ordering() {
        let env = medium_env(ContextRelation::RandomCells { radius: 2.0 });
        let goal = sample_goal_pairs(&env, 200, true, 2).unwrap();
        let shape = MdpShape::of(env.mdp());
        let model = fit_pds(
            &goal.records,
            &shape,
            PDS_ENSEMBLE,
            PDS_KAPPA,
            LAPLACE_SMOOTHING,
            2,
        )
        .unwrap();
        assert_eq!(model.k(), PDS_ENSEMBLE);
        for c in 0..shape.n_contexts {
            for s in 0..shape.n_states {
                assert!(model.pessimistic(c, s) <= model.mean(c, s) + 1e-12);
            }
        }
        assert!(matches!(
            fit_pds(&goal.records, &shape, 1, PDS_KAPPA, LAPLACE_SMOOTHING, 2),
            Err(BaselineError::SmallEnsemble(1))
        ));
    }

    #[test]
    fn pds_suppresses_unsupported_cells_below_rp() {
        let env = medium_env(ContextRelation::FourRooms);
        let goal = sample_goal_pairs(&env, 200, false, 5).unwrap();
        let shape = MdpShape::of(env.mdp());
        let rp = fit_rp(&goal.records, &shape, LAPLACE_SMOOTHING, 5).unwrap();
        let pds = fit_pds(
            &goal.records,
            &shape,
            PDS_ENSEMBLE,
            PDS_KAPPA,
            LAPLACE_SMOOTHING,
            5,
        )
        .unwrap();
        for c in 0..shape.n_contexts {
            for s in 0..shape.n_states {
                if !env.mdp().is_goal(c, s) {
                    assert!(pds.pessimistic(c, s) <= rp.pessimistic(c, s) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn pds_false_positive_rate_not_above_rp() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        for seed in 0..5 {
            let goal = sample_goal_pairs(&env, 200, true, seed).unwrap();
            let rp = fit_rp(&goal.records, &shape, LAPLACE_SMOOTHING, seed).unwrap();
            let pds = fit_pds(
                &goal.records,
                &shape,
                PDS_ENSEMBLE,
                PDS_KAPPA,
                LAPLACE_SMOOTHING,
                seed,
            )
            .unwrap();
            let mut rp_fp = 0;
            let mut pds_fp = 0;
            let mut total = 0;
            for c in 0..shape.n_contexts {
                for s in 0..shape.n_states {
                    if !env.mdp().is_goal(c, s) {
                        total += 1;
                        rp_fp += rp.is_positive(c, s) as usize;
                        pds_fp += pds.is_positive(c, s) as usize;
                    }
                }
            }
            assert!(total > 0);
            assert!(pds_fp <= rp_fp, "seed {seed}: pds {pds_fp} vs rp {rp_fp}");
        }
    }

    #[test]
    fn oracle_labels_match_reward_model_labels_under_perfect_model() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        let dyn_data = collect_dyn(&env, &BehaviorSpec::uniform(), 300, 0).unwrap();
        let contexts: Vec<usize> = vec![0, 1, 2, 3];
        // A perfect model: membership table with threshold between the levels.
        let mut table = vec![0.0; shape.n_contexts * shape.n_states];
        for c in 0..shape.n_contexts {
            for s in 0..shape.n_states {
                table[c * shape.n_states + s] = if env.mdp().is_goal(c, s) { 1.0 } else { 0.0 };
            }
        }
        let model = RewardModel {
            n_states: shape.n_states,
            tables: vec![table],
            threshold: 0.5,
            kappa: 0.0,
        };
        let labeled = label_with_reward(&model, &dyn_data.records, &contexts).unwrap();
        let oracle = oracle_reward_label(env.mdp(), &dyn_data.records, &contexts).unwrap();
        assert_eq!(labeled.len(), dyn_data.records.len() * contexts.len());
        for (a, b) in labeled.iter().zip(&oracle) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oracle_label_positive_fraction_tracks_goal_density() {
        let env = medium_env(ContextRelation::FourRooms);
        let dyn_data = collect_dyn(&env, &BehaviorSpec::uniform(), 5000, 1).unwrap();
        let labeled = oracle_reward_label(env.mdp(), &dyn_data.records, &[0, 1, 2, 3]).unwrap();
        let positive = labeled.iter().filter(|t| t.r == 1.0).count() as f64 / labeled.len() as f64;
        // 9 goal cells of 36 floor cells per context.
        assert!(
            (positive - 0.25).abs() < 0.08,
            "positive fraction {positive}"
        );
        assert!(matches!(
            oracle_reward_label(env.mdp(), &dyn_data.records, &[]),
            Err(BaselineError::EmptyContexts)
        ));
    }

    #[test]
    fn threshold_above_all_scores_labels_nothing() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        let goal = sample_goal_pairs(&env, 50, false, 0).unwrap();
        let dyn_data = collect_dyn(&env, &BehaviorSpec::uniform(), 100, 0).unwrap();
        let mut model = fit_rp(&goal.records, &shape, LAPLACE_SMOOTHING, 0).unwrap();
        model.threshold = 2.0;
        let labeled = label_with_reward(&model, &dyn_data.records, &[0, 1, 2, 3]).unwrap();
        assert!(labeled.iter().all(|t| t.r == 0.0));
    }

    #[test]
    fn goal_predictor_concentrates_on_observed_goal() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        let dyn_data = collect_dyn(&env, &BehaviorSpec::play(), 2000, 0).unwrap();
        let goal_cell = env.goal_states(2)[4];
        let goal = vec![GoalRecord { c: 2, s: goal_cell }];
        let predictor = fit_goal_prediction(&goal, &dyn_data, &shape, 0.9, 10.0, 0.99, 0).unwrap();
        // One observation against the smoothing floor: the mode is the
        // observed goal and carries most of the mass.
        let best = crate::numeric::argmax(
            &(0..shape.n_states)
                .map(|s| predictor.goal_prob(2, s))
                .collect::<Vec<_>>(),
        );
        assert_eq!(best, goal_cell);
        assert!(predictor.goal_prob(2, goal_cell) > 0.7);
        // Same rng state, same sampled goal.
        let mut rng_a = ChaCha8Rng::seed_from_u64(42);
        let mut rng_b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            predictor.sample_goal(2, &mut rng_a),
            predictor.sample_goal(2, &mut rng_b)
        );
    }

    #[test]
    fn goal_prediction_requires_episode_tags() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        let mut dyn_data = collect_dyn(&env, &BehaviorSpec::play(), 200, 0).unwrap();
        dyn_data.meta.has_episodes = false;
        let goal = vec![GoalRecord {
            c: 0,
            s: env.goal_states(0)[0],
        }];
        assert!(matches!(
            fit_goal_prediction(&goal, &dyn_data, &shape, 0.9, 10.0, 0.99, 0),
            Err(BaselineError::MissingEpisodes)
        ));
    }

    #[test]
    fn goal_conditioned_values_walk_to_adjacent_goal() {
        let env = medium_env(ContextRelation::FourRooms);
        let shape = MdpShape::of(env.mdp());
        let dyn_data = collect_dyn(&env, &BehaviorSpec::diverse(), 20_000, 0).unwrap();
        let goal = sample_goal_pairs(&env, 50, false, 0).unwrap();
        let predictor =
            fit_goal_prediction(&goal.records, &dyn_data, &shape, 0.9, 10.0, 0.99, 0).unwrap();
        // From the cell left of a goal, the greedy action moves right to it.
        let g = env.state_of_cell(3, 4).unwrap();
        let s = env.state_of_cell(3, 3).unwrap();
        assert_eq!(predictor.act_toward(g, s), 3);
    }
}

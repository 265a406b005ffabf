//! Offline solvers over labeled augmented-MDP tuples.
//!
//! All solvers share the [`EmpiricalModel`] substrate (visit counts, mean
//! rewards, and empirical successor distributions) and extract policies over
//! the original action space only; the claim action participates in value
//! propagation but is never acted.

use serde::Serialize;
use thiserror::Error;

use crate::coda::LabeledTransition;
use crate::mdp::{ActionSpace, MdpShape, PolicyTable};
use crate::oracle::QTable;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("no labeled transitions supplied")]
    EmptyData,
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error("penalty scale must be non-negative, got {0}")]
    NegativePenalty(f64),
    #[error("expectile must lie in (0.5, 1), got {0}")]
    BadExpectile(f64),
    #[error("inverse temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("a loss split is empty (no tuples of that kind)")]
    EmptySplit,
    #[error("optimization diverged in round {round}: loss {loss}")]
    Diverged { round: usize, loss: f64 },
}

/// Counts, mean rewards, and empirical successor distributions accumulated
/// from labeled transitions, over the augmented state and action spaces.
#[derive(Debug, Clone)]
pub struct EmpiricalModel {
    shape: MdpShape,
    states: usize,
    actions: usize,
    counts: Vec<f64>,
    reward_sum: Vec<f64>,
    successors: Vec<Vec<(usize, bool, f64)>>,
}

impl EmpiricalModel {
    pub fn new(shape: MdpShape) -> Self {
        let states = shape.n_states + 1;
        let actions = shape.n_actions + 1;
        let cells = shape.n_contexts * states * actions;
        Self {
            shape,
            states,
            actions,
            counts: vec![0.0; cells],
            reward_sum: vec![0.0; cells],
            successors: vec![Vec::new(); cells],
        }
    }

    pub fn from_tuples(shape: MdpShape, tuples: &[LabeledTransition]) -> Result<Self, SolverError> {
        if tuples.is_empty() {
            return Err(SolverError::EmptyData);
        }
        let mut model = Self::new(shape);
        model.add_all(tuples);
        Ok(model)
    }

    pub fn shape(&self) -> &MdpShape {
        &self.shape
    }

    fn idx(&self, c: usize, s: usize, a: usize) -> usize {
        (c * self.states + s) * self.actions + a
    }

    pub fn add(&mut self, t: &LabeledTransition) {
        let i = self.idx(t.c, t.s, t.a);
        self.counts[i] += 1.0;
        self.reward_sum[i] += t.r;
        let row = &mut self.successors[i];
        match row
            .iter_mut()
            .find(|(s2, term, _)| *s2 == t.s2 && *term == t.terminal)
        {
            Some((_, _, w)) => *w += 1.0,
            None => row.push((t.s2, t.terminal, 1.0)),
        }
    }

    pub fn add_all(&mut self, tuples: &[LabeledTransition]) {
        for t in tuples {
            self.add(t);
        }
    }

    /// Exact expectation of the balanced augmentation sampler: fractional
    /// counts carrying `total_weight` mass split `goal_ratio` to claim tuples
    /// (by pair frequency) and the rest to the product of the dynamics
    /// frequencies with the goal dataset's context marginal.
    pub fn from_product(
        dyn_records: &[crate::data::DynRecord],
        goal_records: &[crate::data::GoalRecord],
        shape: MdpShape,
        goal_ratio: f64,
        total_weight: f64,
    ) -> Result<Self, SolverError> {
        if dyn_records.is_empty() || goal_records.is_empty() {
            return Err(SolverError::EmptyData);
        }
        let mut model = Self::new(shape);
        let n_goal = goal_records.len() as f64;
        let n_dyn = dyn_records.len() as f64;
        let claim = shape.claim_action();
        let absorbing = shape.absorbing_state();
        for g in goal_records {
            let i = model.idx(g.c, g.s, claim);
            let w = goal_ratio * total_weight / n_goal;
            model.counts[i] += w;
            model.reward_sum[i] += w;
            let row = &mut model.successors[i];
            match row
                .iter_mut()
                .find(|(s2, term, _)| *s2 == absorbing && *term)
            {
                Some((_, _, acc)) => *acc += w,
                None => row.push((absorbing, true, w)),
            }
        }
        let mut ctx_weight = vec![0.0; shape.n_contexts];
        for g in goal_records {
            ctx_weight[g.c] += (1.0 - goal_ratio) * total_weight / n_goal;
        }
        for d in dyn_records {
            for (c, &cw) in ctx_weight.iter().enumerate() {
                if cw == 0.0 {
                    continue;
                }
                let w = cw / n_dyn;
                let i = model.idx(c, d.s, d.a);
                model.counts[i] += w;
                let row = &mut model.successors[i];
                match row.iter_mut().find(|(s2, term, _)| *s2 == d.s2 && !term) {
                    Some((_, _, acc)) => *acc += w,
                    None => row.push((d.s2, false, w)),
                }
            }
        }
        Ok(model)
    }

    pub fn count(&self, c: usize, s: usize, a: usize) -> f64 {
        self.counts[self.idx(c, s, a)]
    }

    pub fn mean_reward(&self, c: usize, s: usize, a: usize) -> f64 {
        let i = self.idx(c, s, a);
        if self.counts[i] == 0.0 {
            0.0
        } else {
            self.reward_sum[i] / self.counts[i]
        }
    }

    /// Empirical expectation of the non-terminal continuation under
    /// P-hat(.|c,s,a), for a value table over augmented states.
    fn continuation(&self, c: usize, s: usize, a: usize, values: &[f64]) -> f64 {
        let i = self.idx(c, s, a);
        let n = self.counts[i];
        let mut acc = 0.0;
        for &(s2, terminal, w) in &self.successors[i] {
            if !terminal {
                acc += w * values[c * self.states + s2];
            }
        }
        acc / n
    }

    fn total_count(&self, c: usize, s: usize) -> f64 {
        (0..self.actions).map(|a| self.count(c, s, a)).sum()
    }
}

/// Greedy policy over the original actions with lowest-index tie-breaking;
/// rows with no signal at all (every entry equal) fall back to uniform.
fn extract_policy(q: &QTable, shape: &MdpShape) -> PolicyTable {
    let n_actions = shape.n_actions;
    let mut probs = vec![0.0; shape.n_contexts * shape.n_states * n_actions];
    for c in 0..shape.n_contexts {
        for s in 0..shape.n_states {
            let row = &q.row(c, s)[..n_actions];
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut probs[(c * shape.n_states + s) * n_actions..][..n_actions];
            if hi - lo < 1e-12 {
                out.fill(1.0 / n_actions as f64);
            } else {
                out[crate::numeric::argmax(row)] = 1.0;
            }
        }
    }
    PolicyTable::new(
        shape.n_contexts,
        shape.n_states,
        n_actions,
        ActionSpace::Original,
        probs,
    )
    .expect("extracted rows are stochastic")
}

fn q_sweep(
    model: &EmpiricalModel,
    q: &mut QTable,
    discount: f64,
    penalty: impl Fn(f64) -> f64,
    clip: bool,
) -> f64 {
    let shape = model.shape;
    let states = model.states;
    // State values under the current table: max over all augmented actions.
    let mut v = vec![0.0; shape.n_contexts * states];
    for c in 0..shape.n_contexts {
        for s in 0..states {
            v[c * states + s] = q.max_value(c, s);
        }
    }
    let mut delta: f64 = 0.0;
    for c in 0..shape.n_contexts {
        for s in 0..states {
            for a in 0..model.actions {
                let n = model.count(c, s, a);
                if n == 0.0 {
                    continue;
                }
                let mut target = model.mean_reward(c, s, a) - penalty(n)
                    + discount * model.continuation(c, s, a, &v);
                if clip {
                    target = target.clamp(0.0, 1.0);
                }
                delta = delta.max((target - q.value(c, s, a)).abs());
                q.set(c, s, a, target);
            }
        }
    }
    delta
}

/// Batch fitted Q-iteration: repeated sweeps of averaged Bellman targets
/// `r + gamma * (1 - terminal) * max_a' Q(x', a')` over the dataset's
/// empirical model. Unvisited pairs stay at zero.
pub fn fit_fqi(
    data: &[LabeledTransition],
    shape: &MdpShape,
    iters: usize,
    discount: f64,
) -> Result<(QTable, PolicyTable), SolverError> {
    let model = EmpiricalModel::from_tuples(*shape, data)?;
    solve_fqi_model(&model, iters, discount)
}

pub fn solve_fqi_model(
    model: &EmpiricalModel,
    iters: usize,
    discount: f64,
) -> Result<(QTable, PolicyTable), SolverError> {
    if iters == 0 {
        return Err(SolverError::ZeroIterations);
    }
    let shape = model.shape;
    let mut q = QTable::zeros(
        shape.n_contexts,
        shape.n_states + 1,
        shape.n_actions + 1,
        ActionSpace::Augmented,
    );
    for _ in 0..iters {
        let delta = q_sweep(model, &mut q, discount, |_| 0.0, false);
        if delta <= 1e-14 {
            break;
        }
    }
    let policy = extract_policy(&q, &shape);
    Ok((q, policy))
}

/// Count-pessimistic value iteration: targets are penalized by
/// `b / sqrt(N(c,s,a))` and clipped to [0, 1]; unvisited pairs are valued 0,
/// so out-of-distribution claims are maximally penalized.
pub fn fit_pevi(
    data: &[LabeledTransition],
    shape: &MdpShape,
    penalty_scale: f64,
    discount: f64,
) -> Result<(QTable, PolicyTable), SolverError> {
    let model = EmpiricalModel::from_tuples(*shape, data)?;
    solve_pevi_model(&model, penalty_scale, discount)
}

pub fn solve_pevi_model(
    model: &EmpiricalModel,
    penalty_scale: f64,
    discount: f64,
) -> Result<(QTable, PolicyTable), SolverError> {
    if penalty_scale < 0.0 {
        return Err(SolverError::NegativePenalty(penalty_scale));
    }
    let shape = model.shape;
    let mut q = QTable::zeros(
        shape.n_contexts,
        shape.n_states + 1,
        shape.n_actions + 1,
        ActionSpace::Augmented,
    );
    for _ in 0..20_000 {
        let delta = q_sweep(model, &mut q, discount, |n| penalty_scale / n.sqrt(), true);
        if delta <= 1e-10 {
            break;
        }
    }
    let policy = extract_policy(&q, &shape);
    Ok((q, policy))
}

/// Weighted tau-expectile of a set of values, solved by bisection. The
/// expectile is the root of `sum_i w_i * |tau - 1(v_i < m)| * (v_i - m)`.
fn weighted_expectile(values: &[f64], weights: &[f64], tau: f64) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo >= hi {
        return lo;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let mut grad = 0.0;
        for (&v, &w) in values.iter().zip(weights) {
            let slope = if v < mid { 1.0 - tau } else { tau };
            grad += w * slope * (v - mid);
        }
        if grad > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Tabular expectile-regression solver: V is the in-sample tau-expectile of
/// Q over observed actions, Q follows one-step targets `r + gamma * V(x')`,
/// and the policy is an advantage-weighted softmax over observed original
/// actions. Runs alternating sweeps to a 1e-8 joint fixed point.
pub fn fit_iql_tabular(
    data: &[LabeledTransition],
    shape: &MdpShape,
    expectile: f64,
    inv_temp: f64,
    discount: f64,
    max_sweeps: usize,
) -> Result<(QTable, PolicyTable), SolverError> {
    let model = EmpiricalModel::from_tuples(*shape, data)?;
    solve_iql_model(&model, expectile, inv_temp, discount, max_sweeps)
}

pub fn solve_iql_model(
    model: &EmpiricalModel,
    expectile: f64,
    inv_temp: f64,
    discount: f64,
    max_sweeps: usize,
) -> Result<(QTable, PolicyTable), SolverError> {
    if !(expectile > 0.5 && expectile < 1.0) {
        return Err(SolverError::BadExpectile(expectile));
    }
    if inv_temp <= 0.0 {
        return Err(SolverError::BadTemperature(inv_temp));
    }
    if max_sweeps == 0 {
        return Err(SolverError::ZeroIterations);
    }
    let shape = model.shape;
    let states = model.states;
    let mut q = QTable::zeros(
        shape.n_contexts,
        states,
        shape.n_actions + 1,
        ActionSpace::Augmented,
    );
    let mut v = vec![0.0; shape.n_contexts * states];
    let mut scratch_vals = Vec::new();
    let mut scratch_weights = Vec::new();
    for _ in 0..max_sweeps {
        let mut delta: f64 = 0.0;
        // SARSA-style one-step targets against the current V.
        for c in 0..shape.n_contexts {
            for s in 0..states {
                for a in 0..model.actions {
                    let n = model.count(c, s, a);
                    if n == 0.0 {
                        continue;
                    }
                    let target =
                        model.mean_reward(c, s, a) + discount * model.continuation(c, s, a, &v);
                    delta = delta.max((target - q.value(c, s, a)).abs());
                    q.set(c, s, a, target);
                }
            }
        }
        // V is the data-weighted expectile of Q over observed actions.
        for c in 0..shape.n_contexts {
            for s in 0..states {
                if model.total_count(c, s) == 0.0 {
                    continue;
                }
                scratch_vals.clear();
                scratch_weights.clear();
                for a in 0..model.actions {
                    let n = model.count(c, s, a);
                    if n > 0.0 {
                        scratch_vals.push(q.value(c, s, a));
                        scratch_weights.push(n);
                    }
                }
                let value = weighted_expectile(&scratch_vals, &scratch_weights, expectile);
                delta = delta.max((value - v[c * states + s]).abs());
                v[c * states + s] = value;
            }
        }
        if delta <= 1e-8 {
            break;
        }
    }

    // Advantage-weighted softmax over observed original actions only.
    let mut probs = vec![0.0; shape.n_contexts * shape.n_states * shape.n_actions];
    for c in 0..shape.n_contexts {
        for s in 0..shape.n_states {
            let out = &mut probs[(c * shape.n_states + s) * shape.n_actions..][..shape.n_actions];
            let observed: Vec<usize> = (0..shape.n_actions)
                .filter(|&a| model.count(c, s, a) > 0.0)
                .collect();
            if observed.is_empty() {
                out.fill(1.0 / shape.n_actions as f64);
                continue;
            }
            let max_adv = observed
                .iter()
                .map(|&a| q.value(c, s, a) - v[c * states + s])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &a in &observed {
                let adv = q.value(c, s, a) - v[c * states + s];
                let w = (inv_temp * (adv - max_adv)).exp();
                out[a] = w;
                total += w;
            }
            for w in out.iter_mut() {
                *w /= total;
            }
        }
    }
    let policy = PolicyTable::new(
        shape.n_contexts,
        shape.n_states,
        shape.n_actions,
        ActionSpace::Original,
        probs,
    )
    .expect("softmax rows are stochastic");
    Ok((q, policy))
}

/// State of the two-player pessimistic game: a clipped tabular value pair
/// `(f, g)` standing in for the augmented value function, softmax policy
/// logits over original actions, and Lagrange multipliers for the two
/// data-consistency constraints.
#[derive(Debug, Clone)]
pub struct PspiState {
    pub shape: MdpShape,
    /// f(c, s, a) over original actions, clipped to [0, 1].
    pub f: Vec<f64>,
    /// g(c, s): the claim-action head, clipped to [0, 1].
    pub g: Vec<f64>,
    /// Softmax logits over original actions.
    pub logits: Vec<f64>,
    pub lambda_dyn: f64,
    pub lambda_goal: f64,
}

impl PspiState {
    pub fn new(shape: MdpShape) -> Self {
        Self {
            shape,
            f: vec![0.0; shape.n_contexts * shape.n_states * shape.n_actions],
            g: vec![0.0; shape.n_contexts * shape.n_states],
            logits: vec![0.0; shape.n_contexts * shape.n_states * shape.n_actions],
            lambda_dyn: 1.0,
            lambda_goal: 1.0,
        }
    }

    fn f_at(&self, c: usize, s: usize, a: usize) -> f64 {
        if s >= self.shape.n_states {
            return 0.0;
        }
        self.f[(c * self.shape.n_states + s) * self.shape.n_actions + a]
    }

    fn g_at(&self, c: usize, s: usize) -> f64 {
        if s >= self.shape.n_states {
            return 0.0;
        }
        self.g[c * self.shape.n_states + s]
    }

    /// E_{a ~ pi(.|x)} f(x, a) under the current softmax policy.
    fn f_under_policy(&self, c: usize, s: usize) -> f64 {
        if s >= self.shape.n_states {
            return 0.0;
        }
        let probs = self.policy_row(c, s);
        (0..self.shape.n_actions)
            .map(|a| probs[a] * self.f_at(c, s, a))
            .sum()
    }

    fn policy_row(&self, c: usize, s: usize) -> Vec<f64> {
        let row = &self.logits[(c * self.shape.n_states + s) * self.shape.n_actions..]
            [..self.shape.n_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = out.iter().sum();
        for w in &mut out {
            *w /= total;
        }
        out
    }

    pub fn policy(&self) -> PolicyTable {
        let mut probs =
            vec![0.0; self.shape.n_contexts * self.shape.n_states * self.shape.n_actions];
        for c in 0..self.shape.n_contexts {
            for s in 0..self.shape.n_states {
                let row = self.policy_row(c, s);
                probs[(c * self.shape.n_states + s) * self.shape.n_actions..]
                    [..self.shape.n_actions]
                    .copy_from_slice(&row);
            }
        }
        PolicyTable::new(
            self.shape.n_contexts,
            self.shape.n_states,
            self.shape.n_actions,
            ActionSpace::Original,
            probs,
        )
        .expect("softmax rows are stochastic")
    }
}

/// Bellman target of a dynamics tuple: `gamma * max(g(x'), f(x', pi))`.
fn pspi_target(state: &PspiState, discount: f64, t: &LabeledTransition) -> f64 {
    discount * state.g_at(t.c, t.s2).max(state.f_under_policy(t.c, t.s2))
}

/// The two empirical losses of the game: the squared Bellman residual of `f`
/// on dynamics tuples and the squared miss of `g` from 1 on goal tuples.
pub fn pspi_losses(
    state: &PspiState,
    dyn_tuples: &[LabeledTransition],
    goal_tuples: &[LabeledTransition],
    discount: f64,
) -> Result<(f64, f64), SolverError> {
    if dyn_tuples.is_empty() || goal_tuples.is_empty() {
        return Err(SolverError::EmptySplit);
    }
    let l_dyn = dyn_tuples
        .iter()
        .map(|t| {
            let e = state.f_at(t.c, t.s, t.a) - pspi_target(state, discount, t);
            e * e
        })
        .sum::<f64>()
        / dyn_tuples.len() as f64;
    let l_goal = goal_tuples
        .iter()
        .map(|t| {
            let e = state.g_at(t.c, t.s) - 1.0;
            e * e
        })
        .sum::<f64>()
        / goal_tuples.len() as f64;
    Ok((l_dyn, l_goal))
}

#[derive(Debug, Clone, Serialize)]
pub struct PspiParams {
    pub rounds: usize,
    pub lr_f: f64,
    pub lr_policy: f64,
    pub lr_lambda: f64,
    pub inner_steps: usize,
    pub eps_dyn: f64,
    /// Slack on the goal constraint; the reward head is deterministic, so
    /// this stays near machine scale.
    pub eps_goal: f64,
}

impl Default for PspiParams {
    fn default() -> Self {
        Self {
            rounds: 600,
            lr_f: 0.5,
            lr_policy: 1.0,
            lr_lambda: 0.5,
            inner_steps: 10,
            eps_dyn: 1e-3,
            eps_goal: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PspiResult {
    pub policy: PolicyTable,
    /// Pessimistic value estimate of the returned policy at the initial
    /// distribution.
    pub value_estimate: f64,
    pub final_loss_dyn: f64,
    pub final_loss_goal: f64,
    pub lambda_dyn: f64,
    pub lambda_goal: f64,
}

/// Solves the two-player game by alternating updates: the value pair descends
/// the pessimistic objective plus Lagrangian constraint terms, the policy
/// runs soft policy iteration against `f`, and the multipliers ascend the
/// constraint violations. Returns the round-averaged policy.
pub fn solve_pspi(
    dyn_tuples: &[LabeledTransition],
    goal_tuples: &[LabeledTransition],
    shape: &MdpShape,
    init_support: &[(usize, usize, f64)],
    discount: f64,
    params: &PspiParams,
) -> Result<PspiResult, SolverError> {
    if dyn_tuples.is_empty() || goal_tuples.is_empty() {
        return Err(SolverError::EmptySplit);
    }
    if params.eps_dyn < 0.0 {
        return Err(SolverError::NegativePenalty(params.eps_dyn));
    }
    let mut state = PspiState::new(*shape);
    let n_sa = shape.n_contexts * shape.n_states * shape.n_actions;
    let n_s = shape.n_contexts * shape.n_states;

    // Tuple groups per (c, s, a) for dynamics and per (c, s) for goals.
    let mut dyn_groups: Vec<Vec<usize>> = vec![Vec::new(); n_sa];
    for (i, t) in dyn_tuples.iter().enumerate() {
        dyn_groups[(t.c * shape.n_states + t.s) * shape.n_actions + t.a].push(i);
    }
    let mut goal_counts: Vec<f64> = vec![0.0; n_s];
    for t in goal_tuples {
        goal_counts[t.c * shape.n_states + t.s] += 1.0;
    }

    let mut avg_policy = vec![0.0; n_sa];
    let n_dyn = dyn_tuples.len() as f64;
    let n_goal = goal_tuples.len() as f64;

    for round in 0..params.rounds {
        // Detached Bellman targets and their per-(c,s,a) means.
        let targets: Vec<f64> = dyn_tuples
            .iter()
            .map(|t| pspi_target(&state, discount, t))
            .collect();
        let mut mean_target = vec![0.0; n_sa];
        for (i, group) in dyn_groups.iter().enumerate() {
            if !group.is_empty() {
                mean_target[i] =
                    group.iter().map(|&j| targets[j]).sum::<f64>() / group.len() as f64;
            }
        }

        // Excess Bellman loss against an inner minimizer approximated by
        // damped per-coordinate steps toward the group means.
        let l_dyn: f64 = dyn_groups
            .iter()
            .enumerate()
            .map(|(i, group)| {
                group
                    .iter()
                    .map(|&j| {
                        let e = state.f[i] - targets[j];
                        e * e
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n_dyn;
        let mut f_inner = state.f.clone();
        for _ in 0..params.inner_steps {
            for (i, group) in dyn_groups.iter().enumerate() {
                if !group.is_empty() {
                    f_inner[i] += 0.5 * (mean_target[i] - f_inner[i]);
                }
            }
        }
        let l_dyn_inner: f64 = dyn_groups
            .iter()
            .enumerate()
            .map(|(i, group)| {
                group
                    .iter()
                    .map(|&j| {
                        let e = f_inner[i] - targets[j];
                        e * e
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n_dyn;
        let excess = (l_dyn - l_dyn_inner).max(0.0);

        let l_goal: f64 = goal_counts
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let (c, s) = (i / shape.n_states, i % shape.n_states);
                let e = state.g_at(c, s) - 1.0;
                k * e * e
            })
            .sum::<f64>()
            / n_goal;

        if !l_dyn.is_finite() || l_dyn > 1e3 {
            return Err(SolverError::Diverged { round, loss: l_dyn });
        }

        // Value-pair descent: pessimistic objective at d0 plus the
        // Lagrangian of both constraints (semi-gradient through targets).
        let mut f_grad = vec![0.0; n_sa];
        for &(c, s, p) in init_support {
            let probs = state.policy_row(c, s);
            for a in 0..shape.n_actions {
                f_grad[(c * shape.n_states + s) * shape.n_actions + a] += p * probs[a];
            }
        }
        for (i, group) in dyn_groups.iter().enumerate() {
            for &j in group {
                f_grad[i] += state.lambda_dyn * 2.0 * (state.f[i] - targets[j]) / n_dyn;
            }
        }
        for (i, f) in state.f.iter_mut().enumerate() {
            *f = (*f - params.lr_f * f_grad[i]).clamp(0.0, 1.0);
        }
        for (i, g) in state.g.iter_mut().enumerate() {
            let grad = state.lambda_goal * 2.0 * goal_counts[i] * (*g - 1.0) / n_goal;
            *g = (*g - params.lr_f * grad).clamp(0.0, 1.0);
        }

        // Soft policy iteration against f.
        for c in 0..shape.n_contexts {
            for s in 0..shape.n_states {
                for a in 0..shape.n_actions {
                    state.logits[(c * shape.n_states + s) * shape.n_actions + a] +=
                        params.lr_policy * state.f_at(c, s, a);
                }
            }
        }

        // Multiplier ascent on the constraint violations.
        state.lambda_dyn =
            (state.lambda_dyn + params.lr_lambda * (excess - params.eps_dyn)).clamp(0.0, 1e6);
        state.lambda_goal =
            (state.lambda_goal + params.lr_lambda * (l_goal - params.eps_goal)).clamp(0.0, 1e6);

        for c in 0..shape.n_contexts {
            for s in 0..shape.n_states {
                let row = state.policy_row(c, s);
                for a in 0..shape.n_actions {
                    avg_policy[(c * shape.n_states + s) * shape.n_actions + a] += row[a];
                }
            }
        }
    }

    for w in &mut avg_policy {
        *w /= params.rounds as f64;
    }
    let policy = PolicyTable::new(
        shape.n_contexts,
        shape.n_states,
        shape.n_actions,
        ActionSpace::Original,
        avg_policy,
    )
    .expect("averaged rows are stochastic");

    let value_estimate = init_support
        .iter()
        .map(|&(c, s, p)| {
            let row = policy.row(c, s);
            p * (0..shape.n_actions)
                .map(|a| row[a] * state.f_at(c, s, a))
                .sum::<f64>()
        })
        .sum();
    let (final_loss_dyn, final_loss_goal) = pspi_losses(&state, dyn_tuples, goal_tuples, discount)?;
    Ok(PspiResult {
        policy,
        value_estimate,
        final_loss_dyn,
        final_loss_goal,
        lambda_dyn: state.lambda_dyn,
        lambda_goal: state.lambda_goal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coda::augment_full;
    use crate::data::{DynRecord, GoalRecord};
    use crate::mdp::{ContextualMdp, PolicyTable};
    use crate::oracle::{initial_value, policy_eval_exact, solve_optimal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_mdp(discount: f64) -> ContextualMdp {
        let n = 3;
        let mut transition = vec![0.0; n * 2 * n];
        for s in 0..n {
            let right = (s + 1).min(n - 1);
            transition[(s * 2) * n + right] = 1.0;
            transition[(s * 2 + 1) * n + s] = 1.0;
        }
        let goal_member = vec![false, false, true];
        let mut init_dist = vec![0.0; n];
        init_dist[0] = 1.0;
        ContextualMdp::new(n, 2, 1, transition, goal_member, discount, init_dist).unwrap()
    }

    /// Exhaustive coverage of a deterministic MDP: one dynamics record per
    /// (s, a) pair and one goal record per goal state.
    fn full_coverage(mdp: &ContextualMdp) -> (Vec<DynRecord>, Vec<GoalRecord>) {
        let mut dyn_records = Vec::new();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let row = mdp.transition_row(s, a);
                let s2 = crate::numeric::argmax(row);
                dyn_records.push(DynRecord {
                    s,
                    a,
                    s2,
                    episode: 0,
                    t: 0,
                });
            }
        }
        let mut goal_records = Vec::new();
        for c in 0..mdp.n_contexts() {
            for s in 0..mdp.n_states() {
                if mdp.is_goal(c, s) {
                    goal_records.push(GoalRecord { c, s });
                }
            }
        }
        (dyn_records, goal_records)
    }

    #[test]
    fn fqi_recovers_augmented_optimum_on_chain() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let mut data = labeled_dyn;
        data.extend(labeled_goal);
        let (q, policy) = fit_fqi(&data, &shape, 200, 0.9).unwrap();
        let (q_star, _) = solve_optimal(&mdp, crate::mdp::ActionSpace::Augmented).unwrap();
        for c in 0..shape.n_contexts {
            for s in 0..=shape.n_states {
                for a in 0..=shape.n_actions {
                    assert!(
                        (q.value(c, s, a) - q_star.value(c, s, a)).abs() < 1e-6,
                        "Q({c},{s},{a}) = {} vs {}",
                        q.value(c, s, a),
                        q_star.value(c, s, a)
                    );
                }
            }
        }
        // Greedy policy moves right from both non-goal states.
        assert_eq!(policy.row(0, 0), &[1.0, 0.0]);
        assert_eq!(policy.row(0, 1), &[1.0, 0.0]);
    }

    #[test]
    fn fqi_without_goal_tuples_is_zero_and_uniform() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, _) = augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let (q, policy) = fit_fqi(&labeled_dyn, &shape, 100, 0.9).unwrap();
        for c in 0..shape.n_contexts {
            for s in 0..=shape.n_states {
                for a in 0..=shape.n_actions {
                    assert_eq!(q.value(c, s, a), 0.0);
                }
            }
            for s in 0..shape.n_states {
                assert_eq!(policy.row(c, s), &[0.5, 0.5]);
            }
        }
    }

    #[test]
    fn fqi_claim_value_peaks_at_goals() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let mut data = labeled_dyn;
        data.extend(labeled_goal);
        let (q, _) = fit_fqi(&data, &shape, 200, 0.9).unwrap();
        let claim = shape.claim_action();
        for s in 0..2 {
            assert!(q.value(0, s, claim) <= q.value(0, 2, claim));
        }
    }

    #[test]
    fn fqi_rejects_zero_iterations_and_empty_data() {
        let shape = MdpShape {
            n_states: 2,
            n_actions: 2,
            n_contexts: 1,
        };
        assert!(matches!(
            fit_fqi(&[], &shape, 10, 0.9),
            Err(SolverError::EmptyData)
        ));
        let t = LabeledTransition {
            c: 0,
            s: 0,
            a: 0,
            r: 0.0,
            s2: 1,
            terminal: false,
        };
        assert!(matches!(
            fit_fqi(&[t], &shape, 0, 0.9),
            Err(SolverError::ZeroIterations)
        ));
    }

    #[test]
    fn pevi_with_zero_penalty_matches_fqi() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let mut data = labeled_dyn;
        data.extend(labeled_goal);
        let (q_fqi, _) = fit_fqi(&data, &shape, 400, 0.9).unwrap();
        let (q_pevi, _) = fit_pevi(&data, &shape, 0.0, 0.9).unwrap();
        for c in 0..shape.n_contexts {
            for s in 0..=shape.n_states {
                for a in 0..=shape.n_actions {
                    assert!((q_fqi.value(c, s, a) - q_pevi.value(c, s, a)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pevi_zeroes_unclaimed_states_and_rejects_negative_penalty() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let mut data = labeled_dyn.clone();
        data.extend(labeled_goal);
        let (q, _) = fit_pevi(&data, &shape, 0.5, 0.9).unwrap();
        // The claim action is unvisited away from goals, hence zero.
        assert_eq!(q.value(0, 0, shape.claim_action()), 0.0);
        assert_eq!(q.value(0, 1, shape.claim_action()), 0.0);
        assert!(q.value(0, 2, shape.claim_action()) > 0.0);
        assert!(matches!(
            fit_pevi(&data, &shape, -1.0, 0.9),
            Err(SolverError::NegativePenalty(_))
        ));
    }

    #[test]
    fn iql_parameter_validation() {
        let shape = MdpShape {
            n_states: 2,
            n_actions: 2,
            n_contexts: 1,
        };
        let t = LabeledTransition {
            c: 0,
            s: 0,
            a: 0,
            r: 0.0,
            s2: 1,
            terminal: false,
        };
        assert!(matches!(
            fit_iql_tabular(&[t], &shape, 0.4, 10.0, 0.99, 100),
            Err(SolverError::BadExpectile(_))
        ));
        assert!(matches!(
            fit_iql_tabular(&[t], &shape, 0.9, 0.0, 0.99, 100),
            Err(SolverError::BadTemperature(_))
        ));
    }

    #[test]
    fn iql_near_mean_expectile_matches_fqi_on_chain() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let mut data = labeled_dyn;
        data.extend(labeled_goal);
        let (_, pi_fqi) = fit_fqi(&data, &shape, 400, 0.9).unwrap();
        let (_, pi_iql) = fit_iql_tabular(&data, &shape, 0.501, 10.0, 0.9, 5000).unwrap();
        for s in 0..shape.n_states {
            let best_fqi = crate::numeric::argmax(pi_fqi.row(0, s));
            let best_iql = crate::numeric::argmax(pi_iql.row(0, s));
            assert_eq!(best_fqi, best_iql, "state {s}");
        }
    }

    #[test]
    fn iql_gives_unobserved_actions_zero_weight() {
        let shape = MdpShape {
            n_states: 3,
            n_actions: 2,
            n_contexts: 1,
        };
        // Only action 0 is ever observed at state 0.
        let data = vec![
            LabeledTransition {
                c: 0,
                s: 0,
                a: 0,
                r: 0.0,
                s2: 1,
                terminal: false,
            },
            LabeledTransition {
                c: 0,
                s: 1,
                a: 0,
                r: 0.0,
                s2: 2,
                terminal: false,
            },
            LabeledTransition {
                c: 0,
                s: 1,
                a: 1,
                r: 0.0,
                s2: 1,
                terminal: false,
            },
            LabeledTransition {
                c: 0,
                s: 2,
                a: 3,
                r: 1.0,
                s2: 3,
                terminal: true,
            },
        ];
        let (_, policy) = fit_iql_tabular(&data, &shape, 0.9, 10.0, 0.99, 2000).unwrap();
        assert_eq!(policy.prob(0, 0, 1), 0.0);
        assert_eq!(policy.prob(0, 0, 0), 1.0);
        assert!(policy.prob(0, 1, 0) > 0.0 && policy.prob(0, 1, 1) > 0.0);
    }

    #[test]
    fn expectile_bisection_matches_known_cases() {
        // Expectile at tau=0.5 is the weighted mean.
        let v = weighted_expectile(&[0.0, 1.0], &[1.0, 1.0], 0.5);
        assert!((v - 0.5).abs() < 1e-9);
        let v = weighted_expectile(&[0.0, 1.0], &[3.0, 1.0], 0.5);
        assert!((v - 0.25).abs() < 1e-9);
        // Higher tau pushes toward the maximum.
        let v9 = weighted_expectile(&[0.0, 1.0], &[1.0, 1.0], 0.9);
        assert!(v9 > 0.8 && v9 < 1.0);
    }

    #[test]
    fn pspi_loss_trivial_cases() {
        let shape = MdpShape {
            n_states: 3,
            n_actions: 2,
            n_contexts: 1,
        };
        let mut state = PspiState::new(shape);
        let dyn_tuples = vec![LabeledTransition {
            c: 0,
            s: 0,
            a: 0,
            r: 0.0,
            s2: 1,
            terminal: false,
        }];
        let goal_tuples = vec![LabeledTransition {
            c: 0,
            s: 2,
            a: 2,
            r: 1.0,
            s2: 3,
            terminal: true,
        }];
        // f = 0, g = 1 everywhere: goal loss vanishes.
        state.g.fill(1.0);
        let (_, l_goal) = pspi_losses(&state, &dyn_tuples, &goal_tuples, 0.9).unwrap();
        assert_eq!(l_goal, 0.0);
        // g = 0: goal loss is 1.
        state.g.fill(0.0);
        let (_, l_goal) = pspi_losses(&state, &dyn_tuples, &goal_tuples, 0.9).unwrap();
        assert_eq!(l_goal, 1.0);
        assert!(matches!(
            pspi_losses(&state, &[], &goal_tuples, 0.9),
            Err(SolverError::EmptySplit)
        ));
    }

    #[test]
    fn pspi_losses_vanish_at_true_value_pair() {
        // With f the true augmented Q restricted to real actions, g the true
        // reward head, and exact-expectation tuples, both losses are zero.
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let pi = PolicyTable::deterministic(1, 3, 2, crate::mdp::ActionSpace::Original, |_, _| 0);
        let bar = crate::mdp::extend_policy(&pi, &mdp).unwrap();
        let q_bar = policy_eval_exact(&mdp, &bar).unwrap();

        let mut state = PspiState::new(shape);
        for s in 0..3 {
            for a in 0..2 {
                state.f[s * 2 + a] = q_bar.value(0, s, a);
            }
            state.g[s] = mdp.reward(0, s);
            // Logits matching the deterministic policy.
            state.logits[s * 2] = 30.0;
        }
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let (l_dyn, l_goal) = pspi_losses(&state, &labeled_dyn, &labeled_goal, 0.9).unwrap();
        assert!(l_dyn < 1e-12, "dyn loss {l_dyn}");
        assert!(l_goal < 1e-12, "goal loss {l_goal}");
    }

    #[test]
    fn pspi_solves_chain_with_full_coverage() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let init: Vec<(usize, usize, f64)> = mdp.init_support().collect();
        let result = solve_pspi(
            &labeled_dyn,
            &labeled_goal,
            &shape,
            &init,
            0.9,
            &PspiParams::default(),
        )
        .unwrap();
        let (q_star, pi_star) = solve_optimal(&mdp, crate::mdp::ActionSpace::Original).unwrap();
        let j_star = initial_value(&mdp, &q_star, &pi_star);
        let q_out = policy_eval_exact(&mdp, &result.policy).unwrap();
        let j_out = initial_value(&mdp, &q_out, &result.policy);
        assert!(
            j_star - j_out <= 0.05,
            "regret {} too large",
            j_star - j_out
        );
        // The game's estimate is pessimistic for its own output policy.
        assert!(result.value_estimate <= j_out + 0.05);
    }

    #[test]
    fn pspi_two_state_goal_mdp_is_immediate() {
        // Minimal problem: one move reaches the goal.
        let transition = vec![
            0.0, 1.0, // s0, go
            1.0, 0.0, // s0, stay
            0.0, 1.0, // g, go
            0.0, 1.0, // g, stay
        ];
        let mdp = ContextualMdp::new(2, 2, 1, transition, vec![false, true], 0.9, vec![1.0, 0.0])
            .unwrap();
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let init: Vec<(usize, usize, f64)> = mdp.init_support().collect();
        let result = solve_pspi(
            &labeled_dyn,
            &labeled_goal,
            &shape,
            &init,
            0.9,
            &PspiParams::default(),
        )
        .unwrap();
        let (q_star, pi_star) = solve_optimal(&mdp, crate::mdp::ActionSpace::Original).unwrap();
        let j_star = initial_value(&mdp, &q_star, &pi_star);
        let q_out = policy_eval_exact(&mdp, &result.policy).unwrap();
        let j_out = initial_value(&mdp, &q_out, &result.policy);
        assert!(j_star - j_out <= 0.05);
    }

    #[test]
    fn pspi_inactive_constraint_is_fully_pessimistic() {
        let mdp = chain_mdp(0.9);
        let shape = MdpShape::of(&mdp);
        let (dyn_records, goal_records) = full_coverage(&mdp);
        let (labeled_dyn, labeled_goal) =
            augment_full(&dyn_records, &goal_records, &shape).unwrap();
        let init: Vec<(usize, usize, f64)> = mdp.init_support().collect();
        let params = PspiParams {
            eps_dyn: 1e6,
            ..PspiParams::default()
        };
        let result = solve_pspi(&labeled_dyn, &labeled_goal, &shape, &init, 0.9, &params).unwrap();
        // With the Bellman constraint inactive the estimate collapses toward
        // zero and lower-bounds the value of any audited policy.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let pi =
                crate::oracle::random_policy(&mdp, crate::mdp::ActionSpace::Original, &mut rng);
            let q = policy_eval_exact(&mdp, &pi).unwrap();
            let j = initial_value(&mdp, &q, &pi);
            assert!(result.value_estimate <= j + 0.01);
        }
    }
}

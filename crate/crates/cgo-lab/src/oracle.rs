//! Exact dynamic programming on both MDP forms, plus the machine-checked
//! verification suite for the equivalence claims relating them.
//!
//! Policy evaluation uses a per-context linear solve while the state count
//! stays small (the default everywhere at desk scale) and falls back to value
//! iteration above [`LINEAR_SOLVE_MAX_STATES`]; the two routes agree to 1e-9
//! and a test pins that.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{
    build_augmented, extend_policy, restrict_policy, ActionSpace, ContextualMdp, KernelRow,
    MdpError, PolicyTable,
};
use crate::numeric::{argmax, solve_linear};

/// States-per-context bound for the direct linear solve.
pub const LINEAR_SOLVE_MAX_STATES: usize = 2000;

/// Bellman residual target for exact evaluation and optimal solves.
pub const DP_RESIDUAL: f64 = 1e-10;

const VI_MAX_ITERS: usize = 200_000;

/// Dense state-action value table. Augmented tables carry the absorbing state
/// row and the claim action column; original tables cover the real spaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTable {
    n_contexts: usize,
    n_states: usize,
    n_actions: usize,
    space: ActionSpace,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_contexts: usize, n_states: usize, n_actions: usize, space: ActionSpace) -> Self {
        Self {
            n_contexts,
            n_states,
            n_actions,
            space,
            values: vec![0.0; n_contexts * n_states * n_actions],
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn value(&self, c: usize, s: usize, a: usize) -> f64 {
        self.values[(c * self.n_states + s) * self.n_actions + a]
    }

    pub fn set(&mut self, c: usize, s: usize, a: usize, v: f64) {
        self.values[(c * self.n_states + s) * self.n_actions + a] = v;
    }

    pub fn row(&self, c: usize, s: usize) -> &[f64] {
        let base = (c * self.n_states + s) * self.n_actions;
        &self.values[base..base + self.n_actions]
    }

    /// V(x) under a policy whose rows align with this table's action space.
    pub fn state_value(&self, c: usize, s: usize, policy_row: &[f64]) -> f64 {
        self.row(c, s)
            .iter()
            .zip(policy_row)
            .map(|(q, p)| q * p)
            .sum()
    }

    pub fn max_value(&self, c: usize, s: usize) -> f64 {
        self.row(c, s)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MdpError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, MdpError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Uniform interface over the two MDP forms for the DP routines. States run
/// over `0..=n_states` with the absorbing state last.
trait DpModel {
    fn n_contexts(&self) -> usize;
    fn n_states_total(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn discount(&self) -> f64;
    fn reward(&self, c: usize, s: usize, a: usize) -> f64;
    fn row(&self, c: usize, s: usize, a: usize) -> KernelRow<'_>;
}

/// Infinite-horizon form of the original problem: state-based reward, goal
/// states and the absorbing state route to the absorbing state.
struct OriginalDp<'a>(&'a ContextualMdp);

impl DpModel for OriginalDp<'_> {
    fn n_contexts(&self) -> usize {
        self.0.n_contexts()
    }

    fn n_states_total(&self) -> usize {
        self.0.n_states() + 1
    }

    fn n_actions(&self) -> usize {
        self.0.n_actions()
    }

    fn discount(&self) -> f64 {
        self.0.discount()
    }

    fn reward(&self, c: usize, s: usize, _a: usize) -> f64 {
        self.0.reward(c, s)
    }

    fn row(&self, c: usize, s: usize, a: usize) -> KernelRow<'_> {
        self.0.extended_row(c, s, a)
    }
}

struct AugmentedDp<'a>(crate::mdp::AugmentedMdp<'a>);

impl DpModel for AugmentedDp<'_> {
    fn n_contexts(&self) -> usize {
        self.0.base().n_contexts()
    }

    fn n_states_total(&self) -> usize {
        self.0.base().n_states() + 1
    }

    fn n_actions(&self) -> usize {
        self.0.n_actions()
    }

    fn discount(&self) -> f64 {
        self.0.base().discount()
    }

    fn reward(&self, c: usize, s: usize, a: usize) -> f64 {
        self.0.reward(c, s, a)
    }

    fn row(&self, c: usize, s: usize, a: usize) -> KernelRow<'_> {
        self.0.row(c, s, a)
    }
}

/// Policy row lookup that tolerates original tables lacking the absorbing
/// row; behavior there is value-irrelevant, so any fixed row works.
fn policy_row<'a>(pi: &'a PolicyTable, c: usize, s: usize, fallback: &'a [f64]) -> &'a [f64] {
    if s < pi.n_states() {
        pi.row(c, s)
    } else {
        fallback
    }
}

fn eval_model(model: &impl DpModel, pi: &PolicyTable) -> QTable {
    let n = model.n_states_total();
    let gamma = model.discount();
    let fallback = {
        let mut row = vec![0.0; model.n_actions()];
        row[0] = 1.0;
        row
    };
    let mut values = QTable::zeros(
        model.n_contexts(),
        pi.n_states(),
        pi.n_actions(),
        pi.space(),
    );
    for c in 0..model.n_contexts() {
        let v = if n <= LINEAR_SOLVE_MAX_STATES {
            eval_context_linear(model, pi, c, &fallback)
        } else {
            eval_context_vi(model, pi, c, &fallback)
        };
        for s in 0..pi.n_states() {
            for a in 0..pi.n_actions() {
                let mut q = model.reward(c, s, a);
                model.row(c, s, a).for_each(|s2, p| q += gamma * p * v[s2]);
                values.set(c, s, a, q);
            }
        }
    }
    values
}

/// Solves `(I - gamma * P_pi) V = r_pi` for one context.
fn eval_context_linear(
    model: &impl DpModel,
    pi: &PolicyTable,
    c: usize,
    fallback: &[f64],
) -> Vec<f64> {
    let n = model.n_states_total();
    let gamma = model.discount();
    let mut a_mat = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        let probs = policy_row(pi, c, s, fallback);
        a_mat[s * n + s] += 1.0;
        for (a, &pa) in probs.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            b[s] += pa * model.reward(c, s, a);
            model.row(c, s, a).for_each(|s2, p| {
                a_mat[s * n + s2] -= gamma * pa * p;
            });
        }
    }
    solve_linear(a_mat, b)
}

fn eval_context_vi(model: &impl DpModel, pi: &PolicyTable, c: usize, fallback: &[f64]) -> Vec<f64> {
    let n = model.n_states_total();
    let gamma = model.discount();
    let mut v = vec![0.0; n];
    for _ in 0..VI_MAX_ITERS {
        let mut delta: f64 = 0.0;
        let mut next = vec![0.0; n];
        for s in 0..n {
            let probs = policy_row(pi, c, s, fallback);
            let mut val = 0.0;
            for (a, &pa) in probs.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let mut q = model.reward(c, s, a);
                model.row(c, s, a).for_each(|s2, p| q += gamma * p * v[s2]);
                val += pa * q;
            }
            delta = delta.max((val - v[s]).abs());
            next[s] = val;
        }
        v = next;
        if delta * gamma.max(1e-12) / (1.0 - gamma) <= DP_RESIDUAL {
            break;
        }
    }
    v
}

/// Exact policy evaluation on whichever MDP form matches the policy's action
/// space. The returned table satisfies its Bellman equation to [`DP_RESIDUAL`].
pub fn policy_eval_exact(mdp: &ContextualMdp, pi: &PolicyTable) -> Result<QTable, MdpError> {
    pi.matches(mdp)?;
    match pi.space() {
        ActionSpace::Original => Ok(eval_model(&OriginalDp(mdp), pi)),
        ActionSpace::Augmented => Ok(eval_model(&AugmentedDp(build_augmented(mdp)?), pi)),
    }
}

fn solve_model(
    model: &impl DpModel,
    space: ActionSpace,
    table_states: usize,
) -> (QTable, PolicyTable) {
    let n = model.n_states_total();
    let gamma = model.discount();
    // Stop when the fixed-point distance bound gamma*delta/(1-gamma) is well
    // under the residual target.
    let stop = (1.0 - gamma) * DP_RESIDUAL / 4.0;
    let mut v = vec![0.0; model.n_contexts() * n];
    for _ in 0..VI_MAX_ITERS {
        let mut delta: f64 = 0.0;
        for c in 0..model.n_contexts() {
            for s in 0..n {
                let mut best = f64::NEG_INFINITY;
                for a in 0..model.n_actions() {
                    let mut q = model.reward(c, s, a);
                    model
                        .row(c, s, a)
                        .for_each(|s2, p| q += gamma * p * v[c * n + s2]);
                    best = best.max(q);
                }
                delta = delta.max((best - v[c * n + s]).abs());
                v[c * n + s] = best;
            }
        }
        if delta <= stop {
            break;
        }
    }
    let mut q_table = QTable::zeros(model.n_contexts(), table_states, model.n_actions(), space);
    for c in 0..model.n_contexts() {
        for s in 0..table_states {
            for a in 0..model.n_actions() {
                let mut q = model.reward(c, s, a);
                model
                    .row(c, s, a)
                    .for_each(|s2, p| q += gamma * p * v[c * n + s2]);
                q_table.set(c, s, a, q);
            }
        }
    }
    let policy = greedy_policy(&q_table);
    (q_table, policy)
}

/// Optimal values and the greedy policy (ties to the lowest action index)
/// for the chosen action space.
pub fn solve_optimal(
    mdp: &ContextualMdp,
    space: ActionSpace,
) -> Result<(QTable, PolicyTable), MdpError> {
    match space {
        ActionSpace::Original => Ok(solve_model(&OriginalDp(mdp), space, mdp.n_states())),
        ActionSpace::Augmented => {
            let aug = build_augmented(mdp)?;
            Ok(solve_model(&AugmentedDp(aug), space, mdp.n_states() + 1))
        }
    }
}

/// Greedy policy extraction with lowest-index tie-breaking. Invariant under
/// adding a constant to every entry of the table.
pub fn greedy_policy(q: &QTable) -> PolicyTable {
    PolicyTable::deterministic(
        q.n_contexts(),
        q.n_states(),
        q.n_actions(),
        q.space(),
        |c, s| argmax(q.row(c, s)),
    )
}

/// Expected value of a policy at the initial distribution.
pub fn initial_value(mdp: &ContextualMdp, q: &QTable, pi: &PolicyTable) -> f64 {
    mdp.init_support()
        .map(|(c, s, p)| p * q.state_value(c, s, pi.row(c, s)))
        .sum()
}

/// One verified claim: the largest violation observed and the tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimCheck {
    pub name: String,
    pub max_violation: f64,
    pub tol: f64,
    pub pass: bool,
}

impl ClaimCheck {
    fn new(name: &str, max_violation: f64, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            max_violation,
            tol,
            pass: max_violation <= tol,
        }
    }
}

/// Outcome of one verification suite; violations are reported, never thrown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: String,
    pub checks: Vec<ClaimCheck>,
    pub pass: bool,
}

impl VerificationReport {
    fn from_checks(suite: &str, checks: Vec<ClaimCheck>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self {
            suite: suite.to_string(),
            checks,
            pass,
        }
    }

    pub fn max_violation(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_violation)
            .fold(0.0, f64::max)
    }
}

/// Checks that extending a policy preserves state values exactly and never
/// increases state-action values.
pub fn verify_value_equivalence(
    mdp: &ContextualMdp,
    pi: &PolicyTable,
    tol: f64,
) -> Result<VerificationReport, MdpError> {
    let q = policy_eval_exact(mdp, pi)?;
    let bar = extend_policy(pi, mdp)?;
    let q_bar = policy_eval_exact(mdp, &bar)?;
    let mut v_gap: f64 = 0.0;
    let mut q_excess: f64 = 0.0;
    for c in 0..mdp.n_contexts() {
        for s in 0..mdp.n_states() {
            let v = q.state_value(c, s, pi.row(c, s));
            let v_bar = q_bar.state_value(c, s, bar.row(c, s));
            v_gap = v_gap.max((v - v_bar).abs());
            for a in 0..mdp.n_actions() {
                q_excess = q_excess.max(q_bar.value(c, s, a) - q.value(c, s, a));
            }
        }
    }
    Ok(VerificationReport::from_checks(
        "value_equivalence",
        vec![
            ClaimCheck::new("state_values_equal", v_gap, tol),
            ClaimCheck::new("original_q_dominates", q_excess.max(0.0), tol),
        ],
    ))
}

/// Checks regret equality for the extension of `pi` and, for the supplied
/// augmented policy `xi`, that restriction never increases regret.
pub fn verify_regret_equivalence(
    mdp: &ContextualMdp,
    pi: &PolicyTable,
    xi: &PolicyTable,
    tol: f64,
) -> Result<VerificationReport, MdpError> {
    let (q_star, pi_star) = solve_optimal(mdp, ActionSpace::Original)?;
    let (q_bar_star, xi_star) = solve_optimal(mdp, ActionSpace::Augmented)?;
    let j_star = initial_value(mdp, &q_star, &pi_star);
    let j_bar_star = initial_value(mdp, &q_bar_star, &xi_star);

    let q_pi = policy_eval_exact(mdp, pi)?;
    let bar = extend_policy(pi, mdp)?;
    let q_bar_pi = policy_eval_exact(mdp, &bar)?;
    let regret = j_star - initial_value(mdp, &q_pi, pi);
    let regret_bar = j_bar_star - initial_value(mdp, &q_bar_pi, &bar);

    let restricted = restrict_policy(xi, mdp)?;
    let q_xi = policy_eval_exact(mdp, xi)?;
    let q_res = policy_eval_exact(mdp, &restricted)?;
    let regret_res = j_star - initial_value(mdp, &q_res, &restricted);
    let regret_xi = j_bar_star - initial_value(mdp, &q_xi, xi);

    Ok(VerificationReport::from_checks(
        "regret_equivalence",
        vec![
            ClaimCheck::new("extension_regret_equal", (regret - regret_bar).abs(), tol),
            ClaimCheck::new(
                "restriction_no_worse",
                (regret_res - regret_xi).max(0.0),
                tol,
            ),
        ],
    ))
}

/// Checks the reformulated Bellman backup of the augmented value function in
/// terms of original-MDP quantities.
pub fn verify_bellman_reformulation(
    mdp: &ContextualMdp,
    pi: &PolicyTable,
    tol: f64,
) -> Result<VerificationReport, MdpError> {
    let q_pi = policy_eval_exact(mdp, pi)?;
    let bar = extend_policy(pi, mdp)?;
    let q_bar = policy_eval_exact(mdp, &bar)?;
    let aug = build_augmented(mdp)?;
    let gamma = mdp.discount();
    let claim = mdp.claim_action();

    // max(R(x'), V_pi(x')) per (context, state).
    let mut backed = vec![0.0; mdp.n_contexts() * mdp.n_states()];
    for c in 0..mdp.n_contexts() {
        for s in 0..mdp.n_states() {
            let v = q_pi.state_value(c, s, pi.row(c, s));
            backed[c * mdp.n_states() + s] = mdp.reward(c, s).max(v);
        }
    }

    let mut backup_gap: f64 = 0.0;
    let mut claim_gap: f64 = 0.0;
    let mut absorbing_gap: f64 = 0.0;
    let mut max_identity_gap: f64 = 0.0;
    for c in 0..mdp.n_contexts() {
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let mut target = 0.0;
                aug.row(c, s, a).for_each(|s2, p| {
                    if s2 < mdp.n_states() {
                        target += p * backed[c * mdp.n_states() + s2];
                    }
                });
                backup_gap = backup_gap.max((q_bar.value(c, s, a) - gamma * target).abs());
            }
            claim_gap = claim_gap.max((q_bar.value(c, s, claim) - mdp.reward(c, s)).abs());
            let v_bar = q_bar.state_value(c, s, bar.row(c, s));
            max_identity_gap = max_identity_gap.max((v_bar - backed[c * mdp.n_states() + s]).abs());
        }
        for a in 0..aug.n_actions() {
            absorbing_gap = absorbing_gap.max(q_bar.value(c, mdp.absorbing_state(), a).abs());
        }
    }

    Ok(VerificationReport::from_checks(
        "bellman_reformulation",
        vec![
            ClaimCheck::new("real_action_backup", backup_gap, tol),
            ClaimCheck::new("claim_value_is_reward", claim_gap, tol),
            ClaimCheck::new("absorbing_value_zero", absorbing_gap, tol),
            ClaimCheck::new("policy_value_is_max", max_identity_gap, tol),
        ],
    ))
}

/// Checks that every exposed kernel row (base, infinite-horizon extension,
/// and augmented) is a probability distribution. A corrupted transition
/// table fails here with the claim named.
pub fn verify_kernel_stochasticity(mdp: &ContextualMdp, tol: f64) -> VerificationReport {
    let mut base_gap: f64 = 0.0;
    let mut extended_gap: f64 = 0.0;
    let mut augmented_gap: f64 = 0.0;
    let row_sum = |row: KernelRow<'_>| {
        let mut sum = 0.0;
        row.for_each(|_, p| sum += p);
        sum
    };
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let sum: f64 = mdp.transition_row(s, a).iter().sum();
            base_gap = base_gap.max((sum - 1.0).abs());
        }
    }
    if let Ok(aug) = build_augmented(mdp) {
        for c in 0..mdp.n_contexts() {
            for s in 0..=mdp.n_states() {
                for a in 0..mdp.n_actions() {
                    extended_gap =
                        extended_gap.max((row_sum(mdp.extended_row(c, s, a)) - 1.0).abs());
                }
                for a in 0..aug.n_actions() {
                    augmented_gap = augmented_gap.max((row_sum(aug.row(c, s, a)) - 1.0).abs());
                }
            }
        }
    } else {
        extended_gap = f64::INFINITY;
        augmented_gap = f64::INFINITY;
    }
    VerificationReport::from_checks(
        "kernel_stochasticity",
        vec![
            ClaimCheck::new("base_rows_stochastic", base_gap, tol),
            ClaimCheck::new("extended_rows_stochastic", extended_gap, tol),
            ClaimCheck::new("augmented_rows_stochastic", augmented_gap, tol),
        ],
    )
}

/// Random MDP for property tests: Dirichlet(1) transition rows, each
/// (context, state) pair a goal with probability `goal_prob`, initial mass
/// spread over non-goal pairs.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    n_contexts: usize,
    discount: f64,
    goal_prob: f64,
    rng: &mut impl Rng,
) -> ContextualMdp {
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states) {
        dirichlet_row(row, rng);
    }
    let goal_member = loop {
        let goals: Vec<bool> = (0..n_contexts * n_states)
            .map(|_| rng.random::<f64>() < goal_prob)
            .collect();
        if goals.iter().any(|g| !g) {
            break goals;
        }
    };
    let mut init_dist = vec![0.0; n_contexts * n_states];
    for (i, w) in init_dist.iter_mut().enumerate() {
        if !goal_member[i] {
            *w = exp_sample(rng);
        }
    }
    let total: f64 = init_dist.iter().sum();
    for w in &mut init_dist {
        *w /= total;
    }
    ContextualMdp::new(
        n_states,
        n_actions,
        n_contexts,
        transition,
        goal_member,
        discount,
        init_dist,
    )
    .expect("generated MDP satisfies invariants")
}

/// Random stochastic policy with Dirichlet(1) rows.
pub fn random_policy(mdp: &ContextualMdp, space: ActionSpace, rng: &mut impl Rng) -> PolicyTable {
    let (n_states, n_actions) = match space {
        ActionSpace::Original => (mdp.n_states(), mdp.n_actions()),
        ActionSpace::Augmented => (mdp.n_states() + 1, mdp.n_actions() + 1),
    };
    let mut probs = vec![0.0; mdp.n_contexts() * n_states * n_actions];
    for row in probs.chunks_mut(n_actions) {
        dirichlet_row(row, rng);
    }
    PolicyTable::new(mdp.n_contexts(), n_states, n_actions, space, probs)
        .expect("generated policy rows are stochastic")
}

fn dirichlet_row(row: &mut [f64], rng: &mut impl Rng) {
    let mut total = 0.0;
    for w in row.iter_mut() {
        *w = exp_sample(rng);
        total += *w;
    }
    for w in row.iter_mut() {
        *w /= total;
    }
}

fn exp_sample(rng: &mut impl Rng) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

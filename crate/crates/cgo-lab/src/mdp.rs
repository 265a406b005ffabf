//! Finite contextual goal-oriented MDPs and their action-augmented form.
//!
//! A problem instance couples a context-independent transition table with a
//! per-context goal membership table. Two derived views are exposed:
//!
//! * the infinite-horizon form of the original MDP, where entering the goal
//!   set routes to an absorbing state on the next step, and
//! * the action-augmented MDP, which adds a claim action that moves from any
//!   state straight to the absorbing state and pays reward 1 exactly when
//!   taken inside the goal set.
//!
//! Both the absorbing state and the claim action are sentinel indices
//! (`n_states` and `n_actions`); their rows are answered on demand and never
//! materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalization tolerance for probability rows.
pub const PROB_TOL: f64 = 1e-9;

const MDP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row (state {state}, action {action}) sums to {sum}, expected 1")]
    NonStochasticRow {
        state: usize,
        action: usize,
        sum: f64,
    },
    #[error("initial distribution sums to {0}, expected 1")]
    BadInitDist(f64),
    #[error(
        "initial distribution places mass {mass} on goal pair (context {context}, state {state})"
    )]
    InitMassOnGoal {
        context: usize,
        state: usize,
        mass: f64,
    },
    #[error("discount {0} outside [0, 1)")]
    BadDiscount(f64),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("policy row (context {context}, state {state}) sums to {sum}, expected 1")]
    NonStochasticPolicy {
        context: usize,
        state: usize,
        sum: f64,
    },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("unsupported MDP document version {0}")]
    Version(u32),
    #[error("policy action space does not match: expected {expected} actions, got {got}")]
    ActionSpace { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One row of a transition kernel, answered without materializing sentinel rows.
#[derive(Debug, Clone, Copy)]
pub enum KernelRow<'a> {
    /// Point mass on a single state index (possibly the absorbing state).
    Point(usize),
    /// Borrowed dense row over the original states; the absorbing state has
    /// implicit probability zero.
    Dense(&'a [f64]),
}

impl KernelRow<'_> {
    pub fn prob(&self, next_state: usize) -> f64 {
        match self {
            KernelRow::Point(i) => {
                if *i == next_state {
                    1.0
                } else {
                    0.0
                }
            }
            KernelRow::Dense(row) => {
                if next_state < row.len() {
                    row[next_state]
                } else {
                    0.0
                }
            }
        }
    }

    /// Visits every successor with positive probability.
    pub fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            KernelRow::Point(i) => f(*i, 1.0),
            KernelRow::Dense(row) => {
                for (s2, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        f(s2, p);
                    }
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> usize {
        match self {
            KernelRow::Point(i) => *i,
            KernelRow::Dense(row) => crate::numeric::sample_categorical(row, rng),
        }
    }
}

/// Result of one simulated step. The context never changes within an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: usize,
    pub reward: f64,
    pub terminal: bool,
}

/// A finite contextual goal-oriented problem.
///
/// The transition table is shared by all contexts; only goal membership and
/// the initial distribution depend on the context. Immutable after
/// construction and safe to share read-only across workers.
#[derive(Debug, Clone)]
pub struct ContextualMdp {
    n_states: usize,
    n_actions: usize,
    n_contexts: usize,
    /// Flat `[state][action][next_state]`.
    transition: Vec<f64>,
    /// Flat `[context][state]`.
    goal_member: Vec<bool>,
    discount: f64,
    /// Flat `[context][state]`, joint distribution over (state, context).
    init_dist: Vec<f64>,
}

impl ContextualMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        n_contexts: usize,
        transition: Vec<f64>,
        goal_member: Vec<bool>,
        discount: f64,
        init_dist: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 || n_contexts == 0 {
            return Err(MdpError::Shape("all dimensions must be positive".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(MdpError::Shape(format!(
                "transition length {} != {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if goal_member.len() != n_contexts * n_states {
            return Err(MdpError::Shape(format!(
                "goal_member length {} != {}",
                goal_member.len(),
                n_contexts * n_states
            )));
        }
        if init_dist.len() != n_contexts * n_states {
            return Err(MdpError::Shape(format!(
                "init_dist length {} != {}",
                init_dist.len(),
                n_contexts * n_states
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::BadDiscount(discount));
        }
        let mdp = Self {
            n_states,
            n_actions,
            n_contexts,
            transition,
            goal_member,
            discount,
            init_dist,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<(), MdpError> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let sum: f64 = self.transition_row(s, a).iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(MdpError::NonStochasticRow {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
        let total: f64 = self.init_dist.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(MdpError::BadInitDist(total));
        }
        for c in 0..self.n_contexts {
            for s in 0..self.n_states {
                let mass = self.init_prob(c, s);
                if mass > 0.0 && self.is_goal(c, s) {
                    return Err(MdpError::InitMassOnGoal {
                        context: c,
                        state: s,
                        mass,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Sentinel index of the absorbing state.
    pub fn absorbing_state(&self) -> usize {
        self.n_states
    }

    /// Sentinel index of the claim action of the augmented MDP.
    pub fn claim_action(&self) -> usize {
        self.n_actions
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition_row(s, a)[s2]
    }

    /// Goal membership; the absorbing state is never a goal.
    pub fn is_goal(&self, c: usize, s: usize) -> bool {
        if s >= self.n_states {
            false
        } else {
            self.goal_member[c * self.n_states + s]
        }
    }

    /// State-based sparse reward of the original problem.
    pub fn reward(&self, c: usize, s: usize) -> f64 {
        if self.is_goal(c, s) {
            1.0
        } else {
            0.0
        }
    }

    pub fn init_prob(&self, c: usize, s: usize) -> f64 {
        self.init_dist[c * self.n_states + s]
    }

    /// Iterates over `(context, state, probability)` triples of the initial
    /// distribution with positive mass.
    pub fn init_support(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_contexts).flat_map(move |c| {
            (0..self.n_states).filter_map(move |s| {
                let p = self.init_prob(c, s);
                (p > 0.0).then_some((c, s, p))
            })
        })
    }

    /// Infinite-horizon kernel of the original problem: goal states and the
    /// absorbing state route to the absorbing state under every action.
    pub fn extended_row(&self, c: usize, s: usize, a: usize) -> KernelRow<'_> {
        if s >= self.n_states || self.is_goal(c, s) {
            KernelRow::Point(self.absorbing_state())
        } else {
            KernelRow::Dense(self.transition_row(s, a))
        }
    }

    /// Simulates one step of the original problem. The episode terminates on
    /// entering the goal set, collecting the goal state's unit reward.
    pub fn sample_step(
        &self,
        c: usize,
        s: usize,
        a: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Step, MdpError> {
        self.check_indices(c, s, a, self.n_actions)?;
        if s >= self.n_states || self.is_goal(c, s) {
            return Ok(Step {
                next_state: self.absorbing_state(),
                reward: 0.0,
                terminal: true,
            });
        }
        let next = crate::numeric::sample_categorical(self.transition_row(s, a), rng);
        let entered_goal = self.is_goal(c, next);
        Ok(Step {
            next_state: next,
            reward: if entered_goal { 1.0 } else { 0.0 },
            terminal: entered_goal,
        })
    }

    fn check_indices(
        &self,
        c: usize,
        s: usize,
        a: usize,
        n_actions: usize,
    ) -> Result<(), MdpError> {
        if c >= self.n_contexts {
            return Err(MdpError::IndexOutOfRange(format!(
                "context {c} >= {}",
                self.n_contexts
            )));
        }
        if s > self.n_states {
            return Err(MdpError::IndexOutOfRange(format!(
                "state {s} > {}",
                self.n_states
            )));
        }
        if a > n_actions {
            return Err(MdpError::IndexOutOfRange(format!(
                "action {a} > {n_actions}"
            )));
        }
        Ok(())
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument {
            version: MDP_FORMAT_VERSION,
            n_states: self.n_states,
            n_actions: self.n_actions,
            n_contexts: self.n_contexts,
            discount: self.discount,
            transition: self.transition.clone(),
            goal_member: self.goal_member.clone(),
            init_dist: self.init_dist.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MdpError> {
        let doc = self.to_document();
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MdpError> {
        let doc: MdpDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        doc.try_into()
    }
}

/// On-disk JSON form of a [`ContextualMdp`]: shape metadata plus flat arrays.
/// `transition` is `[state][action][next_state]`; `goal_member` and
/// `init_dist` are `[context][state]`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MdpDocument {
    pub version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_contexts: usize,
    pub discount: f64,
    pub transition: Vec<f64>,
    pub goal_member: Vec<bool>,
    pub init_dist: Vec<f64>,
}

impl TryFrom<MdpDocument> for ContextualMdp {
    type Error = MdpError;

    fn try_from(doc: MdpDocument) -> Result<Self, MdpError> {
        if doc.version != MDP_FORMAT_VERSION {
            return Err(MdpError::Version(doc.version));
        }
        ContextualMdp::new(
            doc.n_states,
            doc.n_actions,
            doc.n_contexts,
            doc.transition,
            doc.goal_member,
            doc.discount,
            doc.init_dist,
        )
    }
}

/// Action-augmented view of a [`ContextualMdp`].
///
/// Adds the claim action, which transitions to the absorbing state from
/// anywhere and is the only source of reward: 1 exactly when claimed inside
/// the goal set. Real actions keep the base dynamics everywhere, including at
/// goal states.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedMdp<'a> {
    base: &'a ContextualMdp,
}

impl<'a> AugmentedMdp<'a> {
    pub fn base(&self) -> &'a ContextualMdp {
        self.base
    }

    pub fn n_actions(&self) -> usize {
        self.base.n_actions + 1
    }

    pub fn claim_action(&self) -> usize {
        self.base.claim_action()
    }

    pub fn absorbing_state(&self) -> usize {
        self.base.absorbing_state()
    }

    /// Action-dependent reward: 1 iff the claim action is taken in the goal set.
    pub fn reward(&self, c: usize, s: usize, a: usize) -> f64 {
        if a == self.claim_action() && self.base.is_goal(c, s) {
            1.0
        } else {
            0.0
        }
    }

    pub fn row(&self, c: usize, s: usize, a: usize) -> KernelRow<'a> {
        let _ = c;
        if s >= self.base.n_states || a == self.claim_action() {
            KernelRow::Point(self.absorbing_state())
        } else {
            KernelRow::Dense(self.base.transition_row(s, a))
        }
    }

    /// Simulates one step. Terminal exactly on entering the absorbing state.
    pub fn sample_step(
        &self,
        c: usize,
        s: usize,
        a: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Step, MdpError> {
        self.base.check_indices(c, s, a, self.n_actions())?;
        let reward = self.reward(c, s, a);
        let next = self.row(c, s, a).sample(rng);
        Ok(Step {
            next_state: next,
            reward,
            terminal: next == self.absorbing_state(),
        })
    }
}

/// Builds the action-augmented view, re-checking row stochasticity.
pub fn build_augmented(mdp: &ContextualMdp) -> Result<AugmentedMdp<'_>, MdpError> {
    mdp.validate()?;
    Ok(AugmentedMdp { base: mdp })
}

/// Which action space a policy or value table is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Original,
    Augmented,
}

/// Just the table dimensions of a problem, for code that works from datasets
/// without the full MDP at hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_contexts: usize,
}

impl MdpShape {
    pub fn of(mdp: &ContextualMdp) -> Self {
        Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            n_contexts: mdp.n_contexts(),
        }
    }

    pub fn absorbing_state(&self) -> usize {
        self.n_states
    }

    pub fn claim_action(&self) -> usize {
        self.n_actions
    }
}

/// Dense stochastic policy indexed by `(context, state, action)`.
///
/// Original-space tables cover the real states and actions only. Augmented
/// tables carry one extra state row (the absorbing state) and one extra
/// action column (the claim action).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyTable {
    n_contexts: usize,
    n_states: usize,
    n_actions: usize,
    space: ActionSpace,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(
        n_contexts: usize,
        n_states: usize,
        n_actions: usize,
        space: ActionSpace,
        probs: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if probs.len() != n_contexts * n_states * n_actions {
            return Err(MdpError::Shape(format!(
                "policy length {} != {}",
                probs.len(),
                n_contexts * n_states * n_actions
            )));
        }
        let table = Self {
            n_contexts,
            n_states,
            n_actions,
            space,
            probs,
        };
        for c in 0..n_contexts {
            for s in 0..n_states {
                let sum: f64 = table.row(c, s).iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(MdpError::NonStochasticPolicy {
                        context: c,
                        state: s,
                        sum,
                    });
                }
            }
        }
        Ok(table)
    }

    pub fn uniform(
        n_contexts: usize,
        n_states: usize,
        n_actions: usize,
        space: ActionSpace,
    ) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_contexts,
            n_states,
            n_actions,
            space,
            probs: vec![p; n_contexts * n_states * n_actions],
        }
    }

    /// Deterministic policy from per-(context, state) action choices.
    pub fn deterministic(
        n_contexts: usize,
        n_states: usize,
        n_actions: usize,
        space: ActionSpace,
        choice: impl Fn(usize, usize) -> usize,
    ) -> Self {
        let mut probs = vec![0.0; n_contexts * n_states * n_actions];
        for c in 0..n_contexts {
            for s in 0..n_states {
                probs[(c * n_states + s) * n_actions + choice(c, s)] = 1.0;
            }
        }
        Self {
            n_contexts,
            n_states,
            n_actions,
            space,
            probs,
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    /// Number of state rows per context (includes the absorbing row iff augmented).
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn row(&self, c: usize, s: usize) -> &[f64] {
        let base = (c * self.n_states + s) * self.n_actions;
        &self.probs[base..base + self.n_actions]
    }

    pub fn prob(&self, c: usize, s: usize, a: usize) -> f64 {
        self.row(c, s)[a]
    }

    pub fn sample_action(&self, c: usize, s: usize, rng: &mut impl rand::Rng) -> usize {
        crate::numeric::sample_categorical(self.row(c, s), rng)
    }

    fn row_mut(&mut self, c: usize, s: usize) -> &mut [f64] {
        let base = (c * self.n_states + s) * self.n_actions;
        &mut self.probs[base..base + self.n_actions]
    }

    /// Checks shape compatibility with an MDP for the table's action space.
    pub fn matches(&self, mdp: &ContextualMdp) -> Result<(), MdpError> {
        let (want_states, want_actions) = match self.space {
            ActionSpace::Original => (mdp.n_states(), mdp.n_actions()),
            ActionSpace::Augmented => (mdp.n_states() + 1, mdp.n_actions() + 1),
        };
        if self.n_states != want_states
            || self.n_actions != want_actions
            || self.n_contexts != mdp.n_contexts()
        {
            return Err(MdpError::ActionSpace {
                expected: want_actions,
                got: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), MdpError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MdpError> {
        let table: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(
            table.n_contexts,
            table.n_states,
            table.n_actions,
            table.space,
            table.probs,
        )
    }
}

/// Extends an original-space policy to the augmented MDP: inside the goal set
/// (and at the absorbing state, by convention) the extension claims; elsewhere
/// it acts as the original policy and never claims.
pub fn extend_policy(pi: &PolicyTable, mdp: &ContextualMdp) -> Result<PolicyTable, MdpError> {
    if pi.space != ActionSpace::Original {
        return Err(MdpError::ActionSpace {
            expected: mdp.n_actions(),
            got: pi.n_actions,
        });
    }
    pi.matches(mdp)?;
    let n_states = mdp.n_states() + 1;
    let n_actions = mdp.n_actions() + 1;
    let claim = mdp.claim_action();
    let mut out = PolicyTable {
        n_contexts: mdp.n_contexts(),
        n_states,
        n_actions,
        space: ActionSpace::Augmented,
        probs: vec![0.0; mdp.n_contexts() * n_states * n_actions],
    };
    for c in 0..mdp.n_contexts() {
        for s in 0..n_states {
            let row = out.row_mut(c, s);
            if s == mdp.absorbing_state() || mdp.is_goal(c, s) {
                row[claim] = 1.0;
            } else {
                row[..claim].copy_from_slice(pi.row(c, s));
            }
        }
    }
    Ok(out)
}

/// Restricts an augmented-space policy to the original MDP by spreading any
/// claim-action mass uniformly over the real actions. The absorbing row is
/// dropped.
pub fn restrict_policy(xi: &PolicyTable, mdp: &ContextualMdp) -> Result<PolicyTable, MdpError> {
    if xi.space != ActionSpace::Augmented {
        return Err(MdpError::ActionSpace {
            expected: mdp.n_actions() + 1,
            got: xi.n_actions,
        });
    }
    xi.matches(mdp)?;
    let n_actions = mdp.n_actions();
    let claim = mdp.claim_action();
    let mut out = PolicyTable {
        n_contexts: mdp.n_contexts(),
        n_states: mdp.n_states(),
        n_actions,
        space: ActionSpace::Original,
        probs: vec![0.0; mdp.n_contexts() * mdp.n_states() * n_actions],
    };
    for c in 0..mdp.n_contexts() {
        for s in 0..mdp.n_states() {
            let spread = xi.prob(c, s, claim) / n_actions as f64;
            let row = out.row_mut(c, s);
            for (a, w) in row.iter_mut().enumerate() {
                *w = xi.prob(c, s, a) + spread;
            }
        }
    }
    Ok(out)
}

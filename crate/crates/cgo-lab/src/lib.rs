//! Desk-scale offline reinforcement-learning laboratory for contextual
//! goal-oriented problems on gridworlds.
//!
//! The crate builds finite contextual MDPs from ASCII maze maps, generates
//! the two offline datasets of the setting (unlabeled dynamics transitions
//! and positive context-goal pairs), converts them into labeled transitions
//! of an action-augmented MDP, trains offline solvers and baseline pipelines
//! on the result, and verifies the construction's equivalence claims against
//! an exact dynamic-programming oracle.

pub mod baselines;
pub mod coda;
pub mod config;
pub mod data;
pub mod envs;
pub mod eval;
pub mod experiment;
pub mod mdp;
pub mod numeric;
pub mod oracle;
pub mod solvers;

pub use mdp::{
    build_augmented, extend_policy, restrict_policy, ActionSpace, AugmentedMdp, ContextualMdp,
    MdpError, PolicyTable,
};
pub use oracle::{policy_eval_exact, solve_optimal, QTable};

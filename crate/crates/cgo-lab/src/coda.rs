//! Conversion of the two offline datasets into labeled transitions of the
//! action-augmented MDP.
//!
//! Each context-goal pair becomes a fictitious terminal transition that takes
//! the claim action at the goal for reward 1; each dynamics record is paired
//! with dataset contexts as a zero-reward non-terminal transition. An eager
//! materializer handles small cross products; the batch sampler serves the
//! same joint distribution lazily with a configurable goal-sample ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DynRecord, GoalRecord};
use crate::mdp::MdpShape;

/// Eager materialization bound on |D_dyn| * |D_goal|.
pub const EAGER_CROSS_PRODUCT_LIMIT: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum CodaError {
    #[error("dynamics dataset is empty")]
    EmptyDyn,
    #[error("context-goal dataset is empty; the augmentation is undefined without contexts")]
    EmptyGoal,
    #[error("goal ratio {0} outside (0, 1): batches need both tuple kinds")]
    DegenerateRatio(f64),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error(
        "cross product of {dyn_size} x {goal_size} records exceeds the eager limit {EAGER_CROSS_PRODUCT_LIMIT}; use the batch sampler"
    )]
    CrossProductTooLarge { dyn_size: usize, goal_size: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One labeled transition of the augmented MDP. The context is identical on
/// both endpoints, so it is stored once.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LabeledTransition {
    pub c: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s2: usize,
    pub terminal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledMeta {
    pub kind: String,
    pub version: u32,
    pub source: String,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub records: Vec<LabeledTransition>,
    pub meta: LabeledMeta,
}

impl LabeledDataset {
    pub fn new(records: Vec<LabeledTransition>, source: &str) -> Self {
        let size = records.len();
        Self {
            records,
            meta: LabeledMeta {
                kind: "labeled".into(),
                version: crate::data::DATA_FORMAT_VERSION,
                source: source.to_string(),
                size,
            },
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        crate::data::write_jsonl(path, &self.meta, self.records.iter())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        let (meta, records) =
            crate::data::read_jsonl::<LabeledMeta, LabeledTransition>(path, "labeled")?;
        Ok(Self { records, meta })
    }
}

fn goal_tuple(shape: &MdpShape, g: &GoalRecord) -> LabeledTransition {
    LabeledTransition {
        c: g.c,
        s: g.s,
        a: shape.claim_action(),
        r: 1.0,
        s2: shape.absorbing_state(),
        terminal: true,
    }
}

fn dyn_tuple(c: usize, d: &DynRecord) -> LabeledTransition {
    LabeledTransition {
        c,
        s: d.s,
        a: d.a,
        r: 0.0,
        s2: d.s2,
        terminal: false,
    }
}

/// Materializes the full augmentation: one fictitious claim tuple per
/// context-goal pair, and the complete cross product of dynamics records with
/// the dataset's contexts (kept with multiplicity). Sizes are exactly
/// |D_goal| and |D_dyn| * |D_goal|.
pub fn augment_full(
    dyn_records: &[DynRecord],
    goal_records: &[GoalRecord],
    shape: &MdpShape,
) -> Result<(Vec<LabeledTransition>, Vec<LabeledTransition>), CodaError> {
    if dyn_records.is_empty() {
        return Err(CodaError::EmptyDyn);
    }
    if goal_records.is_empty() {
        return Err(CodaError::EmptyGoal);
    }
    let product = dyn_records.len().saturating_mul(goal_records.len());
    if product > EAGER_CROSS_PRODUCT_LIMIT {
        return Err(CodaError::CrossProductTooLarge {
            dyn_size: dyn_records.len(),
            goal_size: goal_records.len(),
        });
    }
    let labeled_goal: Vec<LabeledTransition> =
        goal_records.iter().map(|g| goal_tuple(shape, g)).collect();
    let mut labeled_dyn = Vec::with_capacity(product);
    for d in dyn_records {
        for g in goal_records {
            labeled_dyn.push(dyn_tuple(g.c, d));
        }
    }
    Ok((labeled_dyn, labeled_goal))
}

/// Lazy minibatch view of the augmentation. Each slot is a fictitious goal
/// tuple with probability `goal_ratio`, otherwise a uniform dynamics record
/// paired with the context of a uniform context-goal record, matching the
/// product of the two empirical distributions.
#[derive(Debug, Clone)]
pub struct AugmentedBatchSampler<'a> {
    dyn_records: &'a [DynRecord],
    goal_records: &'a [GoalRecord],
    shape: MdpShape,
    goal_ratio: f64,
    rng: ChaCha8Rng,
}

impl<'a> AugmentedBatchSampler<'a> {
    pub fn new(
        dyn_records: &'a [DynRecord],
        goal_records: &'a [GoalRecord],
        shape: MdpShape,
        goal_ratio: f64,
        seed: u64,
    ) -> Result<Self, CodaError> {
        if dyn_records.is_empty() {
            return Err(CodaError::EmptyDyn);
        }
        if goal_records.is_empty() {
            return Err(CodaError::EmptyGoal);
        }
        if !(goal_ratio > 0.0 && goal_ratio < 1.0) {
            return Err(CodaError::DegenerateRatio(goal_ratio));
        }
        Ok(Self {
            dyn_records,
            goal_records,
            shape,
            goal_ratio,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Clone sharing the sources but drawing from an independent RNG stream.
    pub fn clone_with_stream(&self, stream: u64) -> Self {
        let mut clone = self.clone();
        clone.rng.set_stream(stream);
        clone
    }

    pub fn goal_ratio(&self) -> f64 {
        self.goal_ratio
    }

    pub fn next_tuple(&mut self) -> LabeledTransition {
        if self.rng.random::<f64>() < self.goal_ratio {
            let g = &self.goal_records[self.rng.random_range(0..self.goal_records.len())];
            goal_tuple(&self.shape, g)
        } else {
            let d = &self.dyn_records[self.rng.random_range(0..self.dyn_records.len())];
            let g = &self.goal_records[self.rng.random_range(0..self.goal_records.len())];
            dyn_tuple(g.c, d)
        }
    }

    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<LabeledTransition>, CodaError> {
        if batch_size == 0 {
            return Err(CodaError::EmptyBatch);
        }
        Ok((0..batch_size).map(|_| self.next_tuple()).collect())
    }
}

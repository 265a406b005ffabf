//! Offline dataset generation and JSON-Lines serialization.
//!
//! Two datasets are produced: an unlabeled dynamics dataset of `(s, a, s')`
//! transitions with no reward or context fields, and a positive-only
//! context-goal dataset of `(c, s)` pairs with `s` inside the goal set of
//! `c`. Records are shuffled after collection so file order carries no
//! episode information; dynamics records keep episode tags as provenance for
//! hindsight regrouping.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{GridCgo, N_ACTIONS};
use crate::numeric::sample_categorical;

pub const DATA_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("requested dataset size must be at least 1")]
    EmptyRequest,
    #[error("behavior mixture weights must not all be zero")]
    DegenerateMixture,
    #[error("unknown behavior mixture {0:?}")]
    UnknownBehavior(String),
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("dataset file is empty")]
    MissingHeader,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("expected dataset kind {expected:?}, found {got:?}")]
    Kind { expected: String, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One unlabeled dynamics transition. `episode` and `t` tag the collecting
/// rollout so hindsight methods can regroup transitions; they carry no reward
/// or context information.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct DynRecord {
    pub s: usize,
    pub a: usize,
    pub s2: usize,
    pub episode: u32,
    pub t: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DynMeta {
    pub kind: String,
    pub version: u32,
    pub behavior: String,
    pub seed: u64,
    pub size: usize,
    pub episode_cap: usize,
    pub has_episodes: bool,
}

#[derive(Debug, Clone)]
pub struct DynDataset {
    pub records: Vec<DynRecord>,
    pub meta: DynMeta,
}

/// One positive context-goal example.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct GoalRecord {
    pub c: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GoalMeta {
    pub kind: String,
    pub version: u32,
    pub relation: String,
    pub perturb: bool,
    pub seed: u64,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct GoalDataset {
    pub records: Vec<GoalRecord>,
    pub meta: GoalMeta,
}

/// Mixture of episode behaviors used to collect the dynamics dataset.
///
/// Components: uniformly random actions, epsilon-greedy shortest-path pursuit
/// of random floor-cell waypoints, and the same pursuit of cells sampled from
/// goal regions. `random_start` starts episodes anywhere on the floor rather
/// than at the map's start cells.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSpec {
    pub w_uniform: f64,
    pub w_waypoint: f64,
    pub w_goal_region: f64,
    pub epsilon: f64,
    pub random_start: bool,
    /// Episode cap; `None` uses the map default of 4 * (width + height).
    pub episode_cap: Option<usize>,
    pub label: String,
}

impl BehaviorSpec {
    /// Waypoint-driven mixture from the map's start cells.
    pub fn play() -> Self {
        Self {
            w_uniform: 0.5,
            w_waypoint: 0.5,
            w_goal_region: 0.0,
            epsilon: 0.2,
            random_start: false,
            episode_cap: None,
            label: "play".into(),
        }
    }

    /// Random-start waypoint mixture with a slice of goal-region pursuit.
    pub fn diverse() -> Self {
        Self {
            w_uniform: 0.2,
            w_waypoint: 0.7,
            w_goal_region: 0.1,
            epsilon: 0.2,
            random_start: true,
            episode_cap: None,
            label: "diverse".into(),
        }
    }

    pub fn uniform() -> Self {
        Self {
            w_uniform: 1.0,
            w_waypoint: 0.0,
            w_goal_region: 0.0,
            epsilon: 0.0,
            random_start: false,
            episode_cap: None,
            label: "uniform".into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self, DataError> {
        match name {
            "play" => Ok(Self::play()),
            "diverse" => Ok(Self::diverse()),
            "uniform" => Ok(Self::uniform()),
            other => Err(DataError::UnknownBehavior(other.to_string())),
        }
    }
}

enum EpisodeMode {
    Uniform,
    /// Chasing a waypoint state; re-targeted on arrival.
    Waypoint {
        target: usize,
        dist: Vec<u32>,
    },
}

/// Collects exactly `n` dynamics transitions from capped rollouts.
///
/// Contexts steer the goal-region behavior during collection and are then
/// stripped; the records expose raw `(s, a, s')` triples only.
pub fn collect_dyn(
    env: &GridCgo,
    behavior: &BehaviorSpec,
    n: usize,
    seed: u64,
) -> Result<DynDataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    let weights = [
        behavior.w_uniform,
        behavior.w_waypoint,
        behavior.w_goal_region,
    ];
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(DataError::DegenerateMixture);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = behavior
        .episode_cap
        .unwrap_or_else(|| env.default_horizon());
    let starts = env.start_states();
    let mdp = env.mdp();
    let mut records = Vec::with_capacity(n);
    let mut episode: u32 = 0;
    while records.len() < n {
        let mut s = if behavior.random_start {
            rng.random_range(0..env.n_states())
        } else {
            starts[rng.random_range(0..starts.len())]
        };
        let mut mode = match sample_categorical(&weights, &mut rng) {
            0 => EpisodeMode::Uniform,
            kind => new_waypoint(env, kind == 2, &mut rng)?,
        };
        for t in 0..cap {
            if records.len() >= n {
                break;
            }
            let a = match &mode {
                EpisodeMode::Uniform => rng.random_range(0..N_ACTIONS),
                EpisodeMode::Waypoint { dist, .. } => {
                    if rng.random::<f64>() < behavior.epsilon {
                        rng.random_range(0..N_ACTIONS)
                    } else {
                        greedy_toward(env, s, dist)
                    }
                }
            };
            let s2 = sample_categorical(mdp.transition_row(s, a), &mut rng);
            records.push(DynRecord {
                s,
                a,
                s2,
                episode,
                t: t as u32,
            });
            s = s2;
            if let EpisodeMode::Waypoint { target, .. } = &mode {
                if s == *target {
                    // Reached: continue the episode toward a fresh waypoint.
                    mode = new_waypoint(env, false, &mut rng)?;
                }
            }
        }
        episode += 1;
    }
    records.shuffle(&mut rng);
    Ok(DynDataset {
        records,
        meta: DynMeta {
            kind: "dyn".into(),
            version: DATA_FORMAT_VERSION,
            behavior: behavior.label.clone(),
            seed,
            size: n,
            episode_cap: cap,
            has_episodes: true,
        },
    })
}

fn new_waypoint(
    env: &GridCgo,
    from_goal_region: bool,
    rng: &mut impl Rng,
) -> Result<EpisodeMode, DataError> {
    for _ in 0..16 {
        let target = if from_goal_region {
            let ctx = env.sample_training_context(rng);
            let goals = env.goal_states(ctx);
            goals[rng.random_range(0..goals.len())]
        } else {
            rng.random_range(0..env.n_states())
        };
        let dist = env.bfs_from(target);
        if dist.iter().all(|&d| d < u32::MAX) {
            return Ok(EpisodeMode::Waypoint { target, dist });
        }
        eprintln!("warning: waypoint {target} unreachable, resampling");
    }
    Err(DataError::DegenerateMixture)
}

/// Move action that descends the waypoint's distance field, lowest action
/// index on ties.
fn greedy_toward(env: &GridCgo, s: usize, dist: &[u32]) -> usize {
    let mut best_a = 4;
    let mut best_d = dist[s];
    for a in 0..4 {
        let d = dist[env.move_target(s, a)];
        if d < best_d {
            best_d = d;
            best_a = a;
        }
    }
    best_a
}

/// Samples `n` context-goal pairs from the training context distribution,
/// optionally jittering each goal example by one cell within its goal set.
pub fn sample_goal_pairs(
    env: &GridCgo,
    n: usize,
    perturb: bool,
    seed: u64,
) -> Result<GoalDataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let c = env.sample_training_context(&mut rng);
        let goals = env.goal_states(c);
        let mut s = goals[rng.random_range(0..goals.len())];
        if perturb {
            s = env.jitter_goal(c, s, &mut rng);
        }
        records.push(GoalRecord { c, s });
    }
    let relation = format!("{:?}", env.relation())
        .split(|ch: char| !ch.is_alphanumeric())
        .next()
        .unwrap_or("unknown")
        .to_string();
    Ok(GoalDataset {
        records,
        meta: GoalMeta {
            kind: "goal".into(),
            version: DATA_FORMAT_VERSION,
            relation,
            perturb,
            seed,
            size: n,
        },
    })
}

/// Writes a header struct and record lines as JSON-Lines. Output is
/// byte-stable for identical inputs.
pub(crate) fn write_jsonl<H: Serialize, R: Serialize>(
    path: &Path,
    header: &H,
    records: impl Iterator<Item = R>,
) -> Result<(), DataError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)
        .map_err(|e| DataError::Malformed { line: 1, source: e })?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| DataError::Malformed { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_jsonl<H, R>(path: &Path, expected_kind: &str) -> Result<(H, Vec<R>), DataError>
where
    H: for<'de> Deserialize<'de>,
    R: for<'de> Deserialize<'de>,
{
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines.next().ok_or(DataError::MissingHeader)??;
    // Check kind and version before binding to the concrete meta shape, so a
    // mislabeled file reports the mismatch rather than a parse error.
    let probe: serde_json::Value = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Malformed { line: 1, source: e })?;
    let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATA_FORMAT_VERSION {
        return Err(DataError::Version(version));
    }
    let kind = probe.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if kind != expected_kind {
        return Err(DataError::Kind {
            expected: expected_kind.into(),
            got: kind.into(),
        });
    }
    let header: H = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Malformed { line: 1, source: e })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: R = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: i + 2,
            source: e,
        })?;
        records.push(record);
    }
    Ok((header, records))
}

impl DynDataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_jsonl(path, &self.meta, self.records.iter())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let (meta, records) = read_jsonl::<DynMeta, DynRecord>(path, "dyn")?;
        Ok(Self { records, meta })
    }

    /// Regroups records into episodes ordered by step, for hindsight use.
    pub fn episodes(&self) -> Vec<Vec<DynRecord>> {
        let n_eps = self
            .records
            .iter()
            .map(|r| r.episode)
            .max()
            .map_or(0, |m| m as usize + 1);
        let mut eps: Vec<Vec<DynRecord>> = vec![Vec::new(); n_eps];
        for r in &self.records {
            eps[r.episode as usize].push(*r);
        }
        for ep in &mut eps {
            ep.sort_by_key(|r| r.t);
        }
        eps
    }
}

impl GoalDataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_jsonl(path, &self.meta, self.records.iter())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let (meta, records) = read_jsonl::<GoalMeta, GoalRecord>(path, "goal")?;
        Ok(Self { records, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_cgo, builtin_map, parse_map, ContextRelation};
    use crate::mdp::ActionSpace;
    use crate::mdp::ContextualMdp;
    use crate::oracle::solve_optimal;
    use std::collections::HashSet;

    fn medium_env(relation: ContextRelation) -> GridCgo {
        let map = parse_map(builtin_map("medium-analog").unwrap())
            .unwrap()
            .with_slip(0.1)
            .unwrap();
        build_cgo(&map, &relation, 0.99).unwrap()
    }

    #[test]
    fn dyn_records_are_valid_transitions() {
        let env = medium_env(ContextRelation::FourRooms);
        let data = collect_dyn(&env, &BehaviorSpec::uniform(), 200, 0).unwrap();
        assert_eq!(data.records.len(), 200);
        for r in &data.records {
            assert!(
                env.mdp().prob(r.s, r.a, r.s2) > 0.0,
                "impossible transition {r:?}"
            );
        }
    }

    #[test]
    fn rejects_empty_request() {
        let env = medium_env(ContextRelation::FourRooms);
        assert!(matches!(
            collect_dyn(&env, &BehaviorSpec::play(), 0, 0),
            Err(DataError::EmptyRequest)
        ));
        assert!(matches!(
            sample_goal_pairs(&env, 0, false, 0),
            Err(DataError::EmptyRequest)
        ));
    }

    #[test]
    fn play_mixture_covers_most_floor_cells() {
        let env = medium_env(ContextRelation::FourRooms);
        let data = collect_dyn(&env, &BehaviorSpec::play(), 20_000, 0).unwrap();
        let mut visited = HashSet::new();
        for r in &data.records {
            visited.insert(r.s);
            visited.insert(r.s2);
        }
        assert!(
            visited.len() as f64 >= 0.95 * env.n_states() as f64,
            "covered only {}/{} cells",
            visited.len(),
            env.n_states()
        );
    }

    #[test]
    fn goal_pairs_satisfy_membership() {
        for perturb in [false, true] {
            let env = medium_env(ContextRelation::RandomCells { radius: 2.0 });
            let data = sample_goal_pairs(&env, 200, perturb, 1).unwrap();
            assert_eq!(data.records.len(), 200);
            for r in &data.records {
                assert!(env.mdp().is_goal(r.c, r.s));
            }
        }
    }

    #[test]
    fn perturbed_goals_can_leave_dyn_support() {
        // With few dynamics records, jittered goal examples include cells
        // absent from the visited next-state set.
        let env = medium_env(ContextRelation::SingleGoal {
            center: None,
            radius: 1.5,
        });
        let dyn_data = collect_dyn(&env, &BehaviorSpec::uniform(), 60, 3).unwrap();
        let seen: HashSet<usize> = dyn_data.records.iter().map(|r| r.s2).collect();
        let goal_data = sample_goal_pairs(&env, 40, true, 3).unwrap();
        assert!(goal_data.records.iter().any(|g| !seen.contains(&g.s)));
    }

    #[test]
    fn datasets_round_trip_and_are_byte_stable() {
        let env = medium_env(ContextRelation::FourRooms);
        let dir = tempfile::tempdir().unwrap();
        let dyn_path = dir.path().join("dyn.jsonl");
        let goal_path = dir.path().join("goal.jsonl");

        let dyn_data = collect_dyn(&env, &BehaviorSpec::play(), 500, 7).unwrap();
        dyn_data.save(&dyn_path).unwrap();
        let loaded = DynDataset::load(&dyn_path).unwrap();
        assert_eq!(loaded.meta, dyn_data.meta);
        assert_eq!(loaded.records, dyn_data.records);

        let goal_data = sample_goal_pairs(&env, 50, true, 7).unwrap();
        goal_data.save(&goal_path).unwrap();
        let loaded = GoalDataset::load(&goal_path).unwrap();
        assert_eq!(loaded.records, goal_data.records);

        // Regenerating with the same seed writes identical bytes.
        let again = collect_dyn(&env, &BehaviorSpec::play(), 500, 7).unwrap();
        let other_path = dir.path().join("dyn2.jsonl");
        again.save(&other_path).unwrap();
        assert_eq!(
            std::fs::read(&dyn_path).unwrap(),
            std::fs::read(&other_path).unwrap()
        );
    }

    #[test]
    fn load_rejects_wrong_kind_and_bad_lines() {
        let env = medium_env(ContextRelation::FourRooms);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("goal.jsonl");
        sample_goal_pairs(&env, 5, false, 0)
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(matches!(
            DynDataset::load(&path),
            Err(DataError::Kind { .. })
        ));

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            "{\"kind\":\"dyn\",\"version\":1,\"behavior\":\"play\",\"seed\":0,\"size\":1,\"episode_cap\":4,\"has_episodes\":true}\nnot json\n",
        )
        .unwrap();
        match DynDataset::load(&bad) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-line error, got {other:?}"),
        }
    }

    #[test]
    fn large_file_loads_quickly() {
        let env = medium_env(ContextRelation::FourRooms);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dyn.jsonl");
        collect_dyn(&env, &BehaviorSpec::play(), 20_000, 0)
            .unwrap()
            .save(&path)
            .unwrap();
        let start = std::time::Instant::now();
        let loaded = DynDataset::load(&path).unwrap();
        assert_eq!(loaded.records.len(), 20_000);
        assert!(
            start.elapsed().as_secs_f64() < 1.0,
            "load took {:?}",
            start.elapsed()
        );
    }

    #[test]
    fn episodes_regroup_by_tag() {
        let env = medium_env(ContextRelation::FourRooms);
        let data = collect_dyn(&env, &BehaviorSpec::play(), 300, 5).unwrap();
        let eps = data.episodes();
        assert!(eps.len() > 1);
        for ep in &eps {
            // Steps are consecutive within an episode and transitions chain.
            for w in ep.windows(2) {
                assert_eq!(w[0].t + 1, w[1].t);
                assert_eq!(w[0].s2, w[1].s);
            }
        }
    }

    #[test]
    fn union_supports_paths_no_single_episode_walks() {
        // Stitching fixture on the large map: no one episode spans the start
        // to the far corner, but the union of transitions supports a path
        // certified by dynamic programming on the empirical kernel.
        let map = parse_map(builtin_map("large-analog").unwrap())
            .unwrap()
            .with_slip(0.1)
            .unwrap();
        let env = build_cgo(&map, &ContextRelation::RandomCells { radius: 2.0 }, 0.99).unwrap();
        // Segments capped well below the start-to-corner distance, so no
        // single episode can span it; stitching must do the work.
        let behavior = BehaviorSpec {
            episode_cap: Some(12),
            ..BehaviorSpec::diverse()
        };
        let data = collect_dyn(&env, &behavior, 20_000, 0).unwrap();

        let start = env.start_states()[0];
        let corner = env.state_of_cell(10, 10).unwrap();
        for ep in data.episodes() {
            let mut cells: HashSet<usize> = ep.iter().map(|r| r.s).collect();
            cells.extend(ep.iter().map(|r| r.s2));
            assert!(
                !(cells.contains(&start) && cells.contains(&corner)),
                "episode {} spans start to corner",
                ep[0].episode
            );
        }

        // Empirical kernel: observed frequencies; unvisited pairs self-loop.
        let n = env.n_states();
        let mut counts = vec![0.0f64; n * N_ACTIONS * n];
        for r in &data.records {
            counts[(r.s * N_ACTIONS + r.a) * n + r.s2] += 1.0;
        }
        let mut transition = vec![0.0f64; n * N_ACTIONS * n];
        for s in 0..n {
            for a in 0..N_ACTIONS {
                let row = &counts[(s * N_ACTIONS + a) * n..][..n];
                let total: f64 = row.iter().sum();
                let out = &mut transition[(s * N_ACTIONS + a) * n..][..n];
                if total == 0.0 {
                    out[s] = 1.0;
                } else {
                    for (o, &cnt) in out.iter_mut().zip(row) {
                        *o = cnt / total;
                    }
                }
            }
        }
        let corner_ctx = corner;
        let goal_member: Vec<bool> = (0..n).map(|s| env.mdp().is_goal(corner_ctx, s)).collect();
        let mut init = vec![0.0; n];
        init[start] = 1.0;
        let empirical =
            ContextualMdp::new(n, N_ACTIONS, 1, transition, goal_member, 0.99, init).unwrap();
        let (q_star, pi_star) = solve_optimal(&empirical, ActionSpace::Original).unwrap();
        let v = q_star.state_value(0, start, pi_star.row(0, start));
        assert!(v > 0.0, "empirical kernel does not support a stitched path");
    }
}

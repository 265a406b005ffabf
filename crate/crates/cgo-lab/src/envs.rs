//! Gridworld environment factory: ASCII maze maps plus a context-goal
//! relation yield a finite contextual goal-oriented MDP.
//!
//! Three relations of increasing difficulty are supported: a single shared
//! goal region, a four-room partition with the room number as the context,
//! and per-cell contexts whose goal sets are small Euclidean balls.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::mdp::{ContextualMdp, MdpError};

/// Grid actions, in tie-breaking order.
pub const ACTIONS: [(isize, isize); 5] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];
pub const N_ACTIONS: usize = 5;

pub const MAX_SLIP: f64 = 0.4;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("map is empty")]
    EmptyMap,
    #[error("map row {0} has a different length")]
    Ragged(usize),
    #[error("unexpected character {ch:?} in map row {row}")]
    BadChar { row: usize, ch: char },
    #[error("map has no start cell")]
    NoStart,
    #[error("floor cells are not 4-connected")]
    Disconnected,
    #[error("slip probability {0} outside [0, {MAX_SLIP}]")]
    BadSlip(f64),
    #[error("relation does not fit this map: {0}")]
    RelationMismatch(String),
    #[error("context {0} has an empty goal set")]
    EmptyGoalSet(usize),
    #[error("no bundled map named {0:?}")]
    UnknownMap(String),
    #[error("shifted test contexts are only defined for the random-cells relation")]
    ShiftUnsupported,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rectangular maze with wall/floor cells, start cells, and slip noise.
#[derive(Debug, Clone)]
pub struct MazeMap {
    width: usize,
    height: usize,
    wall: Vec<bool>,
    starts: Vec<(usize, usize)>,
    slip: f64,
}

/// Parses an ASCII map: `#` wall, `.` floor, `S` start (also floor).
/// The floor must form a single 4-connected component.
pub fn parse_map(text: &str) -> Result<MazeMap, EnvError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(EnvError::EmptyMap);
    }
    let width = lines[0].chars().count();
    let height = lines.len();
    let mut wall = vec![false; width * height];
    let mut starts = Vec::new();
    for (r, line) in lines.iter().enumerate() {
        let row: Vec<char> = line.chars().collect();
        if row.len() != width {
            return Err(EnvError::Ragged(r));
        }
        for (c, &ch) in row.iter().enumerate() {
            match ch {
                '#' => wall[r * width + c] = true,
                '.' => {}
                'S' => starts.push((r, c)),
                other => return Err(EnvError::BadChar { row: r, ch: other }),
            }
        }
    }
    if starts.is_empty() {
        return Err(EnvError::NoStart);
    }
    let map = MazeMap {
        width,
        height,
        wall,
        starts,
        slip: 0.0,
    };
    map.check_connected()?;
    Ok(map)
}

impl MazeMap {
    pub fn load(path: &Path) -> Result<Self, EnvError> {
        parse_map(&std::fs::read_to_string(path)?)
    }

    pub fn with_slip(mut self, slip: f64) -> Result<Self, EnvError> {
        if !(0.0..=MAX_SLIP).contains(&slip) {
            return Err(EnvError::BadSlip(slip));
        }
        self.slip = slip;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn slip(&self) -> f64 {
        self.slip
    }

    pub fn starts(&self) -> &[(usize, usize)] {
        &self.starts
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        r >= self.height || c >= self.width || self.wall[r * self.width + c]
    }

    /// Floor cells in row-major order; their positions define state indices.
    pub fn floor_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.wall[r * self.width + c] {
                    cells.push((r, c));
                }
            }
        }
        cells
    }

    fn check_connected(&self) -> Result<(), EnvError> {
        let cells = self.floor_cells();
        if cells.is_empty() {
            return Err(EnvError::NoStart);
        }
        let mut seen = vec![false; self.width * self.height];
        let start = cells[0];
        let mut queue = VecDeque::from([start]);
        seen[start.0 * self.width + start.1] = true;
        let mut count = 1;
        while let Some((r, c)) = queue.pop_front() {
            for (dr, dc) in &ACTIONS[..4] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if !self.is_wall(nr, nc) && !seen[nr * self.width + nc] {
                    seen[nr * self.width + nc] = true;
                    count += 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        if count != cells.len() {
            return Err(EnvError::Disconnected);
        }
        Ok(())
    }
}

/// How contexts map to goal sets.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextRelation {
    /// One context; the goal set is a Euclidean ball around `center` (when
    /// `None`, the floor cell farthest from the first start).
    SingleGoal {
        center: Option<(usize, usize)>,
        radius: f64,
    },
    /// Four quadrant rooms; the room number is the context.
    FourRooms,
    /// Every floor cell is a context; its goal set is the floor within the
    /// Euclidean ball of `radius` around it.
    RandomCells { radius: f64 },
}

/// How test contexts are drawn at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestContextMode {
    InDistribution,
    /// Uniform over floor cells in the map quadrant farthest from the starts.
    Shifted,
}

/// A built gridworld instance: the MDP plus the geometry needed by data
/// generation and evaluation.
#[derive(Debug, Clone)]
pub struct GridCgo {
    mdp: ContextualMdp,
    map: MazeMap,
    relation: ContextRelation,
    cells: Vec<(usize, usize)>,
    state_of: Vec<Option<usize>>,
    /// Quadrant id per state: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    quadrant: Vec<usize>,
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Builds the contextual MDP for a map and relation.
///
/// Dynamics: five actions (up, down, left, right, stay). A directional move
/// succeeds with probability `1 - slip` and deviates to each lateral
/// direction with `slip / 2`; bumping a wall stays in place. The initial
/// distribution is uniform over start cells times uniform over contexts,
/// with goal pairs excluded and the rest renormalized.
pub fn build_cgo(
    map: &MazeMap,
    relation: &ContextRelation,
    discount: f64,
) -> Result<GridCgo, EnvError> {
    let cells = map.floor_cells();
    let n_states = cells.len();
    let mut state_of = vec![None; map.width * map.height];
    for (i, &(r, c)) in cells.iter().enumerate() {
        state_of[r * map.width + c] = Some(i);
    }
    let quadrant: Vec<usize> = cells
        .iter()
        .map(|&(r, c)| {
            let south = r >= map.height / 2;
            let east = c >= map.width / 2;
            (south as usize) * 2 + east as usize
        })
        .collect();

    // Transition table with slip dynamics.
    let mut transition = vec![0.0; n_states * N_ACTIONS * n_states];
    let step_cell = |s: usize, dir: usize| -> usize {
        let (r, c) = cells[s];
        let (dr, dc) = ACTIONS[dir];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || map.is_wall(nr as usize, nc as usize) {
            s
        } else {
            state_of[nr as usize * map.width + nc as usize].unwrap()
        }
    };
    for s in 0..n_states {
        for a in 0..N_ACTIONS {
            let row = &mut transition[(s * N_ACTIONS + a) * n_states..][..n_states];
            if a == 4 {
                row[s] = 1.0;
                continue;
            }
            row[step_cell(s, a)] += 1.0 - map.slip;
            // Lateral deviations are perpendicular to the move axis.
            let laterals = if a < 2 { [2, 3] } else { [0, 1] };
            for lat in laterals {
                row[step_cell(s, lat)] += map.slip / 2.0;
            }
        }
    }

    // Goal membership per relation.
    let (n_contexts, goal_member) = match relation {
        ContextRelation::SingleGoal { center, radius } => {
            if *radius <= 0.0 {
                return Err(EnvError::RelationMismatch(
                    "single-goal radius must be positive".into(),
                ));
            }
            let center = match center {
                Some(cc) => {
                    if map.is_wall(cc.0, cc.1) {
                        return Err(EnvError::RelationMismatch(format!(
                            "single-goal center {cc:?} is not a floor cell"
                        )));
                    }
                    *cc
                }
                None => {
                    let s0 = map.starts[0];
                    *cells
                        .iter()
                        .max_by(|a, b| dist(**a, s0).partial_cmp(&dist(**b, s0)).unwrap())
                        .unwrap()
                }
            };
            let member: Vec<bool> = cells
                .iter()
                .map(|&cell| dist(cell, center) <= *radius)
                .collect();
            (1, member)
        }
        ContextRelation::FourRooms => {
            let mut member = vec![false; 4 * n_states];
            for room in 0..4 {
                for s in 0..n_states {
                    member[room * n_states + s] = quadrant[s] == room;
                }
            }
            (4, member)
        }
        ContextRelation::RandomCells { radius } => {
            if *radius <= 0.0 {
                return Err(EnvError::RelationMismatch(
                    "random-cells radius must be positive".into(),
                ));
            }
            let mut member = vec![false; n_states * n_states];
            for ctx in 0..n_states {
                for s in 0..n_states {
                    member[ctx * n_states + s] = dist(cells[s], cells[ctx]) <= *radius;
                }
            }
            (n_states, member)
        }
    };
    for ctx in 0..n_contexts {
        if !goal_member[ctx * n_states..(ctx + 1) * n_states]
            .iter()
            .any(|&g| g)
        {
            return Err(EnvError::EmptyGoalSet(ctx));
        }
    }

    // Initial distribution: uniform starts x uniform contexts, goals excluded.
    let start_states: Vec<usize> = map
        .starts
        .iter()
        .map(|&(r, c)| state_of[r * map.width + c].unwrap())
        .collect();
    let mut init_dist = vec![0.0; n_contexts * n_states];
    for ctx in 0..n_contexts {
        for &s in &start_states {
            if !goal_member[ctx * n_states + s] {
                init_dist[ctx * n_states + s] += 1.0;
            }
        }
    }
    let total: f64 = init_dist.iter().sum();
    if total == 0.0 {
        return Err(EnvError::RelationMismatch(
            "every start cell lies in every goal set".into(),
        ));
    }
    for w in &mut init_dist {
        *w /= total;
    }

    let mdp = ContextualMdp::new(
        n_states,
        N_ACTIONS,
        n_contexts,
        transition,
        goal_member,
        discount,
        init_dist,
    )?;
    Ok(GridCgo {
        mdp,
        map: map.clone(),
        relation: relation.clone(),
        cells,
        state_of,
        quadrant,
    })
}

impl GridCgo {
    pub fn mdp(&self) -> &ContextualMdp {
        &self.mdp
    }

    pub fn map(&self) -> &MazeMap {
        &self.map
    }

    pub fn relation(&self) -> &ContextRelation {
        &self.relation
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_of_state(&self, s: usize) -> (usize, usize) {
        self.cells[s]
    }

    pub fn state_of_cell(&self, r: usize, c: usize) -> Option<usize> {
        if r >= self.map.height() || c >= self.map.width() {
            None
        } else {
            self.state_of[r * self.map.width() + c]
        }
    }

    pub fn start_states(&self) -> Vec<usize> {
        self.map
            .starts()
            .iter()
            .map(|&(r, c)| self.state_of_cell(r, c).unwrap())
            .collect()
    }

    /// Quadrant room of a state (contexts of the four-rooms relation).
    pub fn room_of_state(&self, s: usize) -> usize {
        self.quadrant[s]
    }

    pub fn goal_states(&self, ctx: usize) -> Vec<usize> {
        (0..self.n_states())
            .filter(|&s| self.mdp.is_goal(ctx, s))
            .collect()
    }

    /// Uniform draw from the training context distribution.
    pub fn sample_training_context(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.mdp.n_contexts())
    }

    pub fn context_label(&self, ctx: usize) -> String {
        match self.relation {
            ContextRelation::SingleGoal { .. } => "goal".to_string(),
            ContextRelation::FourRooms => format!("room{}", ctx + 1),
            ContextRelation::RandomCells { .. } => {
                let (r, c) = self.cells[ctx];
                format!("cell({r},{c})")
            }
        }
    }

    /// One-cell jitter of a goal example, clipped to stay inside the goal set.
    pub fn jitter_goal(&self, ctx: usize, s: usize, rng: &mut impl Rng) -> usize {
        let dir = rng.random_range(0..4);
        let (r, c) = self.cells[s];
        let (dr, dc) = ACTIONS[dir];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 {
            return s;
        }
        match self.state_of_cell(nr as usize, nc as usize) {
            Some(s2) if self.mdp.is_goal(ctx, s2) => s2,
            _ => s,
        }
    }

    /// Intended destination of a move, ignoring slip; walls keep the agent put.
    pub fn move_target(&self, s: usize, a: usize) -> usize {
        let (r, c) = self.cells[s];
        let (dr, dc) = ACTIONS[a];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 {
            return s;
        }
        self.state_of_cell(nr as usize, nc as usize).unwrap_or(s)
    }

    /// Breadth-first step counts from a state over the four move directions.
    pub fn bfs_from(&self, from: usize) -> Vec<u32> {
        let mut distances = vec![u32::MAX; self.n_states()];
        distances[from] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(s) = queue.pop_front() {
            let (r, c) = self.cells[s];
            for (dr, dc) in &ACTIONS[..4] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 {
                    continue;
                }
                if let Some(s2) = self.state_of_cell(nr as usize, nc as usize) {
                    if distances[s2] == u32::MAX {
                        distances[s2] = distances[s] + 1;
                        queue.push_back(s2);
                    }
                }
            }
        }
        distances
    }

    /// Default episode cap and evaluation horizon.
    pub fn default_horizon(&self) -> usize {
        4 * (self.map.width() + self.map.height())
    }
}

/// Draws test contexts. In-distribution sampling cycles the support for the
/// finite relations and draws uniformly for random cells; shifted sampling
/// draws uniformly from the quadrant farthest from every start cell.
pub fn sample_test_contexts(
    env: &GridCgo,
    mode: TestContextMode,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, EnvError> {
    match mode {
        TestContextMode::InDistribution => match env.relation {
            ContextRelation::SingleGoal { .. } | ContextRelation::FourRooms => {
                Ok((0..n).map(|i| i % env.mdp.n_contexts()).collect())
            }
            ContextRelation::RandomCells { .. } => {
                Ok((0..n).map(|_| env.sample_training_context(rng)).collect())
            }
        },
        TestContextMode::Shifted => {
            if !matches!(env.relation, ContextRelation::RandomCells { .. }) {
                return Err(EnvError::ShiftUnsupported);
            }
            let starts = env.start_states();
            let mut best_q = 0;
            let mut best_d = f64::NEG_INFINITY;
            for q in 0..4 {
                let d = (0..env.n_states())
                    .filter(|&s| env.quadrant[s] == q)
                    .flat_map(|s| {
                        starts
                            .iter()
                            .map(move |&s0| dist(env.cell_of_state(s), env.cell_of_state(s0)))
                    })
                    .fold(f64::INFINITY, f64::min);
                if d.is_finite() && d > best_d {
                    best_d = d;
                    best_q = q;
                }
            }
            let pool: Vec<usize> = (0..env.n_states())
                .filter(|&s| env.quadrant[s] == best_q)
                .collect();
            Ok((0..n)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect())
        }
    }
}

const UMAZE_ANALOG: &str = "\
######
#.##.#
#.##.#
#.##.#
#S...#
######";

const MEDIUM_ANALOG: &str = "\
########
#S.....#
#......#
#......#
#......#
#......#
#......#
########";

const LARGE_ANALOG: &str = "\
############
#S....#....#
#.###.#.##.#
#...#.#..#.#
###.#.##.#.#
#...#....#.#
#.#####.##.#
#.....#..#.#
#.###.##.#.#
#.#.#..#.#.#
#.#...#....#
############";

/// Bundled map by name.
pub fn builtin_map(name: &str) -> Result<&'static str, EnvError> {
    match name {
        "umaze-analog" => Ok(UMAZE_ANALOG),
        "medium-analog" => Ok(MEDIUM_ANALOG),
        "large-analog" => Ok(LARGE_ANALOG),
        other => Err(EnvError::UnknownMap(other.to_string())),
    }
}

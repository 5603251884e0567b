//! Deterministic ground-truth environments.
//!
//! * `pointnav`: a point in the unit square, `s' = clip(s + a, 0, 1)`.
//! * `blockpush-*`: a point agent and three blocks in the unit square. The
//!   agent moves by its action; any block whose centre ends up within the
//!   contact radius of the agent is slid along the agent's direction of
//!   motion until it is exactly at contact distance. Blocks do not interact
//!   with each other.
//!
//! Environments hold no mutable state; every method is a pure function of
//! its arguments.

use std::ops::Deref;

use ndiff::Tensor;
use rand::Rng as _;

use crate::error::{GapError, Result};
use crate::rng;

pub const CONTACT_RADIUS: f64 = 0.06;
pub const NUM_BLOCKS: usize = 3;
pub const AGENT_START: [f64; 2] = [0.5, 0.15];
pub const BLOCK_LATTICE: [[f64; 2]; NUM_BLOCKS] = [[0.3, 0.35], [0.5, 0.35], [0.7, 0.35]];
pub const BLOCK_JITTER: f64 = 0.03;
pub const GOAL_BAND: (f64, f64) = (0.2, 0.8);
pub const GOAL_MIN_DISTANCE: f64 = 0.15;
pub const GRID_SIZE: usize = 12;
pub const GRID_CHANNELS: usize = 1 + NUM_BLOCKS;

const POINTNAV_BOUND: f64 = 0.1;
const POINTNAV_HORIZON: usize = 10;
const BLOCKPUSH_BOUND: f64 = 0.1;
const BLOCKPUSH_HORIZON: usize = 30;
const TASK_TWO_TARGETS: [usize; 2] = [0, 1];
const OVERLAP_SLACK: f64 = 1e-9;

macro_rules! vector_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

vector_newtype!(
    /// Full environment state: `[x, y]` for pointnav, agent then block
    /// centres for blockpush.
    State
);
vector_newtype!(
    /// Planar displacement command.
    Action
);

/// Goal state plus the indices of the blocks it scores. `targets` is empty
/// for pointnav, where the whole state is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Goal {
    pub state: State,
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Reach,
    PushOne,
    PushTwo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsMode {
    Vector,
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub id: String,
    pub task: Task,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub episode_len: usize,
    pub success_threshold: f64,
    pub obs_mode: ObsMode,
}

pub const ENV_IDS: [&str; 4] = [
    "pointnav",
    "blockpush-task1",
    "blockpush-task2",
    "blockpush-grid-task1",
];

impl EnvSpec {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "pointnav" => Ok(Self::pointnav()),
            "blockpush-task1" => Ok(Self::blockpush(id, Task::PushOne, ObsMode::Vector)),
            "blockpush-task2" => Ok(Self::blockpush(id, Task::PushTwo, ObsMode::Vector)),
            "blockpush-grid-task1" => Ok(Self::blockpush(id, Task::PushOne, ObsMode::Grid)),
            other => Err(GapError::invalid(format!(
                "unknown environment `{other}` (expected one of {})",
                ENV_IDS.join(", ")
            ))),
        }
    }

    pub fn pointnav() -> Self {
        Self {
            id: "pointnav".into(),
            task: Task::Reach,
            state_dim: 2,
            action_dim: 2,
            action_bound: POINTNAV_BOUND,
            episode_len: POINTNAV_HORIZON,
            success_threshold: 0.1,
            obs_mode: ObsMode::Vector,
        }
    }

    fn blockpush(id: &str, task: Task, obs_mode: ObsMode) -> Self {
        Self {
            id: id.into(),
            task,
            state_dim: 2 + 2 * NUM_BLOCKS,
            action_dim: 2,
            action_bound: BLOCKPUSH_BOUND,
            episode_len: BLOCKPUSH_HORIZON,
            success_threshold: if task == Task::PushOne { 0.08 } else { 0.1 },
            obs_mode,
        }
    }

    pub fn is_blockpush(&self) -> bool {
        self.task != Task::Reach
    }

    /// Identifier of the underlying dynamics. Environments sharing it share
    /// datasets and models.
    pub fn physics(&self) -> &'static str {
        if self.is_blockpush() {
            "blockpush"
        } else {
            "pointnav"
        }
    }

    /// Width of the vectors models consume.
    pub fn obs_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::Vector => self.state_dim,
            ObsMode::Grid => GRID_SIZE * GRID_SIZE * GRID_CHANNELS,
        }
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(GapError::DimMismatch {
                what: "state",
                expected: self.state_dim,
                got: s.len(),
            });
        }
        Ok(())
    }

    fn check_action(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.action_dim {
            return Err(GapError::DimMismatch {
                what: "action",
                expected: self.action_dim,
                got: a.len(),
            });
        }
        if let Some(&v) = a
            .iter()
            .find(|v| !v.is_finite() || v.abs() > self.action_bound + 1e-12)
        {
            return Err(GapError::ActionOutOfBounds {
                value: v,
                bound: self.action_bound,
            });
        }
        Ok(())
    }

    /// Clamps each component into `[-bound, bound]`.
    pub fn clip_action(&self, raw: &[f64]) -> Action {
        let b = self.action_bound;
        Action(raw.iter().map(|v| v.clamp(-b, b)).collect())
    }

    pub fn random_action(&self, rng: &mut rng::Rng) -> Action {
        let b = self.action_bound;
        Action(
            (0..self.action_dim)
                .map(|_| rng.random_range(-b..=b))
                .collect(),
        )
    }

    pub fn step(&self, s: &State, a: &Action) -> Result<State> {
        self.check_state(s)?;
        self.check_action(a)?;
        if self.is_blockpush() {
            Ok(State(push_step(s, a)))
        } else {
            Ok(State(
                s.iter()
                    .zip(a.iter())
                    .map(|(x, d)| (x + d).clamp(0.0, 1.0))
                    .collect(),
            ))
        }
    }

    /// Squared Euclidean distance on the coordinates `goal` scores.
    pub fn cost(&self, s: &State, goal: &Goal) -> Result<f64> {
        self.check_state(s)?;
        self.check_state(&goal.state)?;
        Ok(scored_sq_distance(s, &goal.state, &goal.targets))
    }

    /// Strict threshold test on every scored entity.
    pub fn success(&self, s: &State, goal: &Goal) -> bool {
        if s.len() != self.state_dim || goal.state.len() != self.state_dim {
            return false;
        }
        let thr = self.success_threshold;
        if goal.targets.is_empty() {
            return scored_sq_distance(s, &goal.state, &[]).sqrt() < thr;
        }
        goal.targets.iter().all(|&k| {
            let (x, y) = block(s, k);
            let (gx, gy) = block(&goal.state, k);
            ((x - gx).powi(2) + (y - gy).powi(2)).sqrt() < thr
        })
    }

    pub fn reset(&self, seed: u64) -> State {
        if !self.is_blockpush() {
            return State(vec![0.5, 0.5]);
        }
        let mut rng = rng::stream(seed, 0);
        let mut s = AGENT_START.to_vec();
        for anchor in BLOCK_LATTICE {
            for c in anchor {
                s.push(c + rng.random_range(-BLOCK_JITTER..=BLOCK_JITTER));
            }
        }
        State(s)
    }

    /// Samples a goal for an episode starting at `start`.
    ///
    /// Pointnav goals are uniform on the unit square. Blockpush goals move the
    /// target blocks to uniform positions in the goal band at least
    /// `GOAL_MIN_DISTANCE` from where they start; other blocks stay put, and
    /// the agent sits at contact distance behind the last target, where a
    /// straight push would leave it.
    pub fn sample_goal(&self, start: &State, seed: u64) -> Goal {
        let mut rng = rng::stream(seed, 1);
        match self.task {
            Task::Reach => Goal {
                state: State(vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]),
                targets: Vec::new(),
            },
            Task::PushOne | Task::PushTwo => {
                let targets = if self.task == Task::PushOne {
                    vec![rng.random_range(0..NUM_BLOCKS)]
                } else {
                    TASK_TWO_TARGETS.to_vec()
                };
                let mut g = start.0.clone();
                for &k in &targets {
                    let (bx, by) = block(start, k);
                    let (gx, gy) = loop {
                        let gx = rng.random_range(GOAL_BAND.0..GOAL_BAND.1);
                        let gy = rng.random_range(GOAL_BAND.0..GOAL_BAND.1);
                        if ((gx - bx).powi(2) + (gy - by).powi(2)).sqrt() >= GOAL_MIN_DISTANCE {
                            break (gx, gy);
                        }
                    };
                    g[2 + 2 * k] = gx;
                    g[3 + 2 * k] = gy;
                }
                let last = *targets.last().expect("at least one target");
                let (bx, by) = block(start, last);
                let (gx, gy) = block(&g, last);
                let norm = ((gx - bx).powi(2) + (gy - by).powi(2)).sqrt();
                g[0] = (gx - CONTACT_RADIUS * (gx - bx) / norm).clamp(0.0, 1.0);
                g[1] = (gy - CONTACT_RADIUS * (gy - by) / norm).clamp(0.0, 1.0);
                Goal {
                    state: State(g),
                    targets,
                }
            }
        }
    }

    /// Initial state and goal for trial `seed`.
    pub fn sample_task(&self, seed: u64) -> (State, Goal) {
        let s0 = self.reset(seed);
        let goal = self.sample_goal(&s0, seed);
        (s0, goal)
    }

    /// Occupancy grid `[GRID_SIZE, GRID_SIZE, GRID_CHANNELS]` flattened in
    /// row (y), column (x), channel order. Each entity is splatted bilinearly
    /// onto the four nearest cell centres, so every channel sums to one.
    pub fn render_grid(&self, s: &State) -> Result<Tensor> {
        if !self.is_blockpush() {
            return Err(GapError::invalid("grid rendering needs a blockpush state"));
        }
        self.check_state(s)?;
        let n = GRID_SIZE;
        let mut grid = vec![0.0; n * n * GRID_CHANNELS];
        for ch in 0..GRID_CHANNELS {
            let (x, y) = (s[2 * ch], s[2 * ch + 1]);
            for (row, wy) in splat_axis(y, n) {
                for (col, wx) in splat_axis(x, n) {
                    grid[(row * n + col) * GRID_CHANNELS + ch] += wy * wx;
                }
            }
        }
        Ok(Tensor::vector(grid))
    }

    /// The vector a model sees for state `s`.
    pub fn observe(&self, s: &State) -> Result<Vec<f64>> {
        match self.obs_mode {
            ObsMode::Vector => {
                self.check_state(s)?;
                Ok(s.0.clone())
            }
            ObsMode::Grid => Ok(self.render_grid(s)?.into_data()),
        }
    }
}

fn block(s: &[f64], k: usize) -> (f64, f64) {
    (s[2 + 2 * k], s[3 + 2 * k])
}

/// Squared distance over the scored coordinates: all of them when `targets`
/// is empty, otherwise only the listed blocks. Symmetric in `a` and `b`.
pub fn scored_sq_distance(a: &[f64], b: &[f64], targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    }
    targets
        .iter()
        .map(|&k| {
            let (ax, ay) = block(a, k);
            let (bx, by) = block(b, k);
            (ax - bx).powi(2) + (ay - by).powi(2)
        })
        .sum()
}

/// Two (cell, weight) pairs for a coordinate in `[0, 1]` on an `n`-cell axis.
fn splat_axis(v: f64, n: usize) -> [(usize, f64); 2] {
    let u = v * n as f64 - 0.5;
    if u <= 0.0 {
        return [(0, 1.0), (0, 0.0)];
    }
    if u >= (n - 1) as f64 {
        return [(n - 1, 1.0), (n - 1, 0.0)];
    }
    let i = u.floor() as usize;
    let f = u - i as f64;
    [(i, 1.0 - f), (i + 1, f)]
}

fn push_step(s: &[f64], a: &[f64]) -> Vec<f64> {
    if a.iter().all(|&v| v == 0.0) {
        return s.to_vec();
    }
    if let Some(next) = resolve(s, a, 1.0) {
        return next;
    }
    // A block is pinned against a wall: shorten the move to the largest
    // fraction that still resolves. Fraction 0 is always valid.
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = s.to_vec();
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        match resolve(s, a, mid) {
            Some(next) => {
                lo = mid;
                best = next;
            }
            None => hi = mid,
        }
    }
    best
}

/// Moves the agent by `frac * a` and pushes blocks out of contact. `None` if
/// some block cannot be cleared inside the arena.
fn resolve(s: &[f64], a: &[f64], frac: f64) -> Option<Vec<f64>> {
    let mut next = s.to_vec();
    let px = (s[0] + frac * a[0]).clamp(0.0, 1.0);
    let py = (s[1] + frac * a[1]).clamp(0.0, 1.0);
    next[0] = px;
    next[1] = py;
    let (mx, my) = (px - s[0], py - s[1]);
    let len = (mx * mx + my * my).sqrt();
    if len == 0.0 {
        // Fully clamped move: nothing travels, nothing is pushed.
        return Some(s.to_vec());
    }
    let (dx, dy) = (mx / len, my / len);
    for k in 0..NUM_BLOCKS {
        let (bx, by) = block(s, k);
        let (wx, wy) = (bx - px, by - py);
        let dist2 = wx * wx + wy * wy;
        if dist2 >= CONTACT_RADIUS * CONTACT_RADIUS {
            continue;
        }
        // smallest t >= 0 with |w + t d| = r
        let wd = wx * dx + wy * dy;
        let t = -wd + (wd * wd - (dist2 - CONTACT_RADIUS * CONTACT_RADIUS)).sqrt();
        let nx = (bx + t * dx).clamp(0.0, 1.0);
        let ny = (by + t * dy).clamp(0.0, 1.0);
        if ((nx - px).powi(2) + (ny - py).powi(2)).sqrt() < CONTACT_RADIUS - OVERLAP_SLACK {
            return None;
        }
        next[2 + 2 * k] = nx;
        next[3 + 2 * k] = ny;
    }
    Some(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blockpush() -> EnvSpec {
        EnvSpec::from_id("blockpush-task1").unwrap()
    }

    #[test]
    fn pointnav_additive_and_clipped() {
        let env = EnvSpec::pointnav();
        let s = env
            .step(&State::new(vec![0.5, 0.5]), &Action::new(vec![0.1, 0.0]))
            .unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15 && s[1] == 0.5);
        let s = env
            .step(&State::new(vec![0.98, 0.5]), &Action::new(vec![0.1, 0.0]))
            .unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.5]);
    }

    #[test]
    fn rejects_out_of_bound_action() {
        let env = EnvSpec::pointnav();
        let err = env
            .step(&State::new(vec![0.5, 0.5]), &Action::new(vec![0.2, 0.0]))
            .unwrap_err();
        assert!(matches!(err, GapError::ActionOutOfBounds { .. }));
        assert!(env
            .step(&State::new(vec![0.5]), &Action::new(vec![0.0, 0.0]))
            .is_err());
    }

    #[test]
    fn cost_examples() {
        let env = EnvSpec::pointnav();
        let g = Goal {
            state: State::new(vec![0.3, 0.4]),
            targets: vec![],
        };
        assert!((env.cost(&State::new(vec![0.0, 0.0]), &g).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(env.cost(&g.state, &g).unwrap(), 0.0);
    }

    #[test]
    fn success_boundary_is_strict() {
        let env = EnvSpec::pointnav();
        let g = Goal {
            state: State::new(vec![0.0, 0.0]),
            targets: vec![],
        };
        assert!(env.success(&State::new(vec![0.05, 0.0]), &g));
        let at_threshold = State::new(vec![0.1, 0.0]);
        assert_eq!(env.cost(&at_threshold, &g).unwrap().sqrt(), 0.1);
        assert!(!env.success(&at_threshold, &g));
    }

    #[test]
    fn task_two_needs_both_blocks() {
        let env = EnvSpec::from_id("blockpush-task2").unwrap();
        let (s0, goal) = env.sample_task(3);
        let mut s = goal.state.clone().into_inner();
        s[0] = s0[0];
        s[1] = s0[1];
        assert!(env.success(&State::new(s.clone()), &goal));
        s[2 + 2 * goal.targets[1]] += 0.2;
        assert!(!env.success(&State::new(s), &goal));
    }

    #[test]
    fn task_one_cost_ignores_agent() {
        let env = blockpush();
        let (s0, goal) = env.sample_task(11);
        let before = env.cost(&s0, &goal).unwrap();
        let mut moved = s0.clone().into_inner();
        moved[0] = 0.9;
        moved[1] = 0.9;
        assert_eq!(env.cost(&State::new(moved), &goal).unwrap(), before);
    }

    #[test]
    fn blockpush_far_agent_leaves_blocks() {
        let env = blockpush();
        let s0 = env.reset(0);
        let s1 = env.step(&s0, &Action::new(vec![-0.05, -0.05])).unwrap();
        assert_eq!(&s1[2..], &s0[2..]);
    }

    #[test]
    fn push_moves_block_along_motion() {
        let env = blockpush();
        let s = State::new(vec![0.5, 0.44, 0.3, 0.35, 0.5, 0.5, 0.7, 0.35]);
        let next = env.step(&s, &Action::new(vec![0.0, 0.05])).unwrap();
        // agent at 0.49, block pushed to 0.49 + 0.06
        assert!((next[1] - 0.49).abs() < 1e-12);
        assert!((next[5] - 0.55).abs() < 1e-12);
        assert_eq!(next[4], 0.5);
        assert_eq!(&next[2..4], &s[2..4]);
    }

    #[test]
    fn pinned_block_never_overlaps_agent() {
        let env = blockpush();
        let s = State::new(vec![0.5, 0.93, 0.2, 0.2, 0.5, 0.99, 0.8, 0.2]);
        let next = env.step(&s, &Action::new(vec![0.0, 0.05])).unwrap();
        let d = ((next[0] - next[4]).powi(2) + (next[1] - next[5]).powi(2)).sqrt();
        assert!(d >= CONTACT_RADIUS - 1e-8, "{d}");
        assert!(next.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resets_are_seeded() {
        let env = blockpush();
        assert_eq!(env.reset(4), env.reset(4));
        assert_ne!(env.reset(4), env.reset(5));
        assert_eq!(EnvSpec::pointnav().reset(9).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn blockpush_goals_respect_band_and_distance() {
        let env = blockpush();
        for seed in 0..200 {
            let (s0, goal) = env.sample_task(seed);
            for &k in &goal.targets {
                let (gx, gy) = block(&goal.state, k);
                assert!((0.2..0.8).contains(&gx) && (0.2..0.8).contains(&gy));
                let (bx, by) = block(&s0, k);
                assert!(((gx - bx).powi(2) + (gy - by).powi(2)).sqrt() >= GOAL_MIN_DISTANCE);
            }
        }
    }

    #[test]
    fn grid_splat_normalisation_and_channels() {
        let env = EnvSpec::from_id("blockpush-grid-task1").unwrap();
        let c = |i: usize| (i as f64 + 0.5) / GRID_SIZE as f64;
        let s = State::new(vec![c(2), c(3), c(5), c(5), 0.41, 0.37, 0.999, 0.0]);
        let grid = env.render_grid(&s).unwrap();
        assert_eq!(grid.len(), 576);
        let channel_sum = |g: &Tensor, ch: usize| -> f64 {
            g.data().iter().skip(ch).step_by(GRID_CHANNELS).sum()
        };
        for ch in 0..GRID_CHANNELS {
            assert!((channel_sum(&grid, ch) - 1.0).abs() < 1e-9);
        }
        // agent exactly on a cell centre lands in a single cell
        assert!((grid.data()[(3 * GRID_SIZE + 2) * GRID_CHANNELS] - 1.0).abs() < 1e-9);
        assert!(grid.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut moved = s.clone().into_inner();
        moved[2] += 0.1;
        let moved = env.render_grid(&State::new(moved)).unwrap();
        for (i, (a, b)) in grid.data().iter().zip(moved.data()).enumerate() {
            if i % GRID_CHANNELS != 1 {
                assert_eq!(a, b);
            }
        }
        assert_eq!(grid, env.render_grid(&s).unwrap());
    }
}

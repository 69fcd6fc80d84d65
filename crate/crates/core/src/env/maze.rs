//! Continuous 2-D maze driven by `N` binary actuators.
//!
//! Actuator `i` pushes the agent by `step_size` at angle `2*pi*i/N`; the
//! displacement of a step is the vector sum over active actuators. A move
//! whose segment touches a wall or leaves the unit square is cancelled
//! entirely. Reaching the goal disc pays +100 and ends the episode; every
//! other step costs 0.1.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Environment, Step};
use crate::decomp::{ActionSpec, FactoredAction};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const GOAL_REWARD: f64 = 100.0;
pub const STEP_PENALTY: f64 = -0.1;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: Point,
    pub to: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeConfig {
    pub actuators: usize,
    pub step_size: f64,
    pub max_steps: usize,
    pub goal_center: Point,
    pub goal_radius: f64,
    pub start: Point,
    pub walls: Vec<Segment>,
    pub motion_noise_std: f64,
}

impl Default for MazeConfig {
    /// The "detour" preset: one wall across the lower-left half forces the
    /// agent right before it can climb to the goal.
    fn default() -> Self {
        MazeConfig {
            actuators: 3,
            step_size: 0.05,
            max_steps: 150,
            goal_center: [0.9, 0.9],
            goal_radius: 0.05,
            start: [0.1, 0.1],
            walls: vec![Segment {
                from: [0.0, 0.5],
                to: [0.7, 0.5],
            }],
            motion_noise_std: 0.0,
        }
    }
}

impl MazeConfig {
    /// Named layouts; `detour` is the default.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "detour" | "default" => Ok(Self::default()),
            "open" => Ok(MazeConfig {
                walls: Vec::new(),
                ..Self::default()
            }),
            other => Err(Error::config(format!("unknown maze preset `{other}`"))),
        }
    }

    pub fn with_actuators(mut self, n: usize) -> Self {
        self.actuators = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("maze: {m}")));
        if self.actuators == 0 {
            return bad("need at least one actuator");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(self.goal_radius > 0.0) {
            return bad("goal_radius must be positive");
        }
        if !(self.motion_noise_std >= 0.0) {
            return bad("motion_noise_std must be non-negative");
        }
        for (name, p) in [("start", self.start), ("goal_center", self.goal_center)] {
            if !in_unit_square(p) {
                return bad(&format!("{name} outside the unit square"));
            }
            if self.walls.iter().any(|w| point_on_segment(p, w)) {
                return bad(&format!("{name} lies on a wall"));
            }
        }
        Ok(())
    }

    pub fn action_spec(&self) -> ActionSpec {
        ActionSpec::uniform(self.actuators, 2).expect("actuators validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeState {
    pub position: Point,
    pub steps_elapsed: usize,
}

/// Result of [`Maze::step_from`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeStep {
    pub state: MazeState,
    pub reward: f64,
    /// Episode over, by goal or by the step cap.
    pub done: bool,
    /// Goal reached.
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct Maze {
    config: MazeConfig,
    directions: Vec<Point>,
    noise: Option<Normal<f64>>,
    rng: Rng,
    state: MazeState,
}

impl Maze {
    pub fn new(config: MazeConfig) -> Result<Self> {
        config.validate()?;
        let directions = actuator_directions(config.actuators);
        let noise = (config.motion_noise_std > 0.0)
            .then(|| Normal::new(0.0, config.motion_noise_std).expect("std validated"));
        let state = MazeState {
            position: config.start,
            steps_elapsed: 0,
        };
        Ok(Maze {
            config,
            directions,
            noise,
            rng: rng::stream(0, rng::role::ENV),
            state,
        })
    }

    pub fn config(&self) -> &MazeConfig {
        &self.config
    }

    pub fn state(&self) -> MazeState {
        self.state
    }

    /// Places the agent at an arbitrary position (mainly for tests and replay).
    pub fn set_state(&mut self, state: MazeState) {
        self.state = state;
    }

    /// Back to the start with a fresh noise stream.
    pub fn reset(&mut self, seed: u64) -> MazeState {
        self.rng = rng::stream(seed, rng::role::ENV);
        self.state = MazeState {
            position: self.config.start,
            steps_elapsed: 0,
        };
        self.state
    }

    /// Net displacement of `action` before noise.
    pub fn displacement(&self, action: &FactoredAction) -> Result<Point> {
        self.check_action(action)?;
        let on = action.indices();
        let n = self.directions.len();
        let mut total = [0.0, 0.0];
        let mut add = |d: Point| {
            total[0] += d[0];
            total[1] += d[1];
        };
        if n % 2 == 0 {
            // Opposite actuators are summed first so they cancel exactly.
            let half = n / 2;
            for i in 0..half {
                let mut pair = [0.0, 0.0];
                for j in [i, i + half] {
                    if on[j] == 1 {
                        pair[0] += self.directions[j][0];
                        pair[1] += self.directions[j][1];
                    }
                }
                add(pair);
            }
        } else {
            for (i, d) in self.directions.iter().enumerate() {
                if on[i] == 1 {
                    add(*d);
                }
            }
        }
        Ok([total[0] * self.config.step_size, total[1] * self.config.step_size])
    }

    /// Transition from an explicit state; the noise stream is the maze's own.
    pub fn step_from(&mut self, state: &MazeState, action: &FactoredAction) -> Result<MazeStep> {
        let mut d = self.displacement(action)?;
        if let Some(noise) = &self.noise {
            d[0] += noise.sample(&mut self.rng);
            d[1] += noise.sample(&mut self.rng);
        }
        let from = state.position;
        let to = [from[0] + d[0], from[1] + d[1]];
        let blocked = !in_unit_square(to)
            || self
                .config
                .walls
                .iter()
                .any(|w| segments_intersect(from, to, w.from, w.to));
        let position = if blocked { from } else { to };
        let steps_elapsed = state.steps_elapsed + 1;
        let at_goal = distance(position, self.config.goal_center) <= self.config.goal_radius;
        let reward = if at_goal { GOAL_REWARD } else { STEP_PENALTY };
        Ok(MazeStep {
            state: MazeState {
                position,
                steps_elapsed,
            },
            reward,
            done: at_goal || steps_elapsed >= self.config.max_steps,
            terminal: at_goal,
        })
    }

    fn check_action(&self, action: &FactoredAction) -> Result<()> {
        self.config.action_spec().validate(action)
    }
}

impl Environment for Maze {
    fn action_spec(&self) -> ActionSpec {
        self.config.action_spec()
    }

    fn observation_dim(&self) -> usize {
        2
    }

    fn observation_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![1.0, 1.0])
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        Maze::reset(self, seed).position.to_vec()
    }

    fn observation(&self) -> Vec<f64> {
        self.state.position.to_vec()
    }

    fn step(&mut self, action: &FactoredAction) -> Result<Step> {
        let current = self.state;
        let out = self.step_from(&current, action)?;
        self.state = out.state;
        Ok(Step {
            observation: out.state.position.to_vec(),
            reward: out.reward,
            done: out.done,
            terminal: out.terminal,
        })
    }
}

/// Unit vectors at angles `2*pi*i/n`, with exact antipodes for even `n` and
/// round-off below 1e-15 snapped to zero.
pub fn actuator_directions(n: usize) -> Vec<Point> {
    let snap = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
    let mut dirs: Vec<Point> = (0..n)
        .map(|i| {
            let angle = 2.0 * PI * i as f64 / n as f64;
            [snap(angle.cos()), snap(angle.sin())]
        })
        .collect();
    if n % 2 == 0 {
        for i in 0..n / 2 {
            dirs[i + n / 2] = [-dirs[i][0], -dirs[i][1]];
        }
    }
    dirs
}

/// Mean undiscounted return of uniformly random actuator settings.
pub fn random_policy_return(config: &MazeConfig, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::precondition("episodes must be at least 1"));
    }
    let mut maze = Maze::new(config.clone())?;
    let mut policy_rng = rng::stream(seed, rng::role::EXPLORE);
    let n = config.actuators;
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut state = maze.reset(seed.wrapping_add(ep as u64));
        loop {
            let action = FactoredAction((0..n).map(|_| policy_rng.gen_range(0..2)).collect());
            let out = maze.step_from(&state, &action)?;
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub position: Point,
    pub action: FactoredAction,
    pub reward: f64,
}

/// CSV with columns `step,x,y,action,reward`; the action is a bit string.
pub fn write_trajectory_csv<W: Write>(mut out: W, rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(out, "step,x,y,action,reward")?;
    for r in rows {
        let bits: String = r
            .action
            .indices()
            .iter()
            .map(|&b| if b == 1 { '1' } else { '0' })
            .collect();
        writeln!(out, "{},{},{},{},{}", r.step, r.position[0], r.position[1], bits, r.reward)?;
    }
    Ok(())
}

fn in_unit_square(p: Point) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn point_on_segment(p: Point, s: &Segment) -> bool {
    cross(s.from, s.to, p).abs() <= 1e-12 && within_box(p, s.from, s.to)
}

fn within_box(p: Point, a: Point, b: Point) -> bool {
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

/// Closed-segment intersection, touching included.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let seg_q = Segment { from: q1, to: q2 };
    let seg_p = Segment { from: p1, to: p2 };
    point_on_segment(p1, &seg_q)
        || point_on_segment(p2, &seg_q)
        || point_on_segment(q1, &seg_p)
        || point_on_segment(q2, &seg_p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(bits: &[usize]) -> FactoredAction {
        FactoredAction(bits.to_vec())
    }

    #[test]
    fn reset_starts_at_start() {
        let mut maze = Maze::new(MazeConfig::default()).unwrap();
        let s = maze.reset(3);
        assert_eq!(s.position, [0.1, 0.1]);
        assert_eq!(s.steps_elapsed, 0);
    }

    #[test]
    fn all_off_stays_put() {
        let mut maze = Maze::new(MazeConfig::default()).unwrap();
        let s = maze.reset(0);
        let out = maze.step_from(&s, &act(&[0, 0, 0])).unwrap();
        assert_eq!(out.state.position, s.position);
        assert_eq!(out.reward, -0.1);
        assert!(!out.done);
    }

    #[test]
    fn opposite_actuators_cancel() {
        let mut maze = Maze::new(MazeConfig::default().with_actuators(4)).unwrap();
        let s = maze.reset(0);
        for bits in [[1, 0, 1, 0], [0, 1, 0, 1], [1, 1, 1, 1]] {
            let out = maze.step_from(&s, &act(&bits)).unwrap();
            assert_eq!(out.state.position, s.position);
        }
    }

    #[test]
    fn entering_goal_pays_and_terminates() {
        let config = MazeConfig::default().with_actuators(1);
        let mut maze = Maze::new(config.clone()).unwrap();
        let start = [config.goal_center[0] - config.step_size, config.goal_center[1]];
        let out = maze
            .step_from(
                &MazeState {
                    position: start,
                    steps_elapsed: 4,
                },
                &act(&[1]),
            )
            .unwrap();
        let before = distance(start, config.goal_center);
        let after = distance(out.state.position, config.goal_center);
        assert!(after < before && after <= config.goal_radius);
        assert_eq!(out.reward, 100.0);
        assert!(out.done && out.terminal);
    }

    #[test]
    fn wall_blocks_whole_move() {
        let mut maze = Maze::new(MazeConfig::default().with_actuators(4)).unwrap();
        let s = MazeState {
            position: [0.3, 0.48],
            steps_elapsed: 0,
        };
        // actuator 1 points straight up, across the wall at y = 0.5
        let out = maze.step_from(&s, &act(&[0, 1, 0, 0])).unwrap();
        assert_eq!(out.state.position, s.position);
        // past the wall's end the same move is free
        let s = MazeState {
            position: [0.8, 0.48],
            steps_elapsed: 0,
        };
        let out = maze.step_from(&s, &act(&[0, 1, 0, 0])).unwrap();
        assert!((out.state.position[1] - 0.53).abs() < 1e-12);
    }

    #[test]
    fn leaving_unit_square_is_cancelled() {
        let mut maze = Maze::new(MazeConfig::default().with_actuators(4)).unwrap();
        let s = MazeState {
            position: [0.02, 0.3],
            steps_elapsed: 0,
        };
        let out = maze.step_from(&s, &act(&[0, 0, 1, 0])).unwrap();
        assert_eq!(out.state.position, s.position);
    }

    #[test]
    fn step_cap_ends_episode_without_terminal() {
        let config = MazeConfig {
            max_steps: 2,
            ..MazeConfig::default()
        };
        let mut maze = Maze::new(config).unwrap();
        let s = maze.reset(0);
        let s1 = maze.step_from(&s, &act(&[0, 0, 0])).unwrap();
        assert!(!s1.done);
        let s2 = maze.step_from(&s1.state, &act(&[0, 0, 0])).unwrap();
        assert!(s2.done && !s2.terminal);
    }

    #[test]
    fn malformed_action_names_dimension() {
        let mut maze = Maze::new(MazeConfig::default()).unwrap();
        let s = maze.reset(0);
        let err = maze.step_from(&s, &act(&[0, 2, 0])).unwrap_err();
        assert!(matches!(err, Error::InvalidAction { dim: 1, .. }));
        assert!(maze.step_from(&s, &act(&[0, 1])).is_err());
    }

    #[test]
    fn noisy_trajectories_repeat_under_same_seed() {
        let config = MazeConfig {
            motion_noise_std: 0.01,
            ..MazeConfig::default()
        };
        let run = |seed| {
            let mut maze = Maze::new(config.clone()).unwrap();
            let mut s = maze.reset(seed);
            let mut path = Vec::new();
            for _ in 0..20 {
                s = maze.step_from(&s, &act(&[1, 0, 0])).unwrap().state;
                path.push(s.position);
            }
            path
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn reset_forgets_history() {
        let mut maze = Maze::new(MazeConfig::default()).unwrap();
        let mut s = maze.reset(1);
        for _ in 0..10 {
            s = maze.step_from(&s, &act(&[1, 0, 0])).unwrap().state;
        }
        let fresh = maze.reset(1);
        assert_eq!(fresh, Maze::new(MazeConfig::default()).unwrap().reset(1));
    }

    #[test]
    fn invalid_configs_rejected() {
        let on_wall = MazeConfig {
            start: [0.3, 0.5],
            ..MazeConfig::default()
        };
        assert!(Maze::new(on_wall).is_err());
        let outside = MazeConfig {
            goal_center: [1.2, 0.5],
            ..MazeConfig::default()
        };
        assert!(Maze::new(outside).is_err());
        assert!(MazeConfig::preset("nope").is_err());
    }

    #[test]
    fn random_return_unreachable_goal() {
        // start boxed in by walls: every move is cancelled.
        let config = MazeConfig {
            max_steps: 10,
            start: [0.5, 0.5],
            walls: vec![
                Segment { from: [0.45, 0.49], to: [0.55, 0.49] },
                Segment { from: [0.45, 0.51], to: [0.55, 0.51] },
                Segment { from: [0.49, 0.45], to: [0.49, 0.55] },
                Segment { from: [0.51, 0.45], to: [0.51, 0.55] },
            ],
            ..MazeConfig::default()
        };
        assert!((random_policy_return(&config, 7, 3).unwrap() + 1.0).abs() < 1e-12);
        let a = random_policy_return(&MazeConfig::default(), 5, 9).unwrap();
        let b = random_policy_return(&MazeConfig::default(), 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_csv() {
        let mut buf = Vec::new();
        let rows = vec![TrajectoryRow {
            step: 0,
            position: [0.1, 0.2],
            action: act(&[1, 0, 1]),
            reward: -0.1,
        }];
        write_trajectory_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,x,y,action,reward\n0,0.1,0.2,101,-0.1\n");
    }
}

//! Environments with factorised discrete actions.

mod maze;

pub use maze::{
    actuator_directions, random_policy_return, segments_intersect, write_trajectory_csv, Maze, MazeConfig,
    MazeState, MazeStep, Point, Segment, TrajectoryRow, GOAL_REWARD, STEP_PENALTY,
};

use crate::decomp::{ActionSpec, FactoredAction};
use crate::error::Result;

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode finished (goal or step cap).
    pub done: bool,
    /// Finished by reaching an absorbing state; false on truncation.
    pub terminal: bool,
}

/// Episodic environment holding its own current state.
pub trait Environment {
    fn action_spec(&self) -> ActionSpec;
    fn observation_dim(&self) -> usize;
    /// Componentwise lower and upper limits of observations.
    fn observation_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn max_steps(&self) -> usize;
    /// Starts a new episode; `seed` drives any stochastic dynamics.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn observation(&self) -> Vec<f64>;
    fn step(&mut self, action: &FactoredAction) -> Result<Step>;
}

/// Hand-written maze controller: head for the goal when the straight line is
/// clear of walls, otherwise for the free end of the first blocking wall.
/// Picks, among all actuator settings, the legal move that lands closest to
/// that waypoint.
pub fn scripted_maze_action(maze: &Maze, position: Point) -> FactoredAction {
    let config = maze.config();
    let goal = config.goal_center;
    let blocking = config
        .walls
        .iter()
        .find(|w| segments_intersect(position, goal, w.from, w.to));
    let target = match blocking {
        None => goal,
        Some(w) => {
            // the wall end nearer the goal, pushed a step beyond it
            let end = if dist2(w.from, goal) < dist2(w.to, goal) { w.from } else { w.to };
            let other = if end == w.from { w.to } else { w.from };
            let (dx, dy) = (end[0] - other[0], end[1] - other[1]);
            let len = (dx * dx + dy * dy).sqrt().max(1e-12);
            let push = 2.0 * config.step_size;
            [end[0] + dx / len * push, end[1] + dy / len * push]
        }
    };
    let spec = config.action_spec();
    let mut best = (f64::INFINITY, FactoredAction(vec![0; config.actuators]));
    for action in spec.atomic_actions() {
        let d = maze.displacement(&action).expect("enumerated actions are valid");
        let next = [position[0] + d[0], position[1] + d[1]];
        let legal = (0.0..=1.0).contains(&next[0])
            && (0.0..=1.0).contains(&next[1])
            && !config.walls.iter().any(|w| segments_intersect(position, next, w.from, w.to));
        if !legal {
            continue;
        }
        let score = dist2(next, target);
        if score < best.0 {
            best = (score, action);
        }
    }
    best.1
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

//! Noisy 2-D point mass in the unit box with goal-indexed intentions.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    /// Displacement per unit action.
    pub step_size: f64,
    pub noise: f64,
    /// One goal per intention.
    pub goals: Vec<[f64; 2]>,
    /// Goal rewarded during fine-tuning and evaluation.
    pub task_goal: usize,
    pub goal_radius: f64,
    pub horizon: usize,
}

impl PointMassEnv {
    pub fn new(step_size: f64, noise: f64, goals: Vec<[f64; 2]>, task_goal: usize, goal_radius: f64, horizon: usize) -> Result<Self> {
        if noise < 0.0 || step_size <= 0.0 || goal_radius <= 0.0 {
            return Err(invalid("point-mass noise must be non-negative and step/radius positive"));
        }
        if goals.is_empty() || task_goal >= goals.len() {
            return Err(invalid(format!("task goal {task_goal} out of range for {} goals", goals.len())));
        }
        Ok(Self { step_size, noise, goals, task_goal, goal_radius, horizon })
    }

    /// Two goals in opposite corners.
    pub fn opposite_goals(horizon: usize) -> Self {
        Self::new(0.1, 0.02, vec![[0.15, 0.15], [0.85, 0.85]], 1, 0.1, horizon).expect("valid defaults")
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [0.4 + 0.2 * rng.random::<f64>(), 0.4 + 0.2 * rng.random::<f64>()]
    }

    pub fn step<R: Rng + ?Sized>(&self, s: [f64; 2], a: &[f64], rng: &mut R) -> [f64; 2] {
        let mut out = [0.0; 2];
        for i in 0..2 {
            let ai = a[i].clamp(-1.0, 1.0);
            let n: f64 = rng.sample(StandardNormal);
            out[i] = (s[i] + self.step_size * ai + self.noise * n).clamp(0.0, 1.0);
        }
        out
    }

    pub fn reward(&self, s: &[f64]) -> f64 {
        let g = self.goals[self.task_goal];
        let d2 = (s[0] - g[0]).powi(2) + (s[1] - g[1]).powi(2);
        if d2 < self.goal_radius * self.goal_radius {
            1.0
        } else {
            0.0
        }
    }
}

/// Noisy proportional controller toward the intention's goal.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalController {
    pub gain: f64,
    pub action_noise: f64,
}

impl Default for GoalController {
    fn default() -> Self {
        Self { gain: 4.0, action_noise: 0.3 }
    }
}

impl GoalController {
    pub fn mean_action(&self, s: &[f64], goal: [f64; 2]) -> [f64; 2] {
        [(self.gain * (goal[0] - s[0])).clamp(-1.0, 1.0), (self.gain * (goal[1] - s[1])).clamp(-1.0, 1.0)]
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], goal: [f64; 2], rng: &mut R) -> [f64; 2] {
        let m = self.mean_action(s, goal);
        let n0: f64 = rng.sample(StandardNormal);
        let n1: f64 = rng.sample(StandardNormal);
        [(m[0] + self.action_noise * n0).clamp(-1.0, 1.0), (m[1] + self.action_noise * n1).clamp(-1.0, 1.0)]
    }
}

//! Built-in desk-scale tasks.

use super::pointmass::{GoalController, PointMassEnv};
use super::tabular::{random_embeddings, TabularMdp, TabularPolicy};
use super::{Env, IntentionPolicies, IntentionedBehavior};
use crate::error::{invalid, Result};
use crate::rng::{stream_rng, Stream};

/// Embeddings are part of the task definition, not of the experiment seed.
const EMBEDDING_SEED: u64 = 0x1f0;

pub const FORK_SAFE_REWARD: f64 = 0.55;

/// Fork state indices.
pub mod fork {
    pub const SAFE: usize = 0;
    pub const START: usize = 1;
    pub const HUB: usize = 2;
    pub const C1: usize = 3;
    pub const C2: usize = 4;
    pub const GOAL_A: usize = 5;
    pub const GOAL_B: usize = 6;
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub env: Env,
    pub behavior: IntentionedBehavior,
    pub horizon: usize,
}

impl Task {
    pub fn by_name(name: &str, gamma: f64, embed_dim: usize, horizon: Option<usize>) -> Result<Self> {
        match name {
            "chain3" => chain3(gamma, embed_dim, horizon.unwrap_or(30)),
            "fork" => fork_task(gamma, embed_dim, horizon.unwrap_or(20)),
            "pointmass" => pointmass_two_goals(horizon.unwrap_or(30)),
            other => Err(invalid(format!("unknown task `{other}` (expected chain3, fork or pointmass)"))),
        }
    }

    pub fn mdp(&self) -> Option<&TabularMdp> {
        match &self.env {
            Env::Tabular(m) => Some(m),
            Env::PointMass(_) => None,
        }
    }

    pub fn tabular_policies(&self) -> Option<&[TabularPolicy]> {
        match &self.behavior.policies {
            IntentionPolicies::Tabular(ps) => Some(ps),
            IntentionPolicies::Goals(_) => None,
        }
    }
}

fn embeddings(n: usize, dim: usize) -> Vec<Vec<f64>> {
    random_embeddings(n, dim, &mut stream_rng(EMBEDDING_SEED, Stream::Embedding, n as u64))
}

/// Three-state ring. Action 0 mostly stays, action 1 mostly advances.
pub fn chain3(gamma: f64, embed_dim: usize, horizon: usize) -> Result<Task> {
    let mut p = vec![0.0; 3 * 2 * 3];
    for s in 0..3 {
        let nxt = (s + 1) % 3;
        p[(s * 2) * 3 + s] = 0.9;
        p[(s * 2) * 3 + nxt] = 0.1;
        p[(s * 2 + 1) * 3 + s] = 0.2;
        p[(s * 2 + 1) * 3 + nxt] = 0.8;
    }
    let mdp = TabularMdp::new(3, 2, p, vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], embeddings(3, embed_dim), gamma)?;
    let env = Env::Tabular(mdp);
    let pol = TabularPolicy::new(3, 2, vec![0.5, 0.5, 0.3, 0.7, 0.6, 0.4])?;
    let behavior = IntentionedBehavior::new(vec![0.5, 0.5], IntentionPolicies::Tabular(vec![pol.clone(), pol]), &env)?;
    Ok(Task { name: "chain3".into(), env, behavior, horizon })
}

/// Two intentions that share an opening and then split toward opposite goals.
///
/// From `START`, `LEFT` reaches an absorbing safe state with a moderate
/// reward and `RIGHT` reaches `HUB`. At `HUB`, intention A turns right into a
/// two-step corridor ending at the rewarding goal A; intention B turns left
/// into the unrewarding goal B. Inside the corridor `LEFT` steps back.
pub fn fork_task(gamma: f64, embed_dim: usize, horizon: usize) -> Result<Task> {
    use fork::*;
    let (ns, na) = (7, 2);
    let mut p = vec![0.0; ns * na * ns];
    let mut set = |s: usize, a: usize, s2: usize| p[(s * na + a) * ns + s2] = 1.0;
    set(START, LEFT, SAFE);
    set(START, RIGHT, HUB);
    set(HUB, LEFT, GOAL_B);
    set(HUB, RIGHT, C1);
    set(C1, LEFT, HUB);
    set(C1, RIGHT, C2);
    set(C2, LEFT, C1);
    set(C2, RIGHT, GOAL_A);
    for s in [SAFE, GOAL_A, GOAL_B] {
        set(s, LEFT, s);
        set(s, RIGHT, s);
    }
    let mut r = vec![0.0; ns];
    r[SAFE] = FORK_SAFE_REWARD;
    r[GOAL_A] = 1.0;
    let mut init = vec![0.0; ns];
    init[START] = 1.0;
    let mdp = TabularMdp::new(ns, na, p, r, init, embeddings(ns, embed_dim), gamma)?;
    let env = Env::Tabular(mdp);

    let row = |left: f64| [left, 1.0 - left];
    let mut a_rows = vec![[0.5, 0.5]; ns];
    a_rows[START] = row(0.25);
    a_rows[HUB] = row(0.0);
    a_rows[C1] = row(0.0);
    a_rows[C2] = row(0.0);
    let mut b_rows = a_rows.clone();
    b_rows[HUB] = row(1.0);
    let a = TabularPolicy::new(ns, na, a_rows.concat())?;
    let b = TabularPolicy::new(ns, na, b_rows.concat())?;
    let behavior = IntentionedBehavior::new(vec![0.5, 0.5], IntentionPolicies::Tabular(vec![a, b]), &env)?;
    Ok(Task { name: "fork".into(), env, behavior, horizon })
}

/// Point mass with goals in opposite corners; the task rewards the second.
pub fn pointmass_two_goals(horizon: usize) -> Result<Task> {
    let env = Env::PointMass(PointMassEnv::opposite_goals(horizon));
    let behavior = IntentionedBehavior::new(vec![0.5, 0.5], IntentionPolicies::Goals(GoalController::default()), &env)?;
    Ok(Task { name: "pointmass".into(), env, behavior, horizon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{exact_q, expected_return};

    #[test]
    fn fork_values_separate_gpi_from_one_step() {
        let t = fork_task(0.9, 4, 20).unwrap();
        let mdp = t.mdp().unwrap();
        let ps = t.tabular_policies().unwrap();
        let q_a = exact_q(mdp, &ps[0], 0.9).unwrap();
        let q_b = exact_q(mdp, &ps[1], 0.9).unwrap();
        let idx = |s: usize, a: usize| s * 2 + a;
        use fork::*;
        // Greedy over intentions prefers the fork, the mixture prefers safety.
        let gpi_right = q_a[idx(START, RIGHT)].max(q_b[idx(START, RIGHT)]);
        let mix_right = 0.5 * (q_a[idx(START, RIGHT)] + q_b[idx(START, RIGHT)]);
        let left = q_a[idx(START, LEFT)];
        assert!(gpi_right > left + 1.0, "{gpi_right} vs {left}");
        assert!(mix_right < left - 1.0, "{mix_right} vs {left}");

        let go = TabularPolicy::deterministic(&[0, 1, 1, 1, 1, 0, 0], 2).unwrap();
        let safe = TabularPolicy::deterministic(&[0, 0, 0, 0, 0, 0, 0], 2).unwrap();
        let r_go = expected_return(mdp, &go, 20).unwrap();
        let r_safe = expected_return(mdp, &safe, 20).unwrap();
        assert!((r_go - 16.0).abs() < 1e-12);
        assert!((r_safe - 19.0 * FORK_SAFE_REWARD).abs() < 1e-12);
    }

    #[test]
    fn tasks_build() {
        for name in ["chain3", "fork", "pointmass"] {
            let t = Task::by_name(name, 0.9, 3, None).unwrap();
            assert!(t.env.state_dim() >= 2);
        }
        assert!(Task::by_name("nope", 0.9, 3, None).is_err());
    }
}

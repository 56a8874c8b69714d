//! Synthetic environments, intention-structured behaviour, offline datasets.

mod dataset;
pub mod io;
pub mod pointmass;
pub mod tabular;
pub mod tasks;

use rand::Rng;

pub use dataset::{collect_dataset, label_rewards, sample_discounted_future, Split, TransitionBatch, TransitionDataset};
pub use pointmass::{GoalController, PointMassEnv};
pub use tabular::{
    decode_action, exact_occupancy, exact_q, expected_return, policy_evaluation_q, total_variation, Occupancy,
    TabularMdp, TabularPolicy,
};

use crate::error::{invalid, Result};

/// Environment dynamics shared by dataset collection and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Tabular(TabularMdp),
    PointMass(PointMassEnv),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvState {
    Discrete(usize),
    Point([f64; 2]),
}

impl Env {
    pub fn state_dim(&self) -> usize {
        match self {
            Env::Tabular(m) => m.embed_dim(),
            Env::PointMass(_) => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::Tabular(m) => m.n_actions(),
            Env::PointMass(_) => 2,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        match self {
            Env::Tabular(m) => EnvState::Discrete(m.sample_initial(rng)),
            Env::PointMass(p) => EnvState::Point(p.reset(rng)),
        }
    }

    /// Tabular environments act on the arg-max of the action vector.
    pub fn step<R: Rng + ?Sized>(&self, s: &EnvState, action: &[f64], rng: &mut R) -> EnvState {
        match (self, s) {
            (Env::Tabular(m), EnvState::Discrete(i)) => EnvState::Discrete(m.sample_next(*i, decode_action(action), rng)),
            (Env::PointMass(p), EnvState::Point(x)) => EnvState::Point(p.step(*x, action, rng)),
            _ => panic!("state kind does not match environment"),
        }
    }

    pub fn observe(&self, s: &EnvState) -> Vec<f64> {
        match (self, s) {
            (Env::Tabular(m), EnvState::Discrete(i)) => m.embedding(*i).to_vec(),
            (_, EnvState::Point(x)) => x.to_vec(),
            _ => panic!("state kind does not match environment"),
        }
    }

    pub fn reward(&self, s: &EnvState) -> f64 {
        match (self, s) {
            (Env::Tabular(m), EnvState::Discrete(i)) => m.rewards()[*i],
            (Env::PointMass(p), EnvState::Point(x)) => p.reward(x),
            _ => panic!("state kind does not match environment"),
        }
    }

    /// Reward of an observation; tabular observations decode to the nearest state.
    pub fn reward_of_obs(&self, obs: &[f64]) -> f64 {
        match self {
            Env::Tabular(m) => m.rewards()[m.decode(obs)],
            Env::PointMass(p) => p.reward(obs),
        }
    }
}

/// Per-intention behavioural policies.
#[derive(Debug, Clone, PartialEq)]
pub enum IntentionPolicies {
    Tabular(Vec<TabularPolicy>),
    /// Intention `k` steers toward goal `k` of the point-mass environment.
    Goals(GoalController),
}

/// Mixture of intention-indexed behavioural policies.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentionedBehavior {
    pub weights: Vec<f64>,
    pub policies: IntentionPolicies,
}

impl IntentionedBehavior {
    pub fn new(weights: Vec<f64>, policies: IntentionPolicies, env: &Env) -> Result<Self> {
        let k = weights.len();
        if k < 2 {
            return Err(invalid("intentioned behaviour needs at least two intentions"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("intention weights must be a probability vector"));
        }
        match (&policies, env) {
            (IntentionPolicies::Tabular(ps), Env::Tabular(m)) => {
                if ps.len() != k {
                    return Err(invalid(format!("{} policies for {k} intentions", ps.len())));
                }
                if ps.iter().any(|p| p.n_states() != m.n_states() || p.n_actions() != m.n_actions()) {
                    return Err(invalid("behaviour policy does not match the MDP"));
                }
            }
            (IntentionPolicies::Goals(_), Env::PointMass(p)) => {
                if p.goals.len() != k {
                    return Err(invalid(format!("{} goals for {k} intentions", p.goals.len())));
                }
            }
            _ => return Err(invalid("behaviour kind does not match environment")),
        }
        Ok(Self { weights, policies })
    }

    pub fn n_intentions(&self) -> usize {
        self.weights.len()
    }

    pub fn act<R: Rng + ?Sized>(&self, env: &Env, s: &EnvState, intention: usize, rng: &mut R) -> Vec<f64> {
        match (&self.policies, env, s) {
            (IntentionPolicies::Tabular(ps), Env::Tabular(m), EnvState::Discrete(i)) => m.one_hot(ps[intention].sample(*i, rng)),
            (IntentionPolicies::Goals(c), Env::PointMass(p), EnvState::Point(x)) => c.act(x, p.goals[intention], rng).to_vec(),
            _ => panic!("behaviour kind does not match environment"),
        }
    }

    /// Mix every intention's policy toward uniform (tabular) or add action noise (goals).
    pub fn perturbed(&self, eps: f64) -> Result<Self> {
        let policies = match &self.policies {
            IntentionPolicies::Tabular(ps) => {
                IntentionPolicies::Tabular(ps.iter().map(|p| p.perturbed(eps)).collect::<Result<_>>()?)
            }
            IntentionPolicies::Goals(c) => {
                IntentionPolicies::Goals(GoalController { gain: c.gain, action_noise: c.action_noise + eps })
            }
        };
        Ok(Self { weights: self.weights.clone(), policies })
    }
}

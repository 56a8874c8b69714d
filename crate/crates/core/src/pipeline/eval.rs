//! Policy rollouts and exact tabular scoring.

use crate::autodiff::{ParamSet, Tensor};
use crate::envs::{decode_action, expected_return, Env, TabularMdp, TabularPolicy};
use crate::error::{invalid, shape_err, Result};
use crate::nets::PolicyModel;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), returns }
    }
}

/// Undiscounted return `Σ_{t<H} r(s_t)` of the deterministic policy mean.
/// Episode `i` draws from its own stream, so results do not depend on `episodes`.
pub fn evaluate_policy(
    env: &Env,
    policy: &PolicyModel,
    params: &ParamSet,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let sd = env.state_dim();
    if policy.mlp.config.input_dim != sd || policy.action_dim() != env.action_dim() {
        return Err(shape_err(
            "evaluate",
            format!(
                "policy {}→{} vs environment {sd}→{}",
                policy.mlp.config.input_dim,
                policy.action_dim(),
                env.action_dim()
            ),
        ));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = stream_rng(seed, Stream::Eval, ep as u64);
        let mut s = env.reset(&mut rng);
        let mut total = 0.0;
        for _ in 0..horizon {
            total += env.reward(&s);
            let obs = Tensor::matrix(1, sd, env.observe(&s))?;
            let a = policy.mean_action(params, &obs)?;
            s = env.step(&s, a.data(), &mut rng);
        }
        returns.push(total);
    }
    Ok(EvalStats::from_returns(returns))
}

/// Deterministic tabular policy: argmax of the policy mean at each state's embedding.
pub fn greedy_tabular_policy(mdp: &TabularMdp, policy: &PolicyModel, params: &ParamSet) -> Result<TabularPolicy> {
    let obs = Tensor::from_rows(&(0..mdp.n_states()).map(|s| mdp.embedding(s).to_vec()).collect::<Vec<_>>())?;
    let means = policy.mean_action(params, &obs)?;
    let actions: Vec<usize> = (0..mdp.n_states()).map(|s| decode_action(means.row(s))).collect();
    TabularPolicy::deterministic(&actions, mdp.n_actions())
}

/// Exact `Σ_{t<H} E[r(s_t)]` of [`greedy_tabular_policy`].
pub fn exact_greedy_return(mdp: &TabularMdp, policy: &PolicyModel, params: &ParamSet, horizon: usize) -> Result<f64> {
    expected_return(mdp, &greedy_tabular_policy(mdp, policy, params)?, horizon)
}

/// Mean of the last three evaluation means (fewer if fewer exist).
pub fn final_score(eval_means: &[f64]) -> Option<f64> {
    if eval_means.is_empty() {
        return None;
    }
    let tail = &eval_means[eval_means.len().saturating_sub(3)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tasks::fork_task;

    #[test]
    fn zero_reward_env_returns_zero() {
        let t = fork_task(0.9, 4, 20).unwrap();
        let mdp = t.mdp().unwrap().with_rewards(vec![0.0; 7]).unwrap();
        let env = Env::Tabular(mdp);
        let policy = PolicyModel::new(4, 2, &[8]).unwrap();
        let p = policy.init(&mut stream_rng(0, Stream::Init, 0));
        let stats = evaluate_policy(&env, &policy, &p, 3, 20, 0).unwrap();
        assert_eq!(stats.returns, vec![0.0; 3]);
        assert_eq!(stats.std, 0.0);
    }

    #[test]
    fn rollouts_match_exact_return_and_repeat() {
        let t = fork_task(0.9, 4, 20).unwrap();
        let mdp = t.mdp().unwrap();
        let policy = PolicyModel::new(4, 2, &[8]).unwrap();
        let p = policy.init(&mut stream_rng(1, Stream::Init, 0));
        let stats = evaluate_policy(&t.env, &policy, &p, 5, 20, 9).unwrap();
        // Deterministic dynamics and policy: every episode equals the exact value.
        let exact = exact_greedy_return(mdp, &policy, &p, 20).unwrap();
        for r in &stats.returns {
            assert!((r - exact).abs() < 1e-12);
        }
        assert_eq!(stats, evaluate_policy(&t.env, &policy, &p, 5, 20, 9).unwrap());
        let wrong = PolicyModel::new(3, 2, &[8]).unwrap();
        let wp = wrong.init(&mut stream_rng(1, Stream::Init, 0));
        assert!(evaluate_policy(&t.env, &wrong, &wp, 1, 20, 0).is_err());
    }

    #[test]
    fn stochastic_rollouts_within_three_standard_errors() {
        let t = crate::envs::tasks::chain3(0.9, 4, 30).unwrap();
        let mdp = t.mdp().unwrap();
        let policy = PolicyModel::new(4, 2, &[8]).unwrap();
        let p = policy.init(&mut stream_rng(2, Stream::Init, 0));
        let exact = exact_greedy_return(mdp, &policy, &p, 30).unwrap();
        let stats = evaluate_policy(&t.env, &policy, &p, 2000, 30, 4).unwrap();
        let se = stats.std / (stats.returns.len() as f64).sqrt();
        assert!(se > 0.0);
        assert!((stats.mean - exact).abs() < 3.0 * se, "{} vs {exact} (se {se})", stats.mean);
    }

    #[test]
    fn final_score_uses_last_three() {
        assert_eq!(final_score(&[1.0, 2.0, 3.0, 4.0, 5.0]), Some(4.0));
        assert_eq!(final_score(&[2.0]), Some(2.0));
        assert_eq!(final_score(&[]), None);
    }
}

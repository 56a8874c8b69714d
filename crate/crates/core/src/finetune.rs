//! Fine-tuning objectives: reward regression, Monte-Carlo `Q_z`, expectile
//! distillation, the regularised actor, and the naive-GPI / one-step baselines.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamSet, Tensor, Var};
use crate::envs::Env;
use crate::error::{invalid, shape_err, Result};
use crate::flow::{euler_sample, euler_sample_graph, VectorFieldModel};
use crate::nets::{gaussian_log_prob, gaussian_sample, Mlp, MlpConfig, PolicyModel};

/// Knobs of the fine-tuning stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    /// Future samples per `Q_z` estimate.
    pub num_future: usize,
    pub expectile: f64,
    pub alpha: f64,
    /// Intentions per row for naive GPI.
    pub num_intentions: usize,
    /// The actor steps once every this many iterations.
    pub policy_update_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { num_future: 16, expectile: 0.9, alpha: 0.3, num_intentions: 32, policy_update_every: 4 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_future == 0 {
            return Err(invalid("number of future samples must be at least 1"));
        }
        check_expectile(self.expectile)?;
        if !(self.alpha >= 0.0) {
            return Err(invalid(format!("BC coefficient must be non-negative, got {}", self.alpha)));
        }
        if self.num_intentions == 0 {
            return Err(invalid("number of intentions must be at least 1"));
        }
        if self.policy_update_every == 0 {
            return Err(invalid("policy update period must be at least 1"));
        }
        Ok(())
    }
}

fn check_expectile(mu: f64) -> Result<()> {
    if !(0.5..1.0).contains(&mu) {
        return Err(invalid(format!("expectile must lie in [0.5, 1), got {mu}")));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("discount must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// `r_η(s)`, one scalar per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardPredictor {
    pub mlp: Mlp,
}

impl RewardPredictor {
    pub fn new(state_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(MlpConfig::new(state_dim, hidden, 1, true)?)? })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        self.mlp.init(rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, states: Var) -> Result<Var> {
        self.mlp.forward(g, p, states)
    }

    pub fn apply(&self, p: &ParamSet, states: &Tensor) -> Result<Tensor> {
        self.mlp.apply(p, states)
    }
}

/// `mean (r_η(s) − r)²`; masked (NaN) labels are rejected.
pub fn reward_loss(g: &mut Graph, pred: &RewardPredictor, p: &Bound, states: &Tensor, rewards: &Tensor) -> Result<Var> {
    if rewards.shape() != [states.rows(), 1] {
        return Err(shape_err("reward_loss", format!("rewards {:?} for {} states", rewards.shape(), states.rows())));
    }
    if rewards.data().iter().any(|r| r.is_nan()) {
        return Err(invalid("reward loss needs a labelled batch"));
    }
    let s = g.constant(states.clone());
    let out = pred.forward(g, p, s)?;
    let r = g.constant(rewards.clone());
    let d = g.sub(out, r)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Per-state reward used inside Monte-Carlo Q estimates.
pub trait StateReward {
    /// `[n, sd] -> [n, 1]`.
    fn rewards(&self, states: &Tensor) -> Result<Tensor>;
}

/// A trained predictor with frozen parameters.
#[derive(Debug, Clone, Copy)]
pub struct LearnedReward<'a> {
    pub model: &'a RewardPredictor,
    pub params: &'a ParamSet,
}

impl StateReward for LearnedReward<'_> {
    fn rewards(&self, states: &Tensor) -> Result<Tensor> {
        self.model.apply(self.params, states)
    }
}

/// The environment's own reward (tabular: nearest-embedding decode).
impl StateReward for Env {
    fn rewards(&self, states: &Tensor) -> Result<Tensor> {
        let r = (0..states.rows()).map(|i| self.reward_of_obs(states.row(i))).collect();
        Tensor::matrix(states.rows(), 1, r)
    }
}

/// Monte-Carlo `Q_z(s, a)` from caller-provided noise `eps` of shape `[n·N, sd]`;
/// rows `i·N..(i+1)·N` belong to input row `i`. Returns `[n, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_q_z_with_noise(
    vf: &VectorFieldModel,
    vf_p: &ParamSet,
    reward: &dyn StateReward,
    s: &Tensor,
    a: &Tensor,
    z: &Tensor,
    eps: &Tensor,
    num_future: usize,
    gamma: f64,
    euler_steps: usize,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    if num_future == 0 {
        return Err(invalid("number of future samples must be at least 1"));
    }
    let n = s.rows();
    if eps.rows() != n * num_future {
        return Err(shape_err("estimate_q_z", format!("{} noise rows for {n}×{num_future}", eps.rows())));
    }
    let s_f = euler_sample(
        vf,
        vf_p,
        eps,
        &s.repeat_rows(num_future),
        &a.repeat_rows(num_future),
        &z.repeat_rows(num_future),
        euler_steps,
    )?;
    let r = reward.rewards(&s_f)?;
    let scale = 1.0 / ((1.0 - gamma) * num_future as f64);
    let q = r.data().chunks_exact(num_future).map(|c| c.iter().sum::<f64>() * scale).collect();
    Tensor::matrix(n, 1, q)
}

/// [`estimate_q_z_with_noise`] with fresh `N(0, I)` noise.
#[allow(clippy::too_many_arguments)]
pub fn estimate_q_z<R: Rng + ?Sized>(
    vf: &VectorFieldModel,
    vf_p: &ParamSet,
    reward: &dyn StateReward,
    s: &Tensor,
    a: &Tensor,
    z: &Tensor,
    num_future: usize,
    gamma: f64,
    euler_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = Tensor::randn(&[s.rows() * num_future, vf.state_dim], rng);
    estimate_q_z_with_noise(vf, vf_p, reward, s, a, z, &eps, num_future, gamma, euler_steps)
}

/// Scalar asymmetric square `|μ − 1(x < 0)|·x²`.
pub fn expectile_loss(x: f64, mu: f64) -> Result<f64> {
    check_expectile(mu)?;
    Ok(if x >= 0.0 { mu * x * x } else { (1.0 - mu) * x * x })
}

/// Twin `(s, a) -> Q` heads stored under `q0/` and `q1/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Critic {
    pub heads: [Mlp; 2],
}

impl Critic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        let cfg = MlpConfig::new(state_dim + action_dim, hidden, 1, true)?;
        Ok(Self { heads: [Mlp::new(cfg.clone())?, Mlp::new(cfg)?] })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = self.heads[0].init(rng).prefixed("q0");
        p.extend(self.heads[1].init(rng).prefixed("q1"));
        p
    }

    /// Both heads, each `[n, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, s: Var, a: Var) -> Result<[Var; 2]> {
        let x = g.concat(&[s, a])?;
        let q0 = self.heads[0].forward(g, &p.strip_prefix("q0"), x)?;
        let q1 = self.heads[1].forward(g, &p.strip_prefix("q1"), x)?;
        Ok([q0, q1])
    }

    pub fn min_q(&self, g: &mut Graph, p: &Bound, s: Var, a: Var) -> Result<Var> {
        let [q0, q1] = self.forward(g, p, s, a)?;
        g.min(q0, q1)
    }

    /// `min` of both heads, off the tape.
    pub fn apply_min(&self, p: &ParamSet, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        let x = Tensor::hcat(&[s, a])?;
        let q0 = self.heads[0].apply(&p.strip_prefix("q0"), &x)?;
        let q1 = self.heads[1].apply(&p.strip_prefix("q1"), &x)?;
        Tensor::new(vec![s.rows(), 1], q0.data().iter().zip(q1.data()).map(|(a, b)| a.min(*b)).collect())
    }
}

/// Sum over heads of `mean L_2^μ(q_z − Q_head(s, a))`. `q_z` is a constant `[n, 1]`.
pub fn critic_distillation_loss(
    g: &mut Graph,
    critic: &Critic,
    p: &Bound,
    s: &Tensor,
    a: &Tensor,
    q_z: &Tensor,
    mu: f64,
) -> Result<Var> {
    check_expectile(mu)?;
    if q_z.shape() != [s.rows(), 1] {
        return Err(shape_err("critic_distillation_loss", format!("targets {:?} for {} rows", q_z.shape(), s.rows())));
    }
    let sv = g.constant(s.clone());
    let av = g.constant(a.clone());
    let target = g.constant(q_z.clone());
    let heads = critic.forward(g, p, sv, av)?;
    let mut total: Option<Var> = None;
    for q in heads {
        let d = g.sub(target, q)?;
        let e = g.expectile(d, mu);
        let m = g.mean(e);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("two heads"))
}

/// Squared-error counterpart used by one-step policy improvement.
pub fn critic_regression_loss(g: &mut Graph, critic: &Critic, p: &Bound, s: &Tensor, a: &Tensor, target: &Tensor) -> Result<Var> {
    if target.shape() != [s.rows(), 1] {
        return Err(shape_err("critic_regression_loss", format!("targets {:?} for {} rows", target.shape(), s.rows())));
    }
    let sv = g.constant(s.clone());
    let av = g.constant(a.clone());
    let t = g.constant(target.clone());
    let [q0, q1] = critic.forward(g, p, sv, av)?;
    let d0 = g.sub(q0, t)?;
    let d1 = g.sub(q1, t)?;
    let s0 = g.square(d0);
    let s1 = g.square(d1);
    let m0 = g.mean(s0);
    let m1 = g.mean(s1);
    g.add(m0, m1)
}

/// `−mean[min Q(s, aπ) + α·log π(a|s)]` with `a` the dataset action.
///
/// `aπ = mean + noise` when `action_noise` is given, the policy mean otherwise.
/// Bind the critic with [`Graph::bind_const`] to keep it out of the update.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    g: &mut Graph,
    policy: &PolicyModel,
    pp: &Bound,
    critic: &Critic,
    cp: &Bound,
    states: &Tensor,
    dataset_actions: &Tensor,
    action_noise: Option<&Tensor>,
    alpha: f64,
) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(invalid(format!("BC coefficient must be non-negative, got {alpha}")));
    }
    let s = g.constant(states.clone());
    let dist = policy.dist(g, pp, s)?;
    let a_pi = match action_noise {
        Some(noise) => gaussian_sample(g, &dist, noise)?,
        None => dist.mean,
    };
    let q = critic.min_q(g, cp, s, a_pi)?;
    let q = g.mean(q);
    let bc = bc_term(g, &dist, dataset_actions, alpha)?;
    let obj = g.add(q, bc)?;
    Ok(g.scale(obj, -1.0))
}

fn bc_term(g: &mut Graph, dist: &crate::nets::GaussianParams, actions: &Tensor, alpha: f64) -> Result<Var> {
    let a = g.constant(actions.clone());
    let lp = gaussian_log_prob(g, dist, a)?;
    let m = g.mean(lp);
    Ok(g.scale(m, alpha))
}

/// Frozen models the naive-GPI objective differentiates through.
#[derive(Debug, Clone, Copy)]
pub struct FrozenOccupancy<'a> {
    pub vf: &'a VectorFieldModel,
    pub vf_params: &'a ParamSet,
    pub reward: &'a RewardPredictor,
    pub reward_params: &'a ParamSet,
    pub euler_steps: usize,
}

/// Explicit GPI: `−mean_i max_j Q_{z_ij}(s_i, aπ_i) − α·mean log π(a|s)`.
///
/// `zs` is `[n·M, d]` (row-major over `(i, j)`), `eps` is `[n·M·N, sd]`. The
/// policy gradient flows through the Euler sampler and the reward predictor;
/// their parameters stay fixed.
#[allow(clippy::too_many_arguments)]
pub fn naive_gpi_objective(
    g: &mut Graph,
    policy: &PolicyModel,
    pp: &Bound,
    occ: &FrozenOccupancy<'_>,
    states: &Tensor,
    dataset_actions: &Tensor,
    zs: &Tensor,
    eps: &Tensor,
    action_noise: Option<&Tensor>,
    num_intentions: usize,
    num_future: usize,
    gamma: f64,
    alpha: f64,
) -> Result<Var> {
    check_gamma(gamma)?;
    let (n, m, k) = (states.rows(), num_intentions, num_future);
    if m == 0 || k == 0 {
        return Err(invalid("naive GPI needs at least one intention and one future sample"));
    }
    if zs.rows() != n * m || eps.rows() != n * m * k {
        return Err(shape_err("naive_gpi_objective", format!("{} intentions, {} noise rows for {n} states", zs.rows(), eps.rows())));
    }
    let s = g.constant(states.clone());
    let dist = policy.dist(g, pp, s)?;
    let a_pi = match action_noise {
        Some(noise) => gaussian_sample(g, &dist, noise)?,
        None => dist.mean,
    };
    let vf_b = g.bind_const(occ.vf_params);
    let r_b = g.bind_const(occ.reward_params);
    let s_rep = g.constant(states.repeat_rows(m * k));
    let a_rep = g.repeat_rows(a_pi, m * k)?;
    let z_rep = g.constant(zs.repeat_rows(k));
    let s_f = euler_sample_graph(g, occ.vf, &vf_b, eps, s_rep, a_rep, z_rep, occ.euler_steps)?;
    let r = occ.reward.forward(g, &r_b, s_f)?;
    let q = g.group_mean(r, k)?;
    let q = g.reshape(q, vec![n, m])?;
    let best = g.row_max(q)?;
    let best = g.scale(best, 1.0 / (1.0 - gamma));
    let best = g.mean(best);
    let bc = bc_term(g, &dist, dataset_actions, alpha)?;
    let obj = g.add(best, bc)?;
    Ok(g.scale(obj, -1.0))
}

/// Tape handles for one-step policy improvement.
#[derive(Debug, Clone, Copy)]
pub struct OneStepLosses {
    pub critic: Var,
    pub actor: Var,
}

/// Critic regression toward `(1/(1−γ))·mean r(s_f)` of an unconditioned
/// occupancy model (`q_target`), plus the usual actor loss on the same tape.
#[allow(clippy::too_many_arguments)]
pub fn one_step_pi_losses(
    g: &mut Graph,
    critic: &Critic,
    cp: &Bound,
    cp_frozen: &Bound,
    policy: &PolicyModel,
    pp: &Bound,
    states: &Tensor,
    actions: &Tensor,
    q_target: &Tensor,
    action_noise: Option<&Tensor>,
    alpha: f64,
) -> Result<OneStepLosses> {
    let c = critic_regression_loss(g, critic, cp, states, actions, q_target)?;
    let a = actor_loss(g, policy, pp, critic, cp_frozen, states, actions, action_noise, alpha)?;
    Ok(OneStepLosses { critic: c, actor: a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adam_step, finite_difference_check, AdamConfig, AdamState};
    use crate::rng::{stream_rng, Stream};

    struct Const(f64);
    impl StateReward for Const {
        fn rewards(&self, states: &Tensor) -> Result<Tensor> {
            Ok(Tensor::filled(&[states.rows(), 1], self.0))
        }
    }

    fn data(n: usize, sd: usize, ad: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        (Tensor::randn(&[n, sd], &mut rng), Tensor::randn(&[n, ad], &mut rng))
    }

    fn zeroed(p: &mut ParamSet) {
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
    }

    #[test]
    fn expectile_examples_and_symmetry() {
        assert_eq!(expectile_loss(2.0, 0.5).unwrap(), 2.0);
        assert!((expectile_loss(1.0, 0.9).unwrap() - 0.9).abs() < 1e-15);
        assert!((expectile_loss(-1.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!(expectile_loss(1.0, 1.0).is_err());
        assert!(expectile_loss(1.0, 0.4).is_err());
        for &mu in &[0.5, 0.7, 0.99] {
            for &x in &[-3.0, -0.1, 0.0, 0.5, 4.0] {
                let s = expectile_loss(x, mu).unwrap() + expectile_loss(-x, mu).unwrap();
                assert!((s - x * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_bounds() {
        assert!(FinetuneConfig::default().validate().is_ok());
        for bad in [
            FinetuneConfig { num_future: 0, ..Default::default() },
            FinetuneConfig { expectile: 1.0, ..Default::default() },
            FinetuneConfig { alpha: -1.0, ..Default::default() },
            FinetuneConfig { num_intentions: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn reward_loss_examples() {
        let pred = RewardPredictor::new(2, &[8]).unwrap();
        let mut p = pred.init(&mut stream_rng(0, Stream::Init, 0));
        zeroed(&mut p);
        let (s, _) = data(5, 2, 1, 0);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let l = reward_loss(&mut g, &pred, &b, &s, &Tensor::filled(&[5, 1], 1.0)).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 1.0);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let l = reward_loss(&mut g, &pred, &b, &s, &Tensor::zeros(&[5, 1])).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
        let mut masked = Tensor::zeros(&[5, 1]);
        masked.data_mut()[2] = f64::NAN;
        let mut g = Graph::new();
        let b = g.bind(&p);
        assert!(reward_loss(&mut g, &pred, &b, &s, &masked).is_err());
    }

    #[test]
    fn q_estimate_of_unit_reward() {
        let vf = VectorFieldModel::new(2, 1, 2, &[8]).unwrap();
        let p = vf.init(&mut stream_rng(1, Stream::Init, 0));
        let (s, a) = data(3, 2, 1, 1);
        let z = Tensor::zeros(&[3, 2]);
        let q = estimate_q_z(&vf, &p, &Const(1.0), &s, &a, &z, 16, 0.99, 10, &mut stream_rng(1, Stream::Noise, 0)).unwrap();
        for v in q.data() {
            assert!((v - 100.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn q_estimate_is_permutation_invariant() {
        let vf = VectorFieldModel::new(2, 1, 2, &[8]).unwrap();
        let p = vf.init(&mut stream_rng(2, Stream::Init, 0));
        let rp = RewardPredictor::new(2, &[8]).unwrap();
        let rpp = rp.init(&mut stream_rng(2, Stream::Init, 1));
        let reward = LearnedReward { model: &rp, params: &rpp };
        let (s, a) = data(1, 2, 1, 2);
        let z = Tensor::zeros(&[1, 2]);
        let eps = Tensor::randn(&[8, 2], &mut stream_rng(2, Stream::Noise, 0));
        let rev: Vec<usize> = (0..8).rev().collect();
        let q1 = estimate_q_z_with_noise(&vf, &p, &reward, &s, &a, &z, &eps, 8, 0.9, 10).unwrap();
        let q2 = estimate_q_z_with_noise(&vf, &p, &reward, &s, &a, &z, &eps.gather_rows(&rev), 8, 0.9, 10).unwrap();
        assert!((q1.item() - q2.item()).abs() <= 1e-9 * q1.item().abs().max(1.0));
    }

    #[test]
    fn distillation_of_matching_targets_is_zero() {
        let critic = Critic::new(2, 1, &[8]).unwrap();
        let p = critic.init(&mut stream_rng(3, Stream::Init, 0));
        let (s, a) = data(4, 2, 1, 3);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let sv = g.constant(s.clone());
        let av = g.constant(a.clone());
        let [q0, _] = critic.forward(&mut g, &b, sv, av).unwrap();
        let target = g.value(q0).clone();
        // Make both heads identical so one target matches both.
        let mut p2 = p.clone();
        for (name, t) in p.strip_prefix("q0").iter() {
            p2.insert(format!("q1/{name}"), t.clone());
        }
        let mut g = Graph::new();
        let b = g.bind(&p2);
        let l = critic_distillation_loss(&mut g, &critic, &b, &s, &a, &target, 0.9).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn critic_heads_are_independent() {
        let critic = Critic::new(2, 1, &[8]).unwrap();
        let p = critic.init(&mut stream_rng(4, Stream::Init, 0));
        assert_ne!(p.strip_prefix("q0"), p.strip_prefix("q1"));
        let (s, a) = data(4, 2, 1, 4);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let sv = g.constant(s.clone());
        let av = g.constant(a.clone());
        let m = critic.min_q(&mut g, &b, sv, av).unwrap();
        assert_eq!(g.value(m), &critic.apply_min(&p, &s, &a).unwrap());
    }

    #[test]
    fn expectile_distillation_converges_between_mean_and_max() {
        // One (s, a) row, targets from a fixed set; the critic learns a constant.
        let targets = [1.0, 2.0, 3.0, 4.0, 10.0];
        let critic = Critic::new(1, 1, &[8]).unwrap();
        let fit = |mu: f64| {
            let mut p = critic.init(&mut stream_rng(5, Stream::Init, 0));
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig::with_lr(3e-2);
            let n = targets.len();
            let s = Tensor::zeros(&[n, 1]);
            let a = Tensor::zeros(&[n, 1]);
            let q = Tensor::matrix(n, 1, targets.to_vec()).unwrap();
            for _ in 0..3000 {
                let mut g = Graph::new();
                let b = g.bind(&p);
                let l = critic_distillation_loss(&mut g, &critic, &b, &s, &a, &q, mu).unwrap();
                let grads = g.grads(l, &b).unwrap();
                adam_step(&mut p, &grads, &mut st, &cfg).unwrap();
            }
            critic.apply_min(&p, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1])).unwrap().item()
        };
        let mean = fit(0.5);
        assert!((mean - 4.0).abs() < 0.02, "{mean}");
        let high = fit(0.99);
        assert!(high > 9.5 && high <= 10.0 + 1e-6, "{high}");
    }

    #[test]
    fn actor_with_zero_critic_is_behaviour_cloning() {
        let policy = PolicyModel::new(2, 2, &[8]).unwrap();
        let pp = policy.init(&mut stream_rng(6, Stream::Init, 0));
        let critic = Critic::new(2, 2, &[8]).unwrap();
        let mut cp = critic.init(&mut stream_rng(6, Stream::Init, 1));
        zeroed(&mut cp);
        let (s, a) = data(5, 2, 2, 6);
        let noise = Tensor::randn(&[5, 2], &mut stream_rng(6, Stream::Policy, 0));
        let mut g = Graph::new();
        let pb = g.bind(&pp);
        let cb = g.bind_const(&cp);
        let l = actor_loss(&mut g, &policy, &pb, &critic, &cb, &s, &a, Some(&noise), 1.0).unwrap();
        let mut g2 = Graph::new();
        let pb2 = g2.bind(&pp);
        let bc = policy.bc_loss(&mut g2, &pb2, &s, &a).unwrap();
        assert_eq!(g.scalar(l).unwrap(), g2.scalar(bc).unwrap());
    }

    #[test]
    fn actor_leaves_critic_alone() {
        let policy = PolicyModel::new(2, 1, &[8]).unwrap();
        let pp = policy.init(&mut stream_rng(7, Stream::Init, 0));
        let critic = Critic::new(2, 1, &[8]).unwrap();
        let cp = critic.init(&mut stream_rng(7, Stream::Init, 1));
        let (s, a) = data(4, 2, 1, 7);
        let mut g = Graph::new();
        let pb = g.bind(&pp);
        let cb = g.bind(&cp);
        let l = actor_loss(&mut g, &policy, &pb, &critic, &cb, &s, &a, None, 0.3).unwrap();
        let gp = g.grads(l, &pb).unwrap();
        assert!(gp.iter().any(|(_, t)| t.data().iter().any(|v| *v != 0.0)));
        // A const-bound critic gets no gradient.
        let mut g = Graph::new();
        let pb = g.bind(&pp);
        let cb = g.bind_const(&cp);
        let l = actor_loss(&mut g, &policy, &pb, &critic, &cb, &s, &a, None, 0.3).unwrap();
        let gc = g.grads(l, &cb).unwrap();
        assert!(gc.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    }

    struct Fixture {
        vf: VectorFieldModel,
        vfp: ParamSet,
        rp: RewardPredictor,
        rpp: ParamSet,
        policy: PolicyModel,
        pp: ParamSet,
    }

    fn fixture() -> Fixture {
        let mut rng = stream_rng(8, Stream::Init, 0);
        let vf = VectorFieldModel::new(2, 1, 2, &[6]).unwrap();
        let rp = RewardPredictor::new(2, &[6]).unwrap();
        let policy = PolicyModel::new(2, 1, &[6]).unwrap();
        Fixture { vfp: vf.init(&mut rng), rpp: rp.init(&mut rng), pp: policy.init(&mut rng), vf, rp, policy }
    }

    fn gpi(g: &mut Graph, f: &Fixture, pb: &Bound, s: &Tensor, a: &Tensor, zs: &Tensor, eps: &Tensor, m: usize) -> Var {
        let occ = FrozenOccupancy { vf: &f.vf, vf_params: &f.vfp, reward: &f.rp, reward_params: &f.rpp, euler_steps: 4 };
        naive_gpi_objective(g, &f.policy, pb, &occ, s, a, zs, eps, None, m, 2, 0.9, 0.3).unwrap()
    }

    #[test]
    fn naive_gpi_duplicate_intentions_match_single() {
        let f = fixture();
        let (s, a) = data(3, 2, 1, 8);
        let z = Tensor::randn(&[3, 2], &mut stream_rng(8, Stream::Latent, 0));
        let eps1 = Tensor::randn(&[6, 2], &mut stream_rng(8, Stream::Noise, 0));
        // Three copies of each row's z with the same noise per copy.
        let zs3 = z.repeat_rows(3);
        let mut rows = Vec::new();
        for i in 0..3 {
            for _ in 0..3 {
                rows.extend([2 * i, 2 * i + 1]);
            }
        }
        let eps3 = eps1.gather_rows(&rows);
        let mut g1 = Graph::new();
        let pb1 = g1.bind(&f.pp);
        let one = gpi(&mut g1, &f, &pb1, &s, &a, &z, &eps1, 1);
        let mut g3 = Graph::new();
        let pb3 = g3.bind(&f.pp);
        let three = gpi(&mut g3, &f, &pb3, &s, &a, &zs3, &eps3, 3);
        assert_eq!(g1.scalar(one).unwrap(), g3.scalar(three).unwrap());
    }

    #[test]
    fn gradient_checks() {
        let f = fixture();
        let (s, a) = data(3, 2, 1, 9);

        let r = finite_difference_check(
            |g, b| reward_loss(g, &f.rp, b, &s, &Tensor::matrix(3, 1, vec![0.0, 1.0, 0.5]).unwrap()),
            &f.rpp,
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "reward {r:?}");

        let critic = Critic::new(2, 1, &[6]).unwrap();
        let cp = critic.init(&mut stream_rng(9, Stream::Init, 0));
        let q = Tensor::matrix(3, 1, vec![5.0, -1.0, 2.0]).unwrap();
        let r = finite_difference_check(|g, b| critic_distillation_loss(g, &critic, b, &s, &a, &q, 0.9), &cp, 1e-5, 100, 1)
            .unwrap();
        assert!(r.max_rel_error < 1e-4, "critic {r:?}");

        let noise = Tensor::randn(&[3, 1], &mut stream_rng(9, Stream::Policy, 0));
        let r = finite_difference_check(
            |g, b| {
                let cb = g.bind_const(&cp);
                actor_loss(g, &f.policy, b, &critic, &cb, &s, &a, Some(&noise), 0.3)
            },
            &f.pp,
            1e-5,
            100,
            2,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "actor {r:?}");

        let r = finite_difference_check(
            |g, b| {
                let pb = g.bind_const(&f.pp);
                Ok(one_step_pi_losses(g, &critic, b, b, &f.policy, &pb, &s, &a, &q, Some(&noise), 0.3)?.critic)
            },
            &cp,
            1e-5,
            100,
            3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "one-step {r:?}");

        let zs = Tensor::randn(&[6, 2], &mut stream_rng(9, Stream::Latent, 0));
        let eps = Tensor::randn(&[12, 2], &mut stream_rng(9, Stream::Noise, 0));
        let r = finite_difference_check(|g, b| Ok(gpi(g, &f, b, &s, &a, &zs, &eps, 2)), &f.pp, 1e-5, 100, 4).unwrap();
        assert!(r.max_rel_error < 1e-4, "naive gpi {r:?}");
    }
}

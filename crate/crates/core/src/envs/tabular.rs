//! Finite MDPs and their exact occupancy / value oracles.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Explicit finite MDP with state-only rewards and real-valued state embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened.
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    initial: Vec<f64>,
    embed_dim: usize,
    embeddings: Vec<f64>,
    gamma: f64,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        embeddings: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(invalid("an MDP needs at least one state and one action"));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(shape_err("TabularMdp", format!("{} transition entries", transitions.len())));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let off = (s * n_actions + a) * n_states;
                check_distribution(&transitions[off..off + n_states], &format!("P[{s}][{a}]"))?;
            }
        }
        if rewards.len() != n_states || initial.len() != n_states || embeddings.len() != n_states {
            return Err(shape_err("TabularMdp", "rewards, initial distribution and embeddings need one entry per state"));
        }
        check_distribution(&initial, "initial distribution")?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid(format!("discount must lie in [0, 1), got {gamma}")));
        }
        let embed_dim = embeddings[0].len();
        if embed_dim == 0 || embeddings.iter().any(|e| e.len() != embed_dim) {
            return Err(shape_err("TabularMdp", "embeddings must share a positive dimension"));
        }
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            initial,
            embed_dim,
            embeddings: embeddings.concat(),
            gamma,
        };
        if n_states > 1 && mdp.min_embedding_separation() <= 0.0 {
            return Err(invalid("state embeddings must be pairwise distinct"));
        }
        Ok(mdp)
    }

    /// Random dense MDP: softmax-of-Gaussian rows, uniform start, rewards in [0, 1).
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, embed_dim: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transitions.extend((0..n_states).map(|_| (2.0 * rng.sample::<f64, _>(StandardNormal)).exp()));
        }
        for row in transitions.chunks_exact_mut(n_states) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rewards = (0..n_states).map(|_| rng.random::<f64>()).collect();
        let initial = vec![1.0 / n_states as f64; n_states];
        let embeddings = random_embeddings(n_states, embed_dim, rng);
        Self::new(n_states, n_actions, transitions, rewards, initial, embeddings, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.n_states {
            return Err(shape_err("with_rewards", format!("{} rewards for {} states", rewards.len(), self.n_states)));
        }
        Ok(Self { rewards, ..self.clone() })
    }

    /// `P(· | s, a)`.
    pub fn p(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.transitions[off..off + self.n_states]
    }

    pub fn embedding(&self, s: usize) -> &[f64] {
        &self.embeddings[s * self.embed_dim..(s + 1) * self.embed_dim]
    }

    /// Index of the nearest state embedding (ties go to the lower index).
    pub fn decode(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for s in 0..self.n_states {
            let d: f64 = self.embedding(s).iter().zip(x).map(|(e, v)| (e - v) * (e - v)).sum();
            if d < best.1 {
                best = (s, d);
            }
        }
        best.0
    }

    pub fn min_embedding_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.n_states {
            for j in i + 1..self.n_states {
                let d: f64 = self.embedding(i).iter().zip(self.embedding(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    pub fn one_hot(&self, a: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_actions];
        v[a] = 1.0;
        v
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.p(s, a), rng)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }
}

/// Greedy decoding of a continuous action vector (ties go to the lower index).
pub fn decode_action(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in a.iter().enumerate() {
        if v > a[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass: fall back to the last supported outcome.
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Best-separated of several random unit-norm embedding sets.
pub fn random_embeddings<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..64 {
        let cand: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut sep = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = cand[i].iter().zip(&cand[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                sep = sep.min(d.sqrt());
            }
        }
        if best.as_ref().is_none_or(|(b, _)| sep > *b) {
            best = Some((sep, cand));
        }
    }
    best.expect("at least one candidate").1
}

/// Stochastic per-state action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(shape_err("TabularPolicy", format!("{} entries for {n_states}x{n_actions}", probs.len())));
        }
        for (s, row) in probs.chunks_exact(n_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(invalid(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s), rng)
    }

    /// `(1 − eps)·self + eps·uniform`.
    pub fn perturbed(&self, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(invalid(format!("perturbation must lie in [0, 1], got {eps}")));
        }
        let u = 1.0 / self.n_actions as f64;
        let probs = self.probs.iter().map(|p| (1.0 - eps) * p + eps * u).collect();
        Ok(Self { n_actions: self.n_actions, probs })
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_actions != mdp.n_actions || self.n_states() != mdp.n_states {
            return Err(shape_err("policy", "policy does not match the MDP"));
        }
        Ok(())
    }
}

/// `p_γ(s_f | s, a)` for every `(s, a)`; row index `s·|A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub n_states: usize,
    pub n_actions: usize,
    pub data: Vec<f64>,
}

impl Occupancy {
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let r = s * self.n_actions + a;
        &self.data[r * self.n_states..(r + 1) * self.n_states]
    }

    /// Max-norm residual of `p = (1−γ)δ_s + γ Σ P(s'|s,a) π(a'|s') p(·|s',a')`.
    pub fn bellman_residual(&self, mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> f64 {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut worst: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let mut rhs = vec![0.0; ns];
                rhs[s] += 1.0 - gamma;
                for (s2, &p) in mdp.p(s, a).iter().enumerate() {
                    for (a2, &pi) in policy.row(s2).iter().enumerate() {
                        let w = gamma * p * pi;
                        if w != 0.0 {
                            for (r, v) in rhs.iter_mut().zip(self.row(s2, a2)) {
                                *r += w * v;
                            }
                        }
                    }
                }
                for (l, r) in self.row(s, a).iter().zip(&rhs) {
                    worst = worst.max((l - r).abs());
                }
            }
        }
        worst
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("discount must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// `I − γ·T` with `T[(s,a),(s',a')] = P(s'|s,a)·π(a'|s')`.
fn resolvent_system(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for a in 0..na {
            let r = s * na + a;
            for (s2, &p) in mdp.p(s, a).iter().enumerate() {
                for (a2, &pi) in policy.row(s2).iter().enumerate() {
                    m[(r, s2 * na + a2)] -= gamma * p * pi;
                }
            }
        }
    }
    m
}

/// Exact discounted occupancy by a dense linear solve.
pub fn exact_occupancy(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> Result<Occupancy> {
    check_gamma(gamma)?;
    policy.check_against(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let m = resolvent_system(mdp, policy, gamma);
    let mut rhs = DMatrix::<f64>::zeros(ns * na, ns);
    for s in 0..ns {
        for a in 0..na {
            rhs[(s * na + a, s)] = 1.0 - gamma;
        }
    }
    let x = m.lu().solve(&rhs).ok_or(Error::Singular)?;
    let mut data = Vec::with_capacity(ns * na * ns);
    for r in 0..ns * na {
        data.extend(x.row(r).iter());
    }
    Ok(Occupancy { n_states: ns, n_actions: na, data })
}

/// `Q(s,a) = (1/(1−γ)) Σ_{s_f} p_γ(s_f|s,a) r(s_f)`, shape `[|S|·|A|]`.
pub fn exact_q(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> Result<Vec<f64>> {
    let occ = exact_occupancy(mdp, policy, gamma)?;
    let scale = 1.0 / (1.0 - gamma);
    Ok((0..mdp.n_states * mdp.n_actions)
        .map(|r| {
            let row = &occ.data[r * mdp.n_states..(r + 1) * mdp.n_states];
            scale * row.iter().zip(&mdp.rewards).map(|(p, r)| p * r).sum::<f64>()
        })
        .collect())
}

/// Classical policy evaluation `Q = (I − γT)⁻¹ r` with `r(s,a) = r(s)`.
pub fn policy_evaluation_q(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    policy.check_against(mdp)?;
    let na = mdp.n_actions;
    let m = resolvent_system(mdp, policy, gamma);
    let r = nalgebra::DVector::from_iterator(mdp.n_states * na, (0..mdp.n_states * na).map(|i| mdp.rewards[i / na]));
    let q = m.lu().solve(&r).ok_or(Error::Singular)?;
    Ok(q.iter().copied().collect())
}

/// Expected undiscounted return over `horizon` steps, `Σ_{t<H} E[r(s_t)]`.
pub fn expected_return(mdp: &TabularMdp, policy: &TabularPolicy, horizon: usize) -> Result<f64> {
    policy.check_against(mdp)?;
    let ns = mdp.n_states;
    let mut d = mdp.initial.clone();
    let mut total = 0.0;
    for _ in 0..horizon {
        total += d.iter().zip(&mdp.rewards).map(|(p, r)| p * r).sum::<f64>();
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if d[s] == 0.0 {
                continue;
            }
            for (a, &pi) in policy.row(s).iter().enumerate() {
                let w = d[s] * pi;
                if w != 0.0 {
                    for (n, p) in next.iter_mut().zip(mdp.p(s, a)) {
                        *n += w * p;
                    }
                }
            }
        }
        d = next;
    }
    Ok(total)
}

/// Marginal state distribution at each of the first `horizon` steps.
pub fn state_marginals(mdp: &TabularMdp, policy: &TabularPolicy, horizon: usize) -> Result<Vec<Vec<f64>>> {
    policy.check_against(mdp)?;
    let ns = mdp.n_states;
    let mut out = Vec::with_capacity(horizon);
    let mut d = mdp.initial.clone();
    for _ in 0..horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for (a, &pi) in policy.row(s).iter().enumerate() {
                let w = d[s] * pi;
                if w != 0.0 {
                    for (n, p) in next.iter_mut().zip(mdp.p(s, a)) {
                        *n += w * p;
                    }
                }
            }
        }
        out.push(std::mem::replace(&mut d, next));
    }
    Ok(out)
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

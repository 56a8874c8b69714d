//! Flow-matching occupancy models: the vector field `v(t, x, s, a, z)`,
//! the Euler sampler, and the CFM / SARSA / TD flow losses.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamSet, Tensor, Var};
use crate::envs::{decode_action, TabularMdp, TabularPolicy, TransitionBatch};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nets::{Mlp, MlpConfig};

pub const DEFAULT_EULER_STEPS: usize = 10;

/// MLP over the concatenation `[t, x, s, a, z]`, predicting a velocity in state space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorFieldModel {
    pub mlp: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
}

impl VectorFieldModel {
    pub fn new(state_dim: usize, action_dim: usize, latent_dim: usize, hidden: &[usize]) -> Result<Self> {
        let input = 1 + 2 * state_dim + action_dim + latent_dim;
        Ok(Self { mlp: Mlp::new(MlpConfig::new(input, hidden, state_dim, true)?)?, state_dim, action_dim, latent_dim })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        self.mlp.init(rng)
    }

    fn check_rows(&self, t: &Tensor, x: &Tensor, s: &Tensor, a: &Tensor, z: &Tensor) -> Result<usize> {
        let n = x.rows();
        let ok = t.shape() == [n, 1]
            && x.shape() == [n, self.state_dim]
            && s.shape() == [n, self.state_dim]
            && a.shape() == [n, self.action_dim]
            && z.shape() == [n, self.latent_dim];
        if !ok {
            return Err(shape_err(
                "vector_field",
                format!(
                    "t {:?}, x {:?}, s {:?}, a {:?}, z {:?} for dims ({}, {}, {})",
                    t.shape(),
                    x.shape(),
                    s.shape(),
                    a.shape(),
                    z.shape(),
                    self.state_dim,
                    self.action_dim,
                    self.latent_dim
                ),
            ));
        }
        Ok(n)
    }

    /// Gradient-free `v(t, x, s, a, z)`.
    pub fn velocity(&self, p: &ParamSet, t: &Tensor, x: &Tensor, s: &Tensor, a: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_rows(t, x, s, a, z)?;
        self.mlp.apply(p, &Tensor::hcat(&[t, x, s, a, z])?)
    }

    /// `v(t, x, s, a, z)` on the tape.
    pub fn forward(&self, g: &mut Graph, p: &Bound, t: Var, x: Var, s: Var, a: Var, z: Var) -> Result<Var> {
        let input = g.concat(&[t, x, s, a, z])?;
        self.mlp.forward(g, p, input)
    }
}

/// `t·x + (1 − t)·eps` for one point.
pub fn interpolate(x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("flow time must lie in [0, 1], got {t}")));
    }
    if x.len() != eps.len() {
        return Err(shape_err("interpolate", format!("{} vs {}", x.len(), eps.len())));
    }
    Ok(x.iter().zip(eps).map(|(xv, ev)| t * xv + (1.0 - t) * ev).collect())
}

/// Row-wise [`interpolate`] with a per-row time `t: [n, 1]`.
pub fn interpolate_rows(x: &Tensor, eps: &Tensor, t: &Tensor) -> Result<Tensor> {
    if x.shape() != eps.shape() || t.shape() != [x.rows(), 1] {
        return Err(shape_err("interpolate", format!("x {:?}, eps {:?}, t {:?}", x.shape(), eps.shape(), t.shape())));
    }
    let d = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        out.extend(interpolate(x.row(i), eps.row(i), t.data()[i])?);
    }
    Tensor::matrix(x.rows(), d, out)
}

/// Euler integration of `dx/dt = v(t, x)` from `x_0 = eps` over `[0, 1]`:
/// `x_{k+1} = x_k + v(k/T, x_k) / T`.
pub fn euler_integrate<F>(eps: &Tensor, steps: usize, mut v: F) -> Result<Tensor>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(invalid("Euler sampler needs at least one step"));
    }
    let mut x = eps.clone();
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let vel = v(k as f64 / steps as f64, &x)?;
        if vel.shape() != x.shape() {
            return Err(shape_err("euler", format!("velocity {:?} for state {:?}", vel.shape(), x.shape())));
        }
        for (xv, vv) in x.data_mut().iter_mut().zip(vel.data()) {
            *xv += vv * dt;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("Euler step {k}")));
        }
    }
    Ok(x)
}

/// Generate future states by integrating the vector field from `eps`.
pub fn euler_sample(
    vf: &VectorFieldModel,
    p: &ParamSet,
    eps: &Tensor,
    s: &Tensor,
    a: &Tensor,
    z: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    let n = eps.rows();
    let t0 = Tensor::zeros(&[n, 1]);
    vf.check_rows(&t0, eps, s, a, z)?;
    // Build the model input once and overwrite the t and x columns per step.
    let mut input = Tensor::hcat(&[&t0, eps, s, a, z])?;
    let width = input.cols();
    let sd = vf.state_dim;
    euler_integrate(eps, steps, |t, x| {
        let buf = input.data_mut();
        for i in 0..n {
            let row = &mut buf[i * width..(i + 1) * width];
            row[0] = t;
            row[1..1 + sd].copy_from_slice(x.row(i));
        }
        vf.mlp.apply(p, &input)
    })
}

/// [`euler_sample`] on the tape, differentiable w.r.t. `s`, `a`, `z` and the bound parameters.
#[allow(clippy::too_many_arguments)]
pub fn euler_sample_graph(
    g: &mut Graph,
    vf: &VectorFieldModel,
    p: &Bound,
    eps: &Tensor,
    s: Var,
    a: Var,
    z: Var,
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(invalid("Euler sampler needs at least one step"));
    }
    let n = eps.rows();
    let mut x = g.constant(eps.clone());
    for k in 0..steps {
        let t = g.constant(Tensor::filled(&[n, 1], k as f64 / steps as f64));
        let v = vf.forward(g, p, t, x, s, a, z)?;
        let dx = g.scale(v, 1.0 / steps as f64);
        x = g.add(x, dx)?;
    }
    Ok(x)
}

/// Row-aligned inputs of one flow-matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub s: Tensor,
    pub a: Tensor,
    pub s_next: Tensor,
    pub a_next: Tensor,
    /// Flow times in `[0, 1]`, `[n, 1]`.
    pub t: Tensor,
    /// Source noise, `[n, state_dim]`, shared by both loss terms of a row.
    pub eps: Tensor,
}

impl FlowBatch {
    pub fn new(batch: &TransitionBatch, t: Tensor, eps: Tensor) -> Result<Self> {
        let n = batch.s.rows();
        if t.shape() != [n, 1] || eps.shape() != batch.s.shape() {
            return Err(shape_err("FlowBatch", format!("t {:?}, eps {:?} for {n} rows", t.shape(), eps.shape())));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("flow times must lie in [0, 1]"));
        }
        Ok(Self {
            s: batch.s.clone(),
            a: batch.a.clone(),
            s_next: batch.s_next.clone(),
            a_next: batch.a_next.clone(),
            t,
            eps,
        })
    }

    /// Draw `t ~ U[0, 1]` and `eps ~ N(0, I)` from separate streams.
    pub fn sample<R1: Rng + ?Sized, R2: Rng + ?Sized>(batch: &TransitionBatch, t_rng: &mut R1, eps_rng: &mut R2) -> Result<Self> {
        let n = batch.s.rows();
        let t = Tensor::rand_uniform(&[n, 1], t_rng);
        let eps = Tensor::randn(batch.s.shape(), eps_rng);
        Self::new(batch, t, eps)
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Components of a SARSA / TD flow loss on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FlowLoss {
    pub total: Var,
    pub current: Var,
    pub future: Var,
}

fn mean_sq_row_norm(g: &mut Graph, diff: Var) -> Result<Var> {
    let sq = g.square(diff);
    let per_row = g.sum_cols(sq)?;
    Ok(g.mean(per_row))
}

/// `mean ‖v(t, xᵗ, s, a, z) − (x − eps)‖²` with `xᵗ = t·x + (1 − t)·eps`.
#[allow(clippy::too_many_arguments)]
pub fn cfm_loss(
    g: &mut Graph,
    vf: &VectorFieldModel,
    p: &Bound,
    x: &Tensor,
    s: Var,
    a: Var,
    z: Var,
    t: &Tensor,
    eps: &Tensor,
) -> Result<Var> {
    if x.rows() == 0 {
        return Err(invalid("flow-matching batch is empty"));
    }
    let xt = interpolate_rows(x, eps, t)?;
    let mut target = x.clone();
    for (tv, e) in target.data_mut().iter_mut().zip(eps.data()) {
        *tv -= e;
    }
    let tv = g.constant(t.clone());
    let xv = g.constant(xt);
    let pred = vf.forward(g, p, tv, xv, s, a, z)?;
    let target = g.constant(target);
    let diff = g.sub(pred, target)?;
    mean_sq_row_norm(g, diff)
}

/// `(1 − γ)·current + γ·future`.
///
/// The future term regresses `v(t, s̄_fᵗ, s, a, z)` onto the target field at
/// `(s', a')`, where `s̄_f` is an Euler sample of the target field from the
/// row's own `eps`. Both the bootstrap sample and the regression target are
/// constants, so no gradient reaches `target`.
#[allow(clippy::too_many_arguments)]
pub fn sarsa_flow_loss(
    g: &mut Graph,
    vf: &VectorFieldModel,
    p: &Bound,
    target: &ParamSet,
    batch: &FlowBatch,
    z: Var,
    gamma: f64,
    euler_steps: usize,
) -> Result<FlowLoss> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("discount must lie in [0, 1), got {gamma}")));
    }
    let s = g.constant(batch.s.clone());
    let a = g.constant(batch.a.clone());
    let current = cfm_loss(g, vf, p, &batch.s, s, a, z, &batch.t, &batch.eps)?;

    let z_val = g.value(z).clone();
    let s_f = euler_sample(vf, target, &batch.eps, &batch.s_next, &batch.a_next, &z_val, euler_steps)?;
    let s_ft = interpolate_rows(&s_f, &batch.eps, &batch.t)?;
    let v_target = vf.velocity(target, &batch.t, &s_ft, &batch.s_next, &batch.a_next, &z_val)?;
    let tv = g.constant(batch.t.clone());
    let xv = g.constant(s_ft);
    let pred = vf.forward(g, p, tv, xv, s, a, z)?;
    let v_target = g.constant(v_target);
    let diff = g.sub(pred, v_target)?;
    let future = mean_sq_row_norm(g, diff)?;

    let c = g.scale(current, 1.0 - gamma);
    let f = g.scale(future, gamma);
    let total = g.add(c, f)?;
    Ok(FlowLoss { total, current, future })
}

/// Source of next actions for [`td_flow_loss`].
pub trait TargetPolicy {
    fn next_actions(&self, s_next: &Tensor, dataset_a_next: &Tensor) -> Result<Tensor>;
}

/// Replays the dataset's `a'`, which turns TD flow into SARSA flow.
#[derive(Debug, Clone, Copy, Default)]
pub struct DatasetReplay;

impl TargetPolicy for DatasetReplay {
    fn next_actions(&self, _s_next: &Tensor, dataset_a_next: &Tensor) -> Result<Tensor> {
        Ok(dataset_a_next.clone())
    }
}

/// Deterministic tabular policy acting on decoded states, emitting one-hot actions.
#[derive(Debug, Clone)]
pub struct TabularTargetPolicy<'a> {
    pub mdp: &'a TabularMdp,
    pub policy: &'a TabularPolicy,
}

impl TargetPolicy for TabularTargetPolicy<'_> {
    fn next_actions(&self, s_next: &Tensor, _dataset_a_next: &Tensor) -> Result<Tensor> {
        let na = self.mdp.n_actions();
        let mut out = Vec::with_capacity(s_next.rows() * na);
        for i in 0..s_next.rows() {
            let row = self.policy.row(self.mdp.decode(s_next.row(i)));
            out.extend(self.mdp.one_hot(decode_action(row)));
        }
        Tensor::matrix(s_next.rows(), na, out)
    }
}

/// SARSA flow loss with `a'` supplied by `policy`.
#[allow(clippy::too_many_arguments)]
pub fn td_flow_loss(
    g: &mut Graph,
    vf: &VectorFieldModel,
    p: &Bound,
    target: &ParamSet,
    batch: &FlowBatch,
    z: Var,
    policy: &dyn TargetPolicy,
    gamma: f64,
    euler_steps: usize,
) -> Result<FlowLoss> {
    let a_next = policy.next_actions(&batch.s_next, &batch.a_next)?;
    if a_next.shape() != batch.a_next.shape() {
        return Err(shape_err("td_flow_loss", format!("target policy gave {:?}", a_next.shape())));
    }
    let batch = FlowBatch { a_next, ..batch.clone() };
    sarsa_flow_loss(g, vf, p, target, &batch, z, gamma, euler_steps)
}

/// Histogram over decoded tabular states of `n` Euler samples at one condition.
#[allow(clippy::too_many_arguments)]
pub fn decoded_histogram<R: Rng + ?Sized>(
    vf: &VectorFieldModel,
    p: &ParamSet,
    mdp: &TabularMdp,
    s: &[f64],
    a: &[f64],
    z: &Tensor,
    n: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps = Tensor::randn(&[n, vf.state_dim], rng);
    let rep = |v: &[f64]| Tensor::matrix(1, v.len(), v.to_vec()).map(|t| t.repeat_rows(n));
    let z = if z.rows() == 1 { z.repeat_rows(n) } else { z.clone() };
    let x = euler_sample(vf, p, &eps, &rep(s)?, &rep(a)?, &z, steps)?;
    let mut hist = vec![0.0; mdp.n_states()];
    for i in 0..n {
        hist[mdp.decode(x.row(i))] += 1.0 / n as f64;
    }
    Ok(hist)
}

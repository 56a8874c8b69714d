//! Variational intention encoder `p(z | s', a')` and the ELBO surrogate.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::{invalid, Result};
use crate::flow::{sarsa_flow_loss, FlowBatch, VectorFieldModel};
use crate::nets::{gaussian_sample, kl_to_standard_normal, GaussianParams, Mlp, MlpConfig};

/// Gaussian encoder over a `latent_dim`-dimensional intention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentionEncoder {
    pub mlp: Mlp,
    pub latent_dim: usize,
}

impl IntentionEncoder {
    pub fn new(state_dim: usize, action_dim: usize, latent_dim: usize, hidden: &[usize]) -> Result<Self> {
        if latent_dim == 0 {
            return Err(invalid("latent dimension must be at least 1"));
        }
        let mlp = Mlp::new(MlpConfig::new(state_dim + action_dim, hidden, 2 * latent_dim, true)?)?;
        Ok(Self { mlp, latent_dim })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        self.mlp.init(rng)
    }

    /// Posterior parameters for a batch of `(s', a')`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, s_next: &Tensor, a_next: &Tensor) -> Result<GaussianParams> {
        let input = g.constant(Tensor::hcat(&[s_next, a_next])?);
        let head = self.mlp.forward(g, p, input)?;
        GaussianParams::from_head(g, head, self.latent_dim)
    }

    /// Posterior means, off the tape.
    pub fn mean(&self, p: &ParamSet, s_next: &Tensor, a_next: &Tensor) -> Result<Tensor> {
        let head = self.mlp.apply(p, &Tensor::hcat(&[s_next, a_next])?)?;
        let d = self.latent_dim;
        let mut out = Vec::with_capacity(head.rows() * d);
        for i in 0..head.rows() {
            out.extend_from_slice(&head.row(i)[..d]);
        }
        Tensor::matrix(head.rows(), d, out)
    }
}

/// KL weight and latent size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboConfig {
    pub kl_coef: f64,
    pub latent_dim: usize,
}

impl ElboConfig {
    pub fn new(kl_coef: f64, latent_dim: usize) -> Result<Self> {
        if !(kl_coef >= 0.0) {
            return Err(invalid(format!("KL coefficient must be non-negative, got {kl_coef}")));
        }
        if latent_dim == 0 {
            return Err(invalid("latent dimension must be at least 1"));
        }
        Ok(Self { kl_coef, latent_dim })
    }
}

/// Tape handles of the ELBO and its parts.
#[derive(Debug, Clone, Copy)]
pub struct ElboLoss {
    pub total: Var,
    pub flow: Var,
    pub current: Var,
    pub future: Var,
    /// Mean KL over the batch.
    pub kl: Var,
    /// Reparameterised intentions.
    pub z: Var,
}

/// `L_SARSA(z) + λ·mean KL(p(z|s',a') ‖ N(0, I))`, `z` drawn by reparameterisation
/// from `latent_noise`, so the encoder trains through both terms.
#[allow(clippy::too_many_arguments)]
pub fn elbo_objective(
    g: &mut Graph,
    enc: &IntentionEncoder,
    enc_p: &Bound,
    vf: &VectorFieldModel,
    vf_p: &Bound,
    target: &ParamSet,
    batch: &FlowBatch,
    latent_noise: &Tensor,
    gamma: f64,
    cfg: &ElboConfig,
    euler_steps: usize,
) -> Result<ElboLoss> {
    let post = enc.encode(g, enc_p, &batch.s_next, &batch.a_next)?;
    let z = gaussian_sample(g, &post, latent_noise)?;
    let flow = sarsa_flow_loss(g, vf, vf_p, target, batch, z, gamma, euler_steps)?;
    let kl_rows = kl_to_standard_normal(g, &post)?;
    let kl = g.mean(kl_rows);
    let weighted = g.scale(kl, cfg.kl_coef);
    let total = g.add(flow.total, weighted)?;
    Ok(ElboLoss { total, flow: flow.total, current: flow.current, future: flow.future, kl, z })
}

/// `z ~ N(0, I_d)`.
pub fn prior_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(invalid("latent dimension must be at least 1"));
    }
    Ok(Tensor::randn(&[d], rng).into_data())
}

/// `n` prior draws as an `[n, d]` matrix.
pub fn prior_batch<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Tensor> {
    if d == 0 {
        return Err(invalid("latent dimension must be at least 1"));
    }
    Ok(Tensor::randn(&[n, d], rng))
}

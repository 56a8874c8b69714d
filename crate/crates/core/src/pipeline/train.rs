//! Pre-training and fine-tuning loops over in-memory datasets.
//!
//! Every random draw of step `k` comes from `stream_rng(seed, stream, tag)`
//! with a tag derived from the stage and `k`, so a run resumed from a
//! checkpoint replays exactly the draws of an uninterrupted one.

use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, FinetuneData, LatentSource, Method, PolicyInit};
use super::eval::{evaluate_policy, EvalStats};
use super::metrics::MetricsRow;
use crate::autodiff::{adam_step, polyak_update, AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::envs::tasks::Task;
use crate::envs::{collect_dataset, label_rewards, Split, TransitionBatch, TransitionDataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::finetune::{
    actor_loss, critic_distillation_loss, critic_regression_loss, estimate_q_z, naive_gpi_objective, reward_loss, Critic,
    FrozenOccupancy, LearnedReward, RewardPredictor,
};
use crate::flow::{sarsa_flow_loss, FlowBatch, VectorFieldModel};
use crate::intention::{elbo_objective, prior_batch, ElboConfig, IntentionEncoder};
use crate::nets::PolicyModel;
use crate::rng::{stream_rng, Stream};

/// Which loop produced a [`TrainState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain = 0,
    Finetune = 1,
}

/// Seed offset that separates the fine-tuning dataset from the pre-training one.
const FINETUNE_DATA_SALT: u64 = 0x00f1_e7d4_7a5e_ed01;

fn tag(stage: Stage, step: usize) -> u64 {
    ((stage as u64) << 48) | step as u64
}

/// Network architectures for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub encoder: IntentionEncoder,
    pub vf: VectorFieldModel,
    pub policy: PolicyModel,
    pub reward: RewardPredictor,
    pub critic: Critic,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub conditioned: bool,
}

impl Models {
    pub fn new(cfg: &ExperimentConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        let h = &cfg.model.hidden;
        let d = cfg.model.latent_dim;
        Ok(Self {
            encoder: IntentionEncoder::new(state_dim, action_dim, d, h)?,
            vf: VectorFieldModel::new(state_dim, action_dim, d, h)?,
            policy: PolicyModel::new(state_dim, action_dim, h)?,
            reward: RewardPredictor::new(state_dim, h)?,
            critic: Critic::new(state_dim, action_dim, h)?,
            state_dim,
            action_dim,
            latent_dim: d,
            conditioned: cfg.model.conditioned,
        })
    }
}

/// Parameters with their optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: ParamSet,
    pub opt: AdamState,
}

impl Trained {
    pub fn new(params: ParamSet) -> Self {
        let opt = AdamState::new(&params);
        Self { params, opt }
    }

    fn step(&mut self, grads: &ParamSet, cfg: &AdamConfig) -> Result<()> {
        adam_step(&mut self.params, grads, &mut self.opt, cfg)
    }
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub arch_hash: u64,
    pub run_hash: u64,
    /// Absent for unconditioned models.
    pub encoder: Option<Trained>,
    pub vf: Trained,
    pub vf_target: ParamSet,
    /// Behaviour cloning during pre-training, the fine-tuned actor afterwards.
    pub policy: Option<Trained>,
    pub reward: Option<Trained>,
    /// Unused by naive GPI.
    pub critic: Option<Trained>,
}

const META_STEP: &str = "__meta__/step";
const META_STAGE: &str = "__meta__/stage";
const META_VERSION: &str = "__meta__/version";
const META_ARCH: &str = "__meta__/arch_hash";
const META_RUN: &str = "__meta__/run_hash";

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_scalar(META_VERSION, 1.0);
        c.put_scalar(META_STEP, self.step as f64);
        c.put_scalar(META_STAGE, self.stage as u8 as f64);
        c.put_u64(META_ARCH, self.arch_hash);
        c.put_u64(META_RUN, self.run_hash);
        let mut put = |name: &str, t: &Trained| {
            c.put_params(name, &t.params);
            c.put_adam(name, &t.opt);
        };
        if let Some(e) = &self.encoder {
            put("encoder", e);
        }
        put("vf", &self.vf);
        if let Some(p) = &self.policy {
            put("policy", p);
        }
        if let Some(r) = &self.reward {
            put("reward", r);
        }
        if let Some(q) = &self.critic {
            put("critic", q);
        }
        c.put_params("vf_target", &self.vf_target);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let stage = match c.scalar(META_STAGE)? as u8 {
            0 => Stage::Pretrain,
            1 => Stage::Finetune,
            s => return Err(Error::Format { what: "checkpoint", detail: format!("unknown stage {s}") }),
        };
        let version = c.scalar(META_VERSION)?;
        if version != 1.0 {
            return Err(Error::Format { what: "checkpoint", detail: format!("unsupported version {version}") });
        }
        let get = |name: &str| -> Result<Option<Trained>> {
            if !c.has_prefix(name) {
                return Ok(None);
            }
            Ok(Some(Trained { params: c.params(name)?, opt: c.adam(name)? }))
        };
        Ok(Self {
            stage,
            step: c.scalar(META_STEP)? as usize,
            arch_hash: c.u64(META_ARCH)?,
            run_hash: c.u64(META_RUN)?,
            encoder: get("encoder")?,
            vf: get("vf")?.ok_or_else(|| Error::Format { what: "checkpoint", detail: "no vector field".into() })?,
            vf_target: c.params("vf_target")?,
            policy: get("policy")?,
            reward: get("reward")?,
            critic: get("critic")?,
        })
    }
}

/// A configured task with its networks.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub task: Task,
    pub models: Models,
}

/// Called once per logged row; an error aborts training.
pub type MetricsSink<'a> = dyn FnMut(&MetricsRow) -> Result<()> + 'a;

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let task = Task::by_name(&cfg.env.task, cfg.env.gamma, cfg.env.embed_dim, cfg.env.horizon)?;
        let models = Models::new(&cfg, task.env.state_dim(), task.env.action_dim())?;
        Ok(Self { cfg, task, models })
    }

    fn seed(&self) -> u64 {
        self.cfg.run.seed
    }

    fn rng(&self, stream: Stream, stage: Stage, step: usize) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed(), stream, tag(stage, step))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.cfg.train.lr)
    }

    /// Unlabelled pre-training data and reward-labelled fine-tuning data.
    pub fn generate_data(&self) -> Result<(TransitionDataset, TransitionDataset)> {
        let e = &self.cfg.env;
        let (env, h) = (&self.task.env, self.task.horizon);
        let pre = collect_dataset(env, &self.task.behavior, e.pretrain_transitions, h, self.seed())?;
        let behavior = match e.finetune_data {
            FinetuneData::Same => self.task.behavior.clone(),
            FinetuneData::Perturbed => self.task.behavior.perturbed(e.perturb_eps)?,
        };
        let ft = collect_dataset(env, &behavior, e.finetune_transitions, h, self.seed() ^ FINETUNE_DATA_SALT)?;
        let ft = label_rewards(&ft, Split::Finetune, |s| env.reward_of_obs(s));
        Ok((pre, ft))
    }

    fn check_data(&self, d: &TransitionDataset) -> Result<()> {
        if d.state_dim != self.models.state_dim || d.action_dim != self.models.action_dim {
            return Err(shape_err(
                "dataset",
                format!(
                    "dataset dims ({}, {}) vs task dims ({}, {})",
                    d.state_dim, d.action_dim, self.models.state_dim, self.models.action_dim
                ),
            ));
        }
        if d.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        Ok(())
    }

    /// Freshly initialised pre-training state (step 0).
    pub fn init_pretrain(&self) -> TrainState {
        let m = &self.models;
        let init = |i: u64| stream_rng(self.seed(), Stream::Init, i);
        let vf = m.vf.init(&mut init(1));
        TrainState {
            stage: Stage::Pretrain,
            step: 0,
            arch_hash: self.cfg.arch_hash(),
            run_hash: self.cfg.run_hash(),
            encoder: m.conditioned.then(|| Trained::new(m.encoder.init(&mut init(0)))),
            vf_target: vf.clone(),
            vf: Trained::new(vf),
            policy: self.cfg.pretrain.bc.then(|| Trained::new(m.policy.init(&mut init(2)))),
            reward: None,
            critic: None,
        }
    }

    fn check_resume(&self, st: &TrainState, stage: Stage) -> Result<()> {
        if st.stage != stage {
            return Err(invalid(format!("checkpoint is from the {:?} stage, expected {stage:?}", st.stage)));
        }
        if st.arch_hash != self.cfg.arch_hash() {
            return Err(Error::HashMismatch { expected: self.cfg.arch_hash(), found: st.arch_hash });
        }
        if st.run_hash != self.cfg.run_hash() {
            return Err(Error::HashMismatch { expected: self.cfg.run_hash(), found: st.run_hash });
        }
        Ok(())
    }

    fn sample_batch(&self, data: &TransitionDataset, stage: Stage, k: usize) -> (TransitionBatch, Vec<usize>) {
        let idx = data.sample_indices(self.cfg.train.batch_size, &mut self.rng(Stream::Data, stage, k));
        (data.batch(&idx), idx)
    }

    /// One ELBO (or unconditioned SARSA-flow) update; returns `(current, future, kl)`.
    fn flow_update(&self, st: &mut TrainState, batch: &TransitionBatch, stage: Stage, k: usize) -> Result<(f64, f64, Option<f64>)> {
        let m = &self.models;
        let cfg = &self.cfg;
        let fb = FlowBatch::sample(batch, &mut self.rng(Stream::Time, stage, k), &mut self.rng(Stream::Noise, stage, k))?;
        let mut g = Graph::new();
        let vb = g.bind(&st.vf.params);
        let out = match &st.encoder {
            Some(enc) => {
                let eb = g.bind(&enc.params);
                let noise = Tensor::randn(&[fb.len(), m.latent_dim], &mut self.rng(Stream::Latent, stage, k));
                let ec = ElboConfig::new(cfg.pretrain.kl_coef, m.latent_dim)?;
                let l = elbo_objective(
                    &mut g,
                    &m.encoder,
                    &eb,
                    &m.vf,
                    &vb,
                    &st.vf_target,
                    &fb,
                    &noise,
                    cfg.env.gamma,
                    &ec,
                    cfg.train.euler_steps,
                )?;
                g.scalar(l.total)?;
                let grads = g.backward(l.total)?;
                let (ge, gv) = (grads.wrt(&eb), grads.wrt(&vb));
                (l.current, l.future, Some(l.kl), Some(ge), gv)
            }
            None => {
                let z = g.constant(Tensor::zeros(&[fb.len(), m.latent_dim]));
                let l = sarsa_flow_loss(&mut g, &m.vf, &vb, &st.vf_target, &fb, z, cfg.env.gamma, cfg.train.euler_steps)?;
                g.scalar(l.total)?;
                let gv = g.grads(l.total, &vb)?;
                (l.current, l.future, None, None, gv)
            }
        };
        let (cur, fut, kl, ge, gv) = out;
        let adam = self.adam();
        st.vf.step(&gv, &adam)?;
        if let (Some(enc), Some(ge)) = (st.encoder.as_mut(), ge) {
            enc.step(&ge, &adam)?;
        }
        polyak_update(&mut st.vf_target, &st.vf.params, cfg.train.tau)?;
        Ok((g.scalar(cur)?, g.scalar(fut)?, kl.map(|v| g.scalar(v)).transpose()?))
    }

    fn wall(&self, start: &Instant) -> u64 {
        if self.cfg.run.record_wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn should_log(&self, k: usize, total: usize) -> bool {
        k.is_multiple_of(self.cfg.run.log_interval) || k == total
    }

    /// Run pre-training from `st.step` up to `cfg.pretrain.steps`.
    pub fn pretrain(&self, st: &mut TrainState, data: &TransitionDataset, sink: &mut MetricsSink<'_>) -> Result<()> {
        self.check_data(data)?;
        self.check_resume(st, Stage::Pretrain)?;
        let total = self.cfg.pretrain.steps;
        let start = Instant::now();
        for k in st.step + 1..=total {
            let (batch, _) = self.sample_batch(data, Stage::Pretrain, k);
            let (cur, fut, kl) = self.flow_update(st, &batch, Stage::Pretrain, k).map_err(|e| at_step(e, k))?;
            let mut bc = None;
            if let Some(pol) = st.policy.as_mut() {
                let mut g = Graph::new();
                let pb = g.bind(&pol.params);
                let l = self.models.policy.bc_loss(&mut g, &pb, &batch.s, &batch.a)?;
                bc = Some(g.scalar(l).map_err(|e| at_step(e, k))?);
                let grads = g.grads(l, &pb)?;
                pol.step(&grads, &self.adam())?;
            }
            st.step = k;
            if self.should_log(k, total) {
                sink(&MetricsRow {
                    step: k,
                    flow_current: Some(cur),
                    flow_future: Some(fut),
                    kl,
                    actor: bc,
                    wall_ms: self.wall(&start),
                    ..Default::default()
                })?;
            }
        }
        Ok(())
    }

    /// What an uninterrupted run would have logged at `row.step`. Rows written
    /// only because an earlier run stopped there are dropped or trimmed.
    pub fn replay_row(&self, stage: Stage, mut row: MetricsRow) -> Option<MetricsRow> {
        let run = &self.cfg.run;
        let logged = row.step.is_multiple_of(run.log_interval);
        match stage {
            Stage::Pretrain => logged.then_some(row),
            Stage::Finetune => {
                let evaluated = row.step.is_multiple_of(run.eval_interval);
                if !evaluated {
                    row.eval_return_mean = None;
                    row.eval_return_std = None;
                }
                (logged || evaluated).then_some(row)
            }
        }
    }

    /// Fine-tuning state seeded from a finished pre-training state.
    pub fn init_finetune(&self, pre: &TrainState) -> Result<TrainState> {
        if pre.stage != Stage::Pretrain {
            return Err(invalid("fine-tuning must start from a pre-training checkpoint"));
        }
        if pre.arch_hash != self.cfg.arch_hash() {
            return Err(Error::HashMismatch { expected: self.cfg.arch_hash(), found: pre.arch_hash });
        }
        let m = &self.models;
        let init = |i: u64| stream_rng(self.seed(), Stream::Init, i);
        let policy = match self.cfg.finetune.policy_init {
            PolicyInit::Bc => {
                let p = pre.policy.as_ref().ok_or_else(|| invalid("policy_init = bc needs pretrain.bc = true"))?;
                Trained::new(p.params.clone())
            }
            PolicyInit::Random => Trained::new(m.policy.init(&mut init(5))),
        };
        let critic = (self.cfg.finetune.method != Method::NaiveGpi).then(|| Trained::new(m.critic.init(&mut init(4))));
        Ok(TrainState {
            stage: Stage::Finetune,
            step: 0,
            arch_hash: self.cfg.arch_hash(),
            run_hash: self.cfg.run_hash(),
            encoder: pre.encoder.clone(),
            vf: pre.vf.clone(),
            vf_target: pre.vf_target.clone(),
            policy: Some(policy),
            reward: Some(Trained::new(m.reward.init(&mut init(3)))),
            critic,
        })
    }

    fn critic_latents<R: rand::Rng + ?Sized>(&self, st: &TrainState, batch: &TransitionBatch, rng: &mut R) -> Result<Tensor> {
        let n = batch.s.rows();
        let d = self.models.latent_dim;
        if self.cfg.finetune.method == Method::OneStepPi || !self.models.conditioned {
            return Ok(Tensor::zeros(&[n, d]));
        }
        match self.cfg.finetune.latent_source {
            LatentSource::Prior => prior_batch(n, d, rng),
            LatentSource::Posterior => {
                let enc = st.encoder.as_ref().ok_or_else(|| invalid("posterior latents need an encoder"))?;
                let mut g = Graph::new();
                let eb = g.bind_const(&enc.params);
                let post = self.models.encoder.encode(&mut g, &eb, &batch.s_next, &batch.a_next)?;
                let noise = Tensor::randn(&[n, d], rng);
                let z = crate::nets::gaussian_sample(&mut g, &post, &noise)?;
                Ok(g.value(z).clone())
            }
        }
    }

    /// Run fine-tuning from `st.step` up to `cfg.finetune.steps`.
    pub fn finetune(&self, st: &mut TrainState, data: &TransitionDataset, sink: &mut MetricsSink<'_>) -> Result<()> {
        self.check_data(data)?;
        self.check_resume(st, Stage::Finetune)?;
        if data.rewards.iter().any(|r| r.is_nan()) {
            return Err(invalid("fine-tuning dataset has masked rewards"));
        }
        let cfg = &self.cfg;
        let ft = &cfg.finetune;
        let m = &self.models;
        let gamma = cfg.env.gamma;
        let total = ft.steps;
        let start = Instant::now();
        let adam = self.adam();
        for k in st.step + 1..=total {
            let (batch, _) = self.sample_batch(data, Stage::Finetune, k);
            let (cur, fut, kl) = self.flow_update(st, &batch, Stage::Finetune, k).map_err(|e| at_step(e, k))?;

            let rw = st.reward.as_mut().ok_or_else(|| invalid("fine-tuning state lacks a reward predictor"))?;
            let mut g = Graph::new();
            let rb = g.bind(&rw.params);
            let rl = reward_loss(&mut g, &m.reward, &rb, &batch.s, &batch.r)?;
            let reward_mse = g.scalar(rl).map_err(|e| at_step(e, k))?;
            let grads = g.grads(rl, &rb)?;
            rw.step(&grads, &adam)?;

            let mut critic_val = None;
            if ft.method != Method::NaiveGpi {
                let mut rng = self.rng(Stream::Critic, Stage::Finetune, k);
                let z = self.critic_latents(st, &batch, &mut rng)?;
                let reward = LearnedReward { model: &m.reward, params: &st.reward.as_ref().expect("reward").params };
                let q_z = estimate_q_z(
                    &m.vf,
                    &st.vf.params,
                    &reward,
                    &batch.s,
                    &batch.a,
                    &z,
                    ft.num_future,
                    gamma,
                    cfg.train.euler_steps,
                    &mut rng,
                )?;
                let critic = st.critic.as_mut().ok_or_else(|| invalid("fine-tuning state lacks a critic"))?;
                let mut g = Graph::new();
                let cb = g.bind(&critic.params);
                let l = match ft.method {
                    Method::ImplicitGpi => critic_distillation_loss(&mut g, &m.critic, &cb, &batch.s, &batch.a, &q_z, ft.expectile)?,
                    _ => critic_regression_loss(&mut g, &m.critic, &cb, &batch.s, &batch.a, &q_z)?,
                };
                critic_val = Some(g.scalar(l).map_err(|e| at_step(e, k))?);
                let grads = g.grads(l, &cb)?;
                critic.step(&grads, &adam)?;
            }

            let mut actor_val = None;
            if k % ft.policy_update_every == 0 {
                actor_val = Some(self.actor_update(st, &batch, k).map_err(|e| at_step(e, k))?);
            }

            st.step = k;
            let eval = if k % cfg.run.eval_interval == 0 || k == total {
                Some(self.evaluate(st)?)
            } else {
                None
            };
            if self.should_log(k, total) || eval.is_some() {
                sink(&MetricsRow {
                    step: k,
                    flow_current: Some(cur),
                    flow_future: Some(fut),
                    kl,
                    reward_mse: Some(reward_mse),
                    critic: critic_val,
                    actor: actor_val,
                    eval_return_mean: eval.as_ref().map(|e| e.mean),
                    eval_return_std: eval.as_ref().map(|e| e.std),
                    wall_ms: self.wall(&start),
                })?;
            }
        }
        Ok(())
    }

    fn actor_update(&self, st: &mut TrainState, batch: &TransitionBatch, k: usize) -> Result<f64> {
        let cfg = &self.cfg;
        let ft = &cfg.finetune;
        let m = &self.models;
        let mut rng = self.rng(Stream::Policy, Stage::Finetune, k);
        let pol = st.policy.as_mut().ok_or_else(|| invalid("fine-tuning state lacks a policy"))?;
        let mut g = Graph::new();
        let pb = g.bind(&pol.params);
        let l = match ft.method {
            Method::ImplicitGpi | Method::OneStepPi => {
                let n = batch.s.rows();
                let noise = ft.sample_actions.then(|| Tensor::randn(&[n, m.action_dim], &mut rng));
                let critic = st.critic.as_ref().ok_or_else(|| invalid("fine-tuning state lacks a critic"))?;
                let cb = g.bind_const(&critic.params);
                actor_loss(&mut g, &m.policy, &pb, &m.critic, &cb, &batch.s, &batch.a, noise.as_ref(), ft.alpha)?
            }
            Method::NaiveGpi => {
                let n = ft.gpi_batch_size.min(batch.s.rows());
                let rows: Vec<usize> = (0..n).collect();
                let s = batch.s.gather_rows(&rows);
                let a = batch.a.gather_rows(&rows);
                let (mm, nn) = (ft.num_intentions, ft.num_future);
                let zs = prior_batch(n * mm, m.latent_dim, &mut rng)?;
                let eps = Tensor::randn(&[n * mm * nn, m.state_dim], &mut rng);
                let noise = ft.sample_actions.then(|| Tensor::randn(&[n, m.action_dim], &mut rng));
                let occ = FrozenOccupancy {
                    vf: &m.vf,
                    vf_params: &st.vf.params,
                    reward: &m.reward,
                    reward_params: &st.reward.as_ref().expect("reward").params,
                    euler_steps: cfg.train.euler_steps,
                };
                naive_gpi_objective(&mut g, &m.policy, &pb, &occ, &s, &a, &zs, &eps, noise.as_ref(), mm, nn, cfg.env.gamma, ft.alpha)?
            }
        };
        let v = g.scalar(l)?;
        let grads = g.grads(l, &pb)?;
        pol.step(&grads, &self.adam())?;
        Ok(v)
    }

    /// Roll out the current policy with the configured episode count.
    pub fn evaluate(&self, st: &TrainState) -> Result<EvalStats> {
        let pol = st.policy.as_ref().ok_or_else(|| invalid("checkpoint has no policy to evaluate"))?;
        evaluate_policy(&self.task.env, &self.models.policy, &pol.params, self.cfg.run.eval_episodes, self.task.horizon, self.seed())
    }
}

fn at_step(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {k}")),
        other => other,
    }
}

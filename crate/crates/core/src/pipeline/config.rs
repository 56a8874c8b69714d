//! Experiment configuration: `key = value` lines under `[section]` headers.
//!
//! The grammar is a TOML subset; bare words such as `task = fork` are
//! accepted as strings. Unknown sections and keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Metrics rows are written every this many steps (and at the last step).
    pub log_interval: usize,
    /// Fine-tuning evaluates the policy every this many steps (and at the last step).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Off by default so that metrics files are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, log_interval: 100, eval_interval: 1000, eval_episodes: 10, record_wall_clock: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneData {
    /// Same intention mixture as pre-training.
    Same,
    /// Each intention policy mixed with uniform noise (`perturb_eps`).
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// `chain3`, `fork` or `pointmass`.
    pub task: String,
    pub gamma: f64,
    pub embed_dim: usize,
    /// Episode length; the task default when absent.
    pub horizon: Option<usize>,
    pub pretrain_transitions: usize,
    pub finetune_transitions: usize,
    pub finetune_data: FinetuneData,
    pub perturb_eps: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: "fork".into(),
            gamma: 0.9,
            embed_dim: 4,
            horizon: None,
            pretrain_transitions: 20_000,
            finetune_transitions: 5_000,
            finetune_data: FinetuneData::Same,
            perturb_eps: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// `false` trains an occupancy model with the intention input zeroed.
    pub conditioned: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], latent_dim: 8, conditioned: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub euler_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 256, lr: 3e-4, tau: 5e-3, euler_steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub kl_coef: f64,
    /// Also fit a behaviour-cloning policy.
    pub bc: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, kl_coef: 0.05, bc: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Expectile distillation of intention-conditioned Q estimates.
    ImplicitGpi,
    /// Explicit max over sampled intentions, differentiated through the sampler.
    NaiveGpi,
    /// Unconditioned occupancy model and a single improvement step.
    OneStepPi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    Random,
    Bc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    Prior,
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: usize,
    pub method: Method,
    pub num_future: usize,
    pub expectile: f64,
    pub alpha: f64,
    pub num_intentions: usize,
    pub policy_update_every: usize,
    pub policy_init: PolicyInit,
    pub latent_source: LatentSource,
    /// Evaluate the critic at a sampled policy action (`true`) or at the mean.
    pub sample_actions: bool,
    /// Rows per naive-GPI actor step; each expands to `M·N` sampler rows.
    pub gpi_batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            steps: 10_000,
            method: Method::ImplicitGpi,
            num_future: d.num_future,
            expectile: d.expectile,
            alpha: d.alpha,
            num_intentions: d.num_intentions,
            policy_update_every: d.policy_update_every,
            policy_init: PolicyInit::Bc,
            latent_source: LatentSource::Prior,
            sample_actions: true,
            gpi_batch_size: 16,
        }
    }
}

impl FinetuneSection {
    pub fn objective(&self) -> FinetuneConfig {
        FinetuneConfig {
            num_future: self.num_future,
            expectile: self.expectile,
            alpha: self.alpha,
            num_intentions: self.num_intentions,
            policy_update_every: self.policy_update_every,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Defaults to `<out>/pretrain.infd`.
    pub pretrain: Option<PathBuf>,
    /// Defaults to `<out>/finetune.infd`.
    pub finetune: Option<PathBuf>,
    /// Keep hidden intention ids in the written dataset files.
    pub debug_ids: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSection,
    pub data: DataConfig,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Quote bare-word values so that `task = fork` reads as a string.
fn quote_bare_words(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('[') {
            out.push_str(line);
        } else if let Some((key, value)) = line.split_once('=') {
            let (v, comment) = match value.split_once('#') {
                Some((v, c)) if !v.contains('"') => (v.trim(), Some(c)),
                _ => (value.trim(), None),
            };
            let bare = !v.is_empty()
                && v.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '/' || c == '.')
                && !matches!(v, "true" | "false" | "inf" | "nan")
                && v.chars().all(|c| c.is_ascii_alphanumeric() || "_-./".contains(c));
            if bare {
                out.push_str(&format!("{} = \"{v}\"", key.trim_end()));
                if let Some(c) = comment {
                    out.push_str(&format!(" #{c}"));
                }
            } else {
                out.push_str(line);
            }
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(&quote_bare_words(text)).map_err(|e| cfg_err(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        if !matches!(e.task.as_str(), "chain3" | "fork" | "pointmass") {
            return Err(cfg_err(format!("env.task `{}` is not one of chain3, fork, pointmass", e.task)));
        }
        if !(0.0..1.0).contains(&e.gamma) {
            return Err(cfg_err(format!("env.gamma must lie in [0, 1), got {}", e.gamma)));
        }
        if e.embed_dim < 2 {
            return Err(cfg_err("env.embed_dim must be at least 2"));
        }
        if e.pretrain_transitions == 0 || e.finetune_transitions == 0 {
            return Err(cfg_err("dataset sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&e.perturb_eps) {
            return Err(cfg_err("env.perturb_eps must lie in [0, 1]"));
        }
        if e.horizon.is_some_and(|h| h < 2) {
            return Err(cfg_err("env.horizon must be at least 2"));
        }
        let m = &self.model;
        if m.hidden.is_empty() || m.hidden.contains(&0) {
            return Err(cfg_err("model.hidden needs at least one non-zero width"));
        }
        if m.latent_dim == 0 {
            return Err(cfg_err("model.latent_dim must be at least 1"));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.euler_steps == 0 {
            return Err(cfg_err("train.batch_size and train.euler_steps must be positive"));
        }
        if !(t.lr > 0.0) {
            return Err(cfg_err("train.lr must be positive"));
        }
        if !(0.0..=1.0).contains(&t.tau) {
            return Err(cfg_err("train.tau must lie in [0, 1]"));
        }
        if !(self.pretrain.kl_coef >= 0.0) {
            return Err(cfg_err("pretrain.kl_coef must be non-negative"));
        }
        self.finetune.objective().validate().map_err(|e| cfg_err(format!("finetune: {e}")))?;
        let r = &self.run;
        if self.finetune.gpi_batch_size == 0 {
            return Err(cfg_err("finetune.gpi_batch_size must be positive"));
        }
        if r.log_interval == 0 || r.eval_interval == 0 || r.eval_episodes == 0 {
            return Err(cfg_err("run intervals and eval_episodes must be positive"));
        }
        if self.finetune.method == Method::OneStepPi && m.conditioned {
            return Err(cfg_err("one_step_pi needs model.conditioned = false"));
        }
        Ok(())
    }

    /// Hash of everything that fixes parameter shapes.
    pub fn arch_hash(&self) -> u64 {
        let key = format!(
            "{}|{}|{}|{:?}|{}|{}",
            self.env.task, self.env.embed_dim, self.env.gamma, self.model.hidden, self.model.latent_dim, self.model.conditioned
        );
        digest(&key)
    }

    /// Hash of the whole run except the step targets, so a resume can extend them.
    pub fn run_hash(&self) -> u64 {
        let mut c = self.clone();
        c.pretrain.steps = 0;
        c.finetune.steps = 0;
        c.run.log_interval = 0;
        c.run.eval_interval = 0;
        c.run.record_wall_clock = false;
        digest(&c.to_text())
    }
}

fn digest(text: &str) -> u64 {
    let h = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_bare_words() {
        let c = ExperimentConfig::parse(
            "# demo\n[run]\nseed = 3\n\n[env]\ntask = chain3   # ring\ngamma = 0.8 # discount\n\n[model]\nhidden = [16, 16]\nconditioned = false\n\n[finetune]\nmethod = one_step_pi\npolicy_init = random\n",
        )
        .unwrap();
        assert_eq!(c.run.seed, 3);
        assert_eq!(c.env.task, "chain3");
        assert_eq!(c.model.hidden, vec![16, 16]);
        assert_eq!(c.finetune.method, Method::OneStepPi);
        assert_eq!(c.finetune.policy_init, PolicyInit::Random);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn quoted_strings_still_work() {
        let c = ExperimentConfig::parse("[env]\ntask = \"pointmass\"\n").unwrap();
        assert_eq!(c.env.task, "pointmass");
    }

    #[test]
    fn unknown_keys_and_sections_fail() {
        assert!(ExperimentConfig::parse("[run]\nsede = 3\n").is_err());
        assert!(ExperimentConfig::parse("[runn]\nseed = 3\n").is_err());
        assert!(ExperimentConfig::parse("[finetune]\nmethod = greedy\n").is_err());
    }

    #[test]
    fn ranges_are_enforced() {
        assert!(ExperimentConfig::parse("[env]\ngamma = 1.0\n").is_err());
        assert!(ExperimentConfig::parse("[finetune]\nexpectile = 1.0\n").is_err());
        assert!(ExperimentConfig::parse("[finetune]\nnum_future = 0\n").is_err());
        assert!(ExperimentConfig::parse("[model]\nlatent_dim = 0\n").is_err());
        assert!(ExperimentConfig::parse("[finetune]\nmethod = one_step_pi\n").is_err());
    }

    #[test]
    fn hashes_ignore_step_targets_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.pretrain.steps = 7;
        b.finetune.steps = 9;
        assert_eq!(a.run_hash(), b.run_hash());
        b.finetune.alpha = 3.0;
        assert_ne!(a.run_hash(), b.run_hash());
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.model.latent_dim = 2;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }
}

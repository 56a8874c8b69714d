//! End-to-end stages: data generation, pre-training, fine-tuning, evaluation
//! and oracle audits, with their on-disk artefacts.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod oracle;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use eval::EvalStats;
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};
pub use oracle::OracleReport;
pub use train::{Experiment, Stage, TrainState};

use crate::envs::io::{read_dataset, write_dataset, write_dataset_csv};
use crate::envs::TransitionDataset;
use crate::error::{invalid, Result};

pub const PRETRAIN_DATA: &str = "pretrain.infd";
pub const FINETUNE_DATA: &str = "finetune.infd";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const ORACLE_REPORT: &str = "oracle_report.txt";

/// Write both datasets (binary and CSV) into `out`.
pub fn run_gen_data(exp: &Experiment, out: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out)?;
    let (pre, ft) = exp.generate_data()?;
    let debug = exp.cfg.data.debug_ids;
    let mut paths = Vec::new();
    for (name, d) in [(PRETRAIN_DATA, &pre), (FINETUNE_DATA, &ft)] {
        let p = out.join(name);
        write_dataset(&p, d, debug)?;
        write_dataset_csv(&p.with_extension("csv"), d)?;
        paths.push(p);
    }
    Ok((paths[0].clone(), paths[1].clone()))
}

fn dataset(configured: &Option<PathBuf>, out: &Path, default: &str) -> Result<TransitionDataset> {
    let p = configured.clone().unwrap_or_else(|| out.join(default));
    if !p.exists() {
        return Err(invalid(format!("dataset {} not found; run gen-data first", p.display())));
    }
    read_dataset(&p)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?)
}

/// Pre-train into `out`, optionally continuing from `resume`.
pub fn run_pretrain(exp: &Experiment, out: &Path, resume: Option<&Path>) -> Result<TrainState> {
    fs::create_dir_all(out)?;
    let data = dataset(&exp.cfg.data.pretrain, out, PRETRAIN_DATA)?;
    let metrics = out.join(PRETRAIN_METRICS);
    let (mut st, mut w) = match resume {
        Some(p) => {
            let st = load_state(p)?;
            let w = MetricsWriter::resume(&metrics, st.step, |r| exp.replay_row(Stage::Pretrain, r))?;
            (st, w)
        }
        None => (exp.init_pretrain(), MetricsWriter::create(&metrics)?),
    };
    exp.pretrain(&mut st, &data, &mut |r| w.write(r))?;
    st.to_checkpoint().save(&out.join(PRETRAIN_CKPT))?;
    Ok(st)
}

/// Fine-tune into `out`. `resume` may name a pre-training checkpoint (start
/// fresh) or a fine-tuning one (continue); it defaults to `out/pretrain.ckpt`.
pub fn run_finetune(exp: &Experiment, out: &Path, resume: Option<&Path>) -> Result<TrainState> {
    fs::create_dir_all(out)?;
    let data = dataset(&exp.cfg.data.finetune, out, FINETUNE_DATA)?;
    let src = resume.map(Path::to_path_buf).unwrap_or_else(|| out.join(PRETRAIN_CKPT));
    let loaded = load_state(&src)?;
    let metrics = out.join(FINETUNE_METRICS);
    let (mut st, mut w) = match loaded.stage {
        Stage::Pretrain => (exp.init_finetune(&loaded)?, MetricsWriter::create(&metrics)?),
        Stage::Finetune => {
            let w = MetricsWriter::resume(&metrics, loaded.step, |r| exp.replay_row(Stage::Finetune, r))?;
            (loaded, w)
        }
    };
    exp.finetune(&mut st, &data, &mut |r| w.write(r))?;
    st.to_checkpoint().save(&out.join(FINETUNE_CKPT))?;
    Ok(st)
}

/// Evaluate the policy stored in `ckpt` (default `out/finetune.ckpt`).
pub fn run_evaluate(exp: &Experiment, out: &Path, ckpt: Option<&Path>) -> Result<EvalStats> {
    let p = ckpt.map(Path::to_path_buf).unwrap_or_else(|| out.join(FINETUNE_CKPT));
    let st = load_state(&p)?;
    if st.arch_hash != exp.cfg.arch_hash() {
        return Err(crate::Error::HashMismatch { expected: exp.cfg.arch_hash(), found: st.arch_hash });
    }
    exp.evaluate(&st)
}

/// Audit against exact oracles; writes `out/oracle_report.txt`. Uses the
/// checkpoint if given, else `out/pretrain.ckpt` if present, else a fresh model.
pub fn run_oracle_check(exp: &Experiment, out: &Path, ckpt: Option<&Path>) -> Result<OracleReport> {
    fs::create_dir_all(out)?;
    let default = out.join(PRETRAIN_CKPT);
    let path = ckpt.map(Path::to_path_buf).or_else(|| default.exists().then_some(default));
    let st = path.as_deref().map(load_state).transpose()?;
    let data = match &exp.cfg.data.pretrain {
        Some(p) => read_dataset(p)?,
        None if out.join(PRETRAIN_DATA).exists() => read_dataset(&out.join(PRETRAIN_DATA))?,
        None => exp.generate_data()?.0,
    };
    let rep = oracle::oracle_check(exp, st.as_ref(), &data)?;
    fs::write(out.join(ORACLE_REPORT), rep.to_text())?;
    Ok(rep)
}

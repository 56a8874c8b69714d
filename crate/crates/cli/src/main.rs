use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use infom::pipeline::{self, Experiment, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "infom", version, about = "Intention-conditioned flow occupancy models on desk-scale tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the pre-training and fine-tuning datasets.
    GenData(Common),
    /// Pre-train the encoder, occupancy model and (optionally) a BC policy.
    Pretrain(Common),
    /// Fine-tune from a pre-training checkpoint, or continue a fine-tuning one.
    Finetune(Common),
    /// Roll out the policy of a checkpoint.
    Evaluate(Common),
    /// Audit against exact oracles; exits non-zero if any check fails.
    OracleCheck(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for datasets, checkpoints, metrics and reports.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Checkpoint to resume from (or to evaluate / audit).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the total step count of the stage being run.
    #[arg(long)]
    steps: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        Ok(cfg)
    }

    fn experiment(&self, stage: Option<Stage>) -> Result<Experiment> {
        let mut cfg = self.config()?;
        if let Some(n) = self.steps {
            match stage {
                Some(Stage::Pretrain) => cfg.pretrain.steps = n,
                Some(Stage::Finetune) => cfg.finetune.steps = n,
                None => anyhow::bail!("--steps only applies to pretrain and finetune"),
            }
        }
        Ok(Experiment::new(cfg)?)
    }
}

fn report_state(what: &str, st: &pipeline::TrainState, out: &Path) {
    println!("{what}: step {} written to {}", st.step, out.display());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let exp = c.experiment(None)?;
            let (pre, ft) = pipeline::run_gen_data(&exp, &c.out)?;
            println!("wrote {} and {}", pre.display(), ft.display());
        }
        Command::Pretrain(c) => {
            let exp = c.experiment(Some(Stage::Pretrain))?;
            let st = pipeline::run_pretrain(&exp, &c.out, c.resume.as_deref()).context("pre-training failed")?;
            report_state("pretrain", &st, &c.out.join(pipeline::PRETRAIN_CKPT));
        }
        Command::Finetune(c) => {
            let exp = c.experiment(Some(Stage::Finetune))?;
            let st = pipeline::run_finetune(&exp, &c.out, c.resume.as_deref()).context("fine-tuning failed")?;
            report_state("finetune", &st, &c.out.join(pipeline::FINETUNE_CKPT));
        }
        Command::Evaluate(c) => {
            let exp = c.experiment(None)?;
            let stats = pipeline::run_evaluate(&exp, &c.out, c.resume.as_deref())?;
            println!("eval_return_mean = {:?}", stats.mean);
            println!("eval_return_std = {:?}", stats.std);
            println!("episodes = {}", stats.returns.len());
        }
        Command::OracleCheck(c) => {
            let exp = c.experiment(None)?;
            let rep = pipeline::run_oracle_check(&exp, &c.out, c.resume.as_deref())?;
            print!("{}", rep.to_text());
            if !rep.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line entry points: corpus synthesis, training, evaluation,
//! captioning and gradient checking.

mod commands;
mod config;
pub mod gradsuite;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use commands::{
    canonical_task, cmd_caption, cmd_eval, cmd_synth, cmd_train, task_kind, CaptionLine, Dataset, Shallow,
    ShallowModel, SynthOutput, TrainOutput, CAPTIONS_FILE, CHECKPOINT_FILE, CORPUS_FILE, EMBEDDINGS_FILE, EVAL_FILE,
    REPORT_FILE, SCHEMA_VERSION, TIMING_FILE,
};
pub use config::{EvalPart, ModelFamily, RunConfig, ShallowFeatures, OUT_ENV};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "newscnn", version, about = "Multi-task text CNN for news articles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every data command. Precedence: defaults, then
/// `--config`, then `--set`, then the dedicated flags.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $NEWSCNN_OUT/<command>, else runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Word embedding table (text format).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Earth radius in km for distance reports.
    #[arg(long)]
    pub earth_radius: Option<f64>,
    /// Covariance regularizer of the CCA loss and projections.
    #[arg(long)]
    pub reg_eps: Option<f64>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and embedding table.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its checkpoint and report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Single task.
        #[arg(long, conflicts_with = "tasks")]
        task: Option<String>,
        /// Comma-separated task list for multitask training.
        #[arg(long)]
        tasks: Option<String>,
        /// Checkpoint whose trunk is reused under a fresh head.
        #[arg(long)]
        transfer_from: Option<PathBuf>,
        /// Allow a transfer head identical to one the checkpoint already has.
        #[arg(long)]
        force: bool,
        /// cnn or shallow.
        #[arg(long)]
        model: Option<String>,
    },
    /// Evaluate a checkpoint on one split part.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one head; an error if the checkpoint lacks it.
        #[arg(long)]
        task: Option<String>,
        /// train, val, test or all.
        #[arg(long)]
        part: Option<String>,
    },
    /// Generate captions with a caption checkpoint.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        part: Option<String>,
        /// Beam width; 0 decodes greedily.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Finite-difference checks of every layer and loss.
    Gradcheck {
        /// Run only these components (comma-separated or repeated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = gradsuite::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<gradsuite::Fault>,
    },
}

impl Common {
    /// Resolves the run configuration from all sources.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for pair in &self.set {
            cfg.apply_pair(pair)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.out {
            cfg.out = Some(p.clone());
        }
        if let Some(p) = &self.corpus {
            cfg.corpus = Some(p.clone());
        }
        if let Some(p) = &self.embeddings {
            cfg.embeddings = Some(p.clone());
        }
        if let Some(r) = self.earth_radius {
            cfg.earth_radius = r;
        }
        if let Some(r) = self.reg_eps {
            cfg.reg_eps = r;
        }
        Ok(cfg)
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let out = cmd_synth(&common.resolve()?)?;
            println!("wrote {} records to {}", out.records, out.corpus.display());
            println!("wrote embeddings to {}", out.embeddings.display());
        }
        Command::Train { common, task, tasks, transfer_from, force, model } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = task.or(tasks) {
                cfg.apply("tasks", &t)?;
            }
            if let Some(p) = transfer_from {
                cfg.transfer_from = Some(p);
            }
            cfg.force |= force;
            if let Some(m) = model {
                cfg.apply("model", &m)?;
            }
            let out = cmd_train(&cfg)?;
            print_json(&out.report["metrics"]);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval { common, checkpoint, task, part } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p);
            }
            if let Some(p) = part {
                cfg.apply("part", &p)?;
            }
            print_json(&cmd_eval(&cfg, task.as_deref())?);
        }
        Command::Caption { common, checkpoint, part, beam } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p);
            }
            if let Some(p) = part {
                cfg.apply("part", &p)?;
            }
            if let Some(b) = beam {
                cfg.beam = b;
            }
            print_json(&cmd_caption(&cfg)?);
        }
        Command::Gradcheck { only, seeds, threshold, seed, out, inject_fault } => {
            let opts = gradsuite::SuiteOptions { seeds, threshold, only, fault: inject_fault, root_seed: seed };
            let rows = gradsuite::run_suite(&opts)?;
            print!("{}", gradsuite::format_table(&rows, threshold));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let p = dir.join("gradcheck.json");
                let body = json!({ "schema_version": SCHEMA_VERSION, "command": "gradcheck", "threshold": threshold, "rows": rows });
                std::fs::write(&p, serde_json::to_string_pretty(&body).expect("serializable") + "\n")
                    .map_err(|e| Error::io(&p, e))?;
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numerical(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

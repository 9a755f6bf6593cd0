//! `flowrec` — synthesize data, preprocess interaction logs, train the
//! flow-matching recommender, and evaluate/analyze checkpoints.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 data error, 4 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowrec_core::config::RunConfig;
use flowrec_core::error::Result;
use flowrec_core::pipeline;

#[derive(Parser)]
#[command(
    name = "flowrec",
    version,
    about = "Multi-domain sequential recommender based on Gaussian-mixture flow matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Flags override file values.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config thread count.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain interaction log.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory for interactions.csv + manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest a raw log, apply k-core filtering, and write the split files.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Raw interaction log; defaults to data.raw_path from the config.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Output split directory (manifest.json + split.bin).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train; writes best checkpoint, CSV log, and a test report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Preprocessed split directory; otherwise preprocessing runs
        /// inline from data.raw_path.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Include the grouping analyses section.
        #[arg(long)]
        group: bool,
        /// Include the few-shot grouping (implied by --group).
        #[arg(long)]
        few_shot: bool,
        /// Include the timing section.
        #[arg(long)]
        timing: bool,
        /// Override the ODE solver step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Dump per-instance ranks as CSV.
        #[arg(long)]
        dump_ranks: Option<PathBuf>,
    },
    /// Full grouping analyses for a checkpoint (transition, domain-count,
    /// few-shot) plus optional rank dump.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_ranks: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = common.load()?;
            let manifest = pipeline::run_synth(&cfg, &out)?;
            println!(
                "synth: {} records for {} users across {} domains -> {}",
                manifest.num_records,
                manifest.num_users,
                manifest.num_domains,
                out.display()
            );
        }
        Command::Preprocess { common, raw, out } => {
            let mut cfg = common.load()?;
            if let Some(raw) = raw {
                cfg.data.raw_path = Some(raw.display().to_string());
            }
            let data = pipeline::load_or_prepare(&cfg, None)?;
            pipeline::save_split(&out, &data, &cfg.hash())?;
            println!(
                "preprocess: {} users, {} train / {} val / {} test instances -> {}",
                data.split.users.len(),
                data.split.train.len(),
                data.split.validation.len(),
                data.split.test.len(),
                out.display()
            );
        }
        Command::Train { common, split, out } => {
            let cfg = common.load()?;
            let data = pipeline::load_or_prepare(&cfg, split.as_deref())?;
            let artifacts = pipeline::run_train(&cfg, &data, &out)?;
            println!(
                "train: {} epochs, best epoch {}, test group NDCG@10 {:.4}",
                artifacts.epochs_run, artifacts.best_epoch, artifacts.report.group_ndcg10
            );
            println!(
                "train: wrote {}, {}, {}",
                artifacts.checkpoint.display(),
                artifacts.log.display(),
                artifacts.report_path.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
            group,
            few_shot,
            timing,
            steps,
            dump_ranks,
        } => {
            let cfg = common.load()?;
            let data = pipeline::load_or_prepare(&cfg, split.as_deref())?;
            let model = pipeline::load_model(&cfg, &data.vocab, &checkpoint)?;
            let flags = pipeline::EvalFlags {
                group,
                few_shot,
                timing,
                steps,
                dump_ranks,
            };
            let report = pipeline::run_eval(&cfg, &model, &data, &flags)?;
            pipeline::write_json(&out, &report)?;
            println!(
                "eval: {} instances, group NDCG@10 {:.4} -> {}",
                report.num_instances,
                report.group_ndcg10,
                out.display()
            );
        }
        Command::Analyze {
            common,
            checkpoint,
            split,
            out,
            dump_ranks,
        } => {
            let cfg = common.load()?;
            let data = pipeline::load_or_prepare(&cfg, split.as_deref())?;
            let model = pipeline::load_model(&cfg, &data.vocab, &checkpoint)?;
            let flags = pipeline::EvalFlags {
                group: true,
                few_shot: true,
                timing: false,
                steps: None,
                dump_ranks,
            };
            let report = pipeline::run_eval(&cfg, &model, &data, &flags)?;
            pipeline::write_json(&out, &report)?;
            let groupings = report.groupings.as_ref().expect("analyze always groups");
            for bucket in &groupings.transition_rate {
                println!(
                    "analyze: transition-rate {:>4}: n={} ndcg@10={}",
                    bucket.label,
                    bucket.size,
                    bucket
                        .ndcg10
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "-".into())
                );
            }
            println!("analyze: report -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

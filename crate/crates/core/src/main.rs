use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynprompt::checkpoint::Checkpoint;
use dynprompt::experiment::{self, ExperimentConfig};
use dynprompt::{synthetic, Result};

#[derive(Parser)]
#[command(name = "dynprompt", version, about = "Dialog adaptation experiments on a miniature transformer")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Concurrent grid cells (overrides the configuration).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus files and learn the tokenizer.
    Prepare {
        /// Generate a synthetic corpus of this many dialogs under
        /// `<output-dir>/data` and use it instead of the configured files.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Pre-train the base language model.
    Pretrain,
    /// Run every regime × fraction cell and write the report.
    RunGrid,
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the report table and plot data.
    Export {
        /// Report file; defaults to `<output-dir>/report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Destination directory; defaults to the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Talk to a checkpoint, one query per line.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli)?;
    match cli.command {
        Command::Prepare { synthetic } => {
            if let Some(n) = synthetic {
                let dir = cfg.output_dir.join("data");
                let counts = synthetic::write_corpus(&dir, n, cfg.seed)?;
                eprintln!("wrote {counts:?} train/valid/test dialogs to {}", dir.display());
                cfg.corpus.train = dir.join("train.txt");
                cfg.corpus.valid = Some(dir.join("valid.txt"));
                cfg.corpus.test = Some(dir.join("test.txt"));
            }
            let c = experiment::prepare(&cfg)?;
            println!(
                "prepared {} train, {} valid, {} test pairs; vocabulary {}",
                c.train.len(),
                c.valid.len(),
                c.test.len(),
                c.tokenizer.vocab_size()
            );
        }
        Command::Pretrain => {
            let ckpt = experiment::pretrain(&cfg)?;
            println!(
                "base checkpoint {} ({} steps)",
                cfg.base_path().display(),
                ckpt.meta.train_steps.unwrap_or(0)
            );
        }
        Command::RunGrid => {
            let report = experiment::run_grid(&cfg)?;
            for r in &report.rows {
                match (&r.metrics, &r.error) {
                    (Some(m), _) => println!(
                        "{:<18} {:>4.0}%  bleu4 {:.4}  novelty {:.3}  diversity {:.3}",
                        r.regime.label(),
                        r.fraction * 100.0,
                        m.bleu4,
                        m.novelty,
                        m.diversity
                    ),
                    (None, e) => println!(
                        "{:<18} {:>4.0}%  failed: {}",
                        r.regime.label(),
                        r.fraction * 100.0,
                        e.as_deref().unwrap_or("unknown")
                    ),
                }
            }
        }
        Command::Evaluate { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let row = experiment::evaluate_checkpoint(&cfg, &ckpt)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
        }
        Command::Export { report, out } => {
            let report = report.unwrap_or_else(|| cfg.report_path());
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            for p in experiment::export(&report, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Chat { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            experiment::chat(&ckpt, cfg.train.max_new_tokens, io::stdin().lock(), io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

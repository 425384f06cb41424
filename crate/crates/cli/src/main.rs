use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use tristage_cli::{commands, GenerateOptions, LoadedConfig};
use tristage_core::stages::StageKind;

#[derive(Parser)]
#[command(name = "tristage", version, about = "Three-stage accompaniment token model")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, default_value = "configs/desk.toml")]
    config: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and filter the synthetic pair corpus.
    SynthData,
    /// Turn kept pairs into semantic and acoustic token files.
    Tokenize {
        /// Fit the codebooks on this corpus instead of loading saved ones.
        #[arg(long)]
        fit: bool,
    },
    Train {
        #[arg(long)]
        stage: StageKind,
        /// Continue from the stage checkpoint.
        #[arg(long)]
        resume: bool,
    },
    Generate {
        /// Vocal semantic token file (default: every tokenized pair).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
        /// Also write decoded frames, and the vocal mix when available.
        #[arg(long)]
        decode: bool,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Stage checkpoint to score on the held-out pairs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = LoadedConfig::load(&cli.config)?;
    match cli.cmd {
        Cmd::SynthData => {
            let s = commands::synth_data(&cfg)?;
            println!("{} pairs, {} kept ({:.1}%)", s.total, s.kept, 100.0 * s.kept_fraction());
        }
        Cmd::Tokenize { fit } => {
            let split = commands::tokenize(&cfg, fit)?;
            println!("tokenized {} training and {} held-out pairs", split.train.len(), split.heldout.len());
        }
        Cmd::Train { stage, resume } => {
            let out = commands::train(&cfg, stage, resume)?;
            if let Some(last) = out.history.last() {
                println!("{stage}: step {} loss {:.4}", last.step, last.loss);
            }
            if let Some((step, loss)) = out.stopped_at {
                println!("{stage}: reached target at step {step} (full-set loss {loss:.4})");
            }
        }
        Cmd::Generate {
            input,
            output,
            decode,
            cfg_scale,
            temperature,
            top_k,
            seed,
        } => {
            let opts = GenerateOptions {
                input,
                output,
                decode,
                cfg_scale,
                temperature,
                top_k,
                seed,
            };
            for p in commands::generate(&cfg, &opts)? {
                println!("{}", p.display());
            }
        }
        Cmd::Eval {
            generated,
            reference,
            checkpoint,
        } => {
            let r = commands::eval(&cfg, generated.as_deref(), reference.as_deref(), checkpoint.as_deref())?;
            let mut shown = r.clone();
            shown.config = String::new();
            println!("{}", serde_json::to_string_pretty(&shown)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

mod cache;
mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

/// Fundus image enhancement: degradation synthesis, pyramid-fed network training,
/// inference and quality evaluation.
#[derive(Debug, Parser)]
#[command(name = "fundus-enhance", version, args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` file; flags on the command line win over its entries
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for data synthesis and per-group gradients (0 = all cores)
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write K degraded variants of each image plus a JSON-lines recipe log
    Degrade(commands::DegradeArgs),
    /// Train the enhancement network on a directory of clean images
    Train(commands::TrainArgs),
    /// Enhance images with a trained checkpoint
    Enhance(commands::EnhanceArgs),
    /// Full-reference (SSIM/PSNR) or mask-overlap (IoU/DSC) evaluation
    Evaluate(commands::EvaluateArgs),
    /// Summarize quality labels into FIQA and WFQA
    Wfqa(commands::WfqaArgs),
    /// Write the Laplacian pyramid levels of an image and a shape manifest
    Pyramid(commands::PyramidArgs),
}

/// A failure with its exit code and a short machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    pub fn runtime(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let kind = e
            .chain()
            .find_map(|c| {
                c.downcast_ref::<fundus_model::Error>()
                    .map(|m| m.kind())
                    .or_else(|| c.downcast_ref::<fundus_core::Error>().map(|m| m.kind()))
            })
            .unwrap_or("runtime");
        let mut message = String::new();
        for cause in e.chain().map(|c| c.to_string()) {
            if !message.contains(&cause) {
                if !message.is_empty() {
                    message.push_str(": ");
                }
                message.push_str(&cause);
            }
        }
        Failure::runtime(kind, message)
    }
}

fn run(args: Vec<OsString>) -> Result<(), Failure> {
    let args = config::expand(&Cli::command(), args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(Failure::usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    commands::dispatch(cli.command, &cli.common).map_err(Failure::from)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = serde_json::to_string(&f.message).unwrap_or_else(|_| "\"?\"".into());
            eprintln!("error kind={} message={message}", f.kind);
            ExitCode::from(f.code)
        }
    }
}

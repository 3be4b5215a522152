//! `talkflow` command-line entry point.

mod bench;
mod data;
mod eval;
mod infer;
mod oracle;
mod run;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use talkflow_core::Error;

#[derive(Debug, Parser)]
#[command(name = "talkflow", version, about = "Audio-driven talking-blob video generation")]
struct Cli {
    /// Flat `key = value` config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a filtered synthetic dataset.
    GenData(data::GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(train::TrainArgs),
    /// Generate a video from audio and a reference image or video.
    Infer(infer::InferArgs),
    /// Score generated clips.
    Eval(eval::EvalArgs),
    /// Time inference across residual-cache thresholds.
    Bench(bench::BenchArgs),
    /// Print reference values computed by independent oracles.
    Oracle(oracle::OracleArgs),
}

/// Options shared by every command.
pub struct Global {
    pub config: Vec<(String, String)>,
    pub print_config: bool,
}

fn run(cli: Cli) -> Result<(), Error> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let g = Global { config: talkflow_core::config::parse_kv(&text)?, print_config: cli.print_config };
    match cli.command {
        Command::GenData(a) => data::run(a, &g),
        Command::Train(a) => train::run(a, &g),
        Command::Infer(a) => infer::run(a, &g),
        Command::Eval(a) => eval::run(a, &g),
        Command::Bench(a) => bench::run(a, &g),
        Command::Oracle(a) => oracle::run(a, &g),
    }
}

/// One line: `error[<kind>]: <message>` with newlines flattened.
fn report(kind: &str, message: &str) {
    let flat: Vec<&str> = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    eprintln!("error[{kind}]: {}", flat.join(" "));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let body: String = text.lines().take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information")).collect::<Vec<_>>().join("\n");
            report("usage", body.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

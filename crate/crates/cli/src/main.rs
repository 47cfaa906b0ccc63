//! `repcount`: generate synthetic repetition data, train, count and evaluate.

mod count;
mod evaluate;
mod exit;
mod generate;
mod io;
mod train;
mod visualize;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "repcount", version, about = "Class-agnostic video repetition counting")]
struct Cli {
    /// Run every stage on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write labeled synthetic repetition videos.
    Generate(generate::Args),
    /// Train a model and write a checkpoint.
    Train(train::Args),
    /// Count repetitions in a frame directory.
    Count(count::Args),
    /// Score predicted counts against ground truth (OBO, MAE).
    EvalCount(evaluate::CountArgs),
    /// Score per-frame periodicity against ground truth.
    EvalPeriodicity(evaluate::PeriodicityArgs),
    /// Emit the similarity matrix or the embedding PCA trace.
    Visualize(visualize::Args),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Count(a) => count::run(a),
        Command::EvalCount(a) => evaluate::run_count(a),
        Command::EvalPeriodicity(a) => evaluate::run_periodicity(a),
        Command::Visualize(a) => visualize::run(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit::code(&e))
        }
    }
}

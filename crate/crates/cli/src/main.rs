mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "tractshape", version, about = "Fiber-cluster shape measures: voxel oracle and point-cloud regressor")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// Root seed for every random stream [default: 42, or $TRACTSHAPE_SEED]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages [default: available cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of TCK files plus a manifest
    Synth(commands::SynthArgs),
    /// Compute oracle shape measures for a TCK file or a manifest
    Shapes(commands::ShapesArgs),
    /// Train the Siamese regressor
    Train(commands::TrainArgs),
    /// Score a checkpoint against oracle shapes
    Eval(commands::EvalArgs),
    /// Time neural inference against the voxel oracle
    Bench(commands::BenchArgs),
    /// Predict subject scores with LASSO from oracle or model features
    Downstream(commands::DownstreamArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = commands::prepare(&cli.global).and_then(|cfg| match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Shapes(a) => commands::shapes(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Bench(a) => commands::bench(cfg, a),
        Command::Downstream(a) => commands::downstream(cfg, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.kind.code())
        }
    }
}

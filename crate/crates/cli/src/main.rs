//! `lift3d` command line: one subcommand per pipeline stage and metric.

mod common;
mod eval;
mod lift;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lift3d::Execution;

#[derive(Parser, Debug)]
#[command(name = "lift3d", version, about = "Lift 2D detections with keypoint evidence to 3D prototypes and poses")]
struct Cli {
    /// Run every data-parallel stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset with detections, candidates and features.
    GenSynth(synth::GenSynthArgs),
    /// Fit per-viewpoint keypoint search regions from annotations.
    FitSpatial(train::FitSpatialArgs),
    /// Train the continuous azimuth regressor on a feature matrix.
    TrainRegressor(train::TrainArgs),
    /// Predict azimuths for every row of a feature matrix.
    PredictViewpoint(train::PredictArgs),
    /// Lift detections to prototype and pose hypotheses.
    Lift(lift::LiftArgs),
    /// Render silhouette masks of lifted hypotheses.
    RenderMask(lift::RenderArgs),
    /// Evaluate detections or lifts.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::FitSpatial(_) => "fit-spatial",
            Command::TrainRegressor(_) => "train-regressor",
            Command::PredictViewpoint(_) => "predict-viewpoint",
            Command::Lift(_) => "lift",
            Command::RenderMask(_) => "render-mask",
            Command::Eval(e) => e.name(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = lift3d::exec::init_threads_from_env() {
        log::info!("using {n} worker threads");
    }
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let name = cli.command.name();
    let result = match cli.command {
        Command::GenSynth(a) => synth::run(a),
        Command::FitSpatial(a) => train::fit_spatial(a),
        Command::TrainRegressor(a) => train::train(a),
        Command::PredictViewpoint(a) => train::predict(a),
        Command::Lift(a) => lift::run(a, exec),
        Command::RenderMask(a) => lift::render(a, exec),
        Command::Eval(e) => eval::run(e, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": {
                    "command": name,
                    "message": e.to_string(),
                    "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}

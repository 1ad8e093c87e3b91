//! `hsiseg`: synthesize phantoms, tile cubes, score tile quality, train and evaluate
//! the CNN and CNN+GNN tile classifiers.

mod commands;
mod config;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsiseg::Error;

/// Exit codes.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "hsiseg",
    version,
    about = "Quality-aware hyperspectral tile segmentation",
    after_help = "Any config key can be set with a dotted flag, e.g. --tiling.compactness 0.2 or --cnn_train.epochs=10."
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration; dotted flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log level for the JSON-lines log on stderr.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Directory under which default output locations are created.
    #[arg(long, global = true, env = "HSISEG_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset (cubes, label maps, manifest).
    Synth(commands::SynthArgs),
    /// Tile a cube with SLIC.
    Tile(commands::TileArgs),
    /// Per-tile quality metrics, filter decisions and loss weights as JSON lines.
    Quality(commands::QualityArgs),
    /// Train one model on a manifest; resumes from the run directory's last checkpoint.
    Train(commands::TrainArgs),
    /// Predict tile classes of a cube with a trained run.
    Infer(commands::InferArgs),
    /// Score a trained run on the images of a manifest.
    Eval(commands::EvalArgs),
    /// Render predictions or labels over the cube as a PPM image.
    Render(commands::RenderArgs),
    /// Synthesize, split, train every configured model, evaluate and write a report.
    Pipeline(commands::PipelineArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (argv, overrides) = match config::extract_overrides(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    logging::init(cli.global.log_level);
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = config::RunConfig::resolve(cli.global.config.as_deref(), &overrides).and_then(|mut cfg| {
        if let Some(s) = cli.global.seed {
            cfg.seed = s;
        }
        let ctx = commands::Context {
            cfg,
            global: cli.global.clone(),
            overridden: overrides.iter().map(|(k, _)| k.clone()).collect(),
        };
        match cli.command {
            Command::Synth(a) => commands::synth(&ctx, a),
            Command::Tile(a) => commands::tile(&ctx, a),
            Command::Quality(a) => commands::quality(&ctx, a),
            Command::Train(a) => commands::train(&ctx, a),
            Command::Infer(a) => commands::infer(&ctx, a),
            Command::Eval(a) => commands::eval(&ctx, a),
            Command::Render(a) => commands::render(&ctx, a),
            Command::Pipeline(a) => commands::pipeline(&ctx, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

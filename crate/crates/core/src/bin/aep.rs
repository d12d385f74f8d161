use std::path::PathBuf;
use std::process::ExitCode;

use aeprep::config::ExperimentConfig;
use aeprep::data::CLASS_NAMES;
use aeprep::pipeline::{self, Context, Mode};
use aeprep::train::TrainRun;
use clap::{Args, Parser, Subcommand};

/// Autoencoder size standardization for fixed-input emotion classifiers.
///
/// Set AEP_THREADS to use more than one worker thread (default 1). Results do
/// not depend on the thread count.
#[derive(Parser)]
#[command(name = "aep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic face dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Stage 1: pretrain the autoencoder on reconstruction.
    PretrainAe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
    },
    /// Stage 2 joint training (enhanced) or direct-resize training (baseline).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
        #[arg(long, default_value = "enhanced", value_parser = ["enhanced", "baseline"])]
        mode: String,
        /// Stage-1 checkpoint for enhanced mode [default: <out>/ae_stage1_seed<seed>.aepc]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained model on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
        #[arg(long, default_value = "enhanced", value_parser = ["enhanced", "baseline"])]
        mode: String,
        /// Model checkpoint [default: <out>/<mode>_seed<seed>.aepc]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare the baseline and enhanced evaluations of one seed.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config file of key = value lines [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed, overriding the config [default: 1]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunIo {
    /// Run output directory [default: out_dir from the config, "runs"]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

fn context(common: &Common, out: Option<PathBuf>, data: PathBuf) -> aeprep::Result<Context> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = out.unwrap_or_else(|| config.out_dir.clone());
    Ok(Context { config, data, out, threads: pipeline::threads_from_env()? })
}

fn summarize(run: &TrainRun) {
    let last = run.history.last();
    println!(
        "{}: {} epochs{}; final train loss {}, best epoch {}",
        run.stage.as_str(),
        run.epochs_run(),
        if run.stopped_early { " (early stop)" } else { "" },
        last.map_or("n/a".into(), |r| format!("{:.5}", r.train_loss)),
        run.best_epoch.map_or("n/a".into(), |e| e.to_string()),
    );
}

fn run(cli: Cli) -> aeprep::Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let ctx = context(&common, Some(out.clone()), out)?;
            let s = pipeline::gen_data(&ctx)?;
            println!("wrote {} images to {}", s.files, ctx.out.display());
            for (name, n) in CLASS_NAMES.iter().zip(s.histogram) {
                println!("  {name:<8} {n}");
            }
        }
        Command::PretrainAe { common, io } => {
            let ctx = context(&common, io.out, io.data)?;
            summarize(&pipeline::pretrain_ae(&ctx)?);
            println!("checkpoint {}", ctx.stage1_checkpoint().display());
        }
        Command::Train { common, io, mode, checkpoint } => {
            let ctx = context(&common, io.out, io.data)?;
            let mode: Mode = mode.parse()?;
            summarize(&pipeline::train_model(&ctx, mode, checkpoint.as_deref())?);
            println!("checkpoint {}", ctx.model_checkpoint(mode).display());
        }
        Command::Evaluate { common, io, mode, checkpoint } => {
            let ctx = context(&common, io.out, io.data)?;
            let mode: Mode = mode.parse()?;
            let e = pipeline::evaluate(&ctx, mode, checkpoint.as_deref())?;
            let m = &e.metrics;
            println!("{mode}: accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}", m.accuracy, m.precision, m.recall, m.f1);
            println!("confusion (rows true, columns predicted; {}):", CLASS_NAMES.join(", "));
            for row in &e.confusion.counts {
                println!("  {row:?}");
            }
        }
        Command::Compare { common, io } => {
            let ctx = context(&common, io.out, io.data)?;
            let report = pipeline::compare(&ctx)?;
            print!("{}", report.render_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

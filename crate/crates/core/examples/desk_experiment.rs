//! The full pipeline for several seeds: generate data, pretrain, train both
//! variants, evaluate and compare. Artifacts land in the output directory.
//!
//! `cargo run --release --example desk_experiment -- [out_dir] [stage1_epochs] [stage2_epochs]`

use std::path::PathBuf;

use aeprep::config::ExperimentConfig;
use aeprep::pipeline::{self, Context, Mode};

fn main() -> aeprep::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args.next().map_or_else(|| std::env::temp_dir().join("aep_desk"), PathBuf::from);
    let mut epochs = args.map(|a| a.parse::<usize>().expect("epoch counts are integers"));
    let base = ExperimentConfig {
        epochs_stage1: epochs.next().unwrap_or(3),
        epochs_stage2: epochs.next().unwrap_or(10),
        ..ExperimentConfig::default()
    };
    let threads = pipeline::threads_from_env()?;
    let (data, out) = (root.join("data"), root.join("runs"));
    pipeline::gen_data(&Context { config: base.clone(), data: data.clone(), out: data.clone(), threads })?;

    let mut last = None;
    for seed in [1, 2, 3] {
        let ctx = Context { config: ExperimentConfig { seed, ..base.clone() }, data: data.clone(), out: out.clone(), threads };
        pipeline::pretrain_ae(&ctx)?;
        pipeline::train_model(&ctx, Mode::Enhanced, None)?;
        pipeline::train_model(&ctx, Mode::Baseline, None)?;
        let e = pipeline::evaluate(&ctx, Mode::Enhanced, None)?.metrics.accuracy;
        let b = pipeline::evaluate(&ctx, Mode::Baseline, None)?.metrics.accuracy;
        println!("seed {seed}: baseline {b:.4}, enhanced {e:.4}");
        last = Some(pipeline::compare(&ctx)?);
    }
    if let Some(report) = last {
        print!("\n{}", report.render_text());
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

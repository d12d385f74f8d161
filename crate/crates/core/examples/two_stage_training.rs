//! Stage-1 reconstruction pretraining, stage-2 joint training and a
//! direct-resize baseline on a tiny in-memory dataset.

use aeprep::data::{generate_synthetic, split_indices, DatasetSpec, ImageSample};
use aeprep::models::{AutoencoderModel, ClassifierModel, FeatureExtractors, Variant};
use aeprep::train::{self, TrainConfig, TrainData, TrainRun};

fn show(name: &str, run: &TrainRun) {
    let last = run.history.last().expect("at least one epoch");
    let acc = last.val_acc.map_or_else(String::new, |a| format!(", val acc {a:.3}"));
    println!("{name}: {} epochs, final train loss {:.4}{acc}, best epoch {}", run.epochs_run(), last.train_loss, run.best_epoch.map_or("n/a".into(), |e| e.to_string()));
}

fn main() -> aeprep::Result<()> {
    let spec = DatasetSpec { samples_per_class: 24, min_width: 24, min_height: 24, max_width: 40, max_height: 40, ..DatasetSpec::default() };
    let samples = generate_synthetic(&spec)?;
    let split = split_indices(samples.len(), spec.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<ImageSample>>();
    let (train_set, val_set) = (pick(&split.train), pick(&split.val));
    let data = TrainData { train: &train_set, val: &val_set };

    let (side, seed) = (24, 1);
    let cfg = |epochs| TrainConfig { epochs, batch_size: 8, seed, ..TrainConfig::default() };
    let fx = FeatureExtractors::default();

    let mut ae = AutoencoderModel::new(side, 32, seed)?;
    show("stage 1", &train::run_stage1(&mut ae, &fx, data, &cfg(5))?);
    let mut clf = ClassifierModel::new(Variant::XceptionMini, side, seed)?;
    show("joint", &train::run_stage2_joint(&mut ae, &mut clf, &fx, data, &cfg(15))?);

    let mut base = ClassifierModel::new(Variant::XceptionMini, side, seed)?;
    show("baseline", &train::train_baseline(&mut base, data, &cfg(15))?);
    Ok(())
}

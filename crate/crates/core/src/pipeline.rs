//! The experiment commands behind the `aep` binary. Every artifact is written
//! atomically and depends only on the configuration, the seed and the data.
//!
//! Layout of an output directory for seed `s`:
//!
//! | command | files |
//! |---|---|
//! | `pretrain-ae` | `ae_stage1_seed{s}.aepc`, `history_ae-pretrain_seed{s}.csv`, `run_ae-pretrain_seed{s}.json` |
//! | `train --mode m` | `{m}_seed{s}.aepc`, `history_{m}_seed{s}.csv`, `run_{m}_seed{s}.json` |
//! | `evaluate --mode m` | `predictions_{m}_seed{s}.csv`, `confusion_{m}_seed{s}.csv`, `metrics_{m}_seed{s}.csv`, `runs.csv` |
//! | `compare` | `predictions_seed{s}.csv`, `report_seed{s}.csv`, `report_seed{s}.txt` |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{class_histogram, generate_synthetic, load_dataset, resize_bilinear, save_dataset, split_indices, ImageSample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::models::{AutoencoderModel, ClassifierModel, FeatureExtractors, NUM_CLASSES};
use crate::stats::{
    build_report, metrics, read_predictions_csv, read_runs_csv, upsert_run, write_predictions_csv, write_runs_csv, ComparisonReport, ConfusionMatrix,
    Metrics, PairedPredictions, PairedRecord, ReportInputs, RunRecord,
};
use crate::train::{self, TrainData, TrainRun};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "AEP_THREADS";
pub const RUNS_FILE: &str = "runs.csv";
pub const CONFIG_FILE: &str = "dataset.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Enhanced,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Enhanced => crate::stats::ENHANCED,
            Mode::Baseline => crate::stats::BASELINE,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhanced" => Ok(Mode::Enhanced),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::Config(format!("unknown mode {other:?}; expected enhanced or baseline"))),
        }
    }
}

/// Thread count from `AEP_THREADS`, 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Where a command reads and writes.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    /// Dataset directory written by `gen-data`.
    pub data: PathBuf,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn artifact(&self, stem: &str, ext: &str) -> PathBuf {
        self.out.join(format!("{stem}_seed{}.{ext}", self.config.seed))
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.artifact("ae_stage1", "aepc")
    }

    pub fn model_checkpoint(&self, mode: Mode) -> PathBuf {
        self.artifact(mode.as_str(), "aepc")
    }

    fn train_config(&self, epochs: usize) -> train::TrainConfig {
        train::TrainConfig { threads: self.threads, ..self.config.train_config(epochs) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub files: usize,
    pub histogram: [usize; NUM_CLASSES],
}

/// Writes the synthetic dataset, its manifest and the generating config to `ctx.out`.
pub fn gen_data(ctx: &Context) -> Result<GenSummary> {
    ctx.config.validate()?;
    let samples = generate_synthetic(&ctx.config.dataset)?;
    let rows = save_dataset(&samples, &ctx.out)?;
    write_atomic(&ctx.out.join(CONFIG_FILE), ctx.config.render().as_bytes())?;
    Ok(GenSummary { files: rows.len(), histogram: class_histogram(&samples) })
}

/// Train, validation and test samples of the dataset in `ctx.data`.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl SplitData {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData { train: &self.train, val: &self.val }
    }
}

pub fn load_split(ctx: &Context) -> Result<SplitData> {
    let manifest = ctx.data.join(crate::data::MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::Missing { what: "dataset", path: ctx.data.clone(), hint: "run `aep gen-data --out <dir>` and pass that directory with --data".into() });
    }
    let loaded = load_dataset(&ctx.data)?;
    if let Some(first) = loaded.failures.into_iter().next() {
        return Err(first.into());
    }
    let split = split_indices(loaded.samples.len(), ctx.config.dataset.seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| loaded.samples[i].clone()).collect();
    Ok(SplitData { train: pick(&split.train), val: pick(&split.val), test: pick(&split.test) })
}

fn require(path: &Path, what: &'static str, hint: String) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing { what, path: path.to_path_buf(), hint })
    }
}

fn write_run(ctx: &Context, label: &str, run: &TrainRun) -> Result<()> {
    let mut csv = Vec::new();
    run.write_history_csv(&mut csv)?;
    write_atomic(&ctx.artifact(&format!("history_{label}"), "csv"), &csv)?;
    write_atomic(&ctx.artifact(&format!("run_{label}"), "json"), run.manifest(&ctx.config.entries()).as_bytes())
}

fn with_model_meta(c: Checkpoint, cfg: &ExperimentConfig, kind: &str) -> Checkpoint {
    c.with_meta("kind", kind)
        .with_meta("side", cfg.side)
        .with_meta("latent", cfg.latent)
        .with_meta("variant", cfg.variant)
        .with_meta("lambda1", cfg.loss.lambda1)
        .with_meta("lambda2", cfg.loss.lambda2)
        .with_meta("alpha", cfg.loss.alpha)
        .with_meta("perceptual_stage", cfg.loss.stage)
        .with_meta("seed", cfg.seed)
}

/// Loads an autoencoder from `section` of a checkpoint, checking that its
/// side and latent size match the configuration.
fn autoencoder_from(c: &Checkpoint, path: &Path, cfg: &ExperimentConfig, section: &str) -> Result<AutoencoderModel> {
    for (key, want) in [("side", cfg.side.to_string()), ("latent", cfg.latent.to_string())] {
        if c.meta(key) != Some(want.as_str()) {
            return Err(Error::Checkpoint { path: path.to_path_buf(), detail: format!("{key} is {:?}, configuration has {want}", c.meta(key)) });
        }
    }
    let mut ae = AutoencoderModel::new(cfg.side, cfg.latent, cfg.seed)?;
    ae.params_mut().load_from(&c.section(section)).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })?;
    Ok(ae)
}

fn classifier_from(c: &Checkpoint, path: &Path, cfg: &ExperimentConfig) -> Result<ClassifierModel> {
    let variant = c.meta("variant").unwrap_or_default().parse().map_err(|e: Error| Error::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut clf = ClassifierModel::new(variant, cfg.side, cfg.seed)?;
    clf.params_mut().load_from(&c.section("clf")).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })?;
    Ok(clf)
}

/// Stage 1: pretrains the autoencoder and writes its checkpoint.
pub fn pretrain_ae(ctx: &Context) -> Result<TrainRun> {
    ctx.config.validate()?;
    let data = load_split(ctx)?;
    let mut ae = AutoencoderModel::new(ctx.config.side, ctx.config.latent, ctx.config.seed)?;
    let fx = FeatureExtractors::default();
    let run = train::run_stage1(&mut ae, &fx, data.train_data(), &ctx.train_config(ctx.config.epochs_stage1))?;
    let mut c = with_model_meta(Checkpoint::default(), &ctx.config, "autoencoder");
    c.add_section("ae", ae.params());
    c.save(&ctx.stage1_checkpoint())?;
    write_run(ctx, "ae-pretrain", &run)?;
    Ok(run)
}

/// Stage 2 (enhanced) or direct-resize training (baseline). `stage1`
/// overrides the default stage-1 checkpoint location.
pub fn train_model(ctx: &Context, mode: Mode, stage1: Option<&Path>) -> Result<TrainRun> {
    ctx.config.validate()?;
    let cfg = &ctx.config;
    let tc = ctx.train_config(cfg.epochs_stage2);
    let mut clf = ClassifierModel::new(cfg.variant, cfg.side, cfg.seed)?;
    let mut c = with_model_meta(Checkpoint::default(), cfg, mode.as_str());
    let run = match mode {
        Mode::Enhanced => {
            let path = stage1.map_or_else(|| ctx.stage1_checkpoint(), Path::to_path_buf);
            require(&path, "stage-1 checkpoint", format!("run `aep pretrain-ae --seed {}` first or pass --checkpoint", cfg.seed))?;
            let mut ae = autoencoder_from(&Checkpoint::load(&path)?, &path, cfg, "ae")?;
            let data = load_split(ctx)?;
            let run = train::run_stage2_joint(&mut ae, &mut clf, &FeatureExtractors::default(), data.train_data(), &tc)?;
            c.add_section("ae", ae.params());
            run
        }
        Mode::Baseline => {
            let data = load_split(ctx)?;
            train::train_baseline(&mut clf, data.train_data(), &tc)?
        }
    };
    c.add_section("clf", clf.params());
    c.save(&ctx.model_checkpoint(mode))?;
    write_run(ctx, mode.as_str(), &run)?;
    Ok(run)
}

/// A trained pipeline ready for inference.
#[derive(Clone, Debug)]
pub enum Trained {
    Enhanced { ae: AutoencoderModel, clf: ClassifierModel },
    Baseline { clf: ClassifierModel },
}

impl Trained {
    pub fn load(path: &Path, mode: Mode, cfg: &ExperimentConfig) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        if c.meta("kind") != Some(mode.as_str()) {
            return Err(Error::Checkpoint { path: path.to_path_buf(), detail: format!("holds a {:?} model, not {mode}", c.meta("kind")) });
        }
        let clf = classifier_from(&c, path, cfg)?;
        Ok(match mode {
            Mode::Enhanced => Trained::Enhanced { ae: autoencoder_from(&c, path, cfg, "ae")?, clf },
            Mode::Baseline => Trained::Baseline { clf },
        })
    }

    /// Predicted class of one image of any size.
    pub fn predict(&self, img: &crate::Tensor) -> Result<usize> {
        let logits = match self {
            Trained::Enhanced { ae, clf } => clf.classify(&ae.standardize(img)?)?,
            Trained::Baseline { clf } => clf.classify(&resize_bilinear(img, clf.side(), clf.side()))?,
        };
        Ok(logits.argmax())
    }

    pub fn predict_all(&self, samples: &[ImageSample], threads: usize) -> Result<Vec<usize>> {
        let pool = train::thread_pool(threads)?;
        pool.install(|| samples.par_iter().map(|s| self.predict(&s.pixels)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Evaluates a trained pipeline on the test split and records its accuracy in `runs.csv`.
pub fn evaluate(ctx: &Context, mode: Mode, checkpoint: Option<&Path>) -> Result<Evaluation> {
    let cfg = &ctx.config;
    let path = checkpoint.map_or_else(|| ctx.model_checkpoint(mode), Path::to_path_buf);
    require(&path, "model checkpoint", format!("run `aep train --mode {mode} --seed {}` first or pass --checkpoint", cfg.seed))?;
    let model = Trained::load(&path, mode, cfg)?;
    let data = load_split(ctx)?;
    let preds = model.predict_all(&data.test, ctx.threads)?;
    let truth: Vec<usize> = data.test.iter().map(|s| s.label).collect();
    let confusion = ConfusionMatrix::from_labels(&truth, &preds)?;
    let m = metrics(&confusion)?;

    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["sample_id", "true", "pred"])?;
    for (s, p) in data.test.iter().zip(&preds) {
        out.write_record([s.source.clone(), s.label.to_string(), p.to_string()])?;
    }
    write_atomic(&ctx.artifact(&format!("predictions_{mode}"), "csv"), &finish(out)?)?;

    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true".to_string()];
    header.extend(CLASS_NAMES.iter().map(|c| c.to_string()));
    out.write_record(&header)?;
    for (name, row) in CLASS_NAMES.iter().zip(&confusion.counts) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        out.write_record(&rec)?;
    }
    write_atomic(&ctx.artifact(&format!("confusion_{mode}"), "csv"), &finish(out)?)?;

    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["metric", "value"])?;
    for (k, v) in [("accuracy", m.accuracy), ("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
        out.write_record([k.to_string(), v.to_string()])?;
    }
    write_atomic(&ctx.artifact(&format!("metrics_{mode}"), "csv"), &finish(out)?)?;

    let runs_path = ctx.out.join(RUNS_FILE);
    let mut runs = if runs_path.exists() { read_runs_csv(fs::File::open(&runs_path).map_err(Error::io(&runs_path))?)? } else { Vec::new() };
    upsert_run(&mut runs, RunRecord { seed: cfg.seed, variant: mode.as_str().into(), accuracy: m.accuracy });
    let mut buf = Vec::new();
    write_runs_csv(&mut buf, &runs)?;
    write_atomic(&runs_path, &buf)?;
    Ok(Evaluation { confusion, metrics: m })
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// `(sample_id, true, pred)` rows of an evaluation.
fn read_mode_predictions(path: &Path) -> Result<Vec<(String, usize, usize)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize| field(i).parse::<usize>().map_err(|_| Error::Pairing(format!("{}: bad class id {:?}", path.display(), field(i))));
        rows.push((field(0), num(1)?, num(2)?));
    }
    Ok(rows)
}

/// Pairs the two evaluations of seed `ctx.config.seed` and writes the report.
pub fn compare(ctx: &Context) -> Result<ComparisonReport> {
    let seed = ctx.config.seed;
    let load = |mode: Mode| {
        let path = ctx.artifact(&format!("predictions_{mode}"), "csv");
        require(&path, "predictions", format!("run `aep evaluate --mode {mode} --seed {seed}` first"))?;
        read_mode_predictions(&path)
    };
    let (base, enh) = (load(Mode::Baseline)?, load(Mode::Enhanced)?);
    if base.len() != enh.len() {
        return Err(Error::Pairing(format!("baseline has {} test predictions, enhanced has {}", base.len(), enh.len())));
    }
    let mut records = Vec::with_capacity(base.len());
    for (i, (b, e)) in base.into_iter().zip(enh).enumerate() {
        if b.0 != e.0 || b.1 != e.1 {
            return Err(Error::Pairing(format!("row {}: baseline sample {} (class {}) does not match enhanced sample {} (class {})", i + 1, b.0, b.1, e.0, e.1)));
        }
        records.push(PairedRecord { sample_id: b.0, truth: b.1, base_pred: b.2, enh_pred: e.2 });
    }
    let paired = PairedPredictions::new(records)?;
    let runs_path = ctx.out.join(RUNS_FILE);
    let runs = if runs_path.exists() { read_runs_csv(fs::File::open(&runs_path).map_err(Error::io(&runs_path))?)? } else { Vec::new() };
    let report = build_report(ReportInputs { paired, runs })?;

    let mut buf = Vec::new();
    write_predictions_csv(&mut buf, &report.inputs.paired)?;
    write_atomic(&ctx.artifact("predictions", "csv"), &buf)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(&ctx.artifact("report", "csv"), &buf)?;
    write_atomic(&ctx.artifact("report", "txt"), report.render_text().as_bytes())?;
    Ok(report)
}

/// Reads a paired predictions file written by [`compare`].
pub fn read_paired(path: &Path) -> Result<PairedPredictions> {
    read_predictions_csv(fs::File::open(path).map_err(Error::io(path))?)
}

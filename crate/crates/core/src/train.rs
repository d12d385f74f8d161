//! The training loops: autoencoder pretraining, joint fine-tuning of
//! autoencoder and classifier, and the direct-resize baseline.
//!
//! Each mini-batch is processed one sample per tape. Per-sample gradients are
//! summed in batch order in `f64`, so the result does not depend on how many
//! threads evaluate the samples.

use std::fmt::Write as _;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{augment, resize_bilinear, ImageSample};
use crate::error::{Error, Result};
use crate::models::{autoencoder_loss, classification_loss, AutoencoderModel, ClassifierModel, FeatureExtractors, LossWeights};
use crate::nn::{Grads, ParamStore};
use crate::optim::{AdamConfig, AdamState, EarlyStop};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    AePretrain,
    Joint,
    Baseline,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::AePretrain => "ae-pretrain",
            Stage::Joint => "joint",
            Stage::Baseline => "baseline",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::AePretrain => 1,
            Stage::Joint => 2,
            Stage::Baseline => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub min_delta: f64,
    /// Seeds batch shuffling and augmentation.
    pub seed: u64,
    pub augment: bool,
    pub loss: LossWeights,
    /// Worker threads for per-sample forward/backward passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: EarlyStop::DEFAULT_PATIENCE,
            min_delta: EarlyStop::DEFAULT_MIN_DELTA,
            seed: 0,
            augment: true,
            loss: LossWeights::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config(format!("min_delta must be finite and >= 0, got {}", self.min_delta)));
        }
        if self.threads == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

/// Training and validation samples.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [ImageSample],
    pub val: &'a [ImageSample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Record of one training execution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub stage: Stage,
    pub batch_size: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Epoch whose weights were kept, when a validation set was given.
    pub best_epoch: Option<usize>,
    pub wall_time: Duration,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl TrainRun {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])?;
        for r in &self.history {
            out.write_record([r.epoch.to_string(), r.train_loss.to_string(), opt(r.val_loss), opt(r.train_acc), opt(r.val_acc)])?;
        }
        out.flush().map_err(Error::io("history.csv"))?;
        Ok(())
    }

    /// JSON run manifest echoing `config`. Wall time is left out so that
    /// identical runs produce identical manifests.
    pub fn manifest(&self, config: &[(String, String)]) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"version\": \"{} {}\",", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "  \"seed\": {},", self.seed);
        let _ = writeln!(s, "  \"stage\": \"{}\",", self.stage.as_str());
        let _ = writeln!(s, "  \"epochs_run\": {},", self.epochs_run());
        let _ = writeln!(s, "  \"batch_size\": {},", self.batch_size);
        let _ = writeln!(s, "  \"stopped_early\": {},", self.stopped_early);
        let _ = writeln!(s, "  \"best_epoch\": {},", self.best_epoch.map_or("null".to_string(), |e| e.to_string()));
        s.push_str("  \"config\": {");
        for (i, (k, v)) in config.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            let _ = write!(s, "{sep}\n    \"{}\": \"{}\"", esc(k), esc(v));
        }
        s.push_str(if config.is_empty() { "}\n}\n" } else { "\n  }\n}\n" });
        s
    }
}

/// Maps the measured validation loss of an epoch to the value early stopping
/// sees. The identity in normal runs.
pub type ValMonitor<'a> = &'a mut dyn FnMut(usize, f64) -> f64;

struct SampleOut {
    loss: f64,
    correct: Option<bool>,
    ae: Option<Grads>,
    clf: Option<Grads>,
}

struct Job<'m> {
    stage: Stage,
    ae: Option<&'m mut AutoencoderModel>,
    clf: Option<&'m mut ClassifierModel>,
    fx: FeatureExtractors,
    loss: LossWeights,
    side: usize,
}

impl Job<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        self.ae.iter().map(|m| m.params()).chain(self.clf.iter().map(|m| m.params())).collect()
    }

    fn snapshot(&self) -> Vec<ParamStore> {
        self.stores().into_iter().cloned().collect()
    }

    fn restore(&mut self, snap: &[ParamStore]) {
        let mut it = snap.iter();
        if let Some(ae) = self.ae.as_deref_mut() {
            *ae.params_mut() = it.next().expect("snapshot layout").clone();
        }
        if let Some(clf) = self.clf.as_deref_mut() {
            *clf.params_mut() = it.next().expect("snapshot layout").clone();
        }
    }

    fn sample(&self, s: &ImageSample, grad: bool) -> Result<SampleOut> {
        let mut tape = Tape::new();
        let (ae, clf) = (self.ae.as_deref(), self.clf.as_deref());
        let ae_p = ae.map(|m| m.params().bind(&mut tape, grad));
        let clf_p = clf.map(|m| m.params().bind(&mut tape, grad));
        let target = tape.constant(resize_bilinear(&s.pixels, self.side, self.side));

        let (loss_var, loss, logits) = match self.stage {
            Stage::AePretrain | Stage::Joint => {
                let (ae, ae_p) = (ae.expect("autoencoder"), ae_p.as_ref().expect("bound"));
                let fxp = self.fx.bind(&mut tape);
                let x = tape.constant(s.pixels.clone());
                let z = ae.encode(&mut tape, ae_p, x)?;
                let xhat = ae.decode(&mut tape, ae_p, z)?;
                let lv = autoencoder_loss(&mut tape, &self.fx, &fxp, target, xhat, &self.loss)?;
                let v = lv.values(&tape);
                let ae_loss = v.recon + self.loss.lambda1 * v.perceptual + self.loss.lambda2 * v.landmark;
                if self.stage == Stage::AePretrain {
                    (lv.total, ae_loss, None)
                } else {
                    let (clf, clf_p) = (clf.expect("classifier"), clf_p.as_ref().expect("bound"));
                    let logits = clf.forward(&mut tape, clf_p, xhat)?;
                    let ce = classification_loss(&mut tape, logits, s.label)?;
                    let ce_value = tape.scalar_value(ce);
                    let scaled = tape.scale(ce, self.loss.alpha as f32)?;
                    let total = tape.add(lv.total, scaled)?;
                    (total, ae_loss + self.loss.alpha * ce_value, Some(logits))
                }
            }
            Stage::Baseline => {
                let (clf, clf_p) = (clf.expect("classifier"), clf_p.as_ref().expect("bound"));
                let logits = clf.forward(&mut tape, clf_p, target)?;
                let ce = classification_loss(&mut tape, logits, s.label)?;
                (ce, tape.scalar_value(ce), Some(logits))
            }
        };
        let correct = logits.map(|l| tape.value(l).argmax() == s.label);
        if !grad {
            return Ok(SampleOut { loss, correct, ae: None, clf: None });
        }
        let g = tape.backward(loss_var)?;
        Ok(SampleOut { loss, correct, ae: ae_p.map(|p| p.grads(&g)), clf: clf_p.map(|p| p.grads(&g)) })
    }

    fn evaluate(&self, pool: &rayon::ThreadPool, samples: &[ImageSample]) -> Result<(f64, Option<f64>)> {
        let outs: Vec<Result<SampleOut>> = pool.install(|| samples.par_iter().map(|s| self.sample(s, false)).collect());
        summarize(outs.into_iter().collect::<Result<Vec<_>>>()?.iter())
    }
}

fn summarize<'a>(outs: impl Iterator<Item = &'a SampleOut>) -> Result<(f64, Option<f64>)> {
    let (mut loss, mut n, mut correct, mut scored) = (0.0, 0usize, 0usize, 0usize);
    for o in outs {
        loss += o.loss;
        n += 1;
        if let Some(c) = o.correct {
            scored += 1;
            correct += usize::from(c);
        }
    }
    let acc = (scored > 0).then(|| correct as f64 / scored as f64);
    Ok((loss / n as f64, acc))
}

fn rng_for(seed: u64, stage: Stage, epoch: usize, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.stream() << 48) | ((epoch as u64) << 1) | kind);
    rng
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

fn fit(mut job: Job<'_>, data: TrainData<'_>, cfg: &TrainConfig, monitor: ValMonitor<'_>) -> Result<TrainRun> {
    cfg.validate()?;
    if data.train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let pool = thread_pool(cfg.threads)?;
    let mut adams: Vec<AdamState> = job.stores().into_iter().map(|p| AdamState::new(cfg.adam, p)).collect();
    let mut stopper = EarlyStop::new(cfg.patience, cfg.min_delta);
    let mut best: Option<Vec<ParamStore>> = None;
    let mut run = TrainRun { seed: cfg.seed, stage: job.stage, batch_size: cfg.batch_size, history: Vec::new(), stopped_early: false, best_epoch: None, wall_time: Duration::ZERO };

    for epoch in 0..cfg.epochs {
        let last_good = job.snapshot();
        let diverged = |job: &mut Job<'_>, source: Error| {
            job.restore(&last_good);
            Err(Error::Diverged { epoch, source: Box::new(source) })
        };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, job.stage, epoch, 0));
        let mut aug_rng = rng_for(cfg.seed, job.stage, epoch, 1);

        let (mut loss_sum, mut correct, mut scored) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<ImageSample> =
                batch.iter().map(|&i| if cfg.augment { augment(&data.train[i], &mut aug_rng) } else { data.train[i].clone() }).collect();
            let outs: Vec<Result<SampleOut>> = pool.install(|| inputs.par_iter().map(|s| job.sample(s, true)).collect());
            let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;

            let mut sums = vec![Grads::default(); adams.len()];
            for o in &outs {
                if !o.loss.is_finite() {
                    return diverged(&mut job, Error::Config(format!("loss became {}", o.loss)));
                }
                loss_sum += o.loss;
                if let Some(c) = o.correct {
                    scored += 1;
                    correct += usize::from(c);
                }
                for (sum, g) in sums.iter_mut().zip(o.ae.iter().chain(o.clf.iter())) {
                    sum.accumulate(g);
                }
            }
            let inv = 1.0 / outs.len() as f64;
            let stores: Vec<&mut ParamStore> = job.ae.iter_mut().map(|m| m.params_mut()).chain(job.clf.iter_mut().map(|m| m.params_mut())).collect();
            for ((adam, store), sum) in adams.iter_mut().zip(stores).zip(sums.iter_mut()) {
                sum.scale(inv);
                if let Err(e) = adam.step(store, sum) {
                    return diverged(&mut job, e);
                }
            }
        }

        let train_loss = loss_sum / data.train.len() as f64;
        let train_acc = (scored > 0).then(|| correct as f64 / scored as f64);
        let (val_loss, val_acc) = if data.val.is_empty() { (None, None) } else {
            let (l, a) = job.evaluate(&pool, data.val)?;
            (Some(l), a)
        };
        if let Some(l) = val_loss.filter(|l| !l.is_finite()) {
            return diverged(&mut job, Error::Config(format!("validation loss became {l}")));
        }
        run.history.push(EpochRecord { epoch, train_loss, val_loss, train_acc, val_acc });

        if let Some(l) = val_loss {
            let decision = stopper.observe(epoch, monitor(epoch, l));
            if decision.improved {
                best = Some(job.snapshot());
                run.best_epoch = Some(epoch);
            }
            if decision.stop {
                run.stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best {
        job.restore(&best);
    }
    run.wall_time = start.elapsed();
    Ok(run)
}

fn no_monitor() -> impl FnMut(usize, f64) -> f64 {
    |_, l| l
}

/// Stage 1: minimizes the composite reconstruction loss of the autoencoder
/// alone. On divergence the weights of the last completed epoch are kept.
pub fn run_stage1(ae: &mut AutoencoderModel, fx: &FeatureExtractors, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainRun> {
    run_stage1_monitored(ae, fx, data, cfg, &mut no_monitor())
}

pub fn run_stage1_monitored(ae: &mut AutoencoderModel, fx: &FeatureExtractors, data: TrainData<'_>, cfg: &TrainConfig, monitor: ValMonitor<'_>) -> Result<TrainRun> {
    let side = ae.side();
    let job = Job { stage: Stage::AePretrain, ae: Some(ae), clf: None, fx: fx.clone(), loss: cfg.loss, side };
    fit(job, data, cfg, monitor)
}

/// Stage 2: minimizes `L_AE + α·L_CE` over both models, classifying the
/// reconstruction.
pub fn run_stage2_joint(ae: &mut AutoencoderModel, clf: &mut ClassifierModel, fx: &FeatureExtractors, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainRun> {
    run_stage2_joint_monitored(ae, clf, fx, data, cfg, &mut no_monitor())
}

pub fn run_stage2_joint_monitored(
    ae: &mut AutoencoderModel,
    clf: &mut ClassifierModel,
    fx: &FeatureExtractors,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    monitor: ValMonitor<'_>,
) -> Result<TrainRun> {
    if ae.side() != clf.side() {
        return Err(Error::Config(format!("autoencoder output side {} differs from classifier input side {}", ae.side(), clf.side())));
    }
    let side = ae.side();
    let job = Job { stage: Stage::Joint, ae: Some(ae), clf: Some(clf), fx: fx.clone(), loss: cfg.loss, side };
    fit(job, data, cfg, monitor)
}

/// Classifier trained on directly resized inputs with cross-entropy only.
pub fn train_baseline(clf: &mut ClassifierModel, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainRun> {
    train_baseline_monitored(clf, data, cfg, &mut no_monitor())
}

pub fn train_baseline_monitored(clf: &mut ClassifierModel, data: TrainData<'_>, cfg: &TrainConfig, monitor: ValMonitor<'_>) -> Result<TrainRun> {
    let side = clf.side();
    let job = Job { stage: Stage::Baseline, ae: None, clf: Some(clf), fx: FeatureExtractors::default(), loss: cfg.loss, side };
    fit(job, data, cfg, monitor)
}

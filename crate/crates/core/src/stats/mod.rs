//! Classification metrics, effect sizes and significance tests for comparing
//! a baseline and an enhanced pipeline on paired predictions.

pub mod dist;
mod report;

pub use report::{
    build_report, read_predictions_csv, read_runs_csv, upsert_run, write_predictions_csv, write_runs_csv, ComparisonReport, PairedPredictions,
    PairedRecord, ReportInputs, RunRecord, BASELINE, ENHANCED,
};

use thiserror::Error;

use crate::models::NUM_CLASSES;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("{op} is undefined: {reason}")]
    Undefined { op: &'static str, reason: String },
    #[error("invalid input to {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },
}

fn undefined<T>(op: &'static str, reason: impl Into<String>) -> Result<T, StatsError> {
    Err(StatsError::Undefined { op, reason: reason.into() })
}

fn invalid<T>(op: &'static str, detail: impl Into<String>) -> Result<T, StatsError> {
    Err(StatsError::InvalidInput { op, detail: detail.into() })
}

fn check_accuracy(op: &'static str, acc: f64) -> Result<(), StatsError> {
    if (0.0..=1.0).contains(&acc) {
        Ok(())
    } else {
        invalid(op, format!("accuracy {acc} outside [0, 1]"))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n − 1` denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Rounds half away from zero at `decimals`, absorbing binary representation
/// error so that e.g. 0.1305 rounds to 0.131.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    x.signum() * ((x.abs() * s * (1.0 + 1e-12)) + 0.5).floor() / s
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize]) -> Result<Self, StatsError> {
        if truth.len() != pred.len() {
            return invalid("confusion_matrix", format!("{} labels but {} predictions", truth.len(), pred.len()));
        }
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return invalid("confusion_matrix", format!("class id out of range: true {t}, predicted {p}"));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy and macro-averaged precision, recall and F1.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
}

fn ratio_or_zero(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall use `0/0 → 0`; F1 is their harmonic mean (0
/// when both are 0); macro values are unweighted class means.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, StatsError> {
    let total = cm.total();
    if total == 0 {
        return invalid("metrics", "confusion matrix is empty");
    }
    let per_class = std::array::from_fn(|k| {
        let tp = cm.counts[k][k];
        let predicted: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][k]).sum();
        let actual: u64 = cm.counts[k].iter().sum();
        let precision = ratio_or_zero(tp, predicted);
        let recall = ratio_or_zero(tp, actual);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassMetrics { precision, recall, f1 }
    });
    let avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        precision: avg(|c| c.precision),
        recall: avg(|c| c.recall),
        f1: avg(|c| c.f1),
        per_class,
    })
}

/// Fraction of the baseline error removed: `(e_base − e_enh) / e_base`.
pub fn error_reduction(acc_base: f64, acc_enh: f64) -> Result<f64, StatsError> {
    check_accuracy("error_reduction", acc_base)?;
    check_accuracy("error_reduction", acc_enh)?;
    if acc_base == 1.0 {
        return undefined("error_reduction", "baseline error rate is zero");
    }
    Ok(((1.0 - acc_base) - (1.0 - acc_enh)) / (1.0 - acc_base))
}

/// `(acc_enh − acc_base) / acc_base`.
pub fn relative_improvement(acc_base: f64, acc_enh: f64) -> Result<f64, StatsError> {
    check_accuracy("relative_improvement", acc_base)?;
    check_accuracy("relative_improvement", acc_enh)?;
    if acc_base == 0.0 {
        return undefined("relative_improvement", "baseline accuracy is zero");
    }
    Ok((acc_enh - acc_base) / acc_base)
}

/// Number needed to treat: `1 / (acc_enh − acc_base)`.
pub fn nnt(acc_base: f64, acc_enh: f64) -> Result<f64, StatsError> {
    check_accuracy("nnt", acc_base)?;
    check_accuracy("nnt", acc_enh)?;
    if acc_enh <= acc_base {
        return undefined("nnt", format!("improvement {} is not positive", acc_enh - acc_base));
    }
    Ok(1.0 / (acc_enh - acc_base))
}

/// `(mean_b − mean_a) / s_pooled` with `n − 1` variance denominators.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return invalid("cohens_d", format!("need at least 2 values per group, got {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sample_sd(a).powi(2) + (nb - 1.0) * sample_sd(b).powi(2)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return undefined("cohens_d", "pooled standard deviation is zero");
    }
    Ok((mean(b) - mean(a)) / pooled)
}

/// One-sample t test on paired differences with a two-sided CI.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedT {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub dof: usize,
    pub p: f64,
    pub confidence: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// `t = mean / (sd/√n)`, two-sided p from Student t with `n − 1` dof, and
/// `mean ± t_crit·sd/√n`. With zero spread the CI collapses to the mean and
/// `p` is 0 for a non-zero mean, 1 otherwise.
pub fn paired_t_ci(diffs: &[f64], confidence: f64) -> Result<PairedT, StatsError> {
    if diffs.len() < 2 {
        return invalid("paired_t_ci", format!("need at least 2 differences, got {}", diffs.len()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return invalid("paired_t_ci", format!("confidence {confidence} outside (0, 1)"));
    }
    let n = diffs.len();
    let (m, sd) = (mean(diffs), sample_sd(diffs));
    let dof = n - 1;
    if sd == 0.0 {
        let (t, p) = if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) };
        return Ok(PairedT { n, mean: m, sd, t, dof, p, confidence, ci_lower: m, ci_upper: m });
    }
    let se = sd / (n as f64).sqrt();
    let t = m / se;
    let p = dist::t_two_sided_p(t, dof as f64);
    let crit = dist::t_quantile(1.0 - (1.0 - confidence) / 2.0, dof as f64);
    Ok(PairedT { n, mean: m, sd, t, dof, p, confidence, ci_lower: m - crit * se, ci_upper: m + crit * se })
}

#[derive(Clone, Debug, PartialEq)]
pub struct McNemar {
    pub b: u64,
    pub c: u64,
    pub chi2: f64,
    pub p: f64,
}

/// Continuity-corrected McNemar: `χ² = max(|b − c| − 1, 0)² / (b + c)`, 1 dof.
/// `b` counts baseline-correct/enhanced-wrong, `c` the reverse.
pub fn mcnemar(b: u64, c: u64) -> Result<McNemar, StatsError> {
    if b + c == 0 {
        return undefined("mcnemar", "no discordant pairs (b = c = 0)");
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let chi2 = diff.max(0.0).powi(2) / (b + c) as f64;
    Ok(McNemar { b, c, chi2, p: dist::chi2_sf(chi2, 1.0) })
}

/// `100 · sd / mean` with the sample standard deviation.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return invalid("coefficient_of_variation", format!("need at least 2 values, got {}", values.len()));
    }
    let m = mean(values);
    if m == 0.0 {
        return undefined("coefficient_of_variation", "mean is zero");
    }
    Ok(100.0 * sample_sd(values) / m)
}

/// Additive model `enhanced = baseline + δ` fitted over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaFit {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

pub fn fit_improvement_delta(pairs: &[(f64, f64)]) -> Result<DeltaFit, StatsError> {
    if pairs.len() < 2 {
        return undefined("fit_improvement_delta", format!("standard deviation needs at least 2 pairs, got {}", pairs.len()));
    }
    let deltas: Vec<f64> = pairs.iter().map(|(b, e)| e - b).collect();
    Ok(DeltaFit { n: pairs.len(), mean: mean(&deltas), sd: sample_sd(&deltas) })
}

/// Normal-approximation power of a two-sided paired test:
/// `Φ(d√n − z) + Φ(−d√n − z)` with `z = z_{1−α/2}`.
pub fn post_hoc_power(d: f64, n: usize, alpha: f64) -> Result<f64, StatsError> {
    if n < 2 || !d.is_finite() {
        return invalid("post_hoc_power", format!("need n >= 2 and finite d, got n = {n}, d = {d}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid("post_hoc_power", format!("alpha {alpha} outside (0, 1)"));
    }
    let z = dist::normal_quantile(1.0 - alpha / 2.0);
    let shift = d * (n as f64).sqrt();
    Ok(dist::normal_cdf(shift - z) + dist::normal_cdf(-shift - z))
}

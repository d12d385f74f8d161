use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use super::{
    coefficient_of_variation, cohens_d, error_reduction, fit_improvement_delta, mcnemar, metrics, nnt, paired_t_ci, post_hoc_power,
    relative_improvement, ConfusionMatrix, DeltaFit, McNemar, Metrics, PairedT, StatsError,
};
use crate::error::{Error, Result};
use crate::models::NUM_CLASSES;

pub const BASELINE: &str = "baseline";
pub const ENHANCED: &str = "enhanced";

type Stat<T> = std::result::Result<T, StatsError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedRecord {
    pub sample_id: String,
    pub truth: usize,
    pub base_pred: usize,
    pub enh_pred: usize,
}

/// Baseline and enhanced predictions on the same test samples, in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedPredictions {
    records: Vec<PairedRecord>,
}

impl PairedPredictions {
    pub fn new(records: Vec<PairedRecord>) -> Stat<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.truth >= NUM_CLASSES || r.base_pred >= NUM_CLASSES || r.enh_pred >= NUM_CLASSES {
                return Err(StatsError::InvalidInput { op: "paired_predictions", detail: format!("class id out of range in sample {}", r.sample_id) });
            }
            if !seen.insert(r.sample_id.as_str()) {
                return Err(StatsError::InvalidInput { op: "paired_predictions", detail: format!("duplicate sample id {}", r.sample_id) });
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[PairedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn truth(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.truth).collect()
    }

    pub fn baseline_confusion(&self) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for r in &self.records {
            cm.counts[r.truth][r.base_pred] += 1;
        }
        cm
    }

    pub fn enhanced_confusion(&self) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for r in &self.records {
            cm.counts[r.truth][r.enh_pred] += 1;
        }
        cm
    }

    /// `(b, c)`: baseline-only correct and enhanced-only correct counts.
    pub fn discordant(&self) -> (u64, u64) {
        self.records.iter().fold((0, 0), |(b, c), r| {
            let (bc, ec) = (r.base_pred == r.truth, r.enh_pred == r.truth);
            (b + u64::from(bc && !ec), c + u64::from(ec && !bc))
        })
    }
}

/// Test accuracy of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub variant: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportInputs {
    pub paired: PairedPredictions,
    pub runs: Vec<RunRecord>,
}

impl ReportInputs {
    /// `(seed, baseline accuracy, enhanced accuracy)` for seeds run in both variants.
    pub fn seed_pairs(&self) -> Vec<(u64, f64, f64)> {
        let pick = |variant: &str| -> BTreeMap<u64, f64> { self.runs.iter().filter(|r| r.variant == variant).map(|r| (r.seed, r.accuracy)).collect() };
        let (base, enh) = (pick(BASELINE), pick(ENHANCED));
        base.iter().filter_map(|(s, &b)| enh.get(s).map(|&e| (*s, b, e))).collect()
    }
}

/// Every comparison statistic next to the raw inputs it was derived from.
/// Each derived field fails independently.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub inputs: ReportInputs,
    pub baseline_cm: ConfusionMatrix,
    pub enhanced_cm: ConfusionMatrix,
    pub baseline: Metrics,
    pub enhanced: Metrics,
    /// Enhanced minus baseline accuracy on the paired test set.
    pub improvement: f64,
    pub relative_improvement: Stat<f64>,
    pub error_reduction: Stat<f64>,
    pub nnt: Stat<f64>,
    pub mcnemar: Stat<McNemar>,
    pub seed_pairs: Vec<(u64, f64, f64)>,
    pub cohens_d: Stat<f64>,
    pub paired_t: Stat<PairedT>,
    /// Coefficient of variation of the per-seed improvement, in percent.
    pub cov: Stat<f64>,
    pub power: Stat<f64>,
    pub delta: Stat<DeltaFit>,
}

pub fn build_report(inputs: ReportInputs) -> Stat<ComparisonReport> {
    if inputs.paired.is_empty() {
        return Err(StatsError::InvalidInput { op: "build_report", detail: "no paired predictions".into() });
    }
    let baseline_cm = inputs.paired.baseline_confusion();
    let enhanced_cm = inputs.paired.enhanced_confusion();
    let baseline = metrics(&baseline_cm)?;
    let enhanced = metrics(&enhanced_cm)?;
    let (ab, ae) = (baseline.accuracy, enhanced.accuracy);
    let (b, c) = inputs.paired.discordant();

    let seed_pairs = inputs.seed_pairs();
    let base_runs: Vec<f64> = seed_pairs.iter().map(|p| p.1).collect();
    let enh_runs: Vec<f64> = seed_pairs.iter().map(|p| p.2).collect();
    let diffs: Vec<f64> = seed_pairs.iter().map(|p| p.2 - p.1).collect();
    let d = cohens_d(&base_runs, &enh_runs);
    let power = d.clone().and_then(|d| post_hoc_power(d, seed_pairs.len(), 0.05));
    let pairs: Vec<(f64, f64)> = seed_pairs.iter().map(|p| (p.1, p.2)).collect();

    Ok(ComparisonReport {
        improvement: ae - ab,
        relative_improvement: relative_improvement(ab, ae),
        error_reduction: error_reduction(ab, ae),
        nnt: nnt(ab, ae),
        mcnemar: mcnemar(b, c),
        cohens_d: d,
        paired_t: paired_t_ci(&diffs, 0.95),
        cov: coefficient_of_variation(&diffs),
        power,
        delta: fit_improvement_delta(&pairs),
        seed_pairs,
        baseline_cm,
        enhanced_cm,
        baseline,
        enhanced,
        inputs,
    })
}

fn cell(v: &Stat<f64>) -> (String, String) {
    match v {
        Ok(x) => (x.to_string(), String::new()),
        Err(e) => (String::new(), e.to_string()),
    }
}

impl ComparisonReport {
    /// Rebuilds the report from its stored inputs.
    pub fn recompute(&self) -> Stat<ComparisonReport> {
        build_report(self.inputs.clone())
    }

    /// Rows of `(table, metric, baseline, enhanced, value, note)`.
    pub fn rows(&self) -> Vec<[String; 6]> {
        let mut rows = Vec::new();
        let mut model = |name: &str, b: f64, e: f64| rows.push(["models".into(), name.into(), b.to_string(), e.to_string(), String::new(), String::new()]);
        model("accuracy", self.baseline.accuracy, self.enhanced.accuracy);
        model("precision", self.baseline.precision, self.enhanced.precision);
        model("recall", self.baseline.recall, self.enhanced.recall);
        model("f1", self.baseline.f1, self.enhanced.f1);

        let mut push = |table: &str, name: &str, v: Stat<f64>| {
            let (value, note) = cell(&v);
            rows.push([table.into(), name.into(), String::new(), String::new(), value, note]);
        };
        let t = &self.paired_t;
        push("significance", "improvement", Ok(self.improvement));
        push("significance", "relative_improvement", self.relative_improvement.clone());
        push("significance", "cohens_d", self.cohens_d.clone());
        push("significance", "t_statistic", t.clone().map(|t| t.t));
        push("significance", "p_value", t.clone().map(|t| t.p));
        push("significance", "ci_lower", t.clone().map(|t| t.ci_lower));
        push("significance", "ci_upper", t.clone().map(|t| t.ci_upper));
        push("significance", "error_reduction", self.error_reduction.clone());
        push("robustness", "cov_percent", self.cov.clone());
        push("robustness", "power", self.power.clone());
        push("robustness", "nnt", self.nnt.clone());
        push("robustness", "mcnemar_chi2", self.mcnemar.clone().map(|m| m.chi2));
        push("robustness", "mcnemar_p", self.mcnemar.clone().map(|m| m.p));
        push("robustness", "delta_mean", self.delta.clone().map(|d| d.mean));
        push("robustness", "delta_sd", self.delta.clone().map(|d| d.sd));
        rows
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["table", "metric", "baseline", "enhanced", "value", "note"])?;
        for row in self.rows() {
            out.write_record(&row)?;
        }
        out.flush().map_err(Error::io("report.csv"))?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let pct = |v: &Stat<f64>| v.as_ref().map_or_else(|e| format!("undefined ({e})"), |x| format!("{:.1}%", 100.0 * x));
        let num = |v: &Stat<f64>, digits: usize| v.as_ref().map_or_else(|e| format!("undefined ({e})"), |x| format!("{x:.digits$}"));
        let _ = writeln!(s, "Paired test samples: {}", self.inputs.paired.len());
        let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9} {:>9}", "model", "accuracy", "precision", "recall", "f1");
        for (name, m) in [(BASELINE, &self.baseline), (ENHANCED, &self.enhanced)] {
            let _ = writeln!(s, "{name:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", m.accuracy, m.precision, m.recall, m.f1);
        }
        let _ = writeln!(s, "Improvement: {:+.1} points", 100.0 * self.improvement);
        let _ = writeln!(s, "Relative improvement: {}", pct(&self.relative_improvement));
        let _ = writeln!(s, "Error reduction: {}", pct(&self.error_reduction));
        let _ = writeln!(s, "NNT: {}", num(&self.nnt, 1));
        match &self.mcnemar {
            Ok(m) => {
                let _ = writeln!(s, "McNemar: b = {}, c = {}, chi2 = {:.3}, p = {:.4}", m.b, m.c, m.chi2, m.p);
            }
            Err(e) => {
                let _ = writeln!(s, "McNemar: undefined ({e})");
            }
        }
        let _ = writeln!(s, "Seeds run in both modes: {}", self.seed_pairs.len());
        let _ = writeln!(s, "Cohen's d: {}", num(&self.cohens_d, 3));
        match &self.paired_t {
            Ok(t) => {
                let _ = writeln!(s, "Paired t: t = {:.3}, dof = {}, p = {:.4}, 95% CI [{:.4}, {:.4}]", t.t, t.dof, t.p, t.ci_lower, t.ci_upper);
            }
            Err(e) => {
                let _ = writeln!(s, "Paired t: undefined ({e})");
            }
        }
        let _ = writeln!(s, "CoV of improvement: {}", self.cov.as_ref().map_or_else(|e| format!("undefined ({e})"), |x| format!("{x:.2}%")));
        let _ = writeln!(s, "Power: {}", num(&self.power, 4));
        match &self.delta {
            Ok(d) => {
                let _ = writeln!(s, "Delta: {:.4} +/- {:.4} over {} seeds", d.mean, d.sd, d.n);
            }
            Err(e) => {
                let _ = writeln!(s, "Delta: undefined ({e})");
            }
        }
        s
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Pairing(format!("row {} is missing column {what}", line_of(rec))))?;
    raw.trim().parse().map_err(|_| Error::Pairing(format!("row {}: cannot parse {what} from {raw:?}", line_of(rec))))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn write_predictions_csv<W: Write>(w: W, paired: &PairedPredictions) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample_id", "true", "base_pred", "enh_pred"])?;
    for r in paired.records() {
        out.write_record([r.sample_id.clone(), r.truth.to_string(), r.base_pred.to_string(), r.enh_pred.to_string()])?;
    }
    out.flush().map_err(Error::io("predictions.csv"))?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(r: R) -> Result<PairedPredictions> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        records.push(PairedRecord {
            sample_id: parse_field(&rec, 0, "sample_id")?,
            truth: parse_field(&rec, 1, "true")?,
            base_pred: parse_field(&rec, 2, "base_pred")?,
            enh_pred: parse_field(&rec, 3, "enh_pred")?,
        });
    }
    Ok(PairedPredictions::new(records)?)
}

pub fn write_runs_csv<W: Write>(w: W, runs: &[RunRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "variant", "accuracy"])?;
    for r in runs {
        out.write_record([r.seed.to_string(), r.variant.clone(), r.accuracy.to_string()])?;
    }
    out.flush().map_err(Error::io("runs.csv"))?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(r: R) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut runs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        runs.push(RunRecord { seed: parse_field(&rec, 0, "seed")?, variant: parse_field(&rec, 1, "variant")?, accuracy: parse_field(&rec, 2, "accuracy")? });
    }
    Ok(runs)
}

/// Inserts or replaces the run with the same `(variant, seed)`, keeping the
/// list sorted by variant then seed.
pub fn upsert_run(runs: &mut Vec<RunRecord>, run: RunRecord) {
    runs.retain(|r| !(r.seed == run.seed && r.variant == run.variant));
    runs.push(run);
    runs.sort_by(|a, b| (a.variant.as_str(), a.seed).cmp(&(b.variant.as_str(), b.seed)));
}

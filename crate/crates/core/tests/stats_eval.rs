use aeprep::stats::dist::{chi2_sf, normal_cdf, normal_quantile, t_cdf, t_quantile, t_two_sided_p};
use aeprep::stats::*;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

#[path = "common/tables.rs"]
mod tables;

use tables::{CHI2_95, CHI2_99, T_975, T_995};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn t_table_tail_probabilities() {
    for dof in 1..=30 {
        let d = dof as f64;
        let (c95, c99) = (T_975[dof - 1], T_995[dof - 1]);
        assert!(close(t_two_sided_p(c95, d), 0.05, 1e-3), "dof {dof}");
        assert!(close(t_two_sided_p(c99, d), 0.01, 1e-3), "dof {dof}");
        assert!(close(t_quantile(0.975, d), c95, 1e-3), "dof {dof}: {}", t_quantile(0.975, d));
        assert!(close(t_quantile(0.995, d), c99, 1e-3), "dof {dof}");
    }
}

#[test]
fn chi2_table_tail_probabilities() {
    for dof in 1..=30 {
        let d = dof as f64;
        assert!(close(chi2_sf(CHI2_95[dof - 1], d), 0.05, 1e-3), "dof {dof}");
        assert!(close(chi2_sf(CHI2_99[dof - 1], d), 0.01, 1e-3), "dof {dof}");
    }
}

#[test]
fn distributions_agree_with_statrs() {
    let n = Normal::new(0.0, 1.0).unwrap();
    for i in -80..=80 {
        let x = i as f64 / 10.0;
        // statrs is accurate to about 1e-11 relative in the tails
        assert!(close(normal_cdf(x), n.cdf(x), 1e-10 * n.cdf(x)), "x={x}: {} vs {}", normal_cdf(x), n.cdf(x));
    }
    for p in [1e-8, 1e-4, 0.01, 0.2, 0.5, 0.77, 0.975, 0.999999] {
        assert!(close(normal_quantile(p), n.inverse_cdf(p), 1e-8), "p={p}");
    }
    for dof in [1.0, 2.0, 3.5, 7.0, 30.0, 120.0] {
        let t = StudentsT::new(0.0, 1.0, dof).unwrap();
        let c = ChiSquared::new(dof).unwrap();
        for i in -40..=40 {
            let x = i as f64 / 4.0;
            assert!(close(t_cdf(x, dof), t.cdf(x), 1e-10), "t dof={dof} x={x}");
            if x > 0.0 {
                assert!(close(chi2_sf(x * 4.0, dof), c.sf(x * 4.0), 1e-10), "chi2 dof={dof} x={}", x * 4.0);
            }
        }
    }
}

/// Precision, recall and F1 recomputed from raw counts.
fn hand_metrics(cm: &[[u64; 4]; 4]) -> (f64, f64, f64, f64) {
    let total: u64 = cm.iter().flatten().sum();
    let mut p = [0.0; 4];
    let mut r = [0.0; 4];
    let mut f = [0.0; 4];
    for k in 0..4 {
        let tp = cm[k][k] as f64;
        let col: u64 = (0..4).map(|t| cm[t][k]).sum();
        let row: u64 = cm[k].iter().sum();
        p[k] = if col == 0 { 0.0 } else { tp / col as f64 };
        r[k] = if row == 0 { 0.0 } else { tp / row as f64 };
        f[k] = if p[k] + r[k] == 0.0 { 0.0 } else { 2.0 * p[k] * r[k] / (p[k] + r[k]) };
    }
    let acc = (0..4).map(|k| cm[k][k]).sum::<u64>() as f64 / total as f64;
    (acc, p.iter().sum::<f64>() / 4.0, r.iter().sum::<f64>() / 4.0, f.iter().sum::<f64>() / 4.0)
}

#[test]
fn metrics_of_reference_matrix() {
    let counts = [[5, 1, 0, 0], [1, 5, 0, 0], [0, 0, 6, 0], [0, 0, 2, 4]];
    let m = metrics(&ConfusionMatrix::new(counts)).unwrap();
    assert!(close(m.accuracy, 20.0 / 24.0, 1e-12));
    // precision 5/6, 5/6, 6/8, 4/4; recall 5/6, 5/6, 1, 4/6
    assert!(close(m.precision, (5.0 / 6.0 * 2.0 + 0.75 + 1.0) / 4.0, 1e-12));
    assert!(close(m.recall, (5.0 / 6.0 * 2.0 + 1.0 + 4.0 / 6.0) / 4.0, 1e-12));
    assert!(close(m.f1, (5.0 / 6.0 * 2.0 + 1.5 / 1.75 + 0.8) / 4.0, 1e-12));
    let (a, p, r, f) = hand_metrics(&counts);
    assert_eq!((m.accuracy, m.precision, m.recall), (a, p, r));
    assert!(close(m.f1, f, 1e-15));
}

#[test]
fn metrics_conventions() {
    let diag = metrics(&ConfusionMatrix::new([[3, 0, 0, 0], [0, 2, 0, 0], [0, 0, 7, 0], [0, 0, 0, 1]])).unwrap();
    assert_eq!((diag.accuracy, diag.precision, diag.recall, diag.f1), (1.0, 1.0, 1.0, 1.0));
    // class 3 never predicted
    let m = metrics(&ConfusionMatrix::new([[2, 0, 0, 0], [0, 2, 0, 0], [0, 0, 2, 0], [0, 0, 2, 0]])).unwrap();
    assert_eq!(m.per_class[3].precision, 0.0);
    assert_eq!(m.per_class[3].f1, 0.0);
    assert!(close(m.precision, (1.0 + 1.0 + 0.5 + 0.0) / 4.0, 1e-12));
    assert!(matches!(metrics(&ConfusionMatrix::default()), Err(StatsError::InvalidInput { .. })));
    assert!(ConfusionMatrix::from_labels(&[0, 1], &[0]).is_err());
}

#[test]
fn published_accuracy_arithmetic() {
    let pct1 = |x: f64| round_half_up(100.0 * x, 1);
    assert_eq!(pct1(error_reduction(0.723, 0.856).unwrap()), 48.0);
    assert_eq!(pct1(error_reduction(0.710, 0.838).unwrap()), 44.1);
    assert_eq!(pct1(relative_improvement(0.723, 0.856).unwrap()), 18.4);
    assert_eq!(pct1(relative_improvement(0.710, 0.838).unwrap()), 18.0);
    assert_eq!(round_half_up(nnt(0.723, 0.856).unwrap(), 1), 7.5);
    assert_eq!(round_half_up(nnt(0.710, 0.838).unwrap(), 1), 7.8);
    let d = fit_improvement_delta(&[(0.723, 0.856), (0.710, 0.838)]).unwrap();
    assert!(close(d.mean, 0.1305, 1e-12));
    assert!(close(d.sd, 0.005 / 2f64.sqrt(), 1e-12));
    assert_eq!((round_half_up(d.mean, 3), round_half_up(d.sd, 3)), (0.131, 0.004));
    // coefficient of variation of the two improvements
    let cov = coefficient_of_variation(&[0.133, 0.128]).unwrap();
    assert!(close(cov, 100.0 * (0.005 / 2f64.sqrt()) / 0.1305, 1e-9));
    assert_eq!(round_half_up(cov, 1), 2.7);
}

#[test]
fn simple_effect_sizes() {
    assert_eq!(error_reduction(0.8, 0.8).unwrap(), 0.0);
    assert_eq!(relative_improvement(0.6, 0.6).unwrap(), 0.0);
    assert!(close(nnt(0.25, 0.75).unwrap(), 2.0, 1e-12));
    assert!(error_reduction(1.2, 0.5).is_err());
    assert!(close(cohens_d(&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]).unwrap(), 2.0, 1e-12));
    assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert!(cohens_d(&[1.0], &[2.0, 3.0]).is_err());
}

#[test]
fn paired_t_textbook_values() {
    // {1..5}: mean 3, sample sd √2.5, se √0.5
    let r = paired_t_ci(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95).unwrap();
    let se = 0.5f64.sqrt();
    assert!(close(r.t, 3.0 / se, 1e-12));
    assert_eq!(r.dof, 4);
    assert!(close(r.p, 0.013235599564943768, 1e-9));
    let crit = StudentsT::new(0.0, 1.0, 4.0).unwrap().inverse_cdf(0.975);
    assert!(close(r.ci_lower, 3.0 - crit * se, 1e-9));
    assert!(close(r.ci_upper, 3.0 + crit * se, 1e-9));

    let z = paired_t_ci(&[0.0; 4], 0.95).unwrap();
    assert_eq!((z.t, z.p, z.ci_lower, z.ci_upper), (0.0, 1.0, 0.0, 0.0));
    let m = paired_t_ci(&[0.3, -0.3, 1.2, -1.2], 0.95).unwrap();
    assert_eq!((m.mean, m.t), (0.0, 0.0));
    assert!(paired_t_ci(&[1.0], 0.95).is_err());
}

#[test]
fn mcnemar_values() {
    let r = mcnemar(10, 0).unwrap();
    assert!(close(r.chi2, 8.1, 1e-12));
    assert!(close(r.p, 0.004426525857919834, 1e-9));
    assert!(close(mcnemar(110, 2).unwrap().chi2, 107.0 * 107.0 / 112.0, 1e-9));
    assert_eq!(mcnemar(3, 3).unwrap().chi2, 0.0);
    assert!(matches!(mcnemar(0, 0), Err(StatsError::Undefined { .. })));
}

#[test]
fn power_values() {
    assert!(close(post_hoc_power(0.0, 10, 0.05).unwrap(), 0.05, 1e-12));
    assert!(post_hoc_power(2.6, 20, 0.05).unwrap() > 0.999);
    let n = Normal::new(0.0, 1.0).unwrap();
    let z = n.inverse_cdf(0.975);
    let s = 0.5 * 10f64.sqrt();
    let direct = n.cdf(s - z) + n.cdf(-s - z);
    assert!(close(post_hoc_power(0.5, 10, 0.05).unwrap(), direct, 1e-4));
    assert!(post_hoc_power(0.5, 1, 0.05).is_err());
}

#[test]
fn cov_and_delta_edge_cases() {
    assert!(coefficient_of_variation(&[0.4, 0.4, 0.4]).unwrap() < 1e-10);
    let d = fit_improvement_delta(&[(0.5, 0.6), (0.5, 0.6)]).unwrap();
    assert!(close(d.mean, 0.1, 1e-12));
    assert!(d.sd < 1e-12);
}

fn rec(id: usize, t: usize, b: usize, e: usize) -> PairedRecord {
    PairedRecord { sample_id: format!("s{id:03}"), truth: t, base_pred: b, enh_pred: e }
}

fn runs(pairs: &[(f64, f64)]) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for (i, &(b, e)) in pairs.iter().enumerate() {
        out.push(RunRecord { seed: i as u64 + 1, variant: BASELINE.into(), accuracy: b });
        out.push(RunRecord { seed: i as u64 + 1, variant: ENHANCED.into(), accuracy: e });
    }
    out
}

#[test]
fn degenerate_report_still_renders() {
    let paired = PairedPredictions::new((0..12).map(|i| rec(i, i % 4, (i * 3) % 4, (i * 3) % 4)).collect()).unwrap();
    let report = build_report(ReportInputs { paired, runs: runs(&[(0.5, 0.5), (0.6, 0.6)]) }).unwrap();
    assert_eq!(report.improvement, 0.0);
    assert!(matches!(report.mcnemar, Err(StatsError::Undefined { op: "mcnemar", .. })));
    assert!(report.nnt.is_err());
    let text = report.render_text();
    assert!(text.contains("McNemar: undefined"), "{text}");
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("robustness,mcnemar_chi2,,,,")), "{csv}");
}

#[test]
fn report_fields_equal_constituent_ops() {
    // 20 samples: baseline right on 12, enhanced right on 16; b = 1, c = 5
    let mut recs = Vec::new();
    for i in 0..20 {
        let t = i % 4;
        let wrong = (t + 1) % 4;
        let base_ok = i < 12;
        let enh_ok = (1..17).contains(&i);
        recs.push(rec(i, t, if base_ok { t } else { wrong }, if enh_ok { t } else { wrong }));
    }
    let pairs = [(0.60, 0.80), (0.62, 0.79), (0.58, 0.77)];
    let report = build_report(ReportInputs { paired: PairedPredictions::new(recs).unwrap(), runs: runs(&pairs) }).unwrap();
    assert_eq!(report.baseline.accuracy, 0.6);
    assert_eq!(report.enhanced.accuracy, 0.8);
    assert!(close(report.improvement, 0.2, 1e-12));
    assert_eq!(report.error_reduction, error_reduction(0.6, 0.8));
    assert_eq!(report.relative_improvement, relative_improvement(0.6, 0.8));
    assert_eq!(report.nnt, nnt(0.6, 0.8));
    assert_eq!(report.mcnemar, mcnemar(1, 5));
    let (b, e): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let diffs: Vec<f64> = pairs.iter().map(|(b, e)| e - b).collect();
    assert_eq!(report.cohens_d, cohens_d(&b, &e));
    assert_eq!(report.paired_t, paired_t_ci(&diffs, 0.95));
    assert_eq!(report.cov, coefficient_of_variation(&diffs));
    assert_eq!(report.power, post_hoc_power(cohens_d(&b, &e).unwrap(), 3, 0.05));
    assert_eq!(report.delta, fit_improvement_delta(&pairs));
    assert_eq!(report.recompute().unwrap(), report);
}

#[test]
fn runs_without_partner_seed_are_ignored() {
    let paired = PairedPredictions::new(vec![rec(0, 0, 0, 0)]).unwrap();
    let mut r = runs(&[(0.5, 0.6), (0.55, 0.62)]);
    r.push(RunRecord { seed: 9, variant: ENHANCED.into(), accuracy: 0.99 });
    let report = build_report(ReportInputs { paired, runs: r }).unwrap();
    assert_eq!(report.seed_pairs.len(), 2);
    assert!(build_report(ReportInputs { paired: PairedPredictions::new(vec![]).unwrap(), runs: vec![] }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cohens_d_antisymmetric_and_shift_invariant(a in prop::collection::vec(-5.0f64..5.0, 2..8), b in prop::collection::vec(-5.0f64..5.0, 2..8), c in -3.0f64..3.0) {
        if let Ok(d) = cohens_d(&a, &b) {
            prop_assert_eq!(cohens_d(&b, &a).unwrap(), -d);
            let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
            prop_assert!((cohens_d(&sa, &sb).unwrap() - d).abs() < 1e-9 * (1.0 + d.abs()));
        }
    }

    #[test]
    fn mcnemar_symmetric(b in 0u64..200, c in 0u64..200) {
        prop_assume!(b + c > 0);
        prop_assert_eq!(mcnemar(b, c).unwrap().chi2, mcnemar(c, b).unwrap().chi2);
    }

    #[test]
    fn ci_contains_mean_and_widens(d in prop::collection::vec(-2.0f64..2.0, 2..12)) {
        let r90 = paired_t_ci(&d, 0.90).unwrap();
        let r99 = paired_t_ci(&d, 0.99).unwrap();
        prop_assert!(r90.ci_lower <= r90.mean && r90.mean <= r90.ci_upper);
        prop_assert!(r99.ci_lower <= r90.ci_lower && r90.ci_upper <= r99.ci_upper);
        if r90.sd > 0.0 {
            prop_assert!(r99.ci_upper - r99.ci_lower > r90.ci_upper - r90.ci_lower);
        }
    }

    #[test]
    fn cov_scale_invariant(v in prop::collection::vec(0.1f64..1.0, 2..8), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        let (a, b) = (coefficient_of_variation(&v).unwrap(), coefficient_of_variation(&scaled).unwrap());
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn delta_shift_invariant(p in prop::collection::vec((0.0f64..0.9, 0.0f64..0.9), 2..8)) {
        let shifted: Vec<(f64, f64)> = p.iter().map(|(b, e)| (b + 0.01, e + 0.01)).collect();
        let (a, b) = (fit_improvement_delta(&p).unwrap(), fit_improvement_delta(&shifted).unwrap());
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_hand_oracle(counts in prop::array::uniform4(prop::array::uniform4(0u64..20))) {
        let cm = ConfusionMatrix::new(counts);
        prop_assume!(cm.total() > 0);
        let m = metrics(&cm).unwrap();
        let (a, p, r, f) = hand_metrics(&counts);
        prop_assert!((m.accuracy - a).abs() < 1e-12 && (m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12 && (m.f1 - f).abs() < 1e-12);
    }
}

//! The comparison statistics on a handful of example numbers.

use aeprep::stats::{cohens_d, coefficient_of_variation, error_reduction, fit_improvement_delta, mcnemar, nnt, paired_t_ci, post_hoc_power, relative_improvement};

fn main() -> Result<(), aeprep::stats::StatsError> {
    for (name, base, enh) in [("xception", 0.723, 0.856), ("inception", 0.710, 0.838)] {
        println!(
            "{name}: +{:.1} points, error reduction {:.1}%, relative improvement {:.1}%, NNT {:.1}",
            100.0 * (enh - base),
            100.0 * error_reduction(base, enh)?,
            100.0 * relative_improvement(base, enh)?,
            nnt(base, enh)?
        );
    }
    let delta = fit_improvement_delta(&[(0.723, 0.856), (0.710, 0.838)])?;
    println!("delta = {:.3} +/- {:.3}", delta.mean, delta.sd);
    println!("CoV of improvements: {:.1}%", coefficient_of_variation(&[0.133, 0.128])?);

    let m = mcnemar(40, 12)?;
    println!("McNemar b={}, c={}: chi2 = {:.3}, p = {:.2e}", m.b, m.c, m.chi2, m.p);

    let t = paired_t_ci(&[0.12, 0.15, 0.13, 0.14, 0.11], 0.95)?;
    println!("paired t = {:.3} ({} dof), p = {:.2e}, 95% CI [{:.4}, {:.4}]", t.t, t.dof, t.p, t.ci_lower, t.ci_upper);

    let base = [0.70, 0.72, 0.71, 0.73, 0.72];
    let enh = [0.84, 0.86, 0.85, 0.86, 0.83];
    let d = cohens_d(&base, &enh)?;
    println!("Cohen's d = {d:.2}, post-hoc power at n = 5: {:.3}", post_hoc_power(d, 5, 0.05)?);
    Ok(())
}

//! Central finite-difference checks of tape gradients.
//!
//! The graph under test maps leaf inputs to an output of any shape. The check
//! contracts that output with a fixed random cotangent `r`: the analytic side
//! backpropagates `sum(out ⊙ r)` through the tape, while the numeric side only
//! ever runs forward passes and forms `Σ r·(out(x+h) − out(x−h)) / 2h` in `f64`.
//!
//! A central difference is meaningless when the stencil straddles a relu or
//! max-pool switch, and in deep graphs almost every stencil does. Both sides
//! are therefore evaluated on tapes replaying the branches of the unperturbed
//! pass ([`Tape::replaying`]). That function agrees with the graph on the
//! piece around `x` and has the same derivative at `x`, but it is smooth
//! across the whole stencil.
//!
//! Deep graphs also leave too little headroom between `f32` rounding (small
//! steps) and the `h²` truncation of sigmoids and squared errors (large
//! steps). [`check_gradients_extrapolated`] combines central differences at
//! `h` and `h/2` by Richardson extrapolation, which cancels the `h²` term and
//! makes a large step accurate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Branches, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Relative tolerance applied to the bulk of coordinates.
pub const REL_TOL: f64 = 1e-3;
/// Absolute tolerance for coordinates outside the relative bucket.
pub const ABS_TOL: f64 = 1e-4;
/// Fraction of coordinates that must meet [`REL_TOL`].
pub const REL_FRACTION: f64 = 0.95;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: usize,
    pub rel_ok: usize,
    /// Largest absolute error among coordinates that missed the relative tolerance.
    pub worst_abs_rest: f64,
    pub max_rel: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.coords > 0 && self.rel_ok as f64 >= REL_FRACTION * self.coords as f64 && self.worst_abs_rest <= ABS_TOL
    }

    pub fn rel_fraction(&self) -> f64 {
        self.rel_ok as f64 / self.coords.max(1) as f64
    }

    fn merge(&mut self, other: &GradCheckReport) {
        self.coords += other.coords;
        self.rel_ok += other.rel_ok;
        self.worst_abs_rest = self.worst_abs_rest.max(other.worst_abs_rest);
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, {:.1}% within rel {:e}, worst abs on rest {:.2e}, max rel {:.2e}",
            self.coords,
            100.0 * self.rel_fraction(),
            REL_TOL,
            self.worst_abs_rest,
            self.max_rel
        )
    }
}

/// Compares backward against central differences for every input coordinate
/// (or an evenly strided subset of at most `max_coords` per input).
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f32, seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport, TensorError>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    check(inputs, build, h, seed, max_coords, false)
}

/// [`check_gradients`] with the numeric side `(4·D(h/2) − D(h)) / 3`.
pub fn check_gradients_extrapolated<F>(inputs: &[Tensor], build: F, h: f32, seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport, TensorError>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    check(inputs, build, h, seed, max_coords, true)
}

fn check<F>(inputs: &[Tensor], build: F, h: f32, seed: u64, max_coords: Option<usize>, extrapolate: bool) -> Result<GradCheckReport, TensorError>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    // Forward only; scalar outputs are read back unrounded.
    let run = |xs: &[Tensor], branches: Option<&Branches>| -> Result<(Vec<f64>, Branches), TensorError> {
        let mut tape = branches.map_or_else(Tape::new, |b| Tape::replaying(b.clone()));
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        let values = if tape.value(out).numel() == 1 {
            vec![tape.scalar_value(out)]
        } else {
            tape.value(out).data().iter().map(|&v| v as f64).collect()
        };
        Ok((values, tape.branches()))
    };

    // analytic
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cot = Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0f32..1.0));
    let r = tape.constant(cot.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let (_, base) = run(inputs, None)?;
    let mut report = GradCheckReport { coords: 0, rel_ok: 0, worst_abs_rest: 0.0, max_rel: 0.0 };
    for (k, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var);
        let n = input.numel();
        let step = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut sub = GradCheckReport { coords: 0, rel_ok: 0, worst_abs_rest: 0.0, max_rel: 0.0 };
        for i in (0..n).step_by(step) {
            let central = |h: f32| -> Result<f64, TensorError> {
                let mut plus: Vec<Tensor> = inputs.to_vec();
                let mut minus: Vec<Tensor> = inputs.to_vec();
                let x0 = input.data()[i];
                let (xp, xm) = (x0 + h, x0 - h);
                plus[k].data_mut()[i] = xp;
                minus[k].data_mut()[i] = xm;
                let ((op, _), (om, _)) = (run(&plus, Some(&base))?, run(&minus, Some(&base))?);
                let diff: f64 = op.iter().zip(&om).zip(cot.data()).map(|((a, b), &c)| c as f64 * (a - b)).sum();
                Ok(diff / (xp as f64 - xm as f64))
            };
            let numeric = if extrapolate { (4.0 * central(h / 2.0)? - central(h)?) / 3.0 } else { central(h)? };
            let a = analytic.data()[i] as f64;
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { abs / scale };
            sub.coords += 1;
            sub.max_rel = sub.max_rel.max(rel);
            if rel <= REL_TOL {
                sub.rel_ok += 1;
            } else {
                sub.worst_abs_rest = sub.worst_abs_rest.max(abs);
            }
        }
        report.merge(&sub);
    }
    Ok(report)
}

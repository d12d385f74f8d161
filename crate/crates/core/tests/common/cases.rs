//! Gradient checks shared by the model tests and the acceptance suite.

use aeprep::autodiff::gradcheck::{check_gradients, check_gradients_extrapolated, GradCheckReport};
use aeprep::autodiff::{Padding, Tape, Var};
use aeprep::models::{autoencoder_loss, classification_loss, AutoencoderModel, ClassifierModel, FeatureExtractors, LossWeights, Variant};
use aeprep::{Error, Tensor, TensorError};

use super::{rng, uniform, uniform_away_from_zero};

/// Step for single ops, central differences.
const H: f32 = 1e-3;
/// Starting steps for whole-model graphs, extrapolated over `h` and `h/2`.
/// Branch replay keeps the stencil smooth, and the end-to-end loss passes
/// through `f32` logits whose rounding needs the larger step to average out.
pub const DECODER_H: f32 = 0.1;
pub const END_TO_END_H: f32 = 0.3;

fn te(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Format(other.to_string()),
    }
}

fn check<F>(inputs: &[Tensor], build: F, max_coords: Option<usize>) -> GradCheckReport
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    check_gradients(inputs, build, H, 99, max_coords).expect("graph builds")
}

fn check_h<F>(inputs: &[Tensor], build: F, h: f32, max_coords: Option<usize>) -> GradCheckReport
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    check_gradients_extrapolated(inputs, build, h, 99, max_coords).expect("graph builds")
}

/// Composite reconstruction loss of a decoded latent against a fixed target,
/// checked against the latent and two decoder kernels.
pub fn decoder_composite_check() -> GradCheckReport {
    decoder_composite_check_h(DECODER_H)
}

pub fn decoder_composite_check_h(h: f32) -> GradCheckReport {
    let ae = AutoencoderModel::new(16, 4, 5).unwrap();
    let fx = FeatureExtractors::default();
    let w = LossWeights { lambda1: 0.5, lambda2: 0.5, ..Default::default() };
    let mut r = rng(31);
    let target = uniform(&mut r, &[16, 16, 3], 0.1, 0.9);
    let z = uniform(&mut r, &[4], -0.8, 0.8);
    let inputs = [z, ae.params().get("dec_out.w").unwrap().clone(), ae.params().get("dec0.w").unwrap().clone()];
    check_h(
        &inputs,
        |t, v| {
            let p = ae.params().bind_owned(t, false).with_var("dec_out.w", v[1]).with_var("dec0.w", v[2]);
            let xhat = ae.decode(t, &p, v[0]).map_err(te)?;
            let fxp = fx.params().bind_owned(t, false);
            let tgt = t.constant(target.clone());
            Ok(autoencoder_loss(t, &fx, &fxp, tgt, xhat, &w).map_err(te)?.total)
        },
        h,
        Some(40),
    )
}

/// `L_AE + α·L_CE` of the full enhanced pipeline against raw input pixels.
pub fn end_to_end_check() -> GradCheckReport {
    end_to_end_check_h(END_TO_END_H)
}

pub fn end_to_end_check_h(h: f32) -> GradCheckReport {
    let ae = AutoencoderModel::new(16, 6, 6).unwrap();
    let clf = ClassifierModel::new(Variant::XceptionMini, 16, 6).unwrap();
    let fx = FeatureExtractors::default();
    let w = LossWeights::default();
    let raw = uniform(&mut rng(32), &[19, 22, 3], 0.05, 0.95);
    check_h(
        &[raw],
        |t, v| {
            let ap = ae.params().bind_owned(t, false);
            let cp = clf.params().bind_owned(t, false);
            let fxp = fx.params().bind_owned(t, false);
            let target = t.resize_bilinear(v[0], 16, 16)?;
            let z = ae.encode(t, &ap, v[0]).map_err(te)?;
            let xhat = ae.decode(t, &ap, z).map_err(te)?;
            let l_ae = autoencoder_loss(t, &fx, &fxp, target, xhat, &w).map_err(te)?.total;
            let logits = clf.forward(t, &cp, xhat).map_err(te)?;
            let ce = classification_loss(t, logits, 2).map_err(te)?;
            let ce = t.scale(ce, w.alpha as f32)?;
            t.add(l_ae, ce)
        },
        h,
        Some(60),
    )
}

/// Named checks covering every differentiable building block.
pub fn op_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(40);
    let mut out = Vec::new();
    let x = uniform(&mut r, &[5, 6, 2], -1.0, 1.0);
    let wc = uniform(&mut r, &[3, 3, 2, 3], -0.5, 0.5);
    let b = uniform(&mut r, &[3], -0.5, 0.5);
    out.push(("conv2d", check(&[x.clone(), wc, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same), None)));
    let wd = uniform(&mut r, &[3, 3, 2], -0.5, 0.5);
    out.push(("depthwise", check(&[x.clone(), wd], |t, v| t.depthwise_conv2d(v[0], v[1], 1, Padding::Same), None)));
    let wp = uniform(&mut r, &[2, 4], -0.5, 0.5);
    out.push(("pointwise", check(&[x.clone(), wp], |t, v| t.pointwise_conv2d(v[0], v[1]), None)));
    let xd = uniform(&mut r, &[2, 5], -1.0, 1.0);
    let wdn = uniform(&mut r, &[5, 3], -0.5, 0.5);
    let bd = uniform(&mut r, &[3], -0.5, 0.5);
    out.push(("dense", check(&[xd, wdn, bd], |t, v| t.dense(v[0], v[1], Some(v[2])), None)));
    out.push(("adaptive_avg_pool", check(&[x.clone()], |t, v| t.adaptive_avg_pool(v[0], 2, 4), None)));
    out.push(("global_avg_pool", check(&[x.clone()], |t, v| t.global_avg_pool(v[0]), None)));
    out.push(("avg_pool", check(&[x.clone()], |t, v| t.avg_pool(v[0], 2, 1, Padding::Same), None)));
    // distinct, well separated values keep each max window unambiguous
    let mut vals: Vec<f32> = (0..36).map(|i| ((i * 17) % 36) as f32 * 0.05).collect();
    vals.rotate_left(5);
    out.push(("max_pool2", check(&[Tensor::new(vec![6, 6, 1], vals).unwrap()], |t, v| t.max_pool2(v[0]), None)));
    let logits = uniform_away_from_zero(&mut r, &[3, 4], 2.0, 0.1);
    let labels = Tensor::new(vec![3, 4], vec![0., 1., 0., 0., 0., 0., 0., 1., 1., 0., 0., 0.]).unwrap();
    out.push((
        "softmax+cross_entropy",
        check(
            &[logits],
            move |t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &labels)
            },
            None,
        ),
    ));
    out.push(("composite loss through decoder", decoder_composite_check()));
    out
}

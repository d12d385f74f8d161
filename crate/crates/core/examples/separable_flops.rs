//! Multiply-accumulate cost of a standard convolution against its
//! depthwise + pointwise factorization, analytic and measured.

use aeprep::autodiff::{mac_count, reset_mac_count, separable_flops, Padding, Tape};
use aeprep::Tensor;

fn main() -> Result<(), aeprep::TensorError> {
    println!("{:>3} {:>4} {:>12} {:>12} {:>7}", "K", "F", "standard", "separable", "ratio");
    for k in [3, 5, 7] {
        for f in [16, 32, 64, 128] {
            let s = separable_flops(48, 48, 32, k, f);
            println!("{k:>3} {f:>4} {:>12} {:>12} {:>7.2}", s.standard, s.separable, s.ratio);
        }
    }

    // Count what the kernels actually execute on a 24×24×8 map.
    let (h, w, c, k, f) = (24, 24, 8, 3, 16);
    let x = Tensor::from_fn(&[h, w, c], |i| (i % 13) as f32 / 13.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let full = tape.leaf(Tensor::full(&[k, k, c, f], 0.1), false);
    let dw = tape.leaf(Tensor::full(&[k, k, c], 0.1), false);
    let pw = tape.leaf(Tensor::full(&[c, f], 0.1), false);

    reset_mac_count();
    tape.conv2d(xv, full, None, 1, Padding::Same)?;
    let standard = mac_count();
    reset_mac_count();
    let d = tape.depthwise_conv2d(xv, dw, 1, Padding::Same)?;
    tape.pointwise_conv2d(d, pw)?;
    let separable = mac_count();

    let want = separable_flops(h as u64, w as u64, c as u64, k as u64, f as u64);
    println!("\nmeasured on {h}x{w}x{c}, K={k}, F={f}: standard {standard}, separable {separable}");
    println!("analytic: standard {}, separable {}", want.standard, want.separable);
    Ok(())
}

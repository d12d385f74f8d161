//! Finite-difference check of a small conv → relu → pool → dense graph.
//!
//! With the relu and pool branches held fixed the graph is linear in each
//! single input coordinate, so a fairly large step is exact up to rounding.

use aeprep::autodiff::gradcheck::check_gradients;
use aeprep::autodiff::Padding;
use aeprep::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> Result<(), aeprep::TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&mut rng, &[6, 6, 2]), random(&mut rng, &[3, 3, 2, 4]), random(&mut rng, &[4, 3])];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::Same)?;
            let y = t.relu(y)?;
            let y = t.max_pool2(y)?;
            let y = t.global_avg_pool(y)?;
            t.dense(y, v[2], None)
        },
        0.05,
        0,
        None,
    )?;
    println!("{report}");
    println!("{}", if report.passes() { "gradients agree" } else { "gradients DISAGREE" });
    Ok(())
}

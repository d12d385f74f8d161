//! Runs one inception block and reports per-branch parameter counts.

use aeprep::autodiff::Tape;
use aeprep::nn::{InceptionBlock, ParamStore, INCEPTION_BRANCHES};
use aeprep::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aeprep::Result<()> {
    let block = InceptionBlock::new("inc", 16, (8, 12, 4, 4))?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));

    let x = Tensor::from_fn(&[12, 12, 16], |i| ((i * 7) % 17) as f32 / 17.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.leaf(x, false);
    let y = block.forward(&mut tape, &p, xv)?;
    println!("input [12, 12, 16] -> output {:?} ({} channels)", tape.value(y).shape(), block.out_channels());

    for branch in INCEPTION_BRANCHES {
        let n: usize = store.iter().filter(|(k, _)| k.starts_with(&format!("inc.{branch}."))).map(|(_, t)| t.numel()).sum();
        println!("{branch:>6}: {n} parameters");
    }
    println!(" total: {}", store.num_scalars());
    Ok(())
}

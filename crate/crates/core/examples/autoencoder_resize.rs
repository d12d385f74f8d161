//! Standardizes images of different sizes with an (untrained) autoencoder
//! and compares the result with plain bilinear resizing.

use aeprep::data::{generate_sample, resize_bilinear, DatasetSpec};
use aeprep::models::AutoencoderModel;

fn main() -> aeprep::Result<()> {
    let side = 32;
    let ae = AutoencoderModel::new(side, 64, 1)?;
    println!("decoder stages (size, channels): {:?}", AutoencoderModel::decoder_plan(side));
    let spec = DatasetSpec::default();
    for i in [0, 1, 2, 3] {
        let s = generate_sample(&spec, i);
        let z = ae.encode_image(&s.pixels)?;
        let out = ae.standardize(&s.pixels)?;
        let plain = resize_bilinear(&s.pixels, side, side);
        let mse = out.data().iter().zip(plain.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / out.numel() as f64;
        println!("{}: {}x{} -> latent {:?} -> {:?}, mse vs bilinear {mse:.4}", s.source, s.width(), s.height(), z.shape(), out.shape());
    }
    Ok(())
}

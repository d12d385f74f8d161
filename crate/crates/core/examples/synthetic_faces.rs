//! Generates a small synthetic face dataset and writes it as PPM files.
//!
//! `cargo run --example synthetic_faces -- [out_dir]`

use std::path::PathBuf;

use aeprep::data::{class_histogram, generate_synthetic, save_dataset, DatasetSpec, CLASS_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("aep_faces"), PathBuf::from);
    let spec = DatasetSpec { samples_per_class: 10, ..DatasetSpec::default() };
    let samples = generate_synthetic(&spec)?;
    save_dataset(&samples, &out)?;

    for (name, n) in CLASS_NAMES.iter().zip(class_histogram(&samples)) {
        println!("{name:>8}: {n}");
    }
    let (wmin, wmax) = samples.iter().fold((usize::MAX, 0), |(a, b), s| (a.min(s.width()), b.max(s.width())));
    let (hmin, hmax) = samples.iter().fold((usize::MAX, 0), |(a, b), s| (a.min(s.height()), b.max(s.height())));
    println!("widths {wmin}..={wmax}, heights {hmin}..={hmax}");
    println!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}

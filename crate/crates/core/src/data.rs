//! Images, the synthetic variable-size expression dataset, PPM storage,
//! bilinear resizing, augmentation and the train/val/test split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::kernels;
use crate::models::NUM_CLASSES;
use crate::tensor::Tensor;

/// Class names; a class id is the index in this sorted list.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["angry", "happy", "neutral", "sad"];
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {}: {detail}", path.display())]
    Image { path: PathBuf, detail: String },
    #[error("dataset {}: {detail}", root.display())]
    Dataset { root: PathBuf, detail: String },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("invalid image sample: {0}")]
    Sample(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// One labelled image `[H, W, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub label: usize,
    pub source: String,
}

impl ImageSample {
    pub fn new(pixels: Tensor, label: usize, source: impl Into<String>) -> Result<Self, DataError> {
        let source = source.into();
        if !matches!(pixels.shape(), [_, _, 3]) {
            return Err(DataError::Sample(format!("{source}: expected [H, W, 3], got {:?}", pixels.shape())));
        }
        if label >= NUM_CLASSES {
            return Err(DataError::Sample(format!("{source}: label {label} out of range")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Sample(format!("{source}: pixel values outside [0, 1]")));
        }
        Ok(Self { pixels, label, source })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Bilinear resize with half-pixel centres: source coordinate
/// `(dst + 0.5)·in/out − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [h, w, c] = img.shape() else { panic!("resize_bilinear expects [H, W, C], got {:?}", img.shape()) };
    Tensor::new(vec![oh, ow, *c], kernels::resize_bilinear_forward(img.data(), *h, *w, *c, oh, ow)).expect("convex combination of finite values")
}

/// Augmentation parameters: rotation in degrees, brightness shift, contrast change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_PHOTOMETRIC: f64 = 0.2;

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { angle_deg: 0.0, brightness: 0.0, contrast: 0.0 };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            brightness: rng.gen_range(-MAX_PHOTOMETRIC..=MAX_PHOTOMETRIC),
            contrast: rng.gen_range(-MAX_PHOTOMETRIC..=MAX_PHOTOMETRIC),
        }
    }
}

/// Rotates about the image centre (inverse-mapped bilinear sampling, zero
/// outside the frame), then applies `p ← clamp(p + b)` and
/// `p ← clamp((p − 0.5)(1 + c) + 0.5)`.
pub fn apply_augment(img: &Tensor, a: &Augmentation) -> Tensor {
    let [h, w, c] = *img.shape() else { panic!("apply_augment expects [H, W, C], got {:?}", img.shape()) };
    let src = img.data();
    let mut out = if a.angle_deg == 0.0 {
        src.to_vec()
    } else {
        let (sin, cos) = a.angle_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let tap = |y: i64, x: i64, ch: usize| -> f64 {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0.0
            } else {
                src[(y as usize * w + x as usize) * c + ch] as f64
            }
        };
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                for ch in 0..c {
                    let top = tap(y0, x0, ch) * (1.0 - fx) + tap(y0, x0 + 1, ch) * fx;
                    let bot = tap(y0 + 1, x0, ch) * (1.0 - fx) + tap(y0 + 1, x0 + 1, ch) * fx;
                    out.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        out
    };
    if a.brightness != 0.0 || a.contrast != 0.0 {
        for p in &mut out {
            let v = (*p as f64 + a.brightness).clamp(0.0, 1.0);
            *p = ((v - 0.5) * (1.0 + a.contrast) + 0.5).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("bounded values")
}

/// Random rotation and photometric jitter; the label is kept.
pub fn augment(sample: &ImageSample, rng: &mut impl Rng) -> ImageSample {
    let a = Augmentation::sample(rng);
    ImageSample { pixels: apply_augment(&sample.pixels, &a), label: sample.label, source: sample.source.clone() }
}

/// Parameters of the synthetic dataset. Sizes are `width × height`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub samples_per_class: usize,
    pub min_width: usize,
    pub min_height: usize,
    pub max_width: usize,
    pub max_height: usize,
    /// Bounds on `width / height`.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Background rectangles and pixel noise, `0` for a plain background.
    pub clutter: f64,
    /// Global gain jitter: gain ~ U(1 − j, 1 + j).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples_per_class: 200,
            min_width: 24,
            min_height: 32,
            max_width: 96,
            max_height: 72,
            aspect_min: 0.75,
            aspect_max: 4.0 / 3.0,
            clutter: 0.3,
            jitter: 0.2,
            seed: 42,
        }
    }
}

const ASPECT_SLACK: f64 = 1e-9;

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if self.min_width.min(self.min_height) < 16 {
            return bad(format!("minimum size {}x{} is below 16 pixels", self.min_width, self.min_height));
        }
        if self.min_width > self.max_width || self.min_height > self.max_height {
            return bad("minimum size exceeds maximum size".into());
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return bad(format!("aspect bounds [{}, {}] are not an interval", self.aspect_min, self.aspect_max));
        }
        for (w, h) in [(self.min_width, self.min_height), (self.max_width, self.max_height)] {
            let a = w as f64 / h as f64;
            if a < self.aspect_min - ASPECT_SLACK || a > self.aspect_max + ASPECT_SLACK {
                return bad(format!("size {w}x{h} has aspect {a:.4}, outside [{}, {}]", self.aspect_min, self.aspect_max));
            }
        }
        if !(0.0..=1.0).contains(&self.clutter) || !(0.0..1.0).contains(&self.jitter) {
            return bad("clutter must be in [0, 1] and jitter in [0, 1)".into());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.samples_per_class * NUM_CLASSES
    }

    /// Width then height, with the height range narrowed so the aspect stays in bounds.
    fn sample_size(&self, rng: &mut impl Rng) -> (usize, usize) {
        let w = rng.gen_range(self.min_width..=self.max_width);
        let lo = ((w as f64 / self.aspect_max) - ASPECT_SLACK).ceil().max(self.min_height as f64) as usize;
        let hi = ((w as f64 / self.aspect_min) + ASPECT_SLACK).floor().min(self.max_height as f64) as usize;
        let h = if lo <= hi { rng.gen_range(lo..=hi) } else { lo.min(self.max_height) };
        (w, h)
    }
}

/// Class-specific facial geometry in face-local coordinates.
struct Expression {
    /// Mouth centre displacement: positive is a smile (centre below corners).
    mouth_curve: f64,
    /// Vertical offset of the inner brow ends: positive lowers them.
    brow_inner_drop: f64,
    brow_raise: f64,
}

fn expression(label: usize, rng: &mut impl Rng) -> Expression {
    let (curve, drop, raise) = match CLASS_NAMES[label] {
        "angry" => (-0.35, 0.16, 0.0),
        "happy" => (1.0, 0.0, -0.04),
        "neutral" => (0.0, 0.0, 0.0),
        "sad" => (-1.0, -0.14, -0.02),
        _ => unreachable!(),
    };
    Expression {
        mouth_curve: curve + rng.gen_range(-0.2..0.2),
        brow_inner_drop: drop + rng.gen_range(-0.03..0.03),
        brow_raise: raise + rng.gen_range(-0.03..0.03),
    }
}

/// Renders sample `index` of the dataset; depends only on `(spec.seed, index)`.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> ImageSample {
    let label = index % NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (w, h) = spec.sample_size(&mut rng);
    let bg = rng.gen_range(0.15..0.35);
    let mut img = vec![bg; h * w * 3];

    let rects = (spec.clutter * 6.0).round() as usize;
    for _ in 0..rects {
        let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (rw, rh) = (rng.gen_range(2..=w / 3 + 2), rng.gen_range(2..=h / 3 + 2));
        let tone = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                img[(y * w + x) * 3..][..3].copy_from_slice(&tone);
            }
        }
    }

    let (cx, cy) = (0.5 + rng.gen_range(-0.05..0.05), 0.5 + rng.gen_range(-0.05..0.05));
    let (rx, ry) = (rng.gen_range(0.30..0.38), rng.gen_range(0.36..0.44));
    let skin = rng.gen_range(0.6..0.85);
    let skin_rgb = [skin, skin * 0.85, skin * 0.7];
    let dark = rng.gen_range(0.0..0.12);
    let e = expression(label, &mut rng);

    // Face-local coordinates: the face ellipse is the unit disc.
    let feature = |fu: f64, fv: f64| -> Option<f64> {
        if fu * fu + fv * fv > 1.0 {
            return None;
        }
        let au = fu.abs();
        let eye = ((au - 0.38) / 0.13).powi(2) + ((fv + 0.18) / 0.11).powi(2) <= 1.0;
        let brow = (0.16..=0.62).contains(&au) && {
            let t = (0.62 - au) / 0.46;
            let centre = -0.5 + e.brow_raise + e.brow_inner_drop * t;
            (fv - centre).abs() <= 0.05
        };
        let mouth = au <= 0.42 && {
            let centre = 0.45 + 0.16 * e.mouth_curve * (1.0 - (fu / 0.42).powi(2));
            (fv - centre).abs() <= 0.055
        };
        Some(if eye || brow || mouth { dark } else { -1.0 })
    };
    // 2×2 supersampling of the face layer.
    for y in 0..h {
        for x in 0..w {
            let (mut cover, mut acc) = (0.0f64, [0.0f64; 3]);
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f64 + sx) / w as f64;
                let v = (y as f64 + sy) / h as f64;
                if let Some(f) = feature((u - cx) / rx, (v - cy) / ry) {
                    cover += 0.25;
                    for k in 0..3 {
                        acc[k] += 0.25 * if f >= 0.0 { f } else { skin_rgb[k] };
                    }
                }
            }
            if cover > 0.0 {
                let px = &mut img[(y * w + x) * 3..][..3];
                for k in 0..3 {
                    px[k] = px[k] * (1.0 - cover) + acc[k];
                }
            }
        }
    }

    let gain = if spec.jitter > 0.0 { rng.gen_range(1.0 - spec.jitter..1.0 + spec.jitter) } else { 1.0 };
    let noise = Normal::new(0.0, 0.04 * spec.clutter).expect("finite std");
    let with_noise = spec.clutter > 0.0;
    let pixels: Vec<f32> = img
        .into_iter()
        .map(|p| {
            let n = if with_noise { noise.sample(&mut rng) } else { 0.0 };
            (p * gain + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let source = format!("{}/{:03}", CLASS_NAMES[label], index / NUM_CLASSES);
    ImageSample::new(Tensor::new(vec![h, w, 3], pixels).expect("finite pixels"), label, source).expect("valid sample")
}

/// The full dataset, classes interleaved: sample `k` has label `k mod 4`.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Vec<ImageSample>, DataError> {
    spec.validate()?;
    Ok((0..spec.total()).map(|i| generate_sample(spec, i)).collect())
}

/// Encodes `[H, W, 3]` values in `[0, 1]` as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    let [h, w, 3] = *img.shape() else { panic!("encode_ppm expects [H, W, 3], got {:?}", img.shape()) };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Decodes a binary PPM; header comments are allowed.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(format!("expected magic P6, found {magic:?}"));
    }
    let mut num = |what: &str| -> Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 {
        return Err(format!("empty image {w}x{h}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    let need = w * h * 3;
    if data.len() < need {
        return Err(format!("truncated pixel data: expected {need} bytes, found {}", data.len()));
    }
    let scale = maxval as f32;
    let px = data[..need].iter().map(|&b| (b as f32 / scale).min(1.0)).collect();
    Tensor::new(vec![h, w, 3], px).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<(), DataError> {
    crate::checkpoint::atomic_write_io(path, &encode_ppm(img)).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|detail| DataError::Image { path: path.to_path_buf(), detail })
}

/// Writes `root/<class>/NNN.ppm` for every sample (numbered per class in
/// order) plus `manifest.csv` with `path,class,width,height`. Returns the
/// manifest rows.
pub fn save_dataset(samples: &[ImageSample], root: &Path) -> Result<Vec<ManifestRow>, DataError> {
    for name in CLASS_NAMES {
        fs::create_dir_all(root.join(name)).map_err(io_err(&root.join(name)))?;
    }
    let mut counters = [0usize; NUM_CLASSES];
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{}/{:03}.ppm", CLASS_NAMES[s.label], counters[s.label]);
        counters[s.label] += 1;
        write_ppm(&root.join(&rel), &s.pixels)?;
        rows.push(ManifestRow { path: rel, class: CLASS_NAMES[s.label].to_string(), width: s.width(), height: s.height() });
    }
    write_manifest(&root.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub class: String,
    pub width: usize,
    pub height: usize,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut out = String::from("path,class,width,height\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.path, r.class, r.width, r.height));
    }
    crate::checkpoint::atomic_write_io(path, out.as_bytes()).map_err(io_err(path))
}

/// Result of reading a dataset directory: every readable sample, in class
/// then file-name order, plus one error per unreadable file.
#[derive(Debug)]
pub struct LoadedDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
    pub failures: Vec<DataError>,
}

/// Reads `root/<class>/*.ppm`. Class ids follow the sorted directory names,
/// of which there must be exactly four, each non-empty.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset, DataError> {
    let dataset_err = |detail: String| DataError::Dataset { root: root.to_path_buf(), detail };
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    if classes.len() != NUM_CLASSES {
        return Err(dataset_err(format!("expected {NUM_CLASSES} class directories, found {}", classes.len())));
    }
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(dataset_err(format!("class directory {name} is empty")));
        }
        for path in files {
            let rel = format!("{name}/{}", path.file_name().unwrap().to_string_lossy());
            match read_ppm(&path).and_then(|px| ImageSample::new(px, label, rel)) {
                Ok(s) => samples.push(s),
                Err(e) => failures.push(e),
            }
        }
    }
    Ok(LoadedDataset { class_names: classes.into_iter().map(|c| c.0).collect(), samples, failures })
}

/// Index sets of a 70/15/15 split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut 70/15/15 (floors for train and val).
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

/// Per-class counts.
pub fn class_histogram(samples: &[ImageSample]) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    samples.iter().for_each(|s| h[s.label] += 1);
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_centre_is_half() {
        let img = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&img, 3, 3);
        assert_eq!(r.data()[4], 0.5);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Tensor::from_fn(&[5, 7, 3], |i| (i % 11) as f32 / 10.0);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
    }

    #[test]
    fn brightness_on_gray() {
        let img = Tensor::full(&[4, 4, 3], 0.5);
        let out = apply_augment(&img, &Augmentation { brightness: 0.2, ..Augmentation::IDENTITY });
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn ppm_header_with_comment() {
        let bytes = b"P6\n# made by hand\n2 1\n255\n\x00\x80\xff\xff\x00\x00";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[2], 1.0);
        assert!(decode_ppm(b"P6\n2 1\n255\n\x00\x00").unwrap_err().contains("truncated"));
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(800, 42);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (560, 120, 120));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..800).collect::<Vec<_>>());
    }

    #[test]
    fn spec_rejects_aspect_violations() {
        assert!(DatasetSpec::default().validate().is_ok());
        let bad = DatasetSpec { min_width: 16, min_height: 32, ..Default::default() };
        assert!(matches!(bad.validate(), Err(DataError::Spec(_))));
        let bad = DatasetSpec { max_width: 120, max_height: 72, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

//! The standardizing autoencoder, the two mini classifiers, the frozen
//! feature extractors and the losses that tie them together.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, InceptionBlock, ParamStore, SeparableBlock};
use crate::tensor::{dim_err, Tensor};

pub const NUM_CLASSES: usize = 4;
/// Smallest image side the encoder accepts.
pub const MIN_INPUT_SIDE: usize = 16;
/// Spatial size of the encoder's pooled map and of the decoder's first map.
pub const BOTTLENECK_GRID: usize = 8;
const ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];
const DECODER_CHANNELS: [usize; 2] = [32, 16];
/// Seed of the frozen perceptual extractor.
pub const PERCEPTUAL_SEED: u64 = 7;
const PERCEPTUAL_CHANNELS: [usize; 3] = [8, 16, 16];
/// Default landmark grid side; the landmark vector has `2·G²` entries.
pub const LANDMARK_GRID: usize = 4;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn expect_image(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w, 3] => Ok((h, w)),
        [_, _, c] => Err(dim_err(op, "channels", 3, c).into()),
        _ => Err(dim_err(op, "rank", 3, t.ndim()).into()),
    }
}

/// Convolutional encoder to a fixed latent `z ∈ (−1, 1)^d` and upsampling
/// decoder to an `S×S×3` image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    side: usize,
    latent: usize,
    params: ParamStore,
}

impl AutoencoderModel {
    pub fn new(side: usize, latent: usize, seed: u64) -> Result<Self> {
        if side == 0 || latent == 0 {
            return Err(Error::Config("autoencoder side and latent size must be positive".into()));
        }
        let mut rng = seeded(seed, 1);
        let mut params = ParamStore::new();
        let mut c = 3;
        for (i, &f) in ENCODER_CHANNELS.iter().enumerate() {
            nn::init_conv(&mut params, &format!("enc{i}"), 3, 3, c, f, &mut rng);
            c = f;
        }
        let flat = BOTTLENECK_GRID * BOTTLENECK_GRID * c;
        nn::init_dense(&mut params, "enc_fc", flat, latent, &mut rng);
        nn::init_dense(&mut params, "dec_fc", latent, flat, &mut rng);
        for (i, (cin, cout)) in Self::decoder_plan(side).into_iter().enumerate() {
            nn::init_conv(&mut params, &format!("dec{i}"), 3, 3, cin, cout, &mut rng);
        }
        let last = Self::decoder_plan(side).last().map_or(c, |s| s.1);
        nn::init_conv(&mut params, "dec_out", 3, 3, last, 3, &mut rng);
        Ok(Self { side, latent, params })
    }

    /// `(in, out)` channels of each upsample-conv stage: the map doubles from
    /// 8×8 while the doubled size still fits in `S`.
    pub fn decoder_plan(side: usize) -> Vec<(usize, usize)> {
        let (mut size, mut c) = (BOTTLENECK_GRID, *ENCODER_CHANNELS.last().unwrap());
        let mut plan = Vec::new();
        while size * 2 <= side {
            let f = DECODER_CHANNELS[plan.len().min(DECODER_CHANNELS.len() - 1)];
            plan.push((c, f));
            c = f;
            size *= 2;
        }
        plan
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encode(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = expect_image("encode", tape.value(x))?;
        if h < MIN_INPUT_SIDE {
            return Err(dim_err("encode", "height", MIN_INPUT_SIDE, h).into());
        }
        if w < MIN_INPUT_SIDE {
            return Err(dim_err("encode", "width", MIN_INPUT_SIDE, w).into());
        }
        let mut y = x;
        for i in 0..ENCODER_CHANNELS.len() {
            y = nn::conv(tape, p, &format!("enc{i}"), y, 2)?;
            y = tape.relu(y)?;
        }
        let y = tape.adaptive_avg_pool(y, BOTTLENECK_GRID, BOTTLENECK_GRID)?;
        let n = tape.value(y).numel();
        let y = tape.reshape(y, &[n])?;
        let z = nn::dense(tape, p, "enc_fc", y)?;
        Ok(tape.tanh(z)?)
    }

    pub fn decode(&self, tape: &mut Tape<'_>, p: &Bound, z: Var) -> Result<Var> {
        let n = tape.value(z).numel();
        if tape.value(z).ndim() != 1 || n != self.latent {
            return Err(dim_err("decode", "latent", self.latent, n).into());
        }
        let c0 = *ENCODER_CHANNELS.last().unwrap();
        let y = nn::dense(tape, p, "dec_fc", z)?;
        let y = tape.relu(y)?;
        let mut y = tape.reshape(y, &[BOTTLENECK_GRID, BOTTLENECK_GRID, c0])?;
        for i in 0..Self::decoder_plan(self.side).len() {
            y = tape.upsample_nearest2(y)?;
            y = nn::conv(tape, p, &format!("dec{i}"), y, 1)?;
            y = tape.relu(y)?;
        }
        let y = tape.adaptive_avg_pool(y, self.side, self.side)?;
        let y = nn::conv(tape, p, "dec_out", y, 1)?;
        Ok(tape.sigmoid(y)?)
    }

    /// Latent code of one image.
    pub fn encode_image(&self, img: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let z = self.encode(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(z.clone());
        let y = self.decode(&mut tape, &p, z)?;
        Ok(tape.value(y).clone())
    }

    /// `decode(encode(img))`: the standardized `S×S×3` image.
    pub fn standardize(&self, img: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let z = self.encode(&mut tape, &p, x)?;
        let y = self.decode(&mut tape, &p, z)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    XceptionMini,
    InceptionMini,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::XceptionMini => "xception-mini",
            Variant::InceptionMini => "inception-mini",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xception-mini" => Ok(Variant::XceptionMini),
            "inception-mini" => Ok(Variant::InceptionMini),
            other => Err(Error::Config(format!("unknown model variant {other:?}; expected xception-mini or inception-mini"))),
        }
    }
}

const STEM_CHANNELS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
enum Blocks {
    Separable(Vec<SeparableBlock>),
    Inception(Vec<InceptionBlock>),
}

/// Stem conv, three blocks with max pooling between them, global average
/// pooling and a dense head to four logits. Accepts exactly `S×S×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    variant: Variant,
    side: usize,
    blocks: Blocks,
    params: ParamStore,
}

impl ClassifierModel {
    pub fn new(variant: Variant, side: usize, seed: u64) -> Result<Self> {
        if side < 2 {
            return Err(Error::Config(format!("classifier input side {side} is too small")));
        }
        let mut rng = seeded(seed, 2);
        let mut params = ParamStore::new();
        nn::init_conv(&mut params, "stem", 3, 3, 3, STEM_CHANNELS, &mut rng);
        let (blocks, out) = match variant {
            Variant::XceptionMini => {
                let b = vec![
                    SeparableBlock::new("block0", STEM_CHANNELS, 32, 3, 1, false)?,
                    SeparableBlock::new("block1", 32, 64, 3, 1, false)?,
                    SeparableBlock::new("block2", 64, 64, 3, 1, true)?,
                ];
                b.iter().for_each(|blk| blk.init(&mut params, &mut rng));
                (Blocks::Separable(b), 64)
            }
            Variant::InceptionMini => {
                let b = vec![
                    InceptionBlock::new("block0", STEM_CHANNELS, (8, 8, 8, 8))?,
                    InceptionBlock::new("block1", 32, (16, 16, 16, 16))?,
                    InceptionBlock::new("block2", 64, (16, 16, 16, 16))?,
                ];
                b.iter().for_each(|blk| blk.init(&mut params, &mut rng));
                (Blocks::Inception(b), 64)
            }
        };
        nn::init_dense(&mut params, "head", out, NUM_CLASSES, &mut rng);
        Ok(Self { variant, side, blocks, params })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Logits `[4]` for one `S×S×3` image.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let (h, w) = expect_image("classify", tape.value(x))?;
        if h != self.side {
            return Err(dim_err("classify", "height", self.side, h).into());
        }
        if w != self.side {
            return Err(dim_err("classify", "width", self.side, w).into());
        }
        let y = nn::conv(tape, p, "stem", x, 2)?;
        let mut y = tape.relu(y)?;
        let n = match &self.blocks {
            Blocks::Separable(b) => b.len(),
            Blocks::Inception(b) => b.len(),
        };
        for i in 0..n {
            y = match &self.blocks {
                Blocks::Separable(b) => b[i].forward(tape, p, y)?,
                Blocks::Inception(b) => b[i].forward(tape, p, y)?,
            };
            let (hh, ww) = (tape.value(y).shape()[0], tape.value(y).shape()[1]);
            if i + 1 < n && hh >= 2 && ww >= 2 {
                y = tape.max_pool2(y)?;
            }
        }
        let y = tape.global_avg_pool(y)?;
        nn::dense(tape, p, "head", y)
    }

    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Weights of the composite autoencoder loss and of the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    /// Perceptual extractor stage `j ∈ 1..=3`.
    pub stage: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1, alpha: 1.0, stage: 2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(1..=PERCEPTUAL_CHANNELS.len()).contains(&self.stage) {
            return Err(Error::Config(format!("perceptual stage must be in 1..=3, got {}", self.stage)));
        }
        Ok(())
    }
}

/// Frozen feature extractors used by the composite loss: a fixed-seed
/// conv/relu/maxpool stack and the landmark-centroid grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractors {
    perceptual: ParamStore,
    pub grid: usize,
}

impl Default for FeatureExtractors {
    fn default() -> Self {
        Self::new(PERCEPTUAL_SEED, LANDMARK_GRID)
    }
}

impl FeatureExtractors {
    pub fn new(seed: u64, grid: usize) -> Self {
        let mut rng = seeded(seed, 3);
        let mut perceptual = ParamStore::new();
        let mut c = 3;
        for (i, &f) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            nn::init_conv(&mut perceptual, &format!("vgg{i}"), 3, 3, c, f, &mut rng);
            c = f;
        }
        Self { perceptual, grid }
    }

    pub fn params(&self) -> &ParamStore {
        &self.perceptual
    }

    /// Replaces the extractor weights, e.g. with trained ones from a checkpoint.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        self.perceptual.load_from(params)
    }

    /// Binds the extractor weights as constants.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        self.perceptual.bind(tape, false)
    }

    /// Output of perceptual stage `stage` (1-based).
    pub fn perceptual(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, stage: usize) -> Result<Var> {
        let mut y = x;
        for i in 0..stage {
            y = nn::conv(tape, p, &format!("vgg{i}"), y, 1)?;
            y = tape.relu(y)?;
            let s = tape.value(y).shape();
            if s[0] >= 2 && s[1] >= 2 {
                y = tape.max_pool2(y)?;
            }
        }
        Ok(y)
    }

    pub fn landmarks(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Ok(tape.landmark_centroids(x, self.grid)?)
    }
}

/// Landmark centroids of an image without building a training graph.
pub fn landmark_features(img: &Tensor, grid: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let y = tape.landmark_centroids(x, grid)?;
    Ok(tape.value(y).clone())
}

/// Handles of the composite loss and of its three mean-normalized terms.
#[derive(Clone, Copy, Debug)]
pub struct AeLossVars {
    pub total: Var,
    pub recon: Var,
    pub perceptual: Var,
    pub landmark: Var,
}

/// Evaluated composite loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeLossValue {
    pub total: f64,
    pub recon: f64,
    pub perceptual: f64,
    pub landmark: f64,
}

impl AeLossVars {
    pub fn values(&self, tape: &Tape<'_>) -> AeLossValue {
        AeLossValue {
            total: tape.scalar_value(self.total),
            recon: tape.scalar_value(self.recon),
            perceptual: tape.scalar_value(self.perceptual),
            landmark: tape.scalar_value(self.landmark),
        }
    }
}

/// `mse(T(x), x̂) + λ1·mse(P(T(x)), P(x̂)) + λ2·mse(L(T(x)), L(x̂))`, where
/// `target` is the resized input `T(x)`, `P` a perceptual stage and `L` the
/// landmark grid.
pub fn autoencoder_loss(tape: &mut Tape<'_>, fx: &FeatureExtractors, fxp: &Bound, target: Var, xhat: Var, w: &LossWeights) -> Result<AeLossVars> {
    let recon = tape.mse(target, xhat)?;
    let pt = fx.perceptual(tape, fxp, target, w.stage)?;
    let ph = fx.perceptual(tape, fxp, xhat, w.stage)?;
    let perceptual = tape.mse(pt, ph)?;
    let lt = fx.landmarks(tape, target)?;
    let lh = fx.landmarks(tape, xhat)?;
    let landmark = tape.mse(lt, lh)?;
    let a = tape.scale(perceptual, w.lambda1 as f32)?;
    let b = tape.scale(landmark, w.lambda2 as f32)?;
    let total = tape.add(recon, a)?;
    let total = tape.add(total, b)?;
    Ok(AeLossVars { total, recon, perceptual, landmark })
}

/// Evaluates the composite loss for a fixed target/reconstruction pair.
pub fn autoencoder_loss_value(target: &Tensor, xhat: &Tensor, w: &LossWeights, fx: &FeatureExtractors) -> Result<AeLossValue> {
    let mut tape = Tape::new();
    let fxp = fx.bind(&mut tape);
    let t = tape.constant(target.clone());
    let x = tape.constant(xhat.clone());
    let vars = autoencoder_loss(&mut tape, fx, &fxp, t, x, w)?;
    Ok(vars.values(&tape))
}

/// `−(1/N) Σ y·ln(clamp(p))` for probabilities `[N,4]` and one-hot labels.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = tape.cross_entropy(p, labels)?;
    Ok(tape.scalar_value(l))
}

/// `l_ae + α·l_ce`.
pub fn total_loss(l_ae: f64, l_ce: f64, alpha: f64) -> f64 {
    l_ae + alpha * l_ce
}

/// One-hot row `[1, 4]` for a class id.
pub fn one_hot(label: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, NUM_CLASSES]);
    t.data_mut()[label] = 1.0;
    t
}

/// Softmax + cross-entropy of logits `[4]` against `label`, on the tape.
pub fn classification_loss(tape: &mut Tape<'_>, logits: Var, label: usize) -> Result<Var> {
    let row = tape.reshape(logits, &[1, NUM_CLASSES])?;
    let p = tape.softmax(row)?;
    Ok(tape.cross_entropy(p, &one_hot(label))?)
}

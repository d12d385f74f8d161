//! Named parameters and the composite layers built on the tape: the
//! depthwise-separable block and the four-branch inception block.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by name. Iteration order is the sorted name order, which
/// fixes the layout of checkpoints and the order of optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces every parameter with the same-named tensor from `other`,
    /// which must hold exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let mine: Vec<&str> = self.names().collect();
        let theirs: Vec<&str> = other.names().collect();
        if mine != theirs {
            let missing: Vec<_> = mine.iter().filter(|n| other.get(n).is_none()).collect();
            let extra: Vec<_> = theirs.iter().filter(|n| self.get(n).is_none()).collect();
            return Err(Error::Config(format!("parameter names differ; missing {missing:?}, unexpected {extra:?}")));
        }
        for (name, t) in other.iter() {
            let slot = self.params.get_mut(name).expect("names checked");
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!("parameter {name}: expected shape {:?}, found {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape` without copying.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> Bound {
        let vars = self.params.iter().map(|(n, t)| (n.clone(), tape.borrowed(t, trainable))).collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] but registers copies, so the tape may
    /// outlive the store.
    pub fn bind_owned(&self, tape: &mut Tape<'_>, trainable: bool) -> Bound {
        let vars = self.params.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle of a parameter. Names come from the model that created the
    /// store, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    /// Points `name` at another handle, e.g. a leaf owned by a gradient check.
    pub fn with_var(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    /// Collects this binding's gradients after a backward pass.
    pub fn grads(&self, g: &Gradients) -> Grads {
        let map = self.vars.iter().map(|(n, &v)| (n.clone(), g.get_or_zeros(v).data().iter().map(|&x| x as f64).collect())).collect();
        Grads { map }
    }
}

/// Per-parameter gradients, accumulated in `f64` across samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn insert(&mut self, name: impl Into<String>, g: Vec<f64>) {
        self.map.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    /// Adds `other` into `self`; names missing from `self` are inserted.
    pub fn accumulate(&mut self, other: &Grads) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.map.values_mut().flatten().for_each(|v| *v *= s);
    }

    /// Largest absolute entry over parameters whose name starts with `prefix`.
    pub fn max_abs(&self, prefix: &str) -> f64 {
        self.map.iter().filter(|(n, _)| n.starts_with(prefix)).flat_map(|(_, g)| g.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// He-normal weights: `N(0, 2/fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

/// Registers a `[kh, kw, c, f]` kernel and a zero bias under `{name}.w`, `{name}.b`.
pub(crate) fn init_conv(store: &mut ParamStore, name: &str, kh: usize, kw: usize, c: usize, f: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), he_normal(&[kh, kw, c, f], kh * kw * c, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[f]));
}

pub(crate) fn init_dense(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), he_normal(&[fan_in, out], fan_in, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub(crate) fn conv(tape: &mut Tape<'_>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = (p.var(&format!("{name}.w")), p.var(&format!("{name}.b")));
    Ok(tape.conv2d(x, w, Some(b), stride, Padding::Same)?)
}

pub(crate) fn dense(tape: &mut Tape<'_>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let (w, b) = (p.var(&format!("{name}.w")), p.var(&format!("{name}.b")));
    Ok(tape.dense(x, w, Some(b))?)
}

/// Xception-style block: `relu(pointwise(depthwise(x)) + b)`, plus `x` when residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBlock {
    pub name: String,
    pub c: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub residual: bool,
}

impl SeparableBlock {
    pub fn new(name: impl Into<String>, c: usize, f: usize, k: usize, stride: usize, residual: bool) -> Result<Self> {
        let name = name.into();
        if c == 0 || f == 0 || k == 0 || stride == 0 {
            return Err(Error::Config(format!("{name}: channels, kernel and stride must be positive")));
        }
        if residual && (c != f || stride != 1) {
            return Err(Error::Config(format!("{name}: residual needs matching shapes, got {c}->{f} channels at stride {stride}")));
        }
        Ok(Self { name, c, f, k, stride, residual })
    }

    /// Adds `{name}.dw.w [k,k,c]`, `{name}.pw.w [c,f]` and `{name}.pw.b [f]`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(format!("{}.dw.w", self.name), he_normal(&[self.k, self.k, self.c], self.k * self.k, rng));
        store.insert(format!("{}.pw.w", self.name), he_normal(&[self.c, self.f], self.c, rng));
        store.insert(format!("{}.pw.b", self.name), Tensor::zeros(&[self.f]));
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let n = &self.name;
        let y = tape.depthwise_conv2d(x, p.var(&format!("{n}.dw.w")), self.stride, Padding::Same)?;
        let y = tape.pointwise_conv2d(y, p.var(&format!("{n}.pw.w")))?;
        let y = tape.bias_add(y, p.var(&format!("{n}.pw.b")))?;
        let y = tape.relu(y)?;
        if !self.residual {
            return Ok(y);
        }
        let (xs, ys) = (tape.value(x).shape(), tape.value(y).shape());
        if xs != ys {
            return Err(Error::Config(format!("{n}: residual input {xs:?} does not match output {ys:?}")));
        }
        Ok(tape.add(y, x)?)
    }
}

/// Inception block with branches concatenated in the order
/// (1×1, 3×3 as 1×3 then 3×1, 5×5 as two 3×3, 2×2 average pool then 1×1).
/// Every convolution is followed by relu unless `linear` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct InceptionBlock {
    pub name: String,
    pub c_in: usize,
    pub c1: usize,
    pub c3: usize,
    pub c5: usize,
    pub cp: usize,
    pub linear: bool,
}

/// Branch parameter prefixes in creation order.
pub const INCEPTION_BRANCHES: [&str; 6] = ["b1x1", "b3x3a", "b3x3b", "b5x5a", "b5x5b", "bpool"];

impl InceptionBlock {
    pub fn new(name: impl Into<String>, c_in: usize, (c1, c3, c5, cp): (usize, usize, usize, usize)) -> Result<Self> {
        let name = name.into();
        if [c_in, c1, c3, c5, cp].contains(&0) {
            return Err(Error::Config(format!("{name}: branch channel counts must be positive")));
        }
        Ok(Self { name, c_in, c1, c3, c5, cp, linear: false })
    }

    pub fn out_channels(&self) -> usize {
        self.c1 + self.c3 + self.c5 + self.cp
    }

    fn kernel_shapes(&self) -> [(usize, usize, usize, usize); 6] {
        let (c, c3, c5) = (self.c_in, self.c3, self.c5);
        [(1, 1, c, self.c1), (1, 3, c, c3), (3, 1, c3, c3), (3, 3, c, c5), (3, 3, c5, c5), (1, 1, c, self.cp)]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (branch, (kh, kw, c, f)) in INCEPTION_BRANCHES.iter().zip(self.kernel_shapes()) {
            init_conv(store, &format!("{}.{branch}", self.name), kh, kw, c, f, rng);
        }
    }

    fn unit(&self, tape: &mut Tape<'_>, p: &Bound, branch: &str, x: Var) -> Result<Var> {
        let y = conv(tape, p, &format!("{}.{branch}", self.name), x, 1)?;
        Ok(if self.linear { y } else { tape.relu(y)? })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let b1 = self.unit(tape, p, "b1x1", x)?;
        let b3 = self.unit(tape, p, "b3x3a", x)?;
        let b3 = self.unit(tape, p, "b3x3b", b3)?;
        let b5 = self.unit(tape, p, "b5x5a", x)?;
        let b5 = self.unit(tape, p, "b5x5b", b5)?;
        let pooled = tape.avg_pool(x, 2, 1, Padding::Same)?;
        let bp = self.unit(tape, p, "bpool", pooled)?;
        Ok(tape.concat_channels(&[b1, b3, b5, bp])?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn residual_requires_matching_shapes() {
        assert!(SeparableBlock::new("block0", 16, 32, 3, 1, true).is_err());
        assert!(SeparableBlock::new("block0", 16, 16, 3, 2, true).is_err());
        assert!(SeparableBlock::new("block0", 16, 16, 3, 1, true).is_ok());
    }

    #[test]
    fn parameter_names_follow_block_convention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        SeparableBlock::new("block0", 4, 8, 3, 1, false).unwrap().init(&mut store, &mut rng);
        InceptionBlock::new("block1", 8, (2, 2, 2, 2)).unwrap().init(&mut store, &mut rng);
        let names: Vec<&str> = store.names().collect();
        assert!(names.contains(&"block0.dw.w") && names.contains(&"block0.pw.b"));
        for b in INCEPTION_BRANCHES {
            assert!(names.contains(&format!("block1.{b}.w").as_str()));
            assert!(names.contains(&format!("block1.{b}.b").as_str()));
        }
        assert_eq!(store.get("block1.b3x3a.w").unwrap().shape(), &[1, 3, 8, 2]);
        assert_eq!(store.get("block1.b3x3b.w").unwrap().shape(), &[3, 1, 2, 2]);
    }

    #[test]
    fn load_from_rejects_shape_and_name_mismatch() {
        let mut a = ParamStore::new();
        a.insert("x.w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.insert("x.w", Tensor::zeros(&[3]));
        assert!(a.load_from(&b).is_err());
        let mut c = ParamStore::new();
        c.insert("y.w", Tensor::zeros(&[2]));
        assert!(a.load_from(&c).is_err());
        let mut d = ParamStore::new();
        d.insert("x.w", Tensor::full(&[2], 1.5));
        a.load_from(&d).unwrap();
        assert_eq!(a.get("x.w").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn grads_accumulate_and_scale() {
        let mut g = Grads::default();
        let mut h = Grads::default();
        h.map.insert("a".into(), vec![1.0, -2.0]);
        g.accumulate(&h);
        g.accumulate(&h);
        g.scale(0.5);
        assert_eq!(g.get("a").unwrap(), &[1.0, -2.0]);
        assert_eq!(g.max_abs("a"), 2.0);
        assert_eq!(g.max_abs("b"), 0.0);
    }
}

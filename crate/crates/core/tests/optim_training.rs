mod common;

use aeprep::data::{generate_synthetic, resize_bilinear, DatasetSpec, ImageSample};
use aeprep::models::{AutoencoderModel, ClassifierModel, FeatureExtractors, Variant};
use aeprep::nn::{Grads, ParamStore};
use aeprep::optim::{AdamConfig, AdamState, EarlyStop};
use aeprep::train::{self, TrainConfig, TrainData};
use aeprep::Tensor;
use proptest::prelude::*;

fn store(vals: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
    s
}

fn grads(vals: &[f64]) -> Grads {
    let mut g = Grads::default();
    g.insert("w", vals.to_vec());
    g
}

fn w(s: &ParamStore) -> Vec<f32> {
    s.get("w").unwrap().data().to_vec()
}

#[test]
fn first_step_with_unit_gradient() {
    let mut p = store(&[0.0]);
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    assert_eq!(adam.t(), 0);
    adam.step(&mut p, &grads(&[1.0])).unwrap();
    assert_eq!(adam.t(), 1);
    let want = -0.001 / (1.0 + 1e-8);
    assert!((w(&p)[0] as f64 - want).abs() < 1e-9, "{}", w(&p)[0]);
}

#[test]
fn first_step_is_nearly_scale_free() {
    let step = |g: f64| {
        let mut p = store(&[0.3, -0.2]);
        AdamState::new(AdamConfig::default(), &p).step(&mut p, &grads(&[g, -g])).unwrap();
        w(&p)
    };
    let (a, b) = (step(1.0), step(1000.0));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6), "{a:?} {b:?}");
}

#[test]
fn mismatched_gradient_is_rejected() {
    let mut p = store(&[1.0, 2.0]);
    let mut adam = AdamState::new(AdamConfig::default(), &p);
    assert!(adam.step(&mut p, &grads(&[1.0])).is_err());
    let mut g = Grads::default();
    g.insert("nope", vec![1.0]);
    assert!(adam.step(&mut p, &g).is_err());
    assert_eq!(adam.t(), 0);
}

#[test]
fn early_stop_never_before_and_always_at_patience() {
    for patience in 1..6 {
        let mut es = EarlyStop::new(patience, 1e-4);
        assert!(es.observe(0, 1.0).improved);
        for k in 1..=patience {
            let d = es.observe(k, 1.0);
            assert!(!d.improved);
            assert_eq!(d.stop, k == patience, "patience {patience}, epoch {k}");
        }
    }
    // an improvement smaller than min_delta does not reset the count
    let mut es = EarlyStop::new(2, 0.1);
    es.observe(0, 1.0);
    es.observe(1, 0.95);
    assert!(es.observe(2, 0.91).stop);
}

fn tiny_spec(per_class: usize) -> DatasetSpec {
    DatasetSpec { samples_per_class: per_class, min_width: 16, min_height: 16, max_width: 20, max_height: 20, clutter: 0.0, jitter: 0.0, ..DatasetSpec::default() }
}

fn quiet(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, augment: false, seed, ..TrainConfig::default() }
}

fn data(samples: &[ImageSample]) -> TrainData<'_> {
    TrainData { train: samples, val: &[] }
}

#[test]
fn zero_epochs_leave_weights_at_init() {
    let samples = generate_synthetic(&tiny_spec(1)).unwrap();
    let fx = FeatureExtractors::default();
    let mut ae = AutoencoderModel::new(16, 4, 1).unwrap();
    let before = ae.params().clone();
    let run = train::run_stage1(&mut ae, &fx, data(&samples), &quiet(0, 1)).unwrap();
    assert!(run.history.is_empty() && !run.stopped_early);
    assert_eq!(ae.params(), &before);

    let mut clf = ClassifierModel::new(Variant::InceptionMini, 16, 1).unwrap();
    let before = clf.params().clone();
    let run = train::train_baseline(&mut clf, data(&samples), &quiet(0, 1)).unwrap();
    assert!(run.history.is_empty());
    assert_eq!(clf.params(), &before);
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let samples = generate_synthetic(&tiny_spec(2)).unwrap();
    let (train_set, val_set) = samples.split_at(6);
    let split = TrainData { train: train_set, val: val_set };
    let cfg = TrainConfig { augment: true, ..quiet(2, 7) };
    let go = || {
        let mut ae = AutoencoderModel::new(16, 4, 3).unwrap();
        let mut clf = ClassifierModel::new(Variant::XceptionMini, 16, 3).unwrap();
        let run = train::run_stage2_joint(&mut ae, &mut clf, &FeatureExtractors::default(), split, &cfg).unwrap();
        (run.history, ae.params().clone(), clf.params().clone())
    };
    let (a, b) = (go(), go());
    assert_eq!(a, b);
    let bits = |h: &[train::EpochRecord]| h.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
}

#[test]
fn empty_training_set_is_an_error() {
    let mut ae = AutoencoderModel::new(16, 4, 1).unwrap();
    assert!(train::run_stage1(&mut ae, &FeatureExtractors::default(), data(&[]), &quiet(1, 1)).is_err());
}

#[test]
fn stage1_overfits_two_images() {
    let samples: Vec<ImageSample> = generate_synthetic(&tiny_spec(1)).unwrap().into_iter().take(2).collect();
    let mut ae = AutoencoderModel::new(16, 16, 2).unwrap();
    let cfg = TrainConfig { batch_size: 2, ..quiet(200, 2) };
    let run = train::run_stage1(&mut ae, &FeatureExtractors::default(), data(&samples), &cfg).unwrap();
    assert_eq!(run.epochs_run(), 200);
    for s in &samples {
        let target = resize_bilinear(&s.pixels, 16, 16);
        let recon = ae.standardize(&s.pixels).unwrap();
        let mse = target.data().iter().zip(recon.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / target.numel() as f64;
        assert!(mse < 0.01, "{}: reconstruction mse {mse}", s.source);
    }
}

#[test]
fn joint_training_overfits_small_set() {
    let samples = generate_synthetic(&tiny_spec(8)).unwrap();
    let mut ae = AutoencoderModel::new(16, 16, 4).unwrap();
    let mut clf = ClassifierModel::new(Variant::XceptionMini, 16, 4).unwrap();
    let fx = FeatureExtractors::default();
    train::run_stage1(&mut ae, &fx, data(&samples), &quiet(20, 4)).unwrap();
    let run = train::run_stage2_joint(&mut ae, &mut clf, &fx, data(&samples), &quiet(300, 4)).unwrap();
    let best = run.history.iter().filter_map(|r| r.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.95, "best training accuracy {best} over {} epochs", run.epochs_run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_gradient_is_identity(vals in prop::collection::vec(-5.0f32..5.0, 1..6), steps in 1usize..20) {
        let mut p = store(&vals);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..steps {
            adam.step(&mut p, &grads(&vec![0.0; vals.len()])).unwrap();
        }
        prop_assert_eq!(w(&p), vals);
        prop_assert_eq!(adam.t(), steps as u64);
    }

    #[test]
    fn second_moment_stays_non_negative(gs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..8)) {
        let mut p = store(&[0.0, 1.0, -1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for g in &gs {
            adam.step(&mut p, &grads(g)).unwrap();
            prop_assert!(adam.moments("w").unwrap().v.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn one_step_decreases_a_convex_quadratic(
        terms in prop::collection::vec((0.1f64..10.0, -1.0f64..1.0, 0.01f64..2.0, any::<bool>()), 1..8),
    ) {
        // L(θ) = ½ Σ a·(θ − c)²
        let theta: Vec<f32> = terms.iter().map(|&(_, c, off, neg)| (c + if neg { -off } else { off }) as f32).collect();
        let loss = |th: &[f32]| terms.iter().zip(th).map(|(&(a, c, _, _), &t)| 0.5 * a * (t as f64 - c).powi(2)).sum::<f64>();
        let g: Vec<f64> = terms.iter().zip(&theta).map(|(&(a, c, _, _), &t)| a * (t as f64 - c)).collect();
        let mut p = store(&theta);
        AdamState::new(AdamConfig::default(), &p).step(&mut p, &grads(&g)).unwrap();
        prop_assert!(loss(&w(&p)) < loss(&theta));
    }
}

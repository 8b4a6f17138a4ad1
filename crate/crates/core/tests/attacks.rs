//! Attack identities and closed-form oracles.

mod common;

use cbc::attacks::{
    bim, cw_l2, cw_l2_traced, deepfool, deepfool_step, fgsm, mim, run_attack, AttackConfig, AttackKind, Classifier,
};
use cbc::data::synthetic;
use cbc::nn::{ArchitectureSpec, LayerSpec, Model};
use cbc::train::{accuracy, train_classifier, TrainConfig};
use cbc::Tensor;
use common::{binary_toy, rng, Affine};
use rand::Rng;

fn small_cnn() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "small",
        [1, 6, 6],
        vec![
            LayerSpec::conv("c1", 3, 3, 1, 1),
            LayerSpec::relu("r1"),
            LayerSpec::max_pool("p1", 2, 2),
            LayerSpec::dense("fc", 27, 4),
            LayerSpec::softmax("sm"),
        ],
    )
}

fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let d = synthetic(n, 4, [1, 6, 6], 0.2, seed);
    (d.images, d.labels)
}

#[test]
fn fgsm_scalar_pixel_example() {
    // logits [0, 4x], label 1: dJ/dx = -4 * (1 - sigmoid(2)) < 0.
    let m = Affine {
        w: Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap(),
        b: Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
    };
    let x = Tensor::new(vec![1, 1], vec![0.5f64]).unwrap();
    let adv = fgsm(&m, &x, &[1], 0.1).unwrap();
    assert!((adv.adversarials.data()[0] - 0.4).abs() < 1e-15);
}

#[test]
fn zero_epsilon_is_identity() {
    let m: Model = Model::build(&small_cnn(), 0).unwrap();
    let (x, y) = batch(8, 1);
    assert_eq!(fgsm(&m, &x, &y, 0.0).unwrap().adversarials, x);
    assert_eq!(bim(&m, &x, &y, 0.0, 4).unwrap().adversarials, x);
    assert_eq!(mim(&m, &x, &y, 0.0, 4, 0.9).unwrap().adversarials, x);
}

#[test]
fn iterative_identities_are_bit_exact() {
    let m: Model = Model::build(&small_cnn(), 3).unwrap();
    let (x, y) = batch(16, 2);
    let f = fgsm(&m, &x, &y, 0.05).unwrap();
    assert_eq!(bim(&m, &x, &y, 0.05, 1).unwrap(), f);
    assert_eq!(mim(&m, &x, &y, 0.05, 1, 0.8).unwrap(), f, "first MIM step is FGSM");
    assert_eq!(mim(&m, &x, &y, 0.02, 5, 0.0).unwrap(), bim(&m, &x, &y, 0.02, 5).unwrap());
}

#[test]
fn fgsm_moves_exactly_epsilon() {
    let m: Model = Model::build(&small_cnn(), 3).unwrap();
    let (x, y) = batch(16, 4);
    // Dyadic pixels and step keep the f32 arithmetic exact.
    let x = x.map(|v| (v * 256.0).round() / 256.0);
    let eps = 1.0f32 / 32.0;
    let adv = fgsm(&m, &x, &y, eps).unwrap().adversarials;
    let grad_sign = {
        let tape = cbc::Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let loss = m.logits(&tape, xv).unwrap().cross_entropy(&y).unwrap();
        tape.backward(loss).unwrap();
        xv.grad().unwrap()
    };
    for ((a, o), g) in adv.data().iter().zip(x.data()).zip(grad_sign.data()) {
        assert!((a - o).abs() <= eps);
        let unclamped = (o + eps.copysign(*g)).clamp(0.0, 1.0) == o + eps.copysign(*g);
        if *g != 0.0 && unclamped {
            assert_eq!((a - o).abs(), eps);
        }
    }
}

#[test]
fn linear_two_step_closed_forms() {
    // logits [0, 3x], label 1: the loss gradient is always negative.
    let m = Affine {
        w: Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap(),
        b: Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
    };
    let x = Tensor::new(vec![1, 1], vec![0.6f64]).unwrap();
    let b = bim(&m, &x, &[1], 0.05, 2).unwrap();
    assert!((b.adversarials.data()[0] - 0.5).abs() < 1e-15);
    let mm = mim(&m, &x, &[1], 0.05, 2, 1.0).unwrap();
    assert_eq!(mm.adversarials, b.adversarials);
}

#[test]
fn outputs_stay_in_unit_box() {
    let m: Model = Model::build(&small_cnn(), 5).unwrap();
    let (x, y) = batch(12, 6);
    let cfg = AttackConfig {
        epsilon: 0.3,
        cw_steps: 20,
        cw_lr: 0.1,
        ..AttackConfig::default()
    };
    for kind in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Mim, AttackKind::DeepFool, AttackKind::Cw] {
        let adv = run_attack(&m, &x, &y, kind, &cfg).unwrap();
        assert_eq!(adv.adversarials.shape(), x.shape());
        assert!(adv.adversarials.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
    }
}

#[test]
fn deepfool_projects_onto_binary_hyperplane() {
    let mut r = rng(10);
    for _ in 0..50 {
        let toy = binary_toy(&mut r, 10, (0.01, 0.1), (1.0, 5.0));
        let adv = deepfool(&toy.model, &toy.x, None, 50, 0.0).unwrap();
        let n2 = toy.norm().powi(2);
        let f = toy.f();
        for ((a, o), w) in adv.adversarials.data().iter().zip(toy.x.data()).zip(&toy.w) {
            let expect = -f * w / n2;
            assert!(((a - o) - expect).abs() <= 1e-6 * expect.abs().max(1e-12), "{} vs {expect}", a - o);
        }
    }
}

#[test]
fn deepfool_picks_nearest_of_three_boundaries() {
    let mut r = rng(11);
    for _ in 0..50 {
        let d = 6;
        let w = Tensor::from_fn(vec![d, 3], |_| r.random_range(-1.0..1.0));
        let b = Tensor::from_fn(vec![3], |_| r.random_range(-0.5..0.5));
        let x = Tensor::from_fn(vec![1, d], |_| r.random_range(0.0..1.0));
        let m = Affine { w: w.clone(), b: b.clone() };
        let label = m.predict(&x).unwrap()[0];
        let z: Vec<f64> = (0..3)
            .map(|k| (0..d).map(|i| x.data()[i] * w.data()[i * 3 + k]).sum::<f64>() + b.data()[k])
            .collect();
        let brute = (0..3)
            .filter(|&k| k != label)
            .min_by(|&a, &c| {
                let dist = |k: usize| {
                    let n: f64 = (0..d).map(|i| (w.data()[i * 3 + k] - w.data()[i * 3 + label]).powi(2)).sum();
                    (z[k] - z[label]).abs() / n.sqrt()
                };
                dist(a).total_cmp(&dist(c))
            })
            .unwrap();
        let step = &deepfool_step(&m, &x, &[label]).unwrap()[0];
        assert_eq!(step.class, Some(brute));
    }
}

#[test]
fn deepfool_skips_misclassified_inputs() {
    let toy = binary_toy(&mut rng(12), 4, (0.05, 0.1), (1.0, 2.0));
    let adv = deepfool(&toy.model, &toy.x, Some(&[0]), 50, 0.02).unwrap();
    assert_eq!(adv.adversarials, toy.x);
}

#[test]
fn cw_finds_the_analytic_margin() {
    let mut r = rng(13);
    let cfg = AttackConfig {
        cw_c: 1.0,
        kappa: 0.0,
        cw_steps: 500,
        ..AttackConfig::default()
    };
    for _ in 0..20 {
        let toy = binary_toy(&mut r, 8, (0.05, 0.15), (2.0, 4.0));
        let adv = cw_l2(&toy.model, &toy.x, &[1], &cfg).unwrap();
        assert!(adv.success_mask[0]);
        let found = adv
            .adversarials
            .data()
            .iter()
            .zip(toy.x.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let analytic = toy.f().abs() / toy.norm();
        assert!((found - analytic).abs() <= 0.05 * analytic, "{found} vs {analytic}");
    }
}

#[test]
fn cw_starts_at_zero_perturbation_and_tracks_monotonically() {
    let toy = binary_toy(&mut rng(14), 8, (0.05, 0.15), (2.0, 4.0));
    // Already misclassified (label 0 but f > 0): with kappa = 0 the margin
    // term vanishes, so the initial objective is ||delta||^2 = 0.
    let cfg = AttackConfig {
        cw_steps: 0,
        ..AttackConfig::default()
    };
    let (adv, trace) = cw_l2_traced(&toy.model, &toy.x, &[0], &cfg).unwrap();
    assert!(adv.adversarials.data().iter().zip(toy.x.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(trace[0].abs() < 1e-20);

    let cfg = AttackConfig {
        cw_steps: 100,
        ..AttackConfig::default()
    };
    let (_, trace) = cw_l2_traced(&toy.model, &toy.x, &[1], &cfg).unwrap();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn cw_binary_search_and_targeted_mode_run() {
    let m: Model<f64> = Model::build(&small_cnn(), 5).unwrap();
    let (x, y) = batch(4, 6);
    let x = x.cast::<f64>();
    let cfg = AttackConfig {
        cw_steps: 20,
        cw_lr: 0.05,
        cw_search_steps: 3,
        target_class: Some(2),
        ..AttackConfig::default()
    };
    let adv = run_attack(&m, &x, &y, AttackKind::Cw, &cfg).unwrap();
    assert_eq!(adv.adversarials.shape(), x.shape());
}

#[test]
fn attacks_never_help_a_trained_model() {
    let train = synthetic(1024, 4, [1, 6, 6], 0.25, 20);
    let test = synthetic(512, 4, [1, 6, 6], 0.25, 20);
    let mut m: Model = Model::build(&small_cnn(), 1).unwrap();
    train_classifier(&mut m, &train, &TrainConfig::new(5, 0.01, 1)).unwrap();
    let clean = accuracy(&m, &test).unwrap();
    let cfg = AttackConfig {
        epsilon: 0.05,
        cw_steps: 30,
        ..AttackConfig::default()
    };
    for kind in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Mim, AttackKind::DeepFool, AttackKind::Cw] {
        let adv = run_attack(&m, &test.images, &test.labels, kind, &cfg).unwrap();
        assert!(adv.accuracy() <= clean + 0.02, "{kind:?}: {} vs clean {clean}", adv.accuracy());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let m: Model = Model::build(&small_cnn(), 0).unwrap();
    let (x, y) = batch(2, 0);
    let bad = AttackConfig {
        epsilon: -0.1,
        ..AttackConfig::default()
    };
    assert!(run_attack(&m, &x, &y, AttackKind::Fgsm, &bad).is_err());
    assert!(fgsm(&m, &x, &y[..1], 0.1).is_err());
}

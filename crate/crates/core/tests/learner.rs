use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rccm_core::learner::{spectral_norm, train, Optimizer, SnMlp, TrainConfig, TrainingSet};

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("f{i}")).collect()
}

fn quad_net(seed: u64) -> SnMlp {
    SnMlp::new(vec![4, 32, 32, 32, 32, 2], vec![0, 1, 3, 4], names(4), 4.0, seed).unwrap()
}

fn uniform_set(n: usize, seed: u64, f: impl Fn(&[f64]) -> Vec<f64>) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainingSet { feature_names: names(4), ..Default::default() };
    for _ in 0..n {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = f(&x);
        set.push(x, y, "synthetic");
    }
    set
}

#[test]
fn backprop_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [3usize, 5, 4, 2];
    let weights: Vec<DMatrix<f64>> =
        dims.windows(2).map(|w| DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-1.0..1.0))).collect();
    let biases: Vec<DVector<f64>> = dims[1..].iter().map(|&d| DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5))).collect();
    let net = SnMlp::from_parts(vec![0, 1, 2], names(3), weights, biases, 10.0).unwrap();
    let x = DMatrix::from_fn(3, 7, |_, _| rng.gen_range(-1.0..1.0));
    let y = DMatrix::from_fn(2, 7, |_, _| rng.gen_range(-1.0..1.0));
    let (_, gw, gb) = net.loss_and_gradient(&x, &y);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for l in 0..net.num_layers() {
        for idx in 0..net.weights[l].len() {
            let mut p = net.clone();
            let mut m = net.clone();
            p.weights[l][idx] += h;
            m.weights[l][idx] -= h;
            let fd = (p.loss_and_gradient(&x, &y).0 - m.loss_and_gradient(&x, &y).0) / (2.0 * h);
            worst = worst.max((fd - gw[l][idx]).abs() / gw[l][idx].abs().max(1e-3));
        }
        for idx in 0..net.biases[l].len() {
            let mut p = net.clone();
            let mut m = net.clone();
            p.biases[l][idx] += h;
            m.biases[l][idx] -= h;
            let fd = (p.loss_and_gradient(&x, &y).0 - m.loss_and_gradient(&x, &y).0) / (2.0 * h);
            worst = worst.max((fd - gb[l][idx]).abs() / gb[l][idx].abs().max(1e-3));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn normalized_net_is_sampled_lipschitz() {
    let net = quad_net(5);
    assert!(net.lipschitz_certificate() <= 4.0 * (1.0 + 1e-6));
    for w in &net.weights {
        assert!((spectral_norm(w) - 4f64.powf(0.2)).abs() < 1e-9);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let a = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
        let b = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
        let ratio = (net.forward(&a).unwrap() - net.forward(&b).unwrap()).norm() / (a - b).norm();
        worst = worst.max(ratio);
    }
    assert!(worst <= 4.0, "sampled Lipschitz {worst}");
}

#[test]
fn fits_zero_data() {
    let data = uniform_set(2000, 1, |_| vec![0.0, 0.0]);
    let mut net = quad_net(2);
    let report = train(&mut net, &data, &TrainConfig::default()).unwrap();
    assert!(*report.epoch_loss.last().unwrap() < 1e-8);
    let probe = uniform_set(2000, 9, |_| vec![0.0, 0.0]);
    let mut worst: f64 = 0.0;
    for x in &probe.inputs {
        worst = worst.max(net.forward(&DVector::from_column_slice(x)).unwrap().amax());
    }
    assert!(worst < 1e-3, "max output {worst}");
}

#[test]
fn fits_linear_target() {
    let target = |x: &[f64]| vec![0.6 * x[0] - 0.3 * x[1] + 0.1, 0.2 * x[2] + 0.5 * x[3] - 0.2];
    let data = uniform_set(4000, 2, target);
    let held_out = uniform_set(1000, 3, target);
    let mut net = quad_net(4);
    train(&mut net, &data, &TrainConfig::default()).unwrap();
    let rmse = held_out.rmse(&net);
    assert!(rmse < 5e-3, "held-out rmse {rmse}");
    assert!(net.lipschitz_certificate() <= 4.0 * (1.0 + 1e-6));
}

#[test]
fn training_is_deterministic() {
    let data = uniform_set(300, 8, |x| vec![x[0].sin(), x[1] * x[2]]);
    let cfg = TrainConfig { epochs: 5, seed: 42, ..Default::default() };
    let mut a = quad_net(1);
    let mut b = quad_net(1);
    let ra = train(&mut a, &data, &cfg).unwrap();
    let rb = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(ra.epoch_loss, rb.epoch_loss);
    assert_eq!(a.weights, b.weights);
    let sgd = TrainConfig { optimizer: Optimizer::Sgd, ..cfg };
    let mut c = quad_net(1);
    let rc = train(&mut c, &data, &sgd).unwrap();
    assert!(rc.epoch_loss.iter().all(|v| v.is_finite()));
}

#[test]
fn saved_model_predicts_identically() {
    let net = quad_net(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    net.save(&path).unwrap();
    let back = SnMlp::load(&path).unwrap();
    let x = DVector::from_vec(vec![0.3, -0.2, 1.1, 0.4]);
    assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("rccm-snmlp/1"));
}

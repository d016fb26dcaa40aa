mod common;

use common::{calibration, random_dataset, rng};
use ndarray::Array2;
use overparam::forge::{generate, GeneratorKind, GeneratorSpec};
use overparam::network::{forward, he_init, network_gradient, NetworkConfig, Weights};
use overparam::training::{empirical_loss, loss, loss_derivative, surrogate_error};
use overparam::{evaluate, gd_train, loss_gradient, Dataset, TrainingConfig, TrajectoryRecord};

fn zero_first_layer(w: &Weights) -> Weights {
    let mut z = w.clone();
    z.layers_mut()[0].fill(0.0);
    z
}

fn csv(t: &TrajectoryRecord) -> Vec<u8> {
    let mut out = Vec::new();
    t.write_csv(&mut out).unwrap();
    out
}

#[test]
fn loss_at_zero_and_far_left() {
    assert_eq!(loss(0.0), std::f64::consts::LN_2);
    assert_eq!(loss_derivative(0.0), -0.5);
    // log(1 + e^745) = 745 + log1p(e^-745), and e^-745 is below f64 resolution
    assert!(loss(-745.0).is_finite());
    assert_eq!(loss(-745.0), 745.0);
    assert!(loss(800.0) >= 0.0 && loss(800.0) < 1e-300);
}

#[test]
fn surrogate_dominates_indicator_at_reference_points() {
    for z in [-10.0, -0.1, 0.0, 0.1, 10.0] {
        let ind = if z < 0.0 { 1.0 } else { 0.0 };
        assert!(-2.0 * loss_derivative(z) >= ind, "z = {z}");
    }
}

#[test]
fn zero_network_values() {
    let w = he_init(&NetworkConfig::uniform(4, 2, 8, 1).unwrap()).unwrap();
    let z = zero_first_layer(&w);
    let mut r = rng(2);
    let data = random_dataset(&mut r, 9, 4);
    assert_eq!(empirical_loss(&z, &data).unwrap(), std::f64::consts::LN_2);
    assert_eq!(surrogate_error(&z, &data).unwrap(), 0.5);
    let ev = evaluate(&z, &data).unwrap();
    assert_eq!(ev.classification_error, 1.0);
    assert_eq!(ev.surrogate_error, 0.5);
}

#[test]
fn loss_at_init_is_bounded_by_max_output() {
    let w = he_init(&NetworkConfig::uniform(6, 3, 64, 5).unwrap()).unwrap();
    let mut r = rng(3);
    let data = random_dataset(&mut r, 40, 6);
    let max_f = (0..data.len()).map(|i| forward(&w, data.input(i)).unwrap().output.abs()).fold(0.0, f64::max);
    let l = empirical_loss(&w, &data).unwrap();
    assert!(l >= 0.0 && l <= std::f64::consts::LN_2 + max_f);
}

/// A one-unit-pair network whose output is `s·x_1` for `x_1 > 0`.
fn scaled_identity(s: f64) -> Weights {
    let cfg = NetworkConfig::new(2, vec![2], 0).unwrap();
    let layer = Array2::from_shape_vec((2, 2), vec![s, 0.0, 0.0, 0.0]).unwrap();
    Weights::from_parts(cfg, vec![layer], ndarray::array![1.0, -1.0]).unwrap()
}

#[test]
fn single_sample_hand_values() {
    let data = Dataset::from_rows(&[vec![1.0, 0.0]], vec![1.0]).unwrap();
    let w = scaled_identity(1.0);
    let want = (1.0 + (-1.0f64).exp()).ln();
    assert!((empirical_loss(&w, &data).unwrap() - want).abs() < 1e-15);
    let w = scaled_identity(10.0);
    let want = 1.0 / (1.0 + 10f64.exp());
    assert!((surrogate_error(&w, &data).unwrap() - want).abs() < 1e-18);
    assert!((want - 4.54e-5).abs() < 1e-7);
}

#[test]
fn single_sample_loss_gradient_is_scaled_network_gradient() {
    let w = he_init(&NetworkConfig::uniform(5, 2, 16, 3).unwrap()).unwrap();
    let mut r = rng(4);
    let data = random_dataset(&mut r, 1, 5);
    let t = forward(&w, data.input(0)).unwrap();
    let g = network_gradient(&w, &t).unwrap();
    let lg = loss_gradient(&w, &data).unwrap();
    let y = data.label(0);
    let c = loss_derivative(y * t.output) * y;
    for l in 0..2 {
        let want = &g.grads[l] * c;
        for (a, b) in lg.grads[l].iter().zip(&want) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-12));
        }
    }
}

#[test]
fn loss_gradient_bounded_by_surrogate_times_max_gradient() {
    let w = he_init(&NetworkConfig::uniform(6, 2, 32, 7).unwrap()).unwrap();
    let mut r = rng(5);
    let data = random_dataset(&mut r, 25, 6);
    let es = surrogate_error(&w, &data).unwrap();
    let lg = loss_gradient(&w, &data).unwrap().frobenius_norms();
    let mut max_g = vec![0.0f64; 2];
    for i in 0..data.len() {
        let g = network_gradient(&w, &forward(&w, data.input(i)).unwrap()).unwrap();
        for (m, n) in max_g.iter_mut().zip(g.frobenius_norms()) {
            *m = m.max(n);
        }
    }
    for l in 0..2 {
        assert!(lg[l] <= es * max_g[l] * (1.0 + 1e-12));
    }
}

#[test]
fn huge_margins_give_tiny_gradients() {
    let data = Dataset::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]], vec![1.0, 1.0]).unwrap();
    let w = scaled_identity(60.0);
    let norms = loss_gradient(&w, &data).unwrap().frobenius_norms();
    let es = surrogate_error(&w, &data).unwrap();
    let max_g = (0..2)
        .map(|i| network_gradient(&w, &forward(&w, data.input(i)).unwrap()).unwrap().frobenius_norms()[0])
        .fold(0.0, f64::max);
    assert!(es < 1e-15);
    assert!(norms[0] <= es * max_g);
}

#[test]
fn zero_step_keeps_weights() {
    let w = he_init(&NetworkConfig::uniform(4, 2, 16, 1).unwrap()).unwrap();
    let mut r = rng(6);
    let data = random_dataset(&mut r, 20, 4);
    let cfg = TrainingConfig { step_size: 0.0, iterations: 5, record_every: 1, snapshot_every: Some(1) };
    let out = gd_train(&w, &data, &cfg).unwrap();
    assert_eq!(out.best_iteration, 0);
    assert_eq!(out.final_weights, w);
    assert!(out.snapshots.iter().all(|(_, s)| *s == w));
    let first = &out.trajectory.rows[0];
    assert!(out.trajectory.rows.iter().all(|r| r.loss == first.loss && r.distances.iter().all(|d| *d == 0.0)));
}

#[test]
fn one_iteration_records_both_ends() {
    let w = he_init(&NetworkConfig::uniform(4, 2, 16, 1).unwrap()).unwrap();
    let mut r = rng(7);
    let data = random_dataset(&mut r, 20, 4);
    let cfg = TrainingConfig { step_size: 0.1, iterations: 1, record_every: 1, snapshot_every: None };
    let out = gd_train(&w, &data, &cfg).unwrap();
    let its: Vec<usize> = out.trajectory.rows.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 1]);
    let g = loss_gradient(&w, &data).unwrap();
    let mut want = w.clone();
    want.add_scaled(-0.1, &g.grads);
    assert_eq!(out.final_weights, want);
}

#[test]
fn fixture_run_meets_targets_and_decreases_surrogate() {
    let cal = calibration();
    let (train, _) = cal.datasets();
    let w0 = cal.network(cal.train.depth, cal.train.width);
    let out = gd_train(&w0, &train.data, &cal.training(cal.train.width)).unwrap();
    let es = surrogate_error(&out.best, &train.data).unwrap();
    assert!(es <= 0.1, "E_S = {es}");
    assert!((es - cal.measured("surrogate_error")).abs() < 1e-3);
    let norms = w0.frobenius_norms();
    for row in &out.trajectory.rows {
        for (d, n) in row.distances.iter().zip(&norms) {
            assert!(d / n <= 0.05);
        }
    }
    for pair in out.trajectory.rows.windows(2) {
        assert!(pair[1].surrogate_error < pair[0].surrogate_error, "E_S rose at iteration {}", pair[1].iteration);
    }
}

#[test]
fn training_is_thread_count_independent() {
    let w = he_init(&NetworkConfig::uniform(5, 2, 64, 2).unwrap()).unwrap();
    let mut r = rng(8);
    let data = random_dataset(&mut r, 150, 5);
    let cfg = TrainingConfig { step_size: 0.05, iterations: 6, record_every: 2, snapshot_every: None };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| gd_train(&w, &data, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(csv(&a.trajectory), csv(&b.trajectory));
    assert_eq!(a.final_weights, b.final_weights);
}

#[test]
fn flipped_labels_complement_the_error() {
    let w = he_init(&NetworkConfig::uniform(5, 2, 32, 2).unwrap()).unwrap();
    let mut r = rng(9);
    let data = random_dataset(&mut r, 60, 5);
    let e = evaluate(&w, &data).unwrap().classification_error;
    let f = evaluate(&w, &data.flipped()).unwrap().classification_error;
    assert!((e + f - 1.0).abs() < 1e-15);
}

#[test]
fn plug_in_surrogate_concentrates() {
    let spec = GeneratorSpec {
        kind: GeneratorKind::RandomReluTeacher,
        n: 20_000,
        d: 10,
        gamma0: Some(0.01),
        phi: None,
        features: Some(400),
        seed: 21,
    };
    let set = generate(&spec).unwrap();
    let first: Vec<usize> = (0..10_000).collect();
    let second: Vec<usize> = (10_000..20_000).collect();
    let w = he_init(&NetworkConfig::uniform(10, 2, 128, 4).unwrap()).unwrap();
    let a = evaluate(&w, &set.data.subset(&first)).unwrap().surrogate_error;
    let b = evaluate(&w, &set.data.subset(&second)).unwrap().surrogate_error;
    assert!((a - b).abs() <= 2.0 / 10_000f64.sqrt(), "{a} vs {b}");
}

#[test]
fn divergence_keeps_finite_rows() {
    let w = he_init(&NetworkConfig::uniform(4, 2, 16, 1).unwrap()).unwrap();
    let mut r = rng(10);
    let data = random_dataset(&mut r, 10, 4);
    let cfg = TrainingConfig { step_size: 1e12, iterations: 50, record_every: 1, snapshot_every: None };
    match gd_train(&w, &data, &cfg) {
        Err(overparam::Error::Diverged { last_finite, trajectory }) => {
            assert!(trajectory.rows.iter().all(|r| r.loss.is_finite()));
            assert!(trajectory.rows.last().map(|r| r.iteration) == Some(last_finite));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_iteration)),
    }
}

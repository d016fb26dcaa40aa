mod common;

use common::{calibration, random_dataset, rng, unit_rows};
use ndarray::Array1;
use overparam::forge::{generate, GeneratorKind, GeneratorSpec};
use overparam::network::{forward, forward_batch, he_init, network_gradient, NetworkConfig};
use overparam::probes::{
    gmatrix_probe, grad_lower_probe, grad_upper_probe, hidden_separability_probe, init_output_probe, max_min_margin,
    perturb, scaling_probe, scaling_probe_with, semismoothness_probe, ProbeKind, ScalingOptions, SeparabilityOptions,
};
use overparam::{evaluate, Dataset, PerturbationSpec};

const TAUS: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

fn no_operator_norms() -> ScalingOptions {
    ScalingOptions { operator_norm_samples: 0, ..Default::default() }
}

#[test]
fn zero_radius_gives_exact_zeros() {
    let w0 = he_init(&NetworkConfig::uniform(5, 3, 64, 2).unwrap()).unwrap();
    let mut r = rng(1);
    let data = random_dataset(&mut r, 10, 5);
    let rep = scaling_probe(&w0, &[PerturbationSpec::gaussian(0.0)], &data).unwrap();
    assert_eq!(rep.max_lhs("pattern_flips"), Some(0.0));
    assert_eq!(rep.max_lhs("hidden_difference"), Some(0.0));
    let semi = semismoothness_probe(&w0, &w0, &data).unwrap();
    assert_eq!(semi.max_lhs("output_residual"), Some(0.0));
    assert_eq!(semi.records_for("loss_residual").next().unwrap().lhs, 0.0);
}

#[test]
fn hidden_norms_stay_near_one_at_init() {
    let mut r = rng(2);
    let data = Dataset::new(unit_rows(&mut r, 200, 10), vec![1.0; 200]).unwrap();
    for depth in 1..=4 {
        let w0 = he_init(&NetworkConfig::uniform(10, depth, 2048, 3).unwrap()).unwrap();
        let rep = scaling_probe_with(&w0, &[PerturbationSpec::gaussian(0.0)], &data, no_operator_norms()).unwrap();
        for rec in rep.records_for("hidden_norm") {
            assert!((0.5..=2.0).contains(&rec.lhs), "L = {depth}: norm {} at {:?}", rec.lhs, rec.inputs);
        }
    }
}

#[test]
fn flip_count_slope_in_band_on_fixture() {
    let cal = calibration();
    let (train, _) = cal.datasets();
    let w0 = cal.network(2, 2048);
    let specs: Vec<_> = TAUS.iter().map(|&t| PerturbationSpec::gaussian(t)).collect();
    let rep = scaling_probe_with(&w0, &specs, &train.data, no_operator_norms()).unwrap();
    let slope = rep.slope("pattern_flips").unwrap();
    let [lo, hi] = cal.bands.flip_slope;
    assert!((lo..=hi).contains(&slope), "flip slope {slope}");
    assert!((slope - cal.measured("flip_slope")).abs() < 1e-3);
}

#[test]
fn per_sample_gradients_are_rank_one() {
    let w = he_init(&NetworkConfig::new(6, vec![20, 24, 16], 5).unwrap()).unwrap();
    let mut r = rng(3);
    let data = random_dataset(&mut r, 6, 6);
    for i in 0..data.len() {
        let t = forward(&w, data.input(i)).unwrap();
        let g = network_gradient(&w, &t).unwrap();
        for l in 1..=3 {
            let a = &t.layer_outputs[l - 1];
            let aa = a.dot(a);
            if aa == 0.0 {
                continue;
            }
            let b: Array1<f64> = g.grads[l - 1].t().dot(a) / aa;
            let scale = g.grads[l - 1].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for ((p, q), v) in g.grads[l - 1].indexed_iter() {
                assert!((v - a[p] * b[q]).abs() <= 1e-12 * scale);
            }
        }
    }
}

#[test]
fn loss_gradient_obeys_triangle_inequality() {
    let w = he_init(&NetworkConfig::uniform(6, 3, 48, 4).unwrap()).unwrap();
    let mut r = rng(4);
    let data = random_dataset(&mut r, 30, 6);
    let rep = grad_upper_probe(&w, &data).unwrap();
    for rec in rep.records_for("loss_gradient_triangle") {
        assert!(rec.lhs <= rec.rhs.unwrap() * (1.0 + 1e-12));
    }
}

#[test]
fn single_sample_b_hat_is_last_layer_gradient_over_root_width() {
    let w0 = he_init(&NetworkConfig::uniform(4, 2, 64, 6).unwrap()).unwrap();
    let mut r = rng(5);
    let data = random_dataset(&mut r, 1, 4);
    let t = forward(&w0, data.input(0)).unwrap();
    let last = network_gradient(&w0, &t).unwrap().frobenius_norms()[1];
    let rep = grad_lower_probe(&w0, &w0, &data, 0.1).unwrap();
    let b = rep.records_for("b_hat_random_feature").next().unwrap().lhs;
    assert!((b - last / 8.0).abs() <= 1e-13 * last);
}

#[test]
fn init_output_single_sample_has_no_rhs() {
    let w0 = he_init(&NetworkConfig::uniform(4, 2, 32, 1).unwrap()).unwrap();
    let mut r = rng(6);
    let data = random_dataset(&mut r, 1, 4);
    let rep = init_output_probe(&w0, &data).unwrap();
    let rec = rep.records_for("max_abs_output").next().unwrap();
    assert_eq!(rec.rhs, None);
    assert_eq!(rec.lhs, forward(&w0, data.input(0)).unwrap().output.abs());
}

#[test]
fn init_output_grows_slowly_with_sample_count() {
    let cal = calibration();
    let w0 = cal.network(3, 2048);
    let set = generate(&GeneratorSpec {
        kind: GeneratorKind::RandomReluTeacher,
        n: 2000,
        d: cal.data.d,
        gamma0: Some(cal.data.gamma0),
        phi: None,
        features: Some(cal.data.features),
        seed: cal.data.seed,
    })
    .unwrap();
    let half = set.data.subset(&(0..1000).collect::<Vec<_>>());
    let a = init_output_probe(&w0, &half).unwrap().max_lhs("max_abs_output").unwrap();
    let b = init_output_probe(&w0, &set.data).unwrap().max_lhs("max_abs_output").unwrap();
    assert!(a <= cal.bands.init_output_max, "max |f| = {a}");
    assert!(b < 2.0 * a);
}

#[test]
fn input_layer_margin_reaches_generator_margin() {
    let set = generate(&GeneratorSpec {
        kind: GeneratorKind::LinearMargin,
        n: 60,
        d: 4,
        gamma0: Some(0.25),
        phi: None,
        features: None,
        seed: 3,
    })
    .unwrap();
    let s = max_min_margin(set.data.inputs(), set.data.labels(), SeparabilityOptions::default()).unwrap();
    assert!(s.margin >= 0.25 - 1e-9, "{}", s.margin);
}

#[test]
fn conflicting_points_are_flagged_inseparable() {
    let w0 = he_init(&NetworkConfig::uniform(2, 2, 16, 1).unwrap()).unwrap();
    let d = Dataset::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![1.0, 0.0]], vec![1.0, -1.0, 1.0]).unwrap();
    let opts = SeparabilityOptions { iterations: 300, ..Default::default() };
    let rep = hidden_separability_probe(&w0, &d, 0.1, opts).unwrap();
    for l in 0..=2 {
        assert!(!rep.flags[&format!("layer_{l}_separable")]);
    }
}

#[test]
fn first_hidden_layer_keeps_a_fraction_of_the_margin() {
    let cal = calibration();
    let (train, _) = cal.datasets();
    let gamma = cal.measured("certified_gamma");
    let w0 = cal.network(2, 2048);
    let rep = hidden_separability_probe(&w0, &train.data, gamma, SeparabilityOptions::default()).unwrap();
    let layer1 = rep.records_for("hidden_margin").find(|r| r.inputs["layer"] == 1.0).unwrap().lhs;
    assert!(layer1 >= cal.bands.hidden_margin_factor * gamma, "layer-1 margin {layer1}");
}

#[test]
fn gmatrix_single_sample_closed_form() {
    let w0 = he_init(&NetworkConfig::uniform(5, 2, 40, 2).unwrap()).unwrap();
    let mut r = rng(7);
    let data = random_dataset(&mut r, 1, 5);
    let t = forward(&w0, data.input(0)).unwrap();
    let a = 0.7;
    let h = &t.layer_outputs[1];
    let active = t.pattern(2).count_ones() as f64;
    let want = a * a * h.dot(h) * active;
    let got = gmatrix_probe(&w0, &data, &[a], 0.2).unwrap().records_for("gmatrix").next().unwrap().lhs;
    assert!((got - want).abs() <= 1e-12 * want);
}

#[test]
fn gmatrix_and_active_fractions_on_fixture() {
    let cal = calibration();
    let (train, _) = cal.datasets();
    let gamma = cal.measured("certified_gamma");
    let w0 = cal.network(2, 2048);
    let n = train.data.len();
    let rep = gmatrix_probe(&w0, &train.data, &vec![1.0; n], gamma).unwrap();
    assert!(rep.max_ratio("gmatrix").unwrap() >= cal.bands.gmatrix_ratio_min);
    let batch = forward_batch(&w0, train.data.inputs()).unwrap();
    let [lo, hi] = cal.bands.active_fraction;
    for (i, rec) in rep.records_for("active_fraction").enumerate() {
        let bits = batch.pattern(2, i);
        assert_eq!(rec.lhs, bits.count_ones() as f64 / bits.len() as f64);
        assert!((lo..=hi).contains(&rec.lhs), "sample {i}: {}", rec.lhs);
    }
}

#[test]
fn twice_surrogate_bounds_classification_error() {
    let mut r = rng(8);
    for seed in 0..5 {
        let w = he_init(&NetworkConfig::uniform(5, 2, 32, seed).unwrap()).unwrap();
        let data = random_dataset(&mut r, 50, 5);
        let ev = evaluate(&w, &data).unwrap();
        assert!(2.0 * ev.surrogate_error >= ev.classification_error);
    }
}

#[test]
fn probes_are_deterministic() {
    let w0 = he_init(&NetworkConfig::uniform(5, 2, 64, 9).unwrap()).unwrap();
    let mut r = rng(9);
    let data = random_dataset(&mut r, 20, 5);
    let spec = PerturbationSpec { direction: 4, ..PerturbationSpec::gaussian(0.05) };
    let run = || {
        let w_hat = perturb(&w0, &spec, &data).unwrap();
        let a = serde_json::to_string(&semismoothness_probe(&w0, &w_hat, &data).unwrap()).unwrap();
        let b = serde_json::to_string(&scaling_probe(&w0, &[spec.clone()], &data).unwrap()).unwrap();
        (a, b)
    };
    assert_eq!(run(), run());
}

#[test]
fn unknown_probe_names_list_the_valid_ones() {
    let err = ProbeKind::parse_list("scaling,bogus").unwrap_err().to_string();
    assert!(err.contains("bogus") && err.contains("semismoothness"), "{err}");
    assert_eq!(ProbeKind::parse_list("all").unwrap().len(), 7);
}

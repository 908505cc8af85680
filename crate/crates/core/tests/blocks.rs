use polytax_core::blocks::{gaussian, pdcnl3_forward, pdcnl4_forward, ActivationMode, AttentionParams};
use polytax_core::data::{self, Dataset};
use polytax_core::netzoo::{build_network, parse_arch};
use polytax_core::oracle::{extract_coefficients, finite_diff_degree};
use polytax_core::trainer::{mean_loss, train, TrainConfig};
use polytax_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn complete_non_local_has_all_three_degrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = AttentionParams::random(2, 2, 1, &mut rng);
    let f = |z: &Tensor| pdcnl3_forward(&z.reshape(&[2, 2])?, &p, ActivationMode::Identity);
    let table = extract_coefficients(f, 4, 3).unwrap();
    assert!(table.max_abs_at_degree(0) < 1e-8);
    for k in 1..=3 {
        assert!(table.max_abs_at_degree(k) > 1e-3, "degree {k} missing");
    }
}

#[test]
fn gate_over_identity_map_is_second_degree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = AttentionParams::random(3, 4, 1, &mut rng);
    p.c1 = Tensor::zeros(p.c1.shape());
    p.c2 = Tensor::zeros(p.c2.shape());
    p.c3 = Tensor::zeros(&[3, 3]);
    p.c4 = Some(Tensor::zeros(&[3, 4]));
    p.c5 = Some(Tensor::zeros(&[3, 3]));
    p.c6 = Some(Tensor::eye(3));
    let f = |z: &Tensor| pdcnl4_forward(&z.reshape(&[4, 3])?, &p, ActivationMode::Identity);
    let x0 = gaussian(&[12], 1.0, &mut rng);
    let v = gaussian(&[12], 1.0, &mut rng);
    assert_eq!(finite_diff_degree(f, &x0, &v, 6, 0.5).unwrap(), 2);
}

fn quadratic_task() -> Dataset {
    data::synth_quadratic(4, 32, 9).unwrap()
}

#[test]
fn one_epoch_lowers_loss_for_every_polynomial_head() {
    let ds = quadratic_task();
    let all: Vec<usize> = (0..ds.len()).collect();
    for arch in ["affine-d4-k2", "pdc2-d4-w6-k2", "pdc3-d4-w6-k2", "pinet2-d4-w6-k2"] {
        let spec = parse_arch(arch).unwrap();
        let mut graph = build_network(&spec, 2).unwrap();
        let before = mean_loss(&mut graph, &ds, &all).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch: ds.len(),
            lr0: 1e-3,
            milestones: vec![],
            ..TrainConfig::default()
        };
        train(&mut graph, &ds, &ds, &cfg).unwrap();
        let after = mean_loss(&mut graph, &ds, &all).unwrap();
        assert!(after < before, "{arch}: {before} -> {after}");
    }
}

#[test]
fn identical_inputs_give_identical_reports() {
    let ds = quadratic_task();
    let spec = parse_arch("pdc2-d4-w6-k2").unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch: 16,
        lr0: 0.01,
        milestones: vec![2],
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut g = build_network(&spec, 4).unwrap();
        let report = train(&mut g, &ds, &ds, &cfg).unwrap();
        (report.to_csv(), g.params().to_vec())
    };
    assert_eq!(run(), run());
}

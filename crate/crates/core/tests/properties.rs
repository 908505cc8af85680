use std::cell::RefCell;
use std::collections::BTreeSet;

use polytax_core::blocks::{gaussian, pdc_forward, BlockKind, BlockSpec, Geom, Init, PolyParams};
use polytax_core::data::{self, Dataset, SampleKind};
use polytax_core::netzoo::{build_network, parse_arch};
use polytax_core::oracle::{cp_expand, finite_diff_degree, poly_eval_full};
use polytax_core::trainer::{batch_gradients, lr_at, mean_loss, Sgd, TrainConfig};
use polytax_core::verify::block_graph;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed seed so `cargo test` explores the same cases on every run.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x7072_6f70),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn kind() -> impl Strategy<Value = BlockKind> {
    prop::sample::select(BlockKind::ALL.to_vec())
}

fn indexed(classes: usize, per_class: usize) -> Dataset {
    let n = classes * per_class;
    let labels = (0..n).map(|i| i % classes).collect();
    let values = (0..n).map(|i| i as f64).collect();
    Dataset::new(SampleKind::Vector, vec![1], values, labels, classes).unwrap()
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn factored_matches_full_tensors(seed in any::<u64>(), d in 1usize..=5, o in 1usize..=3, n in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PolyParams::random(d, o, n, &mut rng);
        let z = gaussian(&[d], 1.0, &mut rng);
        let full = poly_eval_full(&cp_expand(&p).unwrap(), &z).unwrap();
        prop_assert!(full.max_abs_diff(&pdc_forward(&z, &p).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn degree_ignores_parameter_scale(seed in any::<u64>(), n in 1usize..=4, scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PolyParams::random(3, 2, n, &mut rng);
        // beta and one factor per degree term: the whole polynomial scales by `scale`
        let mut q = p.clone();
        q.beta = q.beta.scale(scale);
        for term in &mut q.factors {
            term[0] = term[0].scale(scale);
        }
        let x0 = gaussian(&[3], 1.0, &mut rng);
        let v = gaussian(&[3], 1.0, &mut rng);
        let a = finite_diff_degree(|z| pdc_forward(z, &p), &x0, &v, 6, 0.5).unwrap();
        let b = finite_diff_degree(|z| pdc_forward(z, &q), &x0, &v, 6, 0.5).unwrap();
        prop_assert_eq!(a, n);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn samplers_are_deterministic_without_duplicates(seed in any::<u64>(), m in 1usize..=30, factor in 1.0f64..30.0) {
        let base = indexed(5, 30);
        let limited = data::subsample_per_class(&base, m, seed).unwrap();
        let tailed = data::longtail_resample(&base, factor, seed).unwrap();
        prop_assert_eq!(&limited, &data::subsample_per_class(&base, m, seed).unwrap());
        prop_assert_eq!(&tailed, &data::longtail_resample(&base, factor, seed).unwrap());
        for pick in [limited, tailed] {
            let distinct: BTreeSet<u64> = pick.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(distinct.len(), pick.len());
        }
    }

    #[test]
    fn param_count_matches_recorded_graph(
        k in kind(),
        c in 1usize..=5,
        n in 1usize..=4,
        bn in any::<bool>(),
        shortcut in any::<bool>(),
        conv in any::<bool>(),
    ) {
        let g = Geom::new(2, 2);
        let mut s = BlockSpec::new(k, c).with_degree(n);
        if matches!(k, BlockKind::PdcNl3 | BlockKind::PdcNl4) {
            s = s.with_spatial(g);
        }
        if conv {
            s = s.with_linear(polytax_core::blocks::Realization::Conv3x3);
        }
        s.batch_norm = bn;
        s.shortcut = shortcut;
        let graph = block_graph(&s, g, 0, Init::Default).unwrap();
        prop_assert_eq!(graph.trainable_count(), s.param_count());
    }

    #[test]
    fn lr_schedule_is_nonincreasing(
        lr0 in 1e-4f64..1.0,
        gamma in 0.01f64..1.0,
        mut milestones in prop::collection::vec(1usize..60, 0..5),
    ) {
        milestones.sort_unstable();
        milestones.dedup();
        let cfg = TrainConfig { epochs: 60, lr0, gamma, milestones: milestones.clone(), ..TrainConfig::default() };
        let rates: Vec<f64> = (0..60).map(|e| lr_at(e, &cfg).unwrap()).collect();
        prop_assert_eq!(rates[0], lr0);
        for e in 1..60 {
            prop_assert!(rates[e] <= rates[e - 1]);
            if !milestones.contains(&e) {
                prop_assert_eq!(rates[e], rates[e - 1]);
            }
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn small_step_does_not_raise_batch_loss(k in kind(), seed in any::<u64>()) {
        let text = format!("input 3x2x2\nblock kind={} mode=identity\npool kind=global\nhead classes=3\n", k.name());
        let spec = parse_arch(&text).unwrap();
        let mut graph = build_network(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..4 * 12).map(|_| rng.random()).collect();
        let ds = Dataset::from_bytes(vec![3, 2, 2], &bytes, vec![0, 1, 2, 1], 3).unwrap();
        let batch = [0, 1, 2, 3];
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let (before, grads) = batch_gradients(&mut graph, &ds, &batch).unwrap();
        Sgd::new().step(&mut graph, &grads, 1e-4, &cfg).unwrap();
        let after = mean_loss(&mut graph, &ds, &batch).unwrap();
        prop_assert!(after <= before + 1e-8, "{before} -> {after}");
    }
}

#[test]
fn composed_blocks_multiply_degrees() {
    let text = "input 2\nblock kind=pdc degree=2\nblock kind=pdc degree=2\nhead classes=2\n";
    let spec = parse_arch(text).unwrap();
    let graph = polytax_core::netzoo::build_network_with(&spec, 3, Init::Random).unwrap();
    let cell = RefCell::new(graph);
    let x0 = polytax_core::Tensor::vector(vec![0.3, -0.2]);
    let v = polytax_core::Tensor::vector(vec![0.6, 0.8]);
    let n = finite_diff_degree(|z| cell.borrow_mut().forward(z), &x0, &v, 6, 0.5).unwrap();
    assert_eq!(n, 4);
}

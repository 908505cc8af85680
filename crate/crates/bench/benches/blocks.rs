use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use polytax_bench::fixture;
use polytax_core::blocks::{
    pdc_forward, pdcnl3_forward, se_forward, ActivationMode, AttentionParams, BlockKind, BlockSpec, Geom, Init,
    PolyParams,
};
use polytax_core::oracle::{cp_expand, poly_eval_full};
use polytax_core::verify::block_graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn eager_blocks(c: &mut Criterion) {
    let mut group = c.benchmark_group("eager");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 3, 4] {
        let p = PolyParams::random(16, 16, n, &mut rng);
        let z = fixture(&[16]);
        group.bench_with_input(BenchmarkId::new("pdc", n), &n, |b, _| {
            b.iter(|| pdc_forward(black_box(&z), &p).unwrap())
        });
    }
    let x = fixture(&[64, 32]);
    let (c1, c2) = (fixture(&[32, 32]), fixture(&[32, 32]));
    group.bench_function("se", |b| {
        b.iter(|| se_forward(black_box(&x), &c1, &c2, ActivationMode::Standard).unwrap())
    });
    let a = AttentionParams::random(32, 64, 4, &mut rng);
    group.bench_function("pdcnl3", |b| {
        b.iter(|| pdcnl3_forward(black_box(&x), &a, ActivationMode::Standard).unwrap())
    });
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = PolyParams::random(5, 3, 4, &mut rng);
    let z = fixture(&[5]);
    c.bench_function("oracle/expand-and-eval-n4", |b| {
        b.iter(|| poly_eval_full(&cp_expand(black_box(&p)).unwrap(), &z).unwrap())
    });
}

fn graph_pass(c: &mut Criterion) {
    let mut group = c.benchmark_group("graph");
    let g = Geom::new(8, 8);
    for kind in [BlockKind::Residual1, BlockKind::Se2, BlockKind::Pdc, BlockKind::PdcNl4] {
        let mut spec = BlockSpec::new(kind, 16).with_degree(3).with_ratio(4);
        if kind == BlockKind::PdcNl4 {
            spec = spec.with_spatial(g);
        }
        let mut graph = block_graph(&spec, g, 0, Init::Random).unwrap();
        let x = fixture(&[g.hw() * 16]);
        let y = graph.forward(&x).unwrap();
        let upstream = fixture(y.shape());
        group.bench_function(BenchmarkId::new("forward-backward", kind.name()), |b| {
            b.iter(|| {
                graph.forward(black_box(&x)).unwrap();
                graph.backward(&upstream).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, eager_blocks, oracle, graph_pass);
criterion_main!(benches);

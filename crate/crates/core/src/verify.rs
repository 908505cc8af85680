//! Named invariant suites with measured residuals, run by the command line.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algebra::Ops;
use crate::autodiff::{grad_check, Graph};
use crate::blocks::build::gaussian;
use crate::blocks::{
    build_block, dnl_forward, nl_forward, pdc_forward, pdcnl3_forward, pdcnl4_forward, se_forward, se_superdiag_form,
    ActivationMode, AttentionParams, BlockInput, BlockKind, BlockSpec, Geom, Init, PolyParams, Realization,
};
use crate::error::{Error, Result};
use crate::netzoo::{build_network, build_network_with, count_params, parse_arch};
use crate::oracle::{cp_expand, eval_folded, extract_coefficients, finite_diff_degree, fold_poly2, poly_eval_full};
use crate::tensor::Tensor;

/// Tolerances of the suites.
pub const ORACLE_TOL: f64 = 1e-10;
pub const SE_TOL: f64 = 1e-12;
pub const FOLD_TOL: f64 = 1e-12;
pub const SPARSITY_TOL: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
/// Instances per randomized equivalence check.
pub const INSTANCES: usize = 100;
/// Seeds of the degree suite.
pub const DEGREE_SEEDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Degree,
    Oracle,
    Grad,
    SeIdentity,
    Fold,
    /// Tensor, autodiff and network bookkeeping invariants.
    Structure,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 7] = ["degree", "oracle", "grad", "se-identity", "fold", "structure", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "degree" => Suite::Degree,
            "oracle" => Suite::Oracle,
            "grad" => Suite::Grad,
            "se-identity" => Suite::SeIdentity,
            "fold" => Suite::Fold,
            "structure" => Suite::Structure,
            "all" => Suite::All,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown suite {other:?}; expected one of {}",
                    Suite::NAMES.join("|")
                )))
            }
        })
    }
}

/// How a measured value is compared against its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Equal,
    Below,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub relation: Relation,
    /// Failure detail when the check could not be measured.
    pub error: Option<String>,
}

impl Check {
    pub fn equal(name: impl Into<String>, measured: f64, expected: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: expected,
            relation: Relation::Equal,
            error: None,
        }
    }

    pub fn below(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound,
            relation: Relation::Below,
            error: None,
        }
    }

    fn failed(name: impl Into<String>, err: &Error) -> Self {
        Self {
            name: name.into(),
            measured: f64::NAN,
            bound: f64::NAN,
            relation: Relation::Equal,
            error: Some(err.to_string()),
        }
    }

    fn from_result(name: String, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::failed(name, &e))
    }

    pub fn passed(&self) -> bool {
        self.error.is_none()
            && match self.relation {
                Relation::Equal => self.measured == self.bound,
                Relation::Below => self.measured < self.bound,
            }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "pass" } else { "FAIL" };
        match (&self.error, self.relation) {
            (Some(e), _) => write!(f, "{}: {status} error={e}", self.name),
            (None, Relation::Equal) => write!(
                f,
                "{}: {status} measured={} expected={}",
                self.name, self.measured, self.bound
            ),
            (None, Relation::Below) => write!(
                f,
                "{}: {status} measured={:.3e} bound={:.0e}",
                self.name, self.measured, self.bound
            ),
        }
    }
}

/// Runs a suite; `seed` offsets every random draw.
pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Degree => degree_suite(seed),
        Suite::Oracle => oracle_suite(seed),
        Suite::Grad => grad_suite(seed),
        Suite::SeIdentity => se_identity_suite(seed),
        Suite::Fold => fold_suite(seed),
        Suite::Structure => structure_suite(seed),
        Suite::All => [
            Suite::Degree,
            Suite::Oracle,
            Suite::Grad,
            Suite::SeIdentity,
            Suite::Fold,
            Suite::Structure,
        ]
        .into_iter()
        .flat_map(|s| run_suite(s, seed))
        .collect(),
    }
}

/// Spec, spatial size and expected degree of every stock block.
pub fn degree_cases() -> Vec<(String, BlockSpec, Geom, usize)> {
    let g = Geom::new(2, 2);
    let c = 3;
    let base = |k| BlockSpec::new(k, c);
    vec![
        ("residual1".into(), base(BlockKind::Residual1), g, 1),
        ("se2".into(), base(BlockKind::Se2), g, 2),
        ("sk2".into(), base(BlockKind::Sk2), g, 2),
        ("pinet-n2".into(), base(BlockKind::PiNet).with_degree(2), g, 2),
        ("pdc-n2".into(), base(BlockKind::Pdc).with_degree(2), g, 2),
        ("nl3".into(), base(BlockKind::Nl3), g, 3),
        ("dnl3".into(), base(BlockKind::Dnl3), g, 3),
        ("pdcnl3".into(), base(BlockKind::PdcNl3).with_spatial(g), g, 3),
        ("pinet-n3".into(), base(BlockKind::PiNet).with_degree(3), g, 3),
        ("pdcnl4".into(), base(BlockKind::PdcNl4).with_spatial(g), g, 4),
        ("pdc-n4".into(), base(BlockKind::Pdc).with_degree(4), g, 4),
    ]
}

/// A block recorded alone in a graph whose input is the flattened `[hw × c]` map.
pub fn block_graph(spec: &BlockSpec, geom: Geom, seed: u64, init: Init) -> Result<Graph> {
    let mut graph = Graph::new();
    let x = graph.input(&[geom.hw() * spec.channels]);
    let m = graph.reshape(&x, &[geom.hw(), spec.channels])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = build_block(&mut graph, spec, BlockInput { node: m, geom }, &mut rng, "blk", init)?;
    graph.set_output(y.node);
    Ok(graph)
}

fn unit_vector(n: usize, rng: &mut impl Rng) -> Tensor {
    let v = gaussian(&[n], 1.0, rng);
    let norm = v.dot(&v).expect("same shape").sqrt();
    v.scale(1.0 / norm)
}

/// Certified degree of a graph along a random line through a random point.
pub fn graph_degree(graph: Graph, n_inputs: usize, rng: &mut impl Rng) -> Result<usize> {
    let x0 = gaussian(&[n_inputs], 1.0, rng);
    let v = unit_vector(n_inputs, rng);
    let cell = RefCell::new(graph);
    finite_diff_degree(|z| cell.borrow_mut().forward(z), &x0, &v, 6, 0.5)
}

fn degree_suite(seed: u64) -> Vec<Check> {
    let mut out = vec![];
    for s in 1..=DEGREE_SEEDS as u64 {
        let seed = seed.wrapping_add(s);
        for (name, spec, geom, expected) in degree_cases() {
            let label = format!("degree/{name}/seed-{s:02}");
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_6772);
            let r = block_graph(&spec, geom, seed, Init::Random)
                .and_then(|g| graph_degree(g, geom.hw() * spec.channels, &mut rng))
                .map(|d| Check::equal(&label, d as f64, expected as f64));
            out.push(Check::from_result(label, r));
        }
    }
    out
}

fn oracle_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6163);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (d, o, n) = (
            rng.random_range(1..=5),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
        );
        let p = PolyParams::random(d, o, n, &mut rng);
        let z = gaussian(&[d], 1.0, &mut rng);
        let r = cp_expand(&p)
            .and_then(|t| poly_eval_full(&t, &z))
            .and_then(|full| full.max_abs_diff(&pdc_forward(&z, &p)?));
        match r {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => return vec![Check::failed("oracle/factored-vs-full", &e)],
        }
    }
    vec![Check::below("oracle/factored-vs-full", worst, ORACLE_TOL)]
}

fn se_identity_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7365_6964);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (hw, c) = (rng.random_range(1..=6), rng.random_range(1..=5));
        let x = gaussian(&[hw, c], 1.0, &mut rng);
        let c1 = gaussian(&[c, c], 1.0, &mut rng);
        let c2 = gaussian(&[c, c], 1.0, &mut rng);
        let r = se_forward(&x, &c1, &c2, ActivationMode::Identity)
            .and_then(|y| y.max_abs_diff(&se_superdiag_form(&x, &c1, &c2)?));
        match r {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => return vec![Check::failed("se-identity/superdiagonal", &e)],
        }
    }
    vec![Check::below("se-identity/superdiagonal", worst, SE_TOL)]
}

fn fold_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x666f_6c64);
    let mut worst = 0.0f64;
    let mut failure = None;
    for _ in 0..INSTANCES {
        let (d, o) = (rng.random_range(1..=5), rng.random_range(1..=3));
        let p = PolyParams::random(d, o, 2, &mut rng);
        let z = gaussian(&[d], 1.0, &mut rng);
        match fold_poly2(&p).and_then(|w| eval_folded(&w, &z)?.max_abs_diff(&pdc_forward(&z, &p)?)) {
            Ok(dev) => worst = worst.max(dev),
            Err(e) => failure = Some(e),
        }
    }
    let mut out = vec![match failure {
        Some(e) => Check::failed("fold/padded-vs-factored", &e),
        None => Check::below("fold/padded-vs-factored", worst, FOLD_TOL),
    }];

    let (c1, c2, c3) = (
        gaussian(&[2, 1], 1.0, &mut rng),
        gaussian(&[1, 2], 1.0, &mut rng),
        gaussian(&[2, 2], 1.0, &mut rng),
    );
    let nl = |mode| {
        let (c1, c2, c3) = (&c1, &c2, &c3);
        move |z: &Tensor| nl_forward(&z.reshape(&[2, 2])?, c1, c2, c3, mode)
    };
    let name = "fold/nl-low-degree-coefficients";
    out.push(match extract_coefficients(nl(ActivationMode::Identity), 4, 3) {
        Ok(t) => Check::below(
            name,
            (0..=2).map(|k| t.max_abs_at_degree(k)).fold(0.0, f64::max),
            SPARSITY_TOL,
        ),
        Err(e) => Check::failed(name, &e),
    });
    let name = "fold/nl-standard-not-polynomial";
    out.push(match extract_coefficients(nl(ActivationMode::Standard), 4, 3) {
        Err(Error::NotPolynomial { .. }) => Check::equal(name, 1.0, 1.0),
        Ok(_) => Check::equal(name, 0.0, 1.0),
        Err(e) => Check::failed(name, &e),
    });
    out
}

/// Specs covering every kind, both realizations and the optional parts.
pub fn grad_cases() -> Vec<(String, BlockSpec, Geom)> {
    let g = Geom::new(2, 2);
    let mut out = vec![];
    for kind in BlockKind::ALL {
        for mode in [ActivationMode::Identity, ActivationMode::Standard] {
            let mut s = BlockSpec::new(kind, 4).with_degree(3).with_mode(mode);
            if matches!(kind, BlockKind::PdcNl3 | BlockKind::PdcNl4) {
                s = s.with_spatial(g);
            }
            let tag = match mode {
                ActivationMode::Identity => "identity",
                ActivationMode::Standard => "standard",
            };
            out.push((format!("{kind}/{tag}/dense"), s.clone(), g));
            let mut conv = s.with_linear(Realization::Conv3x3).with_ratio(2);
            conv.batch_norm = true;
            conv.shortcut = true;
            conv.bias = true;
            out.push((format!("{kind}/{tag}/conv3x3"), conv, g));
        }
    }
    out
}

fn grad_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    grad_cases()
        .into_iter()
        .map(|(name, spec, geom)| {
            let label = format!("grad/{name}");
            let x = gaussian(&[geom.hw() * spec.channels], 0.5, &mut rng);
            let r = block_graph(&spec, geom, seed, Init::Random)
                .and_then(|mut g| grad_check(&mut g, &x, GRAD_EPS))
                .map(|e| Check::below(&label, e, GRAD_TOL));
            Check::from_result(label, r)
        })
        .collect()
}

fn structure_suite(seed: u64) -> Vec<Check> {
    let mut out = vec![];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7374_7275);

    // super-diagonal identity and mode products against index loops
    let v = gaussian(&[4], 1.0, &mut rng);
    let cube = Tensor::from_fn(&[4, 4, 4], || 0.0);
    let mut unit = cube.clone();
    (0..4).for_each(|i| unit.set(&[i, i, i], 1.0));
    out.push(Check::from_result(
        "structure/superdiag-mode3".into(),
        unit.mode_n_vector_product(&v, 3)
            .and_then(|m| m.max_abs_diff(&v.superdiag_mode3()?))
            .map(|d| Check::below("structure/superdiag-mode3", d, 1e-15)),
    ));

    // block parameter formulas against recorded graphs
    let mut worst = 0.0f64;
    for (name, spec, geom) in grad_cases() {
        match block_graph(&spec, geom, seed, Init::Default) {
            Ok(g) => worst = worst.max((g.trainable_count() as f64 - spec.param_count() as f64).abs()),
            Err(e) => out.push(Check::failed(format!("structure/param-count/{name}"), &e)),
        }
    }
    out.push(Check::equal("structure/block-param-count-mismatch", worst, 0.0));

    for arch in ["resnet18-cifar100", "senet18"] {
        let label = format!("structure/network-param-count/{arch}");
        let r = parse_arch(arch).and_then(|spec| {
            let g = build_network(&spec, seed)?;
            Ok(Check::equal(
                &label,
                g.trainable_count() as f64,
                count_params(&spec) as f64,
            ))
        });
        out.push(Check::from_result(label, r));
    }

    for (label, text, expected) in [
        (
            "structure/compose-2x2",
            "input 3\nblock kind=pdc degree=2\nblock kind=pdc degree=2\nhead classes=2",
            4,
        ),
        (
            "structure/compose-3x2",
            "input 3\nblock kind=pdc degree=2\nblock kind=pdc degree=3\nhead classes=2",
            6,
        ),
    ] {
        let r = parse_arch(text)
            .and_then(|spec| build_network_with(&spec, seed, Init::Random))
            .and_then(|g| graph_degree(g, 3, &mut rng))
            .map(|d| Check::equal(label, d as f64, expected as f64));
        out.push(Check::from_result(label.into(), r));
    }

    // non-local family reductions
    let p = AttentionParams::random(4, 3, 2, &mut rng);
    let x = gaussian(&[3, 4], 1.0, &mut rng);
    let mut closed = p.clone();
    closed.c8 = Some(Tensor::zeros(&[2, 4]));
    let r = pdcnl4_forward(&x, &closed, ActivationMode::Standard)
        .and_then(|y4| y4.max_abs_diff(&pdcnl3_forward(&x, &p, ActivationMode::Standard)?))
        .map(|d| Check::equal("structure/pdcnl4-gate-closed", d, 0.0));
    out.push(Check::from_result("structure/pdcnl4-gate-closed".into(), r));

    let mean = x.global_avg_pool().and_then(|m| m.replicate_rows(3));
    let r = mean.and_then(|m| x.sub(&m)).and_then(|xc| {
        let dnl = dnl_forward(
            &xc,
            &p.c1,
            &p.c2,
            &Tensor::zeros(&[4, 1]),
            &p.c3,
            ActivationMode::Identity,
        )?;
        dnl.max_abs_diff(&nl_forward(&xc, &p.c1, &p.c2, &p.c3, ActivationMode::Identity)?)
    });
    out.push(Check::from_result(
        "structure/dnl-reduces-to-nl".into(),
        r.map(|d| Check::below("structure/dnl-reduces-to-nl", d, 1e-12)),
    ));
    out
}

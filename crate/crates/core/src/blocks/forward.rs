//! Block equations written once against [`Ops`].
//!
//! All inputs are feature maps in matrix form `[hw × c]` together with
//! their spatial [`Geom`]. Weight operands are evaluator values, so the same
//! code drives eager evaluation and graph recording.

use crate::algebra::Ops;
use crate::error::Result;
use crate::tensor::Tensor;

use super::{ActivationMode, Geom, Realization};

/// One linear map `X ↦ XC`.
///
/// Dense weights are `[cin × cout]`; convolutional weights are
/// `[cout × cin × k × k]` applied with padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Lin<V> {
    pub weight: V,
    pub realization: Realization,
    pub stride: usize,
}

impl<V> Lin<V> {
    pub fn dense(weight: V) -> Self {
        Self {
            weight,
            realization: Realization::Dense,
            stride: 1,
        }
    }
}

/// A linear layer optionally followed by a per-channel affine map `x·γ + β`.
#[derive(Debug, Clone)]
pub struct Layer<V> {
    pub lin: Lin<V>,
    pub affine: Option<(V, V)>,
}

pub fn linear<O: Ops>(ops: &mut O, x: &O::Value, lin: &Lin<O::Value>, geom: Geom) -> Result<(O::Value, Geom)> {
    match lin.realization {
        Realization::Dense => Ok((ops.matmul(x, &lin.weight)?, geom)),
        Realization::Conv1x1 | Realization::Conv3x3 => {
            let c = ops.shape_of(x)[1];
            let k = lin.realization.kernel();
            let t = ops.transpose(x)?;
            let img = ops.reshape(&t, &[c, geom.h, geom.w])?;
            let y = ops.conv2d(&img, &lin.weight, lin.stride, k / 2)?;
            let s = ops.shape_of(&y);
            let out = Geom::new(s[1], s[2]);
            let flat = ops.reshape(&y, &[s[0], out.hw()])?;
            Ok((ops.transpose(&flat)?, out))
        }
    }
}

/// Per-channel affine map with `[1 × c]` scale and shift rows.
pub fn channel_affine<O: Ops>(ops: &mut O, x: &O::Value, gamma: &O::Value, beta: &O::Value) -> Result<O::Value> {
    let m = ops.shape_of(x)[0];
    let g = ops.replicate_rows(gamma, m)?;
    let scaled = ops.hadamard(x, &g)?;
    ops.add_row(&scaled, beta)
}

/// Applies layers in sequence.
pub fn branch<O: Ops>(ops: &mut O, x: &O::Value, layers: &[Layer<O::Value>], geom: Geom) -> Result<(O::Value, Geom)> {
    let mut cur = x.clone();
    let mut g = geom;
    for layer in layers {
        let (y, g2) = linear(ops, &cur, &layer.lin, g)?;
        cur = match &layer.affine {
            Some((gamma, beta)) => channel_affine(ops, &y, gamma, beta)?,
            None => y,
        };
        g = g2;
    }
    Ok((cur, g))
}

/// `X ↦ X` when `layers` is empty, else the projection branch.
pub fn shortcut<O: Ops>(ops: &mut O, x: &O::Value, layers: &[Layer<O::Value>], geom: Geom) -> Result<O::Value> {
    if layers.is_empty() {
        Ok(x.clone())
    } else {
        Ok(branch(ops, x, layers, geom)?.0)
    }
}

fn maybe_softmax<O: Ops>(ops: &mut O, a: O::Value, mode: ActivationMode) -> Result<O::Value> {
    match mode {
        ActivationMode::Identity => Ok(a),
        ActivationMode::Standard => ops.softmax_rows(&a),
    }
}

fn chain<O: Ops>(ops: &mut O, x: &O::Value, mats: &[O::Value]) -> Result<O::Value> {
    let mut cur = x.clone();
    for m in mats {
        cur = ops.matmul(&cur, m)?;
    }
    Ok(cur)
}

/// `Y = S(X) + B(X) + β`: the first-degree residual block `(I + C)X + β`.
pub fn residual<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    body: &[Layer<O::Value>],
    proj: &[Layer<O::Value>],
    beta: Option<&O::Value>,
    geom: Geom,
) -> Result<(O::Value, Geom)> {
    let (b, g) = branch(ops, x, body, geom)?;
    let s = shortcut(ops, x, proj, geom)?;
    let mut y = ops.add(&s, &b)?;
    if let Some(beta) = beta {
        y = ops.add_row(&y, beta)?;
    }
    Ok((y, g))
}

/// Squeeze-and-excitation gating of an already-transformed map `U = XC₁`:
/// `U ∗ r(p(U) C₂)`, with `C₂` given as a chain of dense matrices.
pub fn se_gate<O: Ops>(ops: &mut O, u: &O::Value, gate: &[O::Value]) -> Result<O::Value> {
    let hw = ops.shape_of(u)[0];
    let pooled = ops.global_avg_pool(u)?;
    let g = chain(ops, &pooled, gate)?;
    let rep = ops.replicate_rows(&g, hw)?;
    ops.hadamard(u, &rep)
}

/// `(XC₁) ∗ r(p(XC₁)C₂)`.
pub fn se<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    body: &[Layer<O::Value>],
    gate: &[O::Value],
    geom: Geom,
) -> Result<(O::Value, Geom)> {
    let (u, g) = branch(ops, x, body, geom)?;
    Ok((se_gate(ops, &u, gate)?, g))
}

/// Selective-kernel variant: squeeze-and-excitation applied to `XU₁ + XU₂`.
pub fn sk<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    u1: &Lin<O::Value>,
    u2: &Lin<O::Value>,
    body: &[Layer<O::Value>],
    gate: &[O::Value],
    geom: Geom,
) -> Result<(O::Value, Geom)> {
    let (a, g) = linear(ops, x, u1, geom)?;
    let (b, _) = linear(ops, x, u2, geom)?;
    let mixed = ops.add(&a, &b)?;
    se(ops, &mixed, body, gate, g)
}

/// Weights of one Π-net recursion step, as evaluator values.
#[derive(Debug, Clone)]
pub struct PiStep<V> {
    pub a: Lin<V>,
    /// `[o × o]`, absent on the first step.
    pub s: Option<V>,
    /// `[ω × o]`.
    pub b_mat: V,
    /// `[1 × ω]`.
    pub b_row: V,
}

/// `x₁ = (A⁽¹⁾ᵀz) ∗ (B⁽¹⁾ᵀb⁽¹⁾)`, then
/// `xₙ = (A⁽ⁿ⁾ᵀz) ∗ (S⁽ⁿ⁾ᵀxₙ₋₁ + B⁽ⁿ⁾ᵀb⁽ⁿ⁾) + xₙ₋₁`, row-wise over positions.
pub fn pinet<O: Ops>(ops: &mut O, x: &O::Value, steps: &[PiStep<O::Value>], geom: Geom) -> Result<(O::Value, Geom)> {
    let mut prev: Option<O::Value> = None;
    let mut g = geom;
    for step in steps {
        let (az, g2) = linear(ops, x, &step.a, geom)?;
        g = g2;
        let hw = ops.shape_of(&az)[0];
        let bias_row = ops.matmul(&step.b_row, &step.b_mat)?;
        let bias = ops.replicate_rows(&bias_row, hw)?;
        prev = Some(match (prev, &step.s) {
            (None, _) => ops.hadamard(&az, &bias)?,
            (Some(p), Some(s)) => {
                let sp = ops.matmul(&p, s)?;
                let inner = ops.add(&sp, &bias)?;
                let h = ops.hadamard(&az, &inner)?;
                ops.add(&h, &p)?
            }
            (Some(p), None) => {
                let h = ops.hadamard(&az, &bias)?;
                ops.add(&h, &p)?
            }
        });
    }
    Ok((prev.expect("at least one pi-net step"), g))
}

/// `Y = β + Σₙ (XC₁,₍ₙ₎) ∗ … ∗ (XCₙ,₍ₙ₎)`; `factors[n-1]` holds the `n` maps of degree `n`.
pub fn pdc<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    factors: &[Vec<Lin<O::Value>>],
    beta: Option<&O::Value>,
    geom: Geom,
) -> Result<(O::Value, Geom)> {
    let mut acc: Option<O::Value> = None;
    let mut g = geom;
    for term_maps in factors {
        let mut term: Option<O::Value> = None;
        for lin in term_maps {
            let (p, g2) = linear(ops, x, lin, geom)?;
            g = g2;
            term = Some(match term {
                None => p,
                Some(t) => ops.hadamard(&t, &p)?,
            });
        }
        let term = term.expect("every degree has at least one factor");
        acc = Some(match acc {
            None => term,
            Some(a) => ops.add(&a, &term)?,
        });
    }
    let mut y = acc.expect("degree >= 1");
    if let Some(beta) = beta {
        y = ops.add_row(&y, beta)?;
    }
    Ok((y, g))
}

/// Attention weights common to the non-local family.
#[derive(Debug, Clone)]
pub struct AttentionMaps<V> {
    /// Query map `c → k`.
    pub c1: Lin<V>,
    /// Key map `c → k` (the transpose of the `[k × c]` matrix `C₂`).
    pub c2: Lin<V>,
    /// Value map `c → c`.
    pub c3: Lin<V>,
}

fn attention_product<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    m: &AttentionMaps<O::Value>,
    geom: Geom,
) -> Result<(O::Value, O::Value)> {
    let (q, _) = linear(ops, x, &m.c1, geom)?;
    let (k, _) = linear(ops, x, &m.c2, geom)?;
    let kt = ops.transpose(&k)?;
    let a = ops.matmul(&q, &kt)?;
    let (v, _) = linear(ops, x, &m.c3, geom)?;
    Ok((a, v))
}

/// `(XC₁C₂Xᵀ) XC₃`, softmax on the attention matrix in standard mode.
pub fn nl<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    m: &AttentionMaps<O::Value>,
    mode: ActivationMode,
    geom: Geom,
) -> Result<O::Value> {
    let (a, v) = attention_product(ops, x, m, geom)?;
    let a = maybe_softmax(ops, a, mode)?;
    ops.matmul(&a, &v)
}

fn center<O: Ops>(ops: &mut O, a: &O::Value) -> Result<O::Value> {
    let hw = ops.shape_of(a)[0];
    let mu = ops.global_avg_pool(a)?;
    let rep = ops.replicate_rows(&mu, hw)?;
    ops.sub(a, &rep)
}

/// `((XC₁ − μ_q)(K − μ_k)ᵀ + Xc₄1ᵀ) XC₃`; standard mode applies softmax to
/// each of the two attention summands separately.
pub fn dnl<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    m: &AttentionMaps<O::Value>,
    c4: &O::Value,
    mode: ActivationMode,
    geom: Geom,
) -> Result<O::Value> {
    let hw = geom.hw();
    let (q, _) = linear(ops, x, &m.c1, geom)?;
    let (k, _) = linear(ops, x, &m.c2, geom)?;
    let qc = center(ops, &q)?;
    let kc = center(ops, &k)?;
    let kct = ops.transpose(&kc)?;
    let pair = ops.matmul(&qc, &kct)?;
    let pair = maybe_softmax(ops, pair, mode)?;
    let xc4 = ops.matmul(x, c4)?;
    let ones = ops.constant(Tensor::ones(&[1, hw]));
    let unary = ops.matmul(&xc4, &ones)?;
    let unary = maybe_softmax(ops, unary, mode)?;
    let a = ops.add(&pair, &unary)?;
    let (v, _) = linear(ops, x, &m.c3, geom)?;
    ops.matmul(&a, &v)
}

/// Extra weights of the complete third-degree non-local block.
#[derive(Debug, Clone)]
pub struct CompleteMaps<V> {
    /// `[c × hw]` second-degree attention factor.
    pub c4: V,
    pub c5: Lin<V>,
    /// First-degree term.
    pub c6: Lin<V>,
}

/// `(XC₁C₂Xᵀ)XC₃ + XC₄XC₅ + XC₆`; standard mode applies softmax to
/// `XC₁C₂Xᵀ` and to `XC₄`.
pub fn pdcnl3<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    m: &AttentionMaps<O::Value>,
    extra: &CompleteMaps<O::Value>,
    mode: ActivationMode,
    geom: Geom,
) -> Result<O::Value> {
    let third = nl(ops, x, m, mode, geom)?;
    let a2 = ops.matmul(x, &extra.c4)?;
    let a2 = maybe_softmax(ops, a2, mode)?;
    let (v2, _) = linear(ops, x, &extra.c5, geom)?;
    let second = ops.matmul(&a2, &v2)?;
    let (first, _) = linear(ops, x, &extra.c6, geom)?;
    let y = ops.add(&third, &second)?;
    ops.add(&y, &first)
}

/// `Y³ + Y³ ∗ r(p(XC₇)C₈)` with `Y³` the complete third-degree block.
#[allow(clippy::too_many_arguments)]
pub fn pdcnl4<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    m: &AttentionMaps<O::Value>,
    extra: &CompleteMaps<O::Value>,
    c7: &Lin<O::Value>,
    c8: &O::Value,
    mode: ActivationMode,
    geom: Geom,
) -> Result<O::Value> {
    let y3 = pdcnl3(ops, x, m, extra, mode, geom)?;
    let (u, _) = linear(ops, x, c7, geom)?;
    let pooled = ops.global_avg_pool(&u)?;
    let g = ops.matmul(&pooled, c8)?;
    let rep = ops.replicate_rows(&g, geom.hw())?;
    let gated = ops.hadamard(&y3, &rep)?;
    ops.add(&y3, &gated)
}

//! Plain-tensor parameter sets and eager block entry points.

use rand::Rng;

use crate::algebra::Eager;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

use super::build::gaussian;
use super::forward::{self, AttentionMaps, CompleteMaps, Layer, Lin, PiStep};
use super::{ActivationMode, Geom};

/// Bias plus per-degree factor matrices of the no-sharing polynomial:
/// `factors[n-1]` holds the `n` matrices `C_{k,[n]} ∈ R^{d×o}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyParams {
    pub beta: Tensor,
    pub factors: Vec<Vec<Tensor>>,
}

impl PolyParams {
    pub fn degree(&self) -> usize {
        self.factors.len()
    }

    /// `(d, o)` after validating every shape.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if self.factors.is_empty() {
            return Err(Error::InvalidArgument("polynomial degree must be >= 1".into()));
        }
        let (d, o) = self.factors[0]
            .first()
            .map(Tensor::dims2)
            .transpose()?
            .ok_or_else(|| Error::InvalidArgument("degree-1 term has no factor".into()))?;
        for (i, term) in self.factors.iter().enumerate() {
            if term.len() != i + 1 {
                return shape_err(format!("degree {} needs {} factors, got {}", i + 1, i + 1, term.len()));
            }
            if let Some(bad) = term.iter().find(|c| c.shape() != [d, o]) {
                return shape_err(format!("factor shape {:?} differs from [{d}x{o}]", bad.shape()));
            }
        }
        if self.beta.shape() != [o] {
            return shape_err(format!("beta shape {:?}, expected [{o}]", self.beta.shape()));
        }
        Ok((d, o))
    }

    /// Unit-scale random parameters: factors `N(0, 1/d)`, bias `N(0, 1)`.
    pub fn random(d: usize, o: usize, degree: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            beta: gaussian(&[o], 1.0, rng),
            factors: (1..=degree)
                .map(|n| (0..n).map(|_| gaussian(&[d, o], std, rng)).collect())
                .collect(),
        }
    }
}

/// Per-step weights of the Π-net recursion. `s[0]` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiNetParams {
    /// `A⁽ⁿ⁾ ∈ R^{d×o}`.
    pub a: Vec<Tensor>,
    /// `S⁽ⁿ⁾ ∈ R^{o×o}` for `n ≥ 2`.
    pub s: Vec<Option<Tensor>>,
    /// `B⁽ⁿ⁾ ∈ R^{ω×o}`.
    pub b_mat: Vec<Tensor>,
    /// `b⁽ⁿ⁾ ∈ R^ω`.
    pub b_vec: Vec<Tensor>,
}

impl PiNetParams {
    pub fn degree(&self) -> usize {
        self.a.len()
    }

    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let n = self.a.len();
        if n == 0 || self.s.len() != n || self.b_mat.len() != n || self.b_vec.len() != n {
            return Err(Error::InvalidArgument(
                "pi-net parameter lists must share a length >= 1".into(),
            ));
        }
        let (d, o) = self.a[0].dims2()?;
        let (omega, _) = self.b_mat[0].dims2()?;
        for i in 0..n {
            if self.a[i].shape() != [d, o] || self.b_mat[i].shape() != [omega, o] || self.b_vec[i].shape() != [omega] {
                return shape_err(format!("pi-net step {} shapes do not chain", i + 1));
            }
            match (&self.s[i], i) {
                (None, 0) => {}
                (Some(s), i) if i > 0 && s.shape() == [o, o] => {}
                _ => return shape_err(format!("pi-net step {}: S must be [{o}x{o}] (absent at step 1)", i + 1)),
            }
        }
        Ok((d, o, omega))
    }

    pub fn random(d: usize, o: usize, omega: usize, degree: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self {
            a: vec![],
            s: vec![],
            b_mat: vec![],
            b_vec: vec![],
        };
        for n in 0..degree {
            p.a.push(gaussian(&[d, o], 1.0 / (d as f64).sqrt(), rng));
            p.s.push((n > 0).then(|| gaussian(&[o, o], 1.0 / (o as f64).sqrt(), rng)));
            p.b_mat.push(gaussian(&[omega, o], 1.0 / (omega as f64).sqrt(), rng));
            p.b_vec.push(gaussian(&[omega], 1.0, rng));
        }
        p
    }
}

/// Weights of the non-local family. `c2` and `c8` are `[k × c]`; `c1`
/// and `c7` are `[c × k]`; `c3`, `c5`, `c6` are `[c × c]`; `c4` is `[c × hw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub c1: Tensor,
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Option<Tensor>,
    pub c5: Option<Tensor>,
    pub c6: Option<Tensor>,
    pub c7: Option<Tensor>,
    pub c8: Option<Tensor>,
    pub ratio: usize,
}

impl AttentionParams {
    /// All eight matrices at unit scale for `c` channels over `hw` positions.
    pub fn random(c: usize, hw: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let k = (c / ratio).max(1);
        let sc = 1.0 / (c as f64).sqrt();
        let sk = 1.0 / (k as f64).sqrt();
        Self {
            c1: gaussian(&[c, k], sc, rng),
            c2: gaussian(&[k, c], sc, rng),
            c3: gaussian(&[c, c], sc, rng),
            c4: Some(gaussian(&[c, hw], sc, rng)),
            c5: Some(gaussian(&[c, c], sc, rng)),
            c6: Some(gaussian(&[c, c], sc, rng)),
            c7: Some(gaussian(&[c, k], sc, rng)),
            c8: Some(gaussian(&[k, c], sk, rng)),
            ratio,
        }
    }

    fn maps(&self) -> Result<AttentionMaps<Tensor>> {
        Ok(AttentionMaps {
            c1: Lin::dense(self.c1.clone()),
            c2: Lin::dense(self.c2.t()?),
            c3: Lin::dense(self.c3.clone()),
        })
    }

    fn complete(&self) -> Result<CompleteMaps<Tensor>> {
        let need = |t: &Option<Tensor>, n: &str| {
            t.clone()
                .ok_or_else(|| Error::InvalidArgument(format!("complete non-local block needs {n}")))
        };
        Ok(CompleteMaps {
            c4: need(&self.c4, "C4")?,
            c5: Lin::dense(need(&self.c5, "C5")?),
            c6: Lin::dense(need(&self.c6, "C6")?),
        })
    }
}

fn matrix_geom(x: &Tensor) -> Result<Geom> {
    let (hw, _) = x.dims2()?;
    Ok(Geom::new(hw, 1))
}

fn dense_body(c: &Tensor) -> Vec<Layer<Tensor>> {
    vec![Layer {
        lin: Lin::dense(c.clone()),
        affine: None,
    }]
}

fn as_row(v: &Tensor) -> Result<Tensor> {
    match v.rank() {
        1 => v.reshape(&[1, v.len()]),
        2 if v.shape()[0] == 1 => Ok(v.clone()),
        _ => shape_err(format!("expected a vector or single row, got {:?}", v.shape())),
    }
}

/// `Y = X + XC + β` (the residual re-parametrization `(I + C)`); `X` is `[hw × c]` or a vector.
pub fn residual_forward(x: &Tensor, c: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let vector = x.rank() == 1;
    let xm = if vector { as_row(x)? } else { x.clone() };
    let (y, _) = forward::residual(
        &mut Eager,
        &xm,
        &dense_body(c),
        &[],
        Some(&as_row(beta)?),
        matrix_geom(&xm)?,
    )?;
    if vector {
        y.reshape(&[y.len()])
    } else {
        Ok(y)
    }
}

/// Squeeze-and-excitation `(XC₁) ∗ r(p(XC₁)C₂)`. No activation applies at block level.
pub fn se_forward(x: &Tensor, c1: &Tensor, c2: &Tensor, _mode: ActivationMode) -> Result<Tensor> {
    Ok(forward::se(
        &mut Eager,
        x,
        &dense_body(c1),
        std::slice::from_ref(c2),
        matrix_geom(x)?,
    )?
    .0)
}

/// The second-degree form of squeeze-and-excitation:
/// `(XC₁) · (𝓘 ×₃ ((1/hw) C₂ᵀC₁ᵀXᵀ1))`, a product with a diagonal matrix.
pub fn se_superdiag_form(x: &Tensor, c1: &Tensor, c2: &Tensor) -> Result<Tensor> {
    let (hw, _) = x.dims2()?;
    let ones = Tensor::ones(&[hw, 1]);
    let v = c2
        .t()?
        .matmul(&c1.t()?)?
        .matmul(&x.t()?)?
        .matmul(&ones)?
        .scale(1.0 / hw as f64);
    let diag = v.reshape(&[v.len()])?.superdiag_mode3()?;
    x.matmul(c1)?.matmul(&diag)
}

/// Selective-kernel variant: [`se_forward`] on `XU₁ + XU₂`.
pub fn sk_forward(
    x: &Tensor,
    u1: &Tensor,
    u2: &Tensor,
    c1: &Tensor,
    c2: &Tensor,
    _mode: ActivationMode,
) -> Result<Tensor> {
    let (y, _) = forward::sk(
        &mut Eager,
        x,
        &Lin::dense(u1.clone()),
        &Lin::dense(u2.clone()),
        &dense_body(c1),
        std::slice::from_ref(c2),
        matrix_geom(x)?,
    )?;
    Ok(y)
}

/// The Π-net recursion on a vector `z ∈ R^d`, returning `x_N ∈ R^o`.
pub fn pinet_forward(z: &Tensor, params: &PiNetParams) -> Result<Tensor> {
    let (d, o, omega) = params.dims()?;
    if z.shape() != [d] {
        return shape_err(format!("pi-net input {:?}, expected [{d}]", z.shape()));
    }
    let steps = (0..params.degree())
        .map(|i| {
            Ok(PiStep {
                a: Lin::dense(params.a[i].clone()),
                s: params.s[i].clone(),
                b_mat: params.b_mat[i].clone(),
                b_row: params.b_vec[i].reshape(&[1, omega])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (y, _) = forward::pinet(&mut Eager, &as_row(z)?, &steps, Geom::point())?;
    y.reshape(&[o])
}

/// The no-sharing polynomial `β + Σₙ ⊛ₖ (C_{k,[n]}ᵀ z)` on a vector `z ∈ R^d`.
pub fn pdc_forward(z: &Tensor, params: &PolyParams) -> Result<Tensor> {
    let (d, o) = params.dims()?;
    if z.shape() != [d] {
        return shape_err(format!("pdc input {:?}, expected [{d}]", z.shape()));
    }
    let factors: Vec<Vec<Lin<Tensor>>> = params
        .factors
        .iter()
        .map(|term| term.iter().map(|c| Lin::dense(c.clone())).collect())
        .collect();
    let beta = as_row(&params.beta)?;
    let (y, _) = forward::pdc(&mut Eager, &as_row(z)?, &factors, Some(&beta), Geom::point())?;
    y.reshape(&[o])
}

/// Non-local block `(XC₁C₂Xᵀ)XC₃` with `C₂ ∈ R^{k×c}`.
pub fn nl_forward(x: &Tensor, c1: &Tensor, c2: &Tensor, c3: &Tensor, mode: ActivationMode) -> Result<Tensor> {
    let maps = AttentionMaps {
        c1: Lin::dense(c1.clone()),
        c2: Lin::dense(c2.t()?),
        c3: Lin::dense(c3.clone()),
    };
    forward::nl(&mut Eager, x, &maps, mode, matrix_geom(x)?)
}

/// Disentangled non-local block with unary weight `c₄ ∈ R^{c×1}`.
pub fn dnl_forward(
    x: &Tensor,
    c1: &Tensor,
    c2: &Tensor,
    c4: &Tensor,
    c3: &Tensor,
    mode: ActivationMode,
) -> Result<Tensor> {
    let maps = AttentionMaps {
        c1: Lin::dense(c1.clone()),
        c2: Lin::dense(c2.t()?),
        c3: Lin::dense(c3.clone()),
    };
    forward::dnl(&mut Eager, x, &maps, c4, mode, matrix_geom(x)?)
}

/// Complete third-degree non-local block `(XC₁C₂Xᵀ)XC₃ + XC₄XC₅ + XC₆`.
pub fn pdcnl3_forward(x: &Tensor, p: &AttentionParams, mode: ActivationMode) -> Result<Tensor> {
    forward::pdcnl3(&mut Eager, x, &p.maps()?, &p.complete()?, mode, matrix_geom(x)?)
}

/// Fourth-degree non-local block `Y³ + Y³ ∗ r(p(XC₇)C₈)`.
pub fn pdcnl4_forward(x: &Tensor, p: &AttentionParams, mode: ActivationMode) -> Result<Tensor> {
    let c7 =
        p.c7.clone()
            .ok_or_else(|| Error::InvalidArgument("fourth-degree block needs C7".into()))?;
    let c8 =
        p.c8.as_ref()
            .ok_or_else(|| Error::InvalidArgument("fourth-degree block needs C8".into()))?;
    forward::pdcnl4(
        &mut Eager,
        x,
        &p.maps()?,
        &p.complete()?,
        &Lin::dense(c7),
        c8,
        mode,
        matrix_geom(x)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use ActivationMode::{Identity, Standard};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        let d = a.max_abs_diff(b).unwrap();
        assert!(d <= tol, "deviation {d:e} > {tol:e}");
    }

    #[test]
    fn residual_examples() {
        let mut r = rng(1);
        let x = gaussian(&[5, 3], 1.0, &mut r);
        let beta0 = Tensor::zeros(&[3]);
        assert_eq!(residual_forward(&x, &Tensor::zeros(&[3, 3]), &beta0).unwrap(), x);
        assert_eq!(residual_forward(&x, &Tensor::eye(3), &beta0).unwrap(), x.scale(2.0));
        let c = gaussian(&[3, 3], 1.0, &mut r);
        let beta = gaussian(&[3], 1.0, &mut r);
        let direct = x
            .matmul(&Tensor::eye(3).add(&c).unwrap())
            .unwrap()
            .add(&beta.reshape(&[1, 3]).unwrap().replicate_rows(5).unwrap())
            .unwrap();
        close(&residual_forward(&x, &c, &beta).unwrap(), &direct, 1e-14);
        let z = Tensor::vector(vec![1.0, -1.0, 2.0]);
        assert_eq!(residual_forward(&z, &Tensor::zeros(&[3, 3]), &beta0).unwrap(), z);
    }

    #[test]
    fn se_examples() {
        let x = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = se_forward(&x, &Tensor::eye(2), &Tensor::eye(2), Identity).unwrap();
        assert_eq!(y, Tensor::matrix(&[&[2.0, 6.0], &[6.0, 12.0]]));
        let y = se_forward(&x, &Tensor::eye(2), &Tensor::zeros(&[2, 2]), Standard).unwrap();
        assert_eq!(y, Tensor::zeros(&[2, 2]));
        assert!(se_forward(&x, &Tensor::eye(3), &Tensor::eye(3), Identity).is_err());
    }

    #[test]
    fn se_matches_superdiagonal_form() {
        let mut r = rng(12);
        for _ in 0..10 {
            let x = gaussian(&[6, 4], 1.0, &mut r);
            let c1 = gaussian(&[4, 4], 1.0, &mut r);
            let c2 = gaussian(&[4, 4], 1.0, &mut r);
            let y = se_forward(&x, &c1, &c2, Identity).unwrap();
            close(&y, &se_superdiag_form(&x, &c1, &c2).unwrap(), 1e-12);
        }
    }

    #[test]
    fn sk_reduces_to_se() {
        let mut r = rng(2);
        let x = gaussian(&[4, 3], 1.0, &mut r);
        let c1 = gaussian(&[3, 3], 1.0, &mut r);
        let c2 = gaussian(&[3, 3], 1.0, &mut r);
        let (i, z) = (Tensor::eye(3), Tensor::zeros(&[3, 3]));
        let se = se_forward(&x, &c1, &c2, Identity).unwrap();
        close(&sk_forward(&x, &i, &z, &c1, &c2, Identity).unwrap(), &se, 1e-14);
        let se2 = se_forward(&x.scale(2.0), &c1, &c2, Identity).unwrap();
        close(&sk_forward(&x, &i, &i, &c1, &c2, Identity).unwrap(), &se2, 1e-13);
    }

    #[test]
    fn pinet_examples() {
        let mut r = rng(3);
        let mut p = PiNetParams::random(3, 2, 2, 1, &mut r);
        // B⁽¹⁾ᵀb⁽¹⁾ = ones: b = e₁, first row of B all ones
        p.b_vec[0] = Tensor::vector(vec![1.0, 0.0]);
        p.b_mat[0] = Tensor::matrix(&[&[1.0, 1.0], &[0.3, -2.0]]);
        let z = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let want = p.a[0].t().unwrap().matmul(&z.reshape(&[3, 1]).unwrap()).unwrap();
        close(&pinet_forward(&z, &p).unwrap(), &want.reshape(&[2]).unwrap(), 1e-15);

        let mut p = PiNetParams::random(3, 2, 4, 3, &mut r);
        p.a.iter_mut().for_each(|a| *a = Tensor::zeros(&[3, 2]));
        assert_eq!(pinet_forward(&z, &p).unwrap(), Tensor::zeros(&[2]));
        p.s[0] = Some(Tensor::eye(2));
        assert!(pinet_forward(&z, &p).is_err());
    }

    #[test]
    fn pdc_examples() {
        let mut r = rng(4);
        let p1 = PolyParams::random(3, 2, 1, &mut r);
        let z = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let affine = p1.factors[0][0]
            .t()
            .unwrap()
            .matmul(&z.reshape(&[3, 1]).unwrap())
            .unwrap();
        close(
            &pdc_forward(&z, &p1).unwrap(),
            &p1.beta.add(&affine.reshape(&[2]).unwrap()).unwrap(),
            1e-15,
        );

        let scalar = PolyParams {
            beta: Tensor::zeros(&[1]),
            factors: vec![
                vec![Tensor::ones(&[1, 1])],
                vec![Tensor::ones(&[1, 1]), Tensor::ones(&[1, 1])],
            ],
        };
        for v in [-2.0, 0.5, 3.0] {
            let y = pdc_forward(&Tensor::vector(vec![v]), &scalar).unwrap();
            assert_eq!(y.data(), &[v + v * v]);
        }
        let mut bad = scalar.clone();
        bad.factors[1].pop();
        assert!(pdc_forward(&Tensor::vector(vec![1.0]), &bad).is_err());
    }

    #[test]
    fn nl_examples() {
        let mut r = rng(5);
        let p = AttentionParams::random(4, 3, 2, &mut r);
        let x = gaussian(&[3, 4], 1.0, &mut r);
        assert_eq!(
            nl_forward(&x, &p.c1, &p.c2, &Tensor::zeros(&[4, 4]), Standard).unwrap(),
            Tensor::zeros(&[3, 4])
        );
        // hw = 1: the attention matrix is the scalar x C₁ C₂ xᵀ
        let x1 = gaussian(&[1, 4], 1.0, &mut r);
        let s = x1
            .matmul(&p.c1)
            .unwrap()
            .matmul(&p.c2)
            .unwrap()
            .matmul(&x1.t().unwrap())
            .unwrap();
        let want = x1.matmul(&p.c3).unwrap().scale(s.data()[0]);
        close(&nl_forward(&x1, &p.c1, &p.c2, &p.c3, Identity).unwrap(), &want, 1e-14);
        // softmax over a single key is 1
        close(
            &nl_forward(&x1, &p.c1, &p.c2, &p.c3, Standard).unwrap(),
            &x1.matmul(&p.c3).unwrap(),
            1e-14,
        );
    }

    #[test]
    fn dnl_examples() {
        let mut r = rng(6);
        let p = AttentionParams::random(4, 5, 2, &mut r);
        let x = gaussian(&[5, 4], 1.0, &mut r);
        let c4 = Tensor::zeros(&[4, 1]);
        let y = dnl_forward(&x, &Tensor::zeros(&[4, 2]), &p.c2, &c4, &p.c3, Identity).unwrap();
        assert_eq!(y, Tensor::zeros(&[5, 4]));

        // shifting every query by a constant row leaves the centred queries unchanged
        let q = x.matmul(&p.c1).unwrap();
        let shift = gaussian(&[1, 2], 1.0, &mut r).replicate_rows(5).unwrap();
        let center = |m: &Tensor| m.sub(&m.global_avg_pool().unwrap().replicate_rows(5).unwrap()).unwrap();
        close(&center(&q.add(&shift).unwrap()), &center(&q), 1e-14);

        // zero-mean inputs and c4 = 0 reduce to the plain non-local block
        let xc = center(&x);
        let y = dnl_forward(&xc, &p.c1, &p.c2, &c4, &p.c3, Identity).unwrap();
        close(&y, &nl_forward(&xc, &p.c1, &p.c2, &p.c3, Identity).unwrap(), 1e-12);
    }

    #[test]
    fn complete_nonlocal_reductions() {
        let mut r = rng(7);
        let mut p = AttentionParams::random(4, 3, 2, &mut r);
        let x = gaussian(&[3, 4], 1.0, &mut r);
        let full3 = pdcnl3_forward(&x, &p, Standard).unwrap();
        let full4 = pdcnl4_forward(&x, &p, Standard).unwrap();
        assert_ne!(full3, full4);

        let mut gated = p.clone();
        gated.c8 = Some(Tensor::zeros(&[2, 4]));
        assert_eq!(pdcnl4_forward(&x, &gated, Standard).unwrap(), full3);
        gated = p.clone();
        gated.c7 = Some(Tensor::zeros(&[4, 2]));
        assert_eq!(
            pdcnl4_forward(&x, &gated, Identity).unwrap(),
            pdcnl3_forward(&x, &p, Identity).unwrap()
        );

        p.c1 = Tensor::zeros(&[4, 2]);
        p.c2 = Tensor::zeros(&[2, 4]);
        p.c3 = Tensor::zeros(&[4, 4]);
        p.c4 = Some(Tensor::zeros(&[4, 3]));
        p.c5 = Some(Tensor::zeros(&[4, 4]));
        let y = pdcnl3_forward(&x, &p, Identity).unwrap();
        assert_eq!(y, x.matmul(p.c6.as_ref().unwrap()).unwrap());

        p.c4 = None;
        assert!(pdcnl3_forward(&x, &p, Identity).is_err());
    }
}

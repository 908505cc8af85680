//! Decomposition-free polynomial evaluators and probes.
//!
//! The full tensor form `y = β + Σₙ W⁽ⁿ⁾ ×₂ z ×₃ z ⋯ ×ₙ₊₁ z` is evaluated
//! without any factorization, the degree of a black-box map is measured
//! with finite differences along a line, and exact coefficients are
//! recovered by least squares over all monomials.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::PolyParams;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Largest number of entries `dᴺ·o` that [`cp_expand`] will materialize.
pub const EXPAND_CAP: usize = 1_000_000;

/// Relative bound below which the `(N+1)`-th difference counts as vanished.
pub const VANISH_TOL: f64 = 1e-6;
/// Relative bound the `N`-th difference must exceed to be a genuine term.
pub const PRESENT_TOL: f64 = 1e-8;
/// Refit residual bound of [`extract_coefficients`].
pub const REFIT_TOL: f64 = 1e-8;

const POINT_SEED: u64 = 0x636f_6566;

/// Bias and dense coefficient tensors; `w[n-1]` has shape `[o, d, …, d]` with `n` trailing modes.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPolyTensors {
    pub beta: Tensor,
    pub w: Vec<Tensor>,
}

impl FullPolyTensors {
    pub fn degree(&self) -> usize {
        self.w.len()
    }

    /// `(d, o)` after validating every shape.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if self.beta.rank() != 1 {
            return shape_err(format!("beta must be a vector, got {:?}", self.beta.shape()));
        }
        let o = self.beta.len();
        let first = self
            .w
            .first()
            .ok_or_else(|| Error::InvalidArgument("polynomial degree must be >= 1".into()))?;
        if first.rank() != 2 {
            return shape_err(format!("W(1) must be [o, d], got {:?}", first.shape()));
        }
        let d = first.shape()[1];
        for (i, w) in self.w.iter().enumerate() {
            let mut want = vec![o];
            want.extend(std::iter::repeat_n(d, i + 1));
            if w.shape() != want.as_slice() {
                return shape_err(format!("W({}) has shape {:?}, expected {want:?}", i + 1, w.shape()));
            }
        }
        Ok((d, o))
    }
}

/// Materializes `W⁽ⁿ⁾[o, i₁..iₙ] = Πₖ C_{k,[n]}[iₖ, o]` for every degree.
pub fn cp_expand(params: &PolyParams) -> Result<FullPolyTensors> {
    let (d, o) = params.dims()?;
    let n_max = params.degree();
    let needed = u32::try_from(n_max)
        .ok()
        .and_then(|n| d.checked_pow(n))
        .and_then(|p| p.checked_mul(o))
        .unwrap_or(usize::MAX);
    if needed > EXPAND_CAP {
        return Err(Error::CapExceeded {
            needed,
            cap: EXPAND_CAP,
        });
    }
    let mut w = Vec::with_capacity(n_max);
    for term in &params.factors {
        let n = term.len();
        let mut shape = vec![o];
        shape.extend(std::iter::repeat_n(d, n));
        let block = d.pow(n as u32);
        let mut data = vec![0.0; o * block];
        let mut idx = vec![0usize; n];
        for (flat, slot) in data.iter_mut().enumerate() {
            let (out, mut rest) = (flat / block, flat % block);
            for k in (0..n).rev() {
                idx[k] = rest % d;
                rest /= d;
            }
            *slot = term.iter().zip(&idx).map(|(c, &i)| c.at(&[i, out])).product();
        }
        w.push(Tensor::new(shape, data)?);
    }
    Ok(FullPolyTensors {
        beta: params.beta.clone(),
        w,
    })
}

/// `β + Σₙ W⁽ⁿ⁾` contracted against `z` on every trailing mode.
pub fn poly_eval_full(t: &FullPolyTensors, z: &Tensor) -> Result<Tensor> {
    let (d, _) = t.dims()?;
    if z.shape() != [d] {
        return shape_err(format!("input {:?}, expected [{d}]", z.shape()));
    }
    let mut y = t.beta.clone();
    for w in &t.w {
        let mut cur = w.clone();
        while cur.rank() > 1 {
            cur = cur.mode_n_vector_product(z, cur.rank())?;
        }
        y.add_assign(&cur)?;
    }
    Ok(y)
}

/// Folds a second-degree polynomial into one tensor `W̃ ∈ R^{o×(d+1)×(d+1)}`
/// acting on the padded input `x̃ = [1; z]`.
pub fn fold_poly2(params: &PolyParams) -> Result<Tensor> {
    let (d, o) = params.dims()?;
    if params.degree() != 2 {
        return Err(Error::InvalidArgument(format!(
            "folding needs degree 2, got {}",
            params.degree()
        )));
    }
    let (c11, c12, c22) = (&params.factors[0][0], &params.factors[1][0], &params.factors[1][1]);
    let mut w = Tensor::zeros(&[o, d + 1, d + 1]);
    for out in 0..o {
        w.set(&[out, 0, 0], params.beta.at(&[out]));
        for i in 0..d {
            w.set(&[out, i + 1, 0], c11.at(&[i, out]));
            for j in 0..d {
                w.set(&[out, i + 1, j + 1], c12.at(&[i, out]) * c22.at(&[j, out]));
            }
        }
    }
    Ok(w)
}

/// `W̃ ×₂ x̃ ×₃ x̃` with `x̃ = [1; z]`.
pub fn eval_folded(w: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut padded = vec![1.0];
    padded.extend_from_slice(z.data());
    let xt = Tensor::vector(padded);
    w.mode_n_vector_product(&xt, 3)?.mode_n_vector_product(&xt, 2)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Smallest `N ≤ n_max` such that the `(N+1)`-th forward difference of
/// `g(t) = f(x0 + t·v)` at step `h` vanishes while the `N`-th does not.
///
/// Differences are measured relative to the largest `|g|` sampled, with the
/// thresholds [`VANISH_TOL`] and [`PRESENT_TOL`].
pub fn finite_diff_degree<F>(f: F, x0: &Tensor, v: &Tensor, n_max: usize, h: f64) -> Result<usize>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(0.1..=1.0).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [0.1, 1]")));
    }
    if n_max > 6 {
        return Err(Error::InvalidArgument(format!("degree bound {n_max} exceeds 6")));
    }
    if x0.shape() != v.shape() {
        return shape_err(format!("point {:?} and direction {:?} differ", x0.shape(), v.shape()));
    }
    let samples = (0..=n_max + 1)
        .map(|j| {
            let x = x0.add(&v.scale(j as f64 * h))?;
            let y = f(&x)?;
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("f at t = {}", j as f64 * h)));
            }
            Ok(y.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    let width = samples[0].len();
    let scale = samples
        .iter()
        .flatten()
        .fold(0.0f64, |m, y| m.max(y.abs()))
        .max(f64::MIN_POSITIVE);
    let diff = |k: usize| -> f64 {
        (0..width)
            .map(|c| {
                (0..=k)
                    .map(|j| {
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        sign * binom(k, j) * samples[k - j][c]
                    })
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
            / scale
    };
    let rel: Vec<f64> = (0..=n_max + 1).map(diff).collect();
    (0..=n_max)
        .find(|&n| rel[n + 1] < VANISH_TOL && (n == 0 || rel[n] > PRESENT_TOL))
        .ok_or(Error::DegreeExceedsBound(n_max))
}

/// Coefficients of every monomial `z^α` with `|α| ≤ N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub d: usize,
    pub degree: usize,
    pub entries: BTreeMap<Vec<usize>, Tensor>,
    /// Largest refit residual relative to the largest sampled output.
    pub residual: f64,
}

impl CoefficientTable {
    pub fn get(&self, exponents: &[usize]) -> Option<&Tensor> {
        self.entries.get(exponents)
    }

    /// Largest coefficient magnitude over monomials of total degree `k`.
    pub fn max_abs_at_degree(&self, k: usize) -> f64 {
        self.entries
            .iter()
            .filter(|(e, _)| e.iter().sum::<usize>() == k)
            .map(|(_, t)| t.max_abs())
            .fold(0.0, f64::max)
    }
}

/// All exponent vectors of length `d` with total degree at most `n`, in graded order.
pub fn monomials(d: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, d: usize, left: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == d {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=left {
            prefix.push(e);
            rec(prefix, d, left - e, out);
            prefix.pop();
        }
    }
    let mut out = vec![];
    rec(&mut Vec::with_capacity(d), d, n, &mut out);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
    out
}

/// Recovers the exact coefficient table of `f: R^d → R^o` assumed to be a
/// polynomial of total degree at most `n`, from a fixed seeded point set of
/// twice as many points as monomials.
pub fn extract_coefficients<F>(f: F, d: usize, n: usize) -> Result<CoefficientTable>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if d == 0 || d > 4 || n > 4 {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= d <= 4 and N <= 4, got d={d}, N={n}"
        )));
    }
    let monos = monomials(d, n);
    let m = 2 * monos.len();
    let mut rng = ChaCha8Rng::seed_from_u64(POINT_SEED);
    let points: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let outputs = points
        .iter()
        .map(|p| f(&Tensor::vector(p.clone())).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    let o = outputs[0].len();
    if outputs.iter().any(|y| y.len() != o) {
        return shape_err("output length varies between points");
    }
    if outputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled output".into()));
    }

    let a = DMatrix::from_fn(m, monos.len(), |r, c| {
        monos[c]
            .iter()
            .zip(&points[r])
            .map(|(&e, &x)| x.powi(e as i32))
            .product::<f64>()
    });
    let b = DMatrix::from_fn(m, o, |r, c| outputs[r][c]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    // also rejects NaN singular values
    if smin.is_nan() || smin <= smax * 1e-12 {
        return Err(Error::PointsDegenerate);
    }
    let coef = svd.solve(&b, 0.0).map_err(|_| Error::PointsDegenerate)?;
    let scale = b.amax().max(1.0);
    let residual = (&a * &coef - &b).amax() / scale;
    if residual >= REFIT_TOL {
        return Err(Error::NotPolynomial { degree: n, residual });
    }
    let entries = monos
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let row: Vec<f64> = (0..o).map(|c| coef[(i, c)]).collect();
            (e, Tensor::vector(row))
        })
        .collect();
    Ok(CoefficientTable {
        d,
        degree: n,
        entries,
        residual,
    })
}

//! Dense row-major tensors of `f64` and the linear/multilinear primitives
//! every block and oracle is built from.
//!
//! Layout is fixed: the last index varies fastest. All operations are pure
//! and allocate their result.

use std::fmt;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Every extent must be positive and `data.len()` must equal their
    /// product. An empty shape denotes a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("non-positive extent in {shape:?}"));
        }
        if numel(&shape) != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "non-positive extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector must be non-empty")
    }

    /// Builds a matrix from rows; panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![m, n], data).expect("matrix must be non-empty")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Tensor whose entries are produced by `f` in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = f());
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for mode {i} of extent {ext}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => shape_err(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{op}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return shape_err(format!("matmul: [{m}x{k}] . [{k2}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, b)| *o += a * b);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Reinterprets the flat data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Permutes modes: output mode `i` is input mode `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || !perm.iter().all(|&p| p < r && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of {r} modes"
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; r];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for m in (0..r).rev() {
                idx[m] += 1;
                if idx[m] < shape[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Matrix transpose.
    pub fn t(&self) -> Result<Tensor> {
        self.dims2()?;
        self.permute(&[1, 0])
    }

    /// Mode-`mode` vector product (modes are 1-based): contracts mode `mode`
    /// of `self` against `v`, reducing the rank by one.
    pub fn mode_n_vector_product(&self, v: &Tensor, mode: usize) -> Result<Tensor> {
        let r = self.rank();
        if mode == 0 || mode > r {
            return Err(Error::ModeOutOfRange { mode, rank: r });
        }
        if v.rank() != 1 {
            return shape_err(format!("mode product needs a vector, got {:?}", v.shape));
        }
        let ext = self.shape[mode - 1];
        if v.len() != ext {
            return shape_err(format!(
                "mode-{mode} extent {ext} does not match vector length {}",
                v.len()
            ));
        }
        let outer: usize = self.shape[..mode - 1].iter().product();
        let inner: usize = self.shape[mode..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for a in 0..outer {
            let dst = &mut data[a * inner..(a + 1) * inner];
            for (j, &vj) in v.data.iter().enumerate() {
                let src = &self.data[(a * ext + j) * inner..(a * ext + j + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += vj * s);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(mode - 1);
        Ok(Tensor { shape, data })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut data = self.data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Column means of an `[hw x c]` matrix, as `[1 x c]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            data.iter_mut()
                .zip(&self.data[i * n..(i + 1) * n])
                .for_each(|(d, x)| *d += x);
        }
        let inv = 1.0 / m as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        Ok(Tensor {
            shape: vec![1, n],
            data,
        })
    }

    /// Stacks `m` copies of a `[1 x c]` row.
    pub fn replicate_rows(&self, m: usize) -> Result<Tensor> {
        let (r, n) = self.dims2()?;
        if r != 1 {
            return shape_err(format!("replicate_rows needs a single row, got {r} rows"));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("replicate count must be >= 1".into()));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: self.data.repeat(m),
        })
    }

    /// `I x_3 v` for the c x c x c super-diagonal unit tensor, i.e. `diag(v)`.
    pub fn superdiag_mode3(&self) -> Result<Tensor> {
        if self.rank() != 1 {
            return shape_err(format!("superdiag_mode3 needs a vector, got {:?}", self.shape));
        }
        let c = self.len();
        let mut t = Tensor::zeros(&[c, c]);
        for (i, &v) in self.data.iter().enumerate() {
            t.data[i * c + i] = v;
        }
        Ok(t)
    }

    /// Cross-correlation of `[c_in x h x w]` with `[c_out x c_in x k x k]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let g = ConvGeom::new(self.shape(), kernel.shape(), stride, pad)?;
        let mut out = vec![0.0; g.cout * g.ho * g.wo];
        for oc in 0..g.cout {
            for ic in 0..g.cin {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wv = kernel.data[((oc * g.cin + ic) * g.k + ki) * g.k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ki, g.h) else { continue };
                            let xrow = &self.data[(ic * g.h + iy) * g.w..(ic * g.h + iy + 1) * g.w];
                            let orow = &mut out[(oc * g.ho + oy) * g.wo..(oc * g.ho + oy + 1) * g.wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                if let Some(ix) = g.src(ox, kj, g.w) {
                                    *o += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![g.cout, g.ho, g.wo],
            data: out,
        })
    }

    /// Gradients of `<upstream, conv2d(x, kernel)>` with respect to `x` and `kernel`.
    pub fn conv2d_backward(
        x: &Tensor,
        kernel: &Tensor,
        upstream: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<(Tensor, Tensor)> {
        let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
        if upstream.shape() != [g.cout, g.ho, g.wo] {
            return shape_err(format!("conv2d upstream shape {:?}", upstream.shape));
        }
        let mut dx = Tensor::zeros(x.shape());
        let mut dk = Tensor::zeros(kernel.shape());
        for oc in 0..g.cout {
            for ic in 0..g.cin {
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let widx = ((oc * g.cin + ic) * g.k + ki) * g.k + kj;
                        let wv = kernel.data[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ki, g.h) else { continue };
                            for ox in 0..g.wo {
                                let Some(ix) = g.src(ox, kj, g.w) else { continue };
                                let u = upstream.data[(oc * g.ho + oy) * g.wo + ox];
                                let xi = (ic * g.h + iy) * g.w + ix;
                                acc += u * x.data[xi];
                                dx.data[xi] += u * wv;
                            }
                        }
                        dk.data[widx] += acc;
                    }
                }
            }
        }
        Ok((dx, dk))
    }
}

/// Output geometry of a strided, zero-padded convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[cin, h, w] = x else {
            return shape_err(format!("conv2d input must be [c x h x w], got {x:?}"));
        };
        let &[cout, kin, k, k2] = kernel else {
            return shape_err(format!("conv2d kernel must be rank 4, got {kernel:?}"));
        };
        if kin != cin || k != k2 {
            return shape_err(format!("conv2d kernel {kernel:?} does not fit input {x:?}"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return shape_err(format!("conv2d kernel {k} larger than padded input {x:?}"));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `tap`.
    #[inline]
    fn src(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Output shape of [`Tensor::conv2d`], validating the operands.
pub fn conv2d_output_shape(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Vec<usize>> {
    let g = ConvGeom::new(x, kernel, stride, pad)?;
    Ok(vec![g.cout, g.ho, g.wo])
}

/// Spatial output extent of a convolution, `floor((n + 2 pad - k) / stride) + 1`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k > n + 2 * pad {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &Tensor, b: &Tensor, tol: f64) {
        let d = a.max_abs_diff(b).unwrap();
        assert!(d <= tol, "deviation {d} > {tol}: {a:?} vs {b:?}");
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let b = Tensor::matrix(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Tensor::matrix(&[&[17.0], &[39.0]]));
        assert_eq!(a.matmul(&Tensor::zeros(&[2, 3])).unwrap(), Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(&Tensor::zeros(&[3, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn hadamard_examples() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(a.hadamard(&Tensor::ones(&[3])).unwrap(), a);
        assert_eq!(
            a.hadamard(&Tensor::vector(vec![4.0, 5.0, 6.0])).unwrap(),
            Tensor::vector(vec![4.0, 10.0, 18.0])
        );
        assert_eq!(a.hadamard(&Tensor::zeros(&[3])).unwrap(), Tensor::zeros(&[3]));
        assert!(a.hadamard(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn mode_product_examples() {
        let w = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let v = Tensor::vector(vec![5.0, 6.0]);
        assert_eq!(
            w.mode_n_vector_product(&v, 2).unwrap(),
            Tensor::vector(vec![17.0, 39.0])
        );

        let cube = Tensor::ones(&[2, 2, 2]);
        let r = cube.mode_n_vector_product(&Tensor::ones(&[2]), 3).unwrap();
        assert_eq!(r, Tensor::full(&[2, 2], 2.0));

        // unit vector selects a slice along the mode
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let e1 = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let slice = t.mode_n_vector_product(&e1, 2).unwrap();
        assert_eq!(slice, Tensor::matrix(&[&[2.0, 3.0], &[8.0, 9.0]]));

        assert!(matches!(
            t.mode_n_vector_product(&e1, 4),
            Err(Error::ModeOutOfRange { mode: 4, rank: 3 })
        ));
        assert!(t.mode_n_vector_product(&e1, 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::matrix(&[&[0.0, 0.0]]).softmax_rows().unwrap();
        approx_eq(&s, &Tensor::matrix(&[&[0.5, 0.5]]), 1e-15);
        for c in [-700.0, 0.0, 3.5, 800.0] {
            let s = Tensor::matrix(&[&[c, c, c]]).softmax_rows().unwrap();
            approx_eq(&s, &Tensor::full(&[1, 3], 1.0 / 3.0), 1e-15);
        }
        let s = Tensor::matrix(&[&[0.0, 3f64.ln()]]).softmax_rows().unwrap();
        approx_eq(&s, &Tensor::matrix(&[&[0.25, 0.75]]), 1e-15);
    }

    #[test]
    fn pooling_and_replication() {
        let x = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(x.global_avg_pool().unwrap(), Tensor::matrix(&[&[2.0, 3.0]]));
        let row = Tensor::matrix(&[&[1.0, 2.0]]);
        assert_eq!(row.global_avg_pool().unwrap(), row);
        assert_eq!(
            Tensor::full(&[5, 3], 1.5).global_avg_pool().unwrap(),
            Tensor::full(&[1, 3], 1.5)
        );

        assert_eq!(row.replicate_rows(1).unwrap(), row);
        assert_eq!(
            row.replicate_rows(3).unwrap(),
            Tensor::matrix(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])
        );
        assert!(matches!(row.replicate_rows(0), Err(Error::InvalidArgument(_))));
        let c = Tensor::full(&[4, 3], -2.0);
        assert_eq!(c.global_avg_pool().unwrap().replicate_rows(4).unwrap(), c);
    }

    #[test]
    fn superdiag_examples() {
        assert_eq!(Tensor::ones(&[3]).superdiag_mode3().unwrap(), Tensor::eye(3));
        assert_eq!(
            Tensor::vector(vec![2.0, 3.0]).superdiag_mode3().unwrap(),
            Tensor::matrix(&[&[2.0, 0.0], &[0.0, 3.0]])
        );
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones(&[1, 1, 2, 2]);
        assert_eq!(x.conv2d(&k, 1, 0).unwrap().data(), &[10.0]);

        let x = Tensor::new(vec![2, 3, 3], (0..18).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
        let mut delta = Tensor::zeros(&[2, 2, 3, 3]);
        delta.set(&[0, 0, 1, 1], 1.0);
        delta.set(&[1, 1, 1, 1], 1.0);
        assert_eq!(x.conv2d(&delta, 1, 1).unwrap(), x);

        // 1x1 kernel equals a per-pixel channel matmul
        let w = Tensor::new(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, 0.0, 3.0]).unwrap();
        let k = w.reshape(&[3, 2, 1, 1]).unwrap();
        let via_conv = x.conv2d(&k, 1, 0).unwrap().reshape(&[3, 9]).unwrap();
        let via_mm = w.matmul(&x.reshape(&[2, 9]).unwrap()).unwrap();
        approx_eq(&via_conv, &via_mm, 1e-14);

        assert_eq!(x.conv2d(&delta, 2, 1).unwrap().shape(), &[2, 2, 2]);
        assert!(x.conv2d(&Tensor::ones(&[1, 3, 1, 1]), 1, 0).is_err());
        assert!(x.conv2d(&Tensor::ones(&[1, 2, 5, 5]), 1, 0).is_err());
    }

    #[test]
    fn reshape_and_transpose() {
        let a = Tensor::new(vec![2, 3], (1..=6).map(f64::from).collect()).unwrap();
        let r = a.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), a.data());
        assert!(a.reshape(&[4, 2]).is_err());
        assert_eq!(a.t().unwrap().t().unwrap(), a);
        let m = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(m.t().unwrap(), Tensor::matrix(&[&[1.0, 3.0], &[2.0, 4.0]]));
        assert!(a.permute(&[0, 0]).is_err());
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}

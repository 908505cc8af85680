//! The differentiable operation set, abstracted over its evaluator.
//!
//! Blocks are written once against [`Ops`]. [`Eager`] evaluates immediately
//! on [`Tensor`]s; [`crate::autodiff::Graph`] records the same calls as tape
//! nodes so they can be replayed and differentiated.

use crate::error::Result;
use crate::tensor::Tensor;

pub trait Ops {
    type Value: Clone;

    fn shape_of(&self, v: &Self::Value) -> Vec<usize>;
    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn hadamard(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, s: f64) -> Result<Self::Value>;
    fn softmax_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn global_avg_pool(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn replicate_rows(&mut self, a: &Self::Value, m: usize) -> Result<Self::Value>;
    fn superdiag_mode3(&mut self, v: &Self::Value) -> Result<Self::Value>;
    fn mode_n_vector_product(&mut self, w: &Self::Value, v: &Self::Value, mode: usize) -> Result<Self::Value>;
    fn conv2d(&mut self, x: &Self::Value, k: &Self::Value, stride: usize, pad: usize) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn permute(&mut self, a: &Self::Value, perm: &[usize]) -> Result<Self::Value>;

    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.permute(a, &[1, 0])
    }

    /// `a + replicate_rows(row, rows(a))`: adds a `[1 x c]` row to every row of `a`.
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value> {
        let m = self.shape_of(a)[0];
        let r = self.replicate_rows(row, m)?;
        self.add(a, &r)
    }
}

/// Immediate evaluation on owned tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Ops for Eager {
    type Value = Tensor;

    fn shape_of(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }
    fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.hadamard(b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        Ok(a.scale(s))
    }
    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        a.softmax_rows()
    }
    fn global_avg_pool(&mut self, a: &Tensor) -> Result<Tensor> {
        a.global_avg_pool()
    }
    fn replicate_rows(&mut self, a: &Tensor, m: usize) -> Result<Tensor> {
        a.replicate_rows(m)
    }
    fn superdiag_mode3(&mut self, v: &Tensor) -> Result<Tensor> {
        v.superdiag_mode3()
    }
    fn mode_n_vector_product(&mut self, w: &Tensor, v: &Tensor, mode: usize) -> Result<Tensor> {
        w.mode_n_vector_product(v, mode)
    }
    fn conv2d(&mut self, x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        x.conv2d(k, stride, pad)
    }
    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        a.reshape(shape)
    }
    fn permute(&mut self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        a.permute(perm)
    }
}

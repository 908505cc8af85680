//! Tape-based reverse-mode differentiation over the tensor operation set.
//!
//! A [`Graph`] is built by calling the [`Ops`] methods on it; each call
//! appends a node whose shape is checked immediately. Nodes are stored in
//! creation order, which is a topological order by construction.
//!
//! ```
//! use polytax_core::{autodiff::Graph, algebra::Ops, tensor::Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(&[1, 2]);
//! let c = g.param("c", Tensor::eye(2)).unwrap();
//! let y = g.matmul(&x, &c).unwrap();
//! g.set_output(y);
//! let out = g.forward(&Tensor::matrix(&[&[1.0, 2.0]])).unwrap();
//! assert_eq!(out.data(), &[1.0, 2.0]);
//! let grads = g.backward(&Tensor::ones(&[1, 2])).unwrap();
//! assert_eq!(grads["c"].data(), &[1.0, 1.0, 2.0, 2.0]);
//! ```

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algebra::Ops;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d_output_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name, one entry per trainable parameter.
pub type GradientSet = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    GlobalAvgPool(NodeId),
    ReplicateRows(NodeId, usize),
    SuperdiagMode3(NodeId),
    ModeProduct {
        w: NodeId,
        v: NodeId,
        mode: usize,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input | Param(_) | Const(_) => vec![],
            MatMul(a, b) | Hadamard(a, b) | Add(a, b) | Sub(a, b) => vec![*a, *b],
            ModeProduct { w, v, .. } => vec![*w, *v],
            Conv2d { x, k, .. } => vec![*x, *k],
            Scale(a, _)
            | SoftmaxRows(a)
            | GlobalAvgPool(a)
            | ReplicateRows(a, _)
            | SuperdiagMode3(a)
            | Reshape(a)
            | Permute(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Parameter>,
    input: Option<NodeId>,
    output: Option<NodeId>,
    cache: Vec<Option<Tensor>>,
    forwarded: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Param(i) => self.params[*i].trainable,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, shape, needs_grad });
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Declares the graph's single input. Panics if called twice.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        assert!(self.input.is_none(), "graph already has an input");
        let id = self.push(Op::Input, shape.to_vec());
        self.input = Some(id);
        id
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        self.add_param(name.into(), value, true)
    }

    /// Registers a parameter that is read during forward but never updated.
    pub fn frozen_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        self.add_param(name.into(), value, false)
    }

    fn add_param(&mut self, name: String, value: Tensor, trainable: bool) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.params.push(Parameter { name, value, trainable });
        Ok(self.push(Op::Param(self.params.len() - 1), shape))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.input.map(|i| self.node_shape(i))
    }

    pub fn output_shape(&self) -> Option<&[usize]> {
        self.output.map(|i| self.node_shape(i))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.forwarded = false;
        self.params.iter_mut()
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return shape_err(format!(
                "parameter {name}: shape {:?} cannot take {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        self.forwarded = false;
        Ok(())
    }

    /// Number of scalar trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].op {
            Op::Param(i) => &self.params[*i].value,
            Op::Const(t) => t,
            _ => self.cache[id.0].as_ref().expect("forward value cached"),
        }
    }

    /// Evaluates every node and returns the output value.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let output = self
            .output
            .ok_or_else(|| Error::InvalidArgument("graph has no output".into()))?;
        if let Some(i) = self.input {
            if input.shape() != self.node_shape(i) {
                return shape_err(format!(
                    "graph input expects {:?}, got {:?}",
                    self.node_shape(i),
                    input.shape()
                ));
            }
        }
        self.cache = vec![None; self.nodes.len()];
        for idx in 0..self.nodes.len() {
            let v = {
                let op = &self.nodes[idx].op;
                let val = |n: &NodeId| self.value(*n);
                match op {
                    Op::Input => Some(input.clone()),
                    Op::Param(_) | Op::Const(_) => None,
                    Op::MatMul(a, b) => Some(val(a).matmul(val(b))?),
                    Op::Hadamard(a, b) => Some(val(a).hadamard(val(b))?),
                    Op::Add(a, b) => Some(val(a).add(val(b))?),
                    Op::Sub(a, b) => Some(val(a).sub(val(b))?),
                    Op::Scale(a, s) => Some(val(a).scale(*s)),
                    Op::SoftmaxRows(a) => Some(val(a).softmax_rows()?),
                    Op::GlobalAvgPool(a) => Some(val(a).global_avg_pool()?),
                    Op::ReplicateRows(a, m) => Some(val(a).replicate_rows(*m)?),
                    Op::SuperdiagMode3(a) => Some(val(a).superdiag_mode3()?),
                    Op::ModeProduct { w, v, mode } => Some(val(w).mode_n_vector_product(val(v), *mode)?),
                    Op::Conv2d { x, k, stride, pad } => Some(val(x).conv2d(val(k), *stride, *pad)?),
                    Op::Reshape(a) => Some(val(a).reshape(&self.nodes[idx].shape)?),
                    Op::Permute(a, p) => Some(val(a).permute(p)?),
                }
            };
            self.cache[idx] = v;
        }
        self.forwarded = true;
        Ok(self.value(output).clone())
    }

    /// Gradients of `<upstream, output>` with respect to every trainable parameter.
    pub fn backward(&self, upstream: &Tensor) -> Result<GradientSet> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let output = self.output.expect("forwarded graph has an output");
        if upstream.shape() != self.node_shape(output) {
            return shape_err(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.shape(),
                self.node_shape(output)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(upstream.clone());

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
        }

        let mut out = GradientSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                let param = &self.params[p];
                if param.trainable {
                    let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(param.value.shape()));
                    out.insert(param.name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of one node against each of its inputs.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let op = &self.nodes[idx].op;
        let val = |n: &NodeId| self.value(*n);
        Ok(match op {
            Op::Input | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) => vec![(*a, g.matmul(&val(b).t()?)?), (*b, val(a).t()?.matmul(g)?)],
            Op::Hadamard(a, b) => vec![(*a, g.hadamard(val(b))?), (*b, g.hadamard(val(a))?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::SoftmaxRows(a) => {
                let s = self.value(NodeId(idx));
                let (m, n) = s.dims2()?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let srow = &s.data()[i * n..(i + 1) * n];
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let inner: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..n {
                        d[i * n + j] = srow[j] * (grow[j] - inner);
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], d)?)]
            }
            Op::GlobalAvgPool(a) => {
                let m = self.node_shape(*a)[0];
                vec![(*a, g.scale(1.0 / m as f64).replicate_rows(m)?)]
            }
            Op::ReplicateRows(a, _) => {
                let (m, n) = g.dims2()?;
                let mut d = vec![0.0; n];
                for i in 0..m {
                    d.iter_mut()
                        .zip(&g.data()[i * n..(i + 1) * n])
                        .for_each(|(d, g)| *d += g);
                }
                vec![(*a, Tensor::new(vec![1, n], d)?)]
            }
            Op::SuperdiagMode3(a) => {
                let c = self.node_shape(*a)[0];
                let d = (0..c).map(|i| g.data()[i * c + i]).collect();
                vec![(*a, Tensor::vector(d))]
            }
            Op::ModeProduct { w, v, mode } => {
                let mode = *mode;
                let wv = val(w);
                let vv = val(v);
                let ws = wv.shape();
                let ext = ws[mode - 1];
                let outer: usize = ws[..mode - 1].iter().product();
                let inner: usize = ws[mode..].iter().product();
                let mut dw = vec![0.0; wv.len()];
                let mut dv = vec![0.0; ext];
                for a in 0..outer {
                    let gs = &g.data()[a * inner..(a + 1) * inner];
                    for (j, (dvj, &vj)) in dv.iter_mut().zip(vv.data()).enumerate() {
                        let base = (a * ext + j) * inner;
                        let mut acc = 0.0;
                        for (t, &gt) in gs.iter().enumerate() {
                            dw[base + t] = gt * vj;
                            acc += gt * wv.data()[base + t];
                        }
                        *dvj += acc;
                    }
                }
                vec![(*w, Tensor::new(ws.to_vec(), dw)?), (*v, Tensor::vector(dv))]
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = Tensor::conv2d_backward(val(x), val(k), g, *stride, *pad)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.node_shape(*a))?)],
            Op::Permute(a, p) => {
                let mut inv = vec![0; p.len()];
                for (i, &pi) in p.iter().enumerate() {
                    inv[pi] = i;
                }
                vec![(*a, g.permute(&inv)?)]
            }
        })
    }
}

impl Ops for Graph {
    type Value = NodeId;

    fn shape_of(&self, v: &NodeId) -> Vec<usize> {
        self.node_shape(*v).to_vec()
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node_shape(*a), self.node_shape(*b));
        match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => Ok(self.push(Op::MatMul(*a, *b), vec![m, n])),
            _ => shape_err(format!("matmul: {sa:?} . {sb:?}")),
        }
    }

    fn hadamard(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let s = self.same_shape(*a, *b, "hadamard")?;
        Ok(self.push(Op::Hadamard(*a, *b), s))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let s = self.same_shape(*a, *b, "add")?;
        Ok(self.push(Op::Add(*a, *b), s))
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let s = self.same_shape(*a, *b, "sub")?;
        Ok(self.push(Op::Sub(*a, *b), s))
    }

    fn scale(&mut self, a: &NodeId, s: f64) -> Result<NodeId> {
        let shape = self.shape_of(a);
        Ok(self.push(Op::Scale(*a, s), shape))
    }

    fn softmax_rows(&mut self, a: &NodeId) -> Result<NodeId> {
        let s = self.matrix_shape(*a, "softmax_rows")?;
        Ok(self.push(Op::SoftmaxRows(*a), s.to_vec()))
    }

    fn global_avg_pool(&mut self, a: &NodeId) -> Result<NodeId> {
        let [_, c] = self.matrix_shape(*a, "global_avg_pool")?;
        Ok(self.push(Op::GlobalAvgPool(*a), vec![1, c]))
    }

    fn replicate_rows(&mut self, a: &NodeId, m: usize) -> Result<NodeId> {
        let [r, c] = self.matrix_shape(*a, "replicate_rows")?;
        if r != 1 {
            return shape_err(format!("replicate_rows needs a single row, got {r} rows"));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("replicate count must be >= 1".into()));
        }
        Ok(self.push(Op::ReplicateRows(*a, m), vec![m, c]))
    }

    fn superdiag_mode3(&mut self, v: &NodeId) -> Result<NodeId> {
        match self.node_shape(*v) {
            &[c] => Ok(self.push(Op::SuperdiagMode3(*v), vec![c, c])),
            s => shape_err(format!("superdiag_mode3 needs a vector, got {s:?}")),
        }
    }

    fn mode_n_vector_product(&mut self, w: &NodeId, v: &NodeId, mode: usize) -> Result<NodeId> {
        let ws = self.shape_of(w);
        if mode == 0 || mode > ws.len() {
            return Err(Error::ModeOutOfRange { mode, rank: ws.len() });
        }
        match self.node_shape(*v) {
            &[n] if n == ws[mode - 1] => {}
            s => return shape_err(format!("mode-{mode} product of {ws:?} with {s:?}")),
        }
        let mut shape = ws;
        shape.remove(mode - 1);
        Ok(self.push(Op::ModeProduct { w: *w, v: *v, mode }, shape))
    }

    fn conv2d(&mut self, x: &NodeId, k: &NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let shape = conv2d_output_shape(self.node_shape(*x), self.node_shape(*k), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                x: *x,
                k: *k,
                stride,
                pad,
            },
            shape,
        ))
    }

    fn reshape(&mut self, a: &NodeId, shape: &[usize]) -> Result<NodeId> {
        let from = self.node_shape(*a);
        if from.iter().product::<usize>() != shape.iter().product::<usize>() || shape.contains(&0) {
            return shape_err(format!("reshape {from:?} -> {shape:?}"));
        }
        Ok(self.push(Op::Reshape(*a), shape.to_vec()))
    }

    fn permute(&mut self, a: &NodeId, perm: &[usize]) -> Result<NodeId> {
        let from = self.shape_of(a);
        let mut seen = vec![false; from.len()];
        let valid = perm.len() == from.len()
            && perm
                .iter()
                .all(|&p| p < from.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of {} modes",
                from.len()
            )));
        }
        let shape = perm.iter().map(|&p| from[p]).collect();
        Ok(self.push(Op::Permute(*a, perm.to_vec()), shape))
    }
}

impl Graph {
    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.node_shape(a), self.node_shape(b));
        if sa != sb {
            return shape_err(format!("{op}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(sa.to_vec())
    }

    fn matrix_shape(&self, a: NodeId, op: &str) -> Result<[usize; 2]> {
        match self.node_shape(a) {
            &[m, n] => Ok([m, n]),
            s => shape_err(format!("{op} needs a matrix, got {s:?}")),
        }
    }
}

/// Largest entries checked per parameter when a graph is too big to check exhaustively.
const SUBSAMPLE_PER_PARAM: usize = 64;
const EXHAUSTIVE_LIMIT: usize = 4096;

/// Compares backward against central differences of `f(θ) = <r, forward(input)>`
/// for a fixed pseudo-random projection `r`.
///
/// Every trainable entry is checked when the graph has at most 4096 of them;
/// otherwise a seeded subsample of 64 entries per parameter. Returns the
/// largest `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check(graph: &mut Graph, input: &Tensor, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let out = graph.forward(input)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("forward output".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let proj = Tensor::from_fn(out.shape(), || rng.random_range(-1.0..1.0));
    let analytic = graph.backward(&proj)?;

    let exhaustive = graph.trainable_count() <= EXHAUSTIVE_LIMIT;
    let mut worst = 0.0f64;
    for p in 0..graph.params.len() {
        if !graph.params[p].trainable {
            continue;
        }
        let name = graph.params[p].name.clone();
        let n = graph.params[p].value.len();
        let entries: Vec<usize> = if exhaustive || n <= SUBSAMPLE_PER_PARAM {
            (0..n).collect()
        } else {
            sample(&mut rng, n, SUBSAMPLE_PER_PARAM).into_vec()
        };
        let grad = &analytic[&name];
        for e in entries {
            let orig = graph.params[p].value.data()[e];
            graph.params[p].value.data_mut()[e] = orig + eps;
            let fp = graph.forward(input)?.dot(&proj)?;
            graph.params[p].value.data_mut()[e] = orig - eps;
            let fm = graph.forward(input)?.dot(&proj)?;
            graph.params[p].value.data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{e}]")));
            }
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    graph.forward(input)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_graph(c: Tensor) -> Graph {
        let mut g = Graph::new();
        let x = g.input(&[c.shape()[1], 1]);
        let c = g.param("c", c).unwrap();
        let y = g.matmul(&c, &x).unwrap();
        g.set_output(y);
        g
    }

    #[test]
    fn identity_graph_passes_input_through() {
        let mut g = Graph::new();
        let x = g.input(&[2, 3]);
        g.set_output(x);
        let t = Tensor::from_fn(&[2, 3], || 1.5);
        assert_eq!(g.forward(&t).unwrap(), t);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut g = linear_graph(Tensor::zeros(&[3, 2]));
        let y = g.forward(&Tensor::matrix(&[&[1.0], &[2.0]])).unwrap();
        assert_eq!(y, Tensor::zeros(&[3, 1]));
    }

    #[test]
    fn softmax_of_matmul_matches_manual_composition() {
        let c = Tensor::matrix(&[&[0.5, -1.0, 2.0], &[1.0, 0.25, -0.5]]);
        let x = Tensor::matrix(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let mut g = Graph::new();
        let xi = g.input(&[2, 2]);
        let ci = g.param("c", c.clone()).unwrap();
        let m = g.matmul(&xi, &ci).unwrap();
        let s = g.softmax_rows(&m).unwrap();
        g.set_output(s);
        let got = g.forward(&x).unwrap();
        let want = x.matmul(&c).unwrap().softmax_rows().unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut g = linear_graph(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let x = Tensor::matrix(&[&[0.5], &[-2.0]]);
        g.forward(&x).unwrap();
        let u = Tensor::matrix(&[&[1.0], &[-1.0], &[2.0]]);
        let grads = g.backward(&u).unwrap();
        assert_eq!(grads["c"], u.matmul(&x.t().unwrap()).unwrap());
    }

    #[test]
    fn hadamard_gradient() {
        let a = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let b = Tensor::vector(vec![0.5, 4.0, -1.0]);
        let mut g = Graph::new();
        let ai = g.param("a", a.clone()).unwrap();
        let bi = g.param("b", b.clone()).unwrap();
        let y = g.hadamard(&ai, &bi).unwrap();
        g.set_output(y);
        g.forward(&Tensor::scalar(0.0)).unwrap();
        let u = Tensor::vector(vec![2.0, 1.0, -3.0]);
        let grads = g.backward(&u).unwrap();
        assert_eq!(grads["a"], u.hadamard(&b).unwrap());
        assert_eq!(grads["b"], u.hadamard(&a).unwrap());
    }

    #[test]
    fn backward_before_forward_fails() {
        let g = linear_graph(Tensor::eye(2));
        assert!(matches!(
            g.backward(&Tensor::zeros(&[2, 1])),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn shape_errors_surface_at_build_and_forward() {
        let mut g = Graph::new();
        let x = g.input(&[2, 3]);
        let c = g.param("c", Tensor::eye(2)).unwrap();
        assert!(g.matmul(&x, &c).is_err());
        let mut g = linear_graph(Tensor::eye(2));
        assert!(g.forward(&Tensor::zeros(&[3, 1])).is_err());
        assert!(g.param("c", Tensor::eye(2)).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = c * c (both operands the same node) -> dy/dc = 2c u
        let c = Tensor::vector(vec![1.0, -3.0]);
        let mut g = Graph::new();
        let ci = g.param("c", c.clone()).unwrap();
        let y = g.hadamard(&ci, &ci).unwrap();
        g.set_output(y);
        g.forward(&Tensor::scalar(0.0)).unwrap();
        let grads = g.backward(&Tensor::ones(&[2])).unwrap();
        assert_eq!(grads["c"], c.scale(2.0));
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut g = linear_graph(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let err = grad_check(&mut g, &Tensor::matrix(&[&[0.3], &[-0.7]]), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        assert!(grad_check(&mut g, &Tensor::zeros(&[2, 1]), 1e-2).is_err());
    }

    #[test]
    fn grad_check_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |s: &[usize]| Tensor::from_fn(s, || rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let x = g.input(&[4, 3]);
        let c = g.param("c", r(&[3, 3])).unwrap();
        let v = g.param("v", r(&[3])).unwrap();
        let k = g.param("k", r(&[2, 3, 3, 3])).unwrap();
        let w = g.param("w", r(&[2, 3, 4])).unwrap();
        let xc = g.matmul(&x, &c).unwrap();
        let sm = g.softmax_rows(&xc).unwrap();
        let pooled = g.global_avg_pool(&sm).unwrap();
        let rep = g.replicate_rows(&pooled, 4).unwrap();
        let h = g.hadamard(&rep, &xc).unwrap();
        let d = g.superdiag_mode3(&v).unwrap();
        let hd = g.matmul(&h, &d).unwrap();
        let diff = g.sub(&hd, &x).unwrap();
        let sc = g.scale(&diff, 0.5).unwrap();
        let t = g.transpose(&sc).unwrap();
        let img = g.reshape(&t, &[3, 2, 2]).unwrap();
        let conv = g.conv2d(&img, &k, 1, 1).unwrap();
        let flat = g.reshape(&conv, &[2, 4]).unwrap();
        let mp = g.mode_n_vector_product(&w, &v, 2).unwrap();
        let s = g.add(&flat, &mp).unwrap();
        g.set_output(s);
        let err = grad_check(&mut g, &r(&[4, 3]), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}

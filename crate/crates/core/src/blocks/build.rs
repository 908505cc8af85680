//! Recording blocks into an autodiff [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::algebra::Ops;
use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::forward::{self, AttentionMaps, CompleteMaps, Layer, Lin, PiStep};
use super::{BlockKind, BlockSpec, Geom, Realization};

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Factors `N(0, 1/fan_in)`, biases zero, affine scale one. The last
    /// factor of every higher-degree product starts at zero, so each block
    /// begins as its low-degree part.
    #[default]
    Default,
    /// Every tensor `N(0, 1/fan_in)`, biases included. Used by the checks
    /// that need all terms of the polynomial to be live.
    Random,
}

/// A feature map node in matrix form with its spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInput {
    pub node: NodeId,
    pub geom: Geom,
}

/// Tensor of i.i.d. `N(0, std²)` entries.
pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    Tensor::from_fn(shape, || normal.sample(rng))
}

struct Builder<'a, R: Rng> {
    graph: &'a mut Graph,
    rng: &'a mut R,
    prefix: &'a str,
    init: Init,
}

impl<R: Rng> Builder<'_, R> {
    fn tensor(&mut self, shape: &[usize], fan_in: usize, zero: bool) -> Tensor {
        if zero && self.init == Init::Default {
            Tensor::zeros(shape)
        } else {
            gaussian(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), self.rng)
        }
    }

    fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.graph.param(format!("{}.{name}", self.prefix), value)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, zero: bool) -> Result<NodeId> {
        let t = self.tensor(&[rows, cols], rows, zero);
        self.param(name, t)
    }

    fn lin(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        realization: Realization,
        stride: usize,
        zero: bool,
    ) -> Result<Lin<NodeId>> {
        let k = realization.kernel();
        let shape = match realization {
            Realization::Dense => vec![cin, cout],
            _ => vec![cout, cin, k, k],
        };
        let t = self.tensor(&shape, cin * k * k, zero);
        Ok(Lin {
            weight: self.param(name, t)?,
            realization,
            stride,
        })
    }

    /// Bias-like row: zero by default, random under [`Init::Random`].
    fn row(&mut self, name: &str, n: usize) -> Result<NodeId> {
        let t = self.tensor(&[1, n], 1, true);
        self.param(name, t)
    }

    fn affine(&mut self, name: &str, n: usize) -> Result<(NodeId, NodeId)> {
        let gamma = match self.init {
            Init::Default => Tensor::ones(&[1, n]),
            Init::Random => gaussian(&[1, n], 1.0, self.rng).map(|v| 1.0 + 0.1 * v),
        };
        let gamma = self.param(&format!("{name}.gamma"), gamma)?;
        let beta = self.row(&format!("{name}.beta"), n)?;
        Ok((gamma, beta))
    }

    fn layers(&mut self, spec: &BlockSpec, cin: usize, stride: usize) -> Result<Vec<Layer<NodeId>>> {
        let mut out = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let (a, s) = if i == 0 { (cin, stride) } else { (spec.out, 1) };
            let lin = self.lin(&format!("branch{i}.weight"), a, spec.out, spec.linear, s, false)?;
            let affine = if spec.batch_norm {
                Some(self.affine(&format!("branch{i}.bn"), spec.out)?)
            } else {
                None
            };
            out.push(Layer { lin, affine });
        }
        Ok(out)
    }

    fn projection(&mut self, spec: &BlockSpec) -> Result<Vec<Layer<NodeId>>> {
        let has_shortcut = spec.kind == BlockKind::Residual1 || spec.shortcut;
        if !has_shortcut || (spec.channels == spec.out && spec.stride == 1) {
            return Ok(vec![]);
        }
        let realization = match spec.linear {
            Realization::Dense => Realization::Dense,
            _ => Realization::Conv1x1,
        };
        let lin = self.lin("proj.weight", spec.channels, spec.out, realization, spec.stride, false)?;
        let affine = if spec.batch_norm {
            Some(self.affine("proj.bn", spec.out)?)
        } else {
            None
        };
        Ok(vec![Layer { lin, affine }])
    }

    fn gate(&mut self, spec: &BlockSpec) -> Result<Vec<NodeId>> {
        let o = spec.out;
        match spec.ratio {
            None => Ok(vec![self.matrix("gate0", o, o, true)?]),
            Some(r) => Ok(vec![
                self.matrix("gate0", o, o / r, false)?,
                self.matrix("gate1", o / r, o, true)?,
            ]),
        }
    }

    fn attention(&mut self, spec: &BlockSpec, zero_value: bool) -> Result<AttentionMaps<NodeId>> {
        let (c, k) = (spec.channels, spec.attention_width());
        Ok(AttentionMaps {
            c1: self.lin("c1", c, k, spec.linear, 1, false)?,
            c2: self.lin("c2", c, k, spec.linear, 1, false)?,
            c3: self.lin("c3", c, c, spec.linear, 1, zero_value)?,
        })
    }

    fn complete(&mut self, spec: &BlockSpec, geom: Geom) -> Result<CompleteMaps<NodeId>> {
        let c = spec.channels;
        Ok(CompleteMaps {
            c4: self.matrix("c4", c, geom.hw(), false)?,
            c5: self.lin("c5", c, c, spec.linear, 1, true)?,
            c6: self.lin("c6", c, c, spec.linear, 1, false)?,
        })
    }
}

/// Records one block applied to `x` and returns its output.
///
/// Parameters are named `{prefix}.{name}`; the block contributes exactly
/// [`BlockSpec::param_count`] trainable scalars.
pub fn build_block(
    graph: &mut Graph,
    spec: &BlockSpec,
    x: BlockInput,
    rng: &mut impl Rng,
    prefix: &str,
    init: Init,
) -> Result<BlockInput> {
    let out_geom = spec.validate(x.geom)?;
    let expect = [x.geom.hw(), spec.channels];
    if graph.shape_of(&x.node) != expect {
        return shape_err(format!(
            "{} block expects input {:?}, got {:?}",
            spec.kind,
            expect,
            graph.shape_of(&x.node)
        ));
    }
    let mut b = Builder {
        graph,
        rng,
        prefix,
        init,
    };
    let (c, o, g) = (spec.channels, spec.out, x.geom);
    let xin = &x.node;

    let core = match spec.kind {
        BlockKind::Residual1 => {
            let body = b.layers(spec, c, spec.stride)?;
            let proj = b.projection(spec)?;
            let (y, _) = forward::residual(b.graph, xin, &body, &proj, None, g)?;
            y
        }
        BlockKind::Se2 => {
            let body = b.layers(spec, c, spec.stride)?;
            let gate = b.gate(spec)?;
            forward::se(b.graph, xin, &body, &gate, g)?.0
        }
        BlockKind::Sk2 => {
            let u1 = b.lin("u1", c, c, spec.linear, 1, false)?;
            let u2 = b.lin("u2", c, c, spec.linear, 1, false)?;
            let body = b.layers(spec, c, spec.stride)?;
            let gate = b.gate(spec)?;
            forward::sk(b.graph, xin, &u1, &u2, &body, &gate, g)?.0
        }
        BlockKind::PiNet => {
            let omega = spec.omega.unwrap_or(o);
            let mut steps = Vec::with_capacity(spec.degree);
            for n in 0..spec.degree {
                let a = b.lin(&format!("a{}", n + 1), c, o, spec.linear, spec.stride, n > 0)?;
                let s = if n > 0 {
                    Some(b.matrix(&format!("s{}", n + 1), o, o, false)?)
                } else {
                    None
                };
                let b_mat = b.matrix(&format!("bmat{}", n + 1), omega, o, false)?;
                let bt = gaussian(&[1, omega], 1.0, b.rng);
                let b_row = b.param(&format!("bvec{}", n + 1), bt)?;
                steps.push(PiStep { a, s, b_mat, b_row });
            }
            forward::pinet(b.graph, xin, &steps, g)?.0
        }
        BlockKind::Pdc => {
            let mut factors = Vec::with_capacity(spec.degree);
            for n in 1..=spec.degree {
                let mut term = Vec::with_capacity(n);
                for k in 1..=n {
                    let zero = n >= 2 && k == n;
                    term.push(b.lin(&format!("f{n}_{k}"), c, o, spec.linear, spec.stride, zero)?);
                }
                factors.push(term);
            }
            forward::pdc(b.graph, xin, &factors, None, g)?.0
        }
        BlockKind::Nl3 => {
            let maps = b.attention(spec, true)?;
            forward::nl(b.graph, xin, &maps, spec.mode, g)?
        }
        BlockKind::Dnl3 => {
            let maps = b.attention(spec, true)?;
            let c4 = b.matrix("c4", c, 1, false)?;
            forward::dnl(b.graph, xin, &maps, &c4, spec.mode, g)?
        }
        BlockKind::PdcNl3 => {
            let maps = b.attention(spec, true)?;
            let extra = b.complete(spec, g)?;
            forward::pdcnl3(b.graph, xin, &maps, &extra, spec.mode, g)?
        }
        BlockKind::PdcNl4 => {
            let maps = b.attention(spec, true)?;
            let extra = b.complete(spec, g)?;
            let k = spec.attention_width();
            let c7 = b.lin("c7", c, k, spec.linear, 1, false)?;
            let c8 = b.matrix("c8", k, c, true)?;
            forward::pdcnl4(b.graph, xin, &maps, &extra, &c7, &c8, spec.mode, g)?
        }
    };

    let mut y = core;
    if spec.shortcut && spec.kind != BlockKind::Residual1 {
        let proj = b.projection(spec)?;
        let s = forward::shortcut(b.graph, xin, &proj, g)?;
        y = b.graph.add(&s, &y)?;
    }
    if spec.bias {
        let beta = b.row("bias", o)?;
        y = b.graph.add_row(&y, &beta)?;
    }
    Ok(BlockInput {
        node: y,
        geom: out_geom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::blocks::ActivationMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<(BlockSpec, Geom)> {
        let g = Geom::new(2, 2);
        let mut out = vec![];
        for kind in BlockKind::ALL {
            let mut s = BlockSpec::new(kind, 4).with_degree(3);
            if matches!(kind, BlockKind::PdcNl3 | BlockKind::PdcNl4) {
                s = s.with_spatial(g);
            }
            out.push((s.clone(), g));
            let mut conv = s.clone().with_linear(Realization::Conv3x3).with_ratio(2);
            conv.batch_norm = true;
            conv.shortcut = true;
            out.push((conv.clone(), g));
            if !kind.is_attention() {
                let mut widen = conv.with_out(6);
                widen.stride = 2;
                out.push((widen, Geom::new(4, 4)));
            }
        }
        out
    }

    fn build(spec: &BlockSpec, geom: Geom, init: Init) -> Graph {
        let mut graph = Graph::new();
        let x = graph.input(&[geom.hw(), spec.channels]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = build_block(&mut graph, spec, BlockInput { node: x, geom }, &mut rng, "blk", init).unwrap();
        graph.set_output(y.node);
        graph
    }

    #[test]
    fn trainable_count_matches_formula() {
        for (spec, geom) in specs() {
            let graph = build(&spec, geom, Init::Default);
            assert_eq!(graph.trainable_count(), spec.param_count(), "{spec:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (mut spec, geom) in specs() {
            spec.mode = ActivationMode::Standard;
            let mut graph = build(&spec, geom, Init::Random);
            let x = gaussian(&[geom.hw(), spec.channels], 0.5, &mut rng);
            let err = grad_check(&mut graph, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{} {spec:?}: {err:e}", spec.kind);
        }
    }

    #[test]
    fn default_init_starts_at_low_degree() {
        let g = Geom::point();
        let spec = BlockSpec::new(BlockKind::Pdc, 3).with_degree(3);
        let mut graph = build(&spec, g, Init::Default);
        let x = Tensor::matrix(&[&[0.3, -0.2, 0.5]]);
        let w = graph.param_value("blk.f1_1").unwrap().clone();
        let y = graph.forward(&x).unwrap();
        assert_eq!(y, x.matmul(&w).unwrap());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut graph = Graph::new();
        let x = graph.input(&[4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = BlockSpec::new(BlockKind::Se2, 4);
        let input = BlockInput {
            node: x,
            geom: Geom::new(2, 2),
        };
        assert!(build_block(&mut graph, &spec, input, &mut rng, "b", Init::Default).is_err());
    }
}

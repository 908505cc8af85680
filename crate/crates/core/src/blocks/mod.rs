//! The block zoo: one operator per architecture family, each a polynomial
//! of known degree in its input.
//!
//! Blocks act on feature maps in matrix form `X ∈ R^{hw×c}` (row = spatial
//! position, column = channel). A vector input `z ∈ R^d` is the `1 × d`
//! case. Every block is written once in [`forward`] against the
//! [`crate::algebra::Ops`] trait; [`params`] exposes the plain-tensor entry
//! points and [`build`] records blocks into an autodiff graph.

pub mod build;
pub mod forward;
pub mod params;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::conv_out_extent;

pub use build::{build_block, gaussian, BlockInput, Init};
pub use params::{
    dnl_forward, nl_forward, pdc_forward, pdcnl3_forward, pdcnl4_forward, pinet_forward, residual_forward, se_forward,
    se_superdiag_form, sk_forward, AttentionParams, PiNetParams, PolyParams,
};

/// Whether blocks apply their conventional nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationMode {
    /// Pure polynomial; the only mode degree tests run in.
    #[default]
    Identity,
    /// Softmax on attention matrices for the non-local family; nothing elsewhere.
    Standard,
}

/// How a block's linear maps `X ↦ XC` are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Realization {
    #[default]
    Dense,
    Conv1x1,
    Conv3x3,
}

impl Realization {
    pub fn kernel(self) -> usize {
        match self {
            Realization::Dense | Realization::Conv1x1 => 1,
            Realization::Conv3x3 => 3,
        }
    }

    /// Scalar weights in a `cin → cout` map.
    pub fn weights(self, cin: usize, cout: usize) -> usize {
        cin * cout * self.kernel() * self.kernel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Residual1,
    Se2,
    Sk2,
    PiNet,
    Pdc,
    Nl3,
    Dnl3,
    PdcNl3,
    PdcNl4,
}

impl BlockKind {
    pub const ALL: [BlockKind; 9] = [
        BlockKind::Residual1,
        BlockKind::Se2,
        BlockKind::Sk2,
        BlockKind::PiNet,
        BlockKind::Pdc,
        BlockKind::Nl3,
        BlockKind::Dnl3,
        BlockKind::PdcNl3,
        BlockKind::PdcNl4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Residual1 => "residual1",
            BlockKind::Se2 => "se2",
            BlockKind::Sk2 => "sk2",
            BlockKind::PiNet => "pinet",
            BlockKind::Pdc => "pdc",
            BlockKind::Nl3 => "nl3",
            BlockKind::Dnl3 => "dnl3",
            BlockKind::PdcNl3 => "pdcnl3",
            BlockKind::PdcNl4 => "pdcnl4",
        }
    }

    /// Blocks built around an `hw × hw` attention matrix.
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            BlockKind::Nl3 | BlockKind::Dnl3 | BlockKind::PdcNl3 | BlockKind::PdcNl4
        )
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(Error::UnknownKind(s))
    }
}

/// Spatial extent of a feature map in matrix form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    /// A bare vector: one spatial position.
    pub fn point() -> Self {
        Self { h: 1, w: 1 }
    }

    pub fn hw(self) -> usize {
        self.h * self.w
    }
}

/// Declarative description of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Input channels `c` (or input dimension `d` for vectors).
    pub channels: usize,
    /// Output channels; attention blocks require `out == channels`.
    pub out: usize,
    pub stride: usize,
    /// Polynomial degree of `pdc` and `pinet` blocks.
    pub degree: usize,
    pub mode: ActivationMode,
    pub linear: Realization,
    /// Linear layers in the main branch of residual/SE/SK blocks.
    pub depth: usize,
    /// Per-channel affine normalization after every branch layer.
    pub batch_norm: bool,
    pub bias: bool,
    /// Gate reduction ratio (SE/SK; `None` means a full `c × c` gate) or
    /// channel compression of attention blocks (default 4).
    pub ratio: Option<usize>,
    /// Width of the Π-net constant-term vectors `b⁽ⁿ⁾`; defaults to `out`.
    pub omega: Option<usize>,
    /// Adds an identity (or projection) shortcut to non-residual kinds.
    pub shortcut: bool,
    /// Spatial size the block is bound to; required by `pdcnl3`/`pdcnl4`.
    pub spatial: Option<Geom>,
}

impl BlockSpec {
    /// A spec with the defaults used by the descriptor parser.
    pub fn new(kind: BlockKind, channels: usize) -> Self {
        Self {
            kind,
            channels,
            out: channels,
            stride: 1,
            degree: match kind {
                BlockKind::Pdc | BlockKind::PiNet => 2,
                _ => 0,
            },
            mode: ActivationMode::Identity,
            linear: Realization::Dense,
            depth: 1,
            batch_norm: false,
            bias: matches!(kind, BlockKind::Residual1 | BlockKind::Pdc),
            ratio: None,
            omega: None,
            shortcut: false,
            spatial: None,
        }
    }

    pub fn with_out(mut self, out: usize) -> Self {
        self.out = out;
        self
    }

    pub fn with_degree(mut self, n: usize) -> Self {
        self.degree = n;
        self
    }

    pub fn with_mode(mut self, mode: ActivationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_ratio(mut self, r: usize) -> Self {
        self.ratio = Some(r);
        self
    }

    pub fn with_spatial(mut self, g: Geom) -> Self {
        self.spatial = Some(g);
        self
    }

    pub fn with_linear(mut self, r: Realization) -> Self {
        self.linear = r;
        self
    }

    /// Compressed key/query width of attention blocks.
    pub fn attention_width(&self) -> usize {
        (self.channels / self.ratio.unwrap_or(4)).max(1)
    }

    fn needs_projection(&self) -> bool {
        self.channels != self.out || self.stride != 1
    }

    fn has_shortcut(&self) -> bool {
        self.kind == BlockKind::Residual1 || self.shortcut
    }

    /// Declared polynomial degree of the block in its input.
    pub fn degree(&self) -> usize {
        let base = match self.kind {
            BlockKind::Residual1 => 1,
            BlockKind::Se2 | BlockKind::Sk2 => 2,
            BlockKind::Nl3 | BlockKind::Dnl3 | BlockKind::PdcNl3 => 3,
            BlockKind::PdcNl4 => 4,
            BlockKind::PiNet | BlockKind::Pdc => self.degree,
        };
        if self.has_shortcut() {
            base.max(1)
        } else {
            base
        }
    }

    /// Checks the spec against an input geometry and returns the output geometry.
    pub fn validate(&self, input: Geom) -> Result<Geom> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("{} block: {m}", self.kind)));
        if self.channels == 0 || self.out == 0 || self.stride == 0 || self.depth == 0 {
            return bad("channels, out, stride and depth must be positive".into());
        }
        if matches!(self.kind, BlockKind::Pdc | BlockKind::PiNet) && self.degree == 0 {
            return bad("degree must be >= 1".into());
        }
        if self.ratio == Some(0) {
            return bad("ratio must be >= 1".into());
        }
        if self.omega == Some(0) {
            return bad("omega must be >= 1".into());
        }
        if self.linear == Realization::Dense && self.stride != 1 {
            return bad("dense realization cannot stride".into());
        }
        if self.kind.is_attention() {
            if self.out != self.channels {
                return bad("attention blocks keep the channel count".into());
            }
            if self.stride != 1 {
                return bad("attention blocks cannot stride".into());
            }
        }
        if let Some(r) = self.ratio {
            if matches!(self.kind, BlockKind::Se2 | BlockKind::Sk2) && self.out / r == 0 {
                return bad(format!("reduction ratio {r} leaves no gate channels"));
            }
        }
        if matches!(self.kind, BlockKind::PdcNl3 | BlockKind::PdcNl4) {
            match self.spatial {
                Some(g) if g == input => {}
                Some(g) => return bad(format!("bound to {}x{}, got {}x{}", g.h, g.w, input.h, input.w)),
                None => return bad("needs a bound spatial size".into()),
            }
        }
        let k = self.linear.kernel();
        let pad = k / 2;
        match (
            conv_out_extent(input.h, k, self.stride, pad),
            conv_out_extent(input.w, k, self.stride, pad),
        ) {
            (Some(h), Some(w)) => Ok(Geom::new(h, w)),
            _ => bad(format!("input {}x{} too small", input.h, input.w)),
        }
    }

    fn branch_count(&self, cin: usize, cout: usize) -> usize {
        let bn = if self.batch_norm { 2 * cout } else { 0 };
        let first = self.linear.weights(cin, cout) + bn;
        first + (self.depth - 1) * (self.linear.weights(cout, cout) + bn)
    }

    fn projection_count(&self) -> usize {
        if !self.has_shortcut() || !self.needs_projection() {
            return 0;
        }
        let proj = match self.linear {
            Realization::Dense => self.channels * self.out,
            _ => Realization::Conv1x1.weights(self.channels, self.out),
        };
        proj + if self.batch_norm { 2 * self.out } else { 0 }
    }

    fn gate_count(&self) -> usize {
        match self.ratio {
            None => self.out * self.out,
            Some(r) => 2 * self.out * (self.out / r),
        }
    }

    /// Exact number of scalar trainable parameters.
    pub fn param_count(&self) -> usize {
        let (c, o) = (self.channels, self.out);
        let lin = |a, b| self.linear.weights(a, b);
        let core = match self.kind {
            BlockKind::Residual1 => self.branch_count(c, o),
            BlockKind::Se2 => self.branch_count(c, o) + self.gate_count(),
            BlockKind::Sk2 => 2 * lin(c, c) + self.branch_count(c, o) + self.gate_count(),
            BlockKind::PiNet => {
                let n = self.degree;
                let omega = self.omega.unwrap_or(o);
                n * lin(c, o) + (n - 1) * o * o + n * (omega * o + omega)
            }
            BlockKind::Pdc => self.degree * (self.degree + 1) / 2 * lin(c, o),
            BlockKind::Nl3 | BlockKind::Dnl3 | BlockKind::PdcNl3 | BlockKind::PdcNl4 => {
                let k = self.attention_width();
                let mut n = 2 * lin(c, k) + lin(c, c);
                if self.kind == BlockKind::Dnl3 {
                    n += c;
                }
                if matches!(self.kind, BlockKind::PdcNl3 | BlockKind::PdcNl4) {
                    n += c * self.spatial.map_or(0, Geom::hw) + 2 * lin(c, c);
                }
                if self.kind == BlockKind::PdcNl4 {
                    n += lin(c, k) + k * c;
                }
                n
            }
        };
        core + self.projection_count() + if self.bias { o } else { 0 }
    }
}

/// Declared polynomial degree of a block kind.
pub fn block_degree(spec: &BlockSpec) -> usize {
    spec.degree()
}

/// Exact count of scalar trainable parameters in a block.
pub fn block_param_count(spec: &BlockSpec) -> usize {
    spec.param_count()
}

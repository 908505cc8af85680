//! Architecture descriptors, network assembly and parameter counting.
//!
//! A descriptor is line based:
//!
//! ```text
//! # comment
//! input 3x32x32          # or `input 8` for vectors
//! stage                  # optional grouping
//! conv k=3 out=64        # stride=1 pad=k/2 bias=false
//! bn
//! block kind=se2 out=64 linear=conv3x3 depth=2 bn=true ratio=16 shortcut=true
//! pool kind=avg k=2      # or kind=global
//! dense out=10           # bias=true
//! head classes=100
//! ```
//!
//! Keys are case-insensitive. `block` accepts `channels out stride degree
//! linear depth bn bias ratio mode omega shortcut hw`; `channels` defaults to
//! the running width and is checked against it when given.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algebra::Ops;
use crate::autodiff::{Graph, NodeId};
use crate::blocks::build::gaussian;
use crate::blocks::{build_block, ActivationMode, BlockInput, BlockKind, BlockSpec, Geom, Init, Realization};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Tensor};

/// Names accepted by [`parse_arch`] in place of descriptor text, besides
/// the parametric `pdcN-dD-wW[-kK]`, `pinetN-dD-wW[-kK]` and `affine-dD[-kK]`.
pub const BUILTINS: [&str; 5] = [
    "resnet18-cifar100",
    "resnet34-cifar100",
    "resnet18-imagenet",
    "senet18-cifar100",
    "senet18",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Image { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl InputShape {
    /// Per-sample tensor shape fed to the network graph.
    pub fn dims(self) -> Vec<usize> {
        match self {
            InputShape::Image { c, h, w } => vec![c, h, w],
            InputShape::Vector(d) => vec![d],
        }
    }

    fn start(self) -> (usize, Geom) {
        match self {
            InputShape::Image { c, h, w } => (c, Geom::new(h, w)),
            InputShape::Vector(d) => (d, Geom::point()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Non-overlapping `k × k` average.
    Avg,
    /// Global average over all positions.
    Global,
}

/// Auxiliary layers between blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerRecord {
    Conv {
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        c: usize,
    },
    Dense {
        din: usize,
        dout: usize,
        bias: bool,
    },
    Pool {
        kind: PoolKind,
        k: usize,
    },
}

impl LayerRecord {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerRecord::Conv { k, cin, cout, bias, .. } => cin * cout * k * k + if bias { cout } else { 0 },
            LayerRecord::BatchNorm { c } => 2 * c,
            LayerRecord::Dense { din, dout, bias } => din * dout + if bias { dout } else { 0 },
            LayerRecord::Pool { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Aux(LayerRecord),
    Block(BlockSpec),
    /// Global average pooling then a dense map with bias to class logits.
    Head {
        cin: usize,
        classes: usize,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Aux(r) => r.param_count(),
            Layer::Block(b) => b.param_count(),
            Layer::Head { cin, classes } => cin * classes + classes,
        }
    }
}

/// A layer with the descriptor line it came from (0 when built in code).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntry {
    pub line: usize,
    pub layer: Layer,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stage {
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input: InputShape,
    pub stages: Vec<Stage>,
}

impl ArchSpec {
    pub fn layers(&self) -> impl Iterator<Item = &LayerEntry> {
        self.stages.iter().flat_map(|s| s.layers.iter())
    }

    pub fn classes(&self) -> Option<usize> {
        self.layers().find_map(|e| match e.layer {
            Layer::Head { classes, .. } => Some(classes),
            _ => None,
        })
    }

    /// Checks that shapes chain and that exactly one head closes the network.
    pub fn validate(&self) -> Result<()> {
        let total = self.layers().count();
        if total == 0 {
            return Err(Error::Syntax {
                line: 0,
                msg: "architecture has no layers".into(),
            });
        }
        if let Some((i, _)) = self.stages.iter().enumerate().find(|(_, s)| s.layers.is_empty()) {
            return Err(Error::Syntax {
                line: 0,
                msg: format!("stage {i} is empty"),
            });
        }
        let heads: Vec<usize> = self
            .layers()
            .enumerate()
            .filter(|(_, e)| matches!(e.layer, Layer::Head { .. }))
            .map(|(i, _)| i)
            .collect();
        if heads != [total - 1] {
            let line = self.layers().last().map_or(0, |e| e.line);
            return Err(Error::Syntax {
                line,
                msg: "exactly one head is required and it must be last".into(),
            });
        }
        let (mut c, mut g) = self.input.start();
        for e in self.layers() {
            (c, g) = step_shape(e, c, g)?;
        }
        Ok(())
    }
}

fn chain_err<T>(e: &LayerEntry, msg: impl Into<String>) -> Result<T> {
    Err(Error::Chain {
        line: e.line,
        layer: layer_label(&e.layer),
        msg: msg.into(),
    })
}

fn layer_label(l: &Layer) -> String {
    match l {
        Layer::Aux(LayerRecord::Conv { k, cout, .. }) => format!("conv k={k} out={cout}"),
        Layer::Aux(LayerRecord::BatchNorm { c }) => format!("bn c={c}"),
        Layer::Aux(LayerRecord::Dense { dout, .. }) => format!("dense out={dout}"),
        Layer::Aux(LayerRecord::Pool { kind, k }) => format!("pool kind={kind:?} k={k}").to_lowercase(),
        Layer::Block(b) => format!("block kind={} channels={} out={}", b.kind, b.channels, b.out),
        Layer::Head { classes, .. } => format!("head classes={classes}"),
    }
}

/// Shape after one layer, given `c` channels on geometry `g`.
fn step_shape(e: &LayerEntry, c: usize, g: Geom) -> Result<(usize, Geom)> {
    let expect = |want: usize| {
        if want == c {
            Ok(())
        } else {
            chain_err(e, format!("expects {want} input channels, running width is {c}"))
        }
    };
    match &e.layer {
        Layer::Aux(LayerRecord::Conv {
            k,
            cin,
            cout,
            stride,
            pad,
            ..
        }) => {
            expect(*cin)?;
            match (
                conv_out_extent(g.h, *k, *stride, *pad),
                conv_out_extent(g.w, *k, *stride, *pad),
            ) {
                (Some(h), Some(w)) if *cout > 0 => Ok((*cout, Geom::new(h, w))),
                _ => chain_err(e, format!("cannot apply to {}x{}", g.h, g.w)),
            }
        }
        Layer::Aux(LayerRecord::BatchNorm { c: bc }) => {
            expect(*bc)?;
            Ok((c, g))
        }
        Layer::Aux(LayerRecord::Dense { din, dout, .. }) => {
            expect(*din)?;
            Ok((*dout, g))
        }
        Layer::Aux(LayerRecord::Pool { kind, k }) => match kind {
            PoolKind::Global => Ok((c, Geom::point())),
            PoolKind::Avg => {
                if *k == 0 || !g.h.is_multiple_of(*k) || !g.w.is_multiple_of(*k) {
                    chain_err(e, format!("{}x{} is not divisible by {k}", g.h, g.w))
                } else {
                    Ok((c, Geom::new(g.h / k, g.w / k)))
                }
            }
        },
        Layer::Block(spec) => {
            expect(spec.channels)?;
            match spec.validate(g) {
                Ok(out) => Ok((spec.out, out)),
                Err(err) => chain_err(e, err.to_string()),
            }
        }
        Layer::Head { cin, classes } => {
            expect(*cin)?;
            if *classes == 0 {
                return chain_err(e, "needs at least one class");
            }
            Ok((*classes, Geom::point()))
        }
    }
}

fn syntax<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Syntax { line, msg: msg.into() })
}

struct Fields<'a> {
    line: usize,
    pairs: Vec<(String, &'a str)>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, tokens: &[&'a str], allowed: &[&str]) -> Result<Self> {
        let mut pairs: Vec<(String, &str)> = vec![];
        for t in tokens {
            let Some((k, v)) = t.split_once('=') else {
                return syntax(line, format!("expected key=value, got {t:?}"));
            };
            let k = k.to_ascii_lowercase();
            if !allowed.contains(&k.as_str()) {
                return syntax(line, format!("unknown key {k:?}"));
            }
            if pairs.iter().any(|(p, _)| *p == k) {
                return syntax(line, format!("duplicate key {k:?}"));
            }
            pairs.push((k, v));
        }
        Ok(Self { line, pairs })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.raw(key)
            .map(|v| {
                v.parse::<usize>()
                    .or_else(|_| syntax(self.line, format!("{key}={v} is not a non-negative integer")))
            })
            .transpose()
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => syntax(self.line, format!("{key}={v} is not a boolean")),
            })
            .transpose()
    }

    fn required(&self, key: &str) -> Result<usize> {
        self.usize(key)?
            .map_or_else(|| syntax(self.line, format!("missing {key}=")), Ok)
    }
}

fn parse_dims(line: usize, s: &str) -> Result<Vec<usize>> {
    s.to_ascii_lowercase()
        .split('x')
        .map(|p| match p.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => syntax(line, format!("bad extent {p:?} in {s:?}")),
        })
        .collect()
}

fn parse_block(line: usize, tokens: &[&str], c: usize, g: Geom) -> Result<BlockSpec> {
    const KEYS: [&str; 14] = [
        "kind", "channels", "out", "stride", "degree", "linear", "depth", "bn", "bias", "ratio", "mode", "omega",
        "shortcut", "hw",
    ];
    let f = Fields::new(line, tokens, &KEYS)?;
    let kind: BlockKind = f
        .raw("kind")
        .ok_or(Error::Syntax {
            line,
            msg: "block needs kind=".into(),
        })?
        .parse()?;
    let channels = f.usize("channels")?.unwrap_or(c);
    let mut s = BlockSpec::new(kind, channels);
    s.out = f.usize("out")?.unwrap_or(channels);
    s.stride = f.usize("stride")?.unwrap_or(1);
    if let Some(n) = f.usize("degree")? {
        s.degree = n;
    }
    s.linear = match f.raw("linear").map(str::to_ascii_lowercase).as_deref() {
        None | Some("dense") => Realization::Dense,
        Some("conv1x1") => Realization::Conv1x1,
        Some("conv3x3") => Realization::Conv3x3,
        Some(other) => return syntax(line, format!("unknown linear realization {other:?}")),
    };
    s.depth = f.usize("depth")?.unwrap_or(1);
    s.batch_norm = f.bool("bn")?.unwrap_or(false);
    if let Some(b) = f.bool("bias")? {
        s.bias = b;
    }
    s.ratio = f.usize("ratio")?;
    s.mode = match f.raw("mode").map(str::to_ascii_lowercase).as_deref() {
        None | Some("identity") => ActivationMode::Identity,
        Some("standard") => ActivationMode::Standard,
        Some(other) => return syntax(line, format!("unknown mode {other:?}")),
    };
    s.omega = f.usize("omega")?;
    s.shortcut = f.bool("shortcut")?.unwrap_or(false);
    s.spatial = match f.raw("hw") {
        Some(v) => match parse_dims(line, v)?.as_slice() {
            [h, w] => Some(Geom::new(*h, *w)),
            [n] => Some(Geom::new(*n, *n)),
            _ => return syntax(line, format!("hw={v} must be HxW")),
        },
        None if matches!(kind, BlockKind::PdcNl3 | BlockKind::PdcNl4) => Some(g),
        None => None,
    };
    Ok(s)
}

/// Parses descriptor text, or expands a builtin name.
pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let trimmed = text.trim();
    if !trimmed.contains(char::is_whitespace) && !trimmed.is_empty() {
        if let Some(src) = builtin(trimmed) {
            let mut spec = parse_text(&src)?;
            spec.name = trimmed.to_ascii_lowercase();
            return Ok(spec);
        }
    }
    parse_text(text)
}

fn parse_text(text: &str) -> Result<ArchSpec> {
    let mut input: Option<InputShape> = None;
    let mut name = String::from("custom");
    let mut stages: Vec<Stage> = vec![];
    let mut cur = Stage::default();
    let mut open_stage = false;
    let (mut c, mut g) = (0, Geom::point());

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let directive = tokens[0].to_ascii_lowercase();
        let rest = &tokens[1..];
        if directive == "name" {
            name = rest.join(" ");
            continue;
        }
        if directive == "input" {
            if input.is_some() {
                return syntax(line, "input declared twice");
            }
            let [dims] = rest else {
                return syntax(line, "input takes one CxHxW or D argument");
            };
            let shape = match parse_dims(line, dims)?.as_slice() {
                [d] => InputShape::Vector(*d),
                [c, h, w] => InputShape::Image { c: *c, h: *h, w: *w },
                _ => return syntax(line, format!("input {dims:?} must be CxHxW or D")),
            };
            (c, g) = shape.start();
            input = Some(shape);
            continue;
        }
        if input.is_none() {
            return syntax(line, "the first directive must be input");
        }
        if directive == "stage" {
            if !rest.is_empty() {
                return syntax(line, "stage takes no arguments");
            }
            if open_stage || !cur.layers.is_empty() {
                stages.push(std::mem::take(&mut cur));
            }
            open_stage = true;
            continue;
        }
        let layer = match directive.as_str() {
            "conv" => {
                let f = Fields::new(line, rest, &["k", "out", "stride", "pad", "bias", "in"])?;
                let k = f.required("k")?;
                Layer::Aux(LayerRecord::Conv {
                    k,
                    cin: f.usize("in")?.unwrap_or(c),
                    cout: f.required("out")?,
                    stride: f.usize("stride")?.unwrap_or(1),
                    pad: f.usize("pad")?.unwrap_or(k / 2),
                    bias: f.bool("bias")?.unwrap_or(false),
                })
            }
            "bn" => {
                let f = Fields::new(line, rest, &["c"])?;
                Layer::Aux(LayerRecord::BatchNorm {
                    c: f.usize("c")?.unwrap_or(c),
                })
            }
            "dense" => {
                let f = Fields::new(line, rest, &["out", "bias", "in"])?;
                Layer::Aux(LayerRecord::Dense {
                    din: f.usize("in")?.unwrap_or(c),
                    dout: f.required("out")?,
                    bias: f.bool("bias")?.unwrap_or(true),
                })
            }
            "pool" => {
                let f = Fields::new(line, rest, &["kind", "k"])?;
                match f.raw("kind").map(str::to_ascii_lowercase).as_deref() {
                    Some("avg") => Layer::Aux(LayerRecord::Pool {
                        kind: PoolKind::Avg,
                        k: f.required("k")?,
                    }),
                    Some("global") => Layer::Aux(LayerRecord::Pool {
                        kind: PoolKind::Global,
                        k: 0,
                    }),
                    _ => return syntax(line, "pool needs kind=avg or kind=global"),
                }
            }
            "block" => Layer::Block(parse_block(line, rest, c, g)?),
            "head" => {
                let f = Fields::new(line, rest, &["classes"])?;
                Layer::Head {
                    cin: c,
                    classes: f.required("classes")?,
                }
            }
            other => return syntax(line, format!("unknown directive {other:?}")),
        };
        let entry = LayerEntry { line, layer };
        (c, g) = step_shape(&entry, c, g)?;
        cur.layers.push(entry);
    }
    let Some(input) = input else {
        return syntax(0, "empty architecture: no input line");
    };
    if open_stage || !cur.layers.is_empty() {
        stages.push(cur);
    }
    let spec = ArchSpec { name, input, stages };
    spec.validate()?;
    Ok(spec)
}

fn resnet_text(
    title: &str,
    input: &str,
    blocks: [usize; 4],
    kind: &str,
    extra: &str,
    stem: &str,
    classes: usize,
) -> String {
    let mut s = format!("# {title}\ninput {input}\nstage\n{stem}");
    let widths = [64, 128, 256, 512];
    for (i, (&n, &w)) in blocks.iter().zip(&widths).enumerate() {
        s.push_str("stage\n");
        for j in 0..n {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            s.push_str(&format!(
                "block kind={kind} out={w} stride={stride} linear=conv3x3 depth=2 bn=true bias=false{extra}\n"
            ));
        }
    }
    s.push_str(&format!("stage\nhead classes={classes}\n"));
    s
}

fn parametric(name: &str) -> Option<String> {
    let parts: Vec<&str> = name.split('-').collect();
    let num = |p: &str, tag: char| {
        p.strip_prefix(tag)
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|v| *v > 0)
    };
    let classes = match parts.len() {
        2 if parts[0] == "affine" => 2,
        3 if parts[0] == "affine" => num(parts[2], 'k')?,
        3 => 2,
        4 => num(parts[3], 'k')?,
        _ => return None,
    };
    if parts[0] == "affine" {
        let d = num(parts[1], 'd')?;
        return Some(format!("# affine classifier\ninput {d}\nhead classes={classes}\n"));
    }
    let (kind, n) = if let Some(n) = parts[0].strip_prefix("pdc") {
        ("pdc", n.parse::<usize>().ok()?)
    } else {
        ("pinet", parts[0].strip_prefix("pinet")?.parse::<usize>().ok()?)
    };
    let d = num(parts[1], 'd')?;
    let w = num(parts[2], 'w')?;
    Some(format!(
        "# degree-{n} {kind} block of width {w}\ninput {d}\nblock kind={kind} degree={n} out={w}\nhead classes={classes}\n"
    ))
}

/// Descriptor text of a builtin architecture.
pub fn builtin(name: &str) -> Option<String> {
    let name = name.to_ascii_lowercase();
    let cifar_stem = "conv k=3 out=64\nbn\n";
    Some(match name.as_str() {
        "resnet18-cifar100" => resnet_text(
            "resnet18, 3x3 stem",
            "3x32x32",
            [2, 2, 2, 2],
            "residual1",
            "",
            cifar_stem,
            100,
        ),
        "resnet34-cifar100" => resnet_text(
            "resnet34, 3x3 stem",
            "3x32x32",
            [3, 4, 6, 3],
            "residual1",
            "",
            cifar_stem,
            100,
        ),
        "resnet18-imagenet" => resnet_text(
            "resnet18, 7x7 stem; 2x2 average pooling stands in for max pooling",
            "3x224x224",
            [2, 2, 2, 2],
            "residual1",
            "",
            "conv k=7 out=64 stride=2 pad=3\nbn\npool kind=avg k=2\n",
            1000,
        ),
        "senet18-cifar100" | "senet18" => resnet_text(
            "senet18, reduction ratio 16",
            "3x32x32",
            [2, 2, 2, 2],
            "se2",
            " ratio=16 shortcut=true",
            cifar_stem,
            100,
        ),
        _ => return parametric(&name),
    })
}

/// Exact number of trainable scalars.
pub fn count_params(spec: &ArchSpec) -> usize {
    spec.layers().map(|e| e.layer.param_count()).sum()
}

/// Assembles the network with [`Init::Default`].
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<Graph> {
    build_network_with(spec, seed, Init::Default)
}

fn init_tensor(shape: &[usize], fan_in: usize, zero: bool, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    if zero && init == Init::Default {
        Tensor::zeros(shape)
    } else {
        gaussian(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
    }
}

/// Assembles the network into a graph mapping one sample to its `[K]` logits.
pub fn build_network_with(spec: &ArchSpec, seed: u64, init: Init) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.input(&spec.input.dims());
    let (mut c, mut geom) = spec.input.start();
    let mut cur: NodeId = match spec.input {
        InputShape::Vector(d) => g.reshape(&x, &[1, d])?,
        InputShape::Image { c, h, w } => {
            let flat = g.reshape(&x, &[c, h * w])?;
            g.transpose(&flat)?
        }
    };
    for (si, stage) in spec.stages.iter().enumerate() {
        for (li, e) in stage.layers.iter().enumerate() {
            let prefix = format!("s{si}.l{li}");
            let (c2, geom2) = step_shape(e, c, geom)?;
            cur = match &e.layer {
                Layer::Aux(LayerRecord::Conv {
                    k,
                    cin,
                    cout,
                    stride,
                    pad,
                    bias,
                }) => {
                    let wt = init_tensor(&[*cout, *cin, *k, *k], cin * k * k, false, init, &mut rng);
                    let w = g.param(format!("{prefix}.weight"), wt)?;
                    let t = g.transpose(&cur)?;
                    let img = g.reshape(&t, &[*cin, geom.h, geom.w])?;
                    let y = g.conv2d(&img, &w, *stride, *pad)?;
                    let flat = g.reshape(&y, &[*cout, geom2.hw()])?;
                    let mut y = g.transpose(&flat)?;
                    if *bias {
                        let b = g.param(
                            format!("{prefix}.bias"),
                            init_tensor(&[1, *cout], 1, true, init, &mut rng),
                        )?;
                        y = g.add_row(&y, &b)?;
                    }
                    y
                }
                Layer::Aux(LayerRecord::BatchNorm { c: bc }) => {
                    let gamma = g.param(format!("{prefix}.gamma"), Tensor::ones(&[1, *bc]))?;
                    let beta = g.param(
                        format!("{prefix}.beta"),
                        init_tensor(&[1, *bc], 1, true, init, &mut rng),
                    )?;
                    let rep = g.replicate_rows(&gamma, geom.hw())?;
                    let y = g.hadamard(&cur, &rep)?;
                    g.add_row(&y, &beta)?
                }
                Layer::Aux(LayerRecord::Dense { din, dout, bias }) => {
                    let w = g.param(
                        format!("{prefix}.weight"),
                        init_tensor(&[*din, *dout], *din, false, init, &mut rng),
                    )?;
                    let mut y = g.matmul(&cur, &w)?;
                    if *bias {
                        let b = g.param(
                            format!("{prefix}.bias"),
                            init_tensor(&[1, *dout], 1, true, init, &mut rng),
                        )?;
                        y = g.add_row(&y, &b)?;
                    }
                    y
                }
                Layer::Aux(LayerRecord::Pool {
                    kind: PoolKind::Global, ..
                }) => g.global_avg_pool(&cur)?,
                Layer::Aux(LayerRecord::Pool { kind: PoolKind::Avg, k }) => {
                    // Channels are stacked vertically; windows never straddle
                    // two channels because k divides h.
                    let t = g.transpose(&cur)?;
                    let tall = g.reshape(&t, &[1, c * geom.h, geom.w])?;
                    let kernel = g.constant(Tensor::full(&[1, 1, *k, *k], 1.0 / (k * k) as f64));
                    let y = g.conv2d(&tall, &kernel, *k, 0)?;
                    let flat = g.reshape(&y, &[c, geom2.hw()])?;
                    g.transpose(&flat)?
                }
                Layer::Block(b) => {
                    let input = BlockInput { node: cur, geom };
                    build_block(&mut g, b, input, &mut rng, &prefix, init)?.node
                }
                Layer::Head { cin, classes } => {
                    let pooled = g.global_avg_pool(&cur)?;
                    let w = g.param(
                        "head.weight",
                        init_tensor(&[*cin, *classes], *cin, false, init, &mut rng),
                    )?;
                    let b = g.param("head.bias", init_tensor(&[1, *classes], 1, true, init, &mut rng))?;
                    let y = g.matmul(&pooled, &w)?;
                    let y = g.add_row(&y, &b)?;
                    g.reshape(&y, &[*classes])?
                }
            };
            (c, geom) = (c2, geom2);
        }
    }
    g.set_output(cur);
    Ok(g)
}

/// Table-style rounding of a parameter count to one decimal in millions.
pub fn millions(count: usize) -> f64 {
    (count as f64 / 1e5).round() / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_degree;

    #[test]
    fn builtin_counts() {
        let count = |n: &str| count_params(&parse_arch(n).unwrap());
        assert_eq!(count("resnet18-cifar100"), 11_220_132);
        assert_eq!(count("resnet34-cifar100"), 21_328_292);
        assert_eq!(count("resnet18-imagenet"), 11_689_512);
        assert_eq!(count("senet18"), 11_307_172);
        assert_eq!(millions(11_220_132), 11.2);
    }

    #[test]
    fn head_only() {
        let spec = parse_arch("input 512\nhead classes=100").unwrap();
        assert_eq!(count_params(&spec), 51_300);
        let spec = parse_arch("input 512\ndense out=100\npool kind=global\nhead classes=10").unwrap();
        assert_eq!(count_params(&spec), 51_300 + 1010);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_arch(""), Err(Error::Syntax { .. })));
        assert!(matches!(parse_arch("input 3x8x8\n"), Err(Error::Syntax { .. })));
        assert!(matches!(
            parse_arch("input 3x8x8\nstage\nstage\nhead classes=2"),
            Err(Error::Syntax { .. })
        ));
        assert!(matches!(
            parse_arch("input 4\nfrobnicate\nhead classes=2"),
            Err(Error::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            parse_arch("input 4\nhead classes=2\nhead classes=2"),
            Err(Error::Syntax { .. })
        ));
        assert!(matches!(
            parse_arch("input 4\nblock kind=pdc wat=1\nhead classes=2"),
            Err(Error::Syntax { line: 2, .. })
        ));
        match parse_arch("input 3x8x8\nconv k=3 out=16\nblock kind=se2 channels=32\nhead classes=2") {
            Err(Error::Chain { line, layer, .. }) => {
                assert_eq!(line, 3);
                assert!(layer.contains("se2"), "{layer}");
            }
            other => panic!("expected chain error, got {other:?}"),
        }
        assert!(parse_arch("INPUT 3x8x8 # comment\nConv K=3 OUT=4\nHead Classes=2").is_ok());
    }

    #[test]
    fn trainable_entries_match_count() {
        let text = "input 3x8x8\nconv k=3 out=4 bias=true\nbn\nstage\n\
                    block kind=residual1 out=8 stride=2 linear=conv3x3 depth=2 bn=true bias=false\n\
                    block kind=se2 linear=conv1x1 ratio=2 shortcut=true\n\
                    block kind=pdcnl4 mode=standard\npool kind=avg k=2\n\
                    block kind=pinet degree=3 omega=3\ndense out=6\nhead classes=3";
        let spec = parse_arch(text).unwrap();
        let mut g = build_network(&spec, 7).unwrap();
        assert_eq!(g.trainable_count(), count_params(&spec));
        let x = Tensor::from_fn(&[3, 8, 8], || 0.1);
        assert_eq!(g.forward(&x).unwrap().shape(), [3]);
    }

    #[test]
    fn smoke_and_determinism() {
        let spec = parse_arch("input 2x4x4\nblock kind=residual1 linear=conv3x3\nhead classes=3").unwrap();
        let mut a = build_network(&spec, 5).unwrap();
        let b = build_network(&spec, 5).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.forward(&Tensor::ones(&[2, 4, 4])).unwrap().shape(), [3]);
    }

    #[test]
    fn average_pool_is_per_channel() {
        let spec = parse_arch("input 2x2x2\npool kind=avg k=2\nhead classes=2").unwrap();
        let mut g = build_network(&spec, 1).unwrap();
        g.set_param("head.weight", Tensor::eye(2)).unwrap();
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().data(), &[2.5, 25.0]);
    }

    #[test]
    fn stacked_degrees_multiply() {
        let spec = parse_arch("input 3\nblock kind=pdc degree=2\nblock kind=pdc degree=2\nhead classes=2").unwrap();
        let mut g = build_network_with(&spec, 3, Init::Random).unwrap();
        let x0 = Tensor::vector(vec![0.2, -0.4, 0.3]);
        let v = Tensor::vector(vec![0.6, 0.5, -0.6]);
        let f = |z: &Tensor| g.clone().forward(z);
        assert_eq!(finite_diff_degree(f, &x0, &v, 6, 0.5).unwrap(), 4);
        let _ = g.forward(&x0).unwrap();
    }

    #[test]
    fn parametric_builtins() {
        let spec = parse_arch("pdc2-d8-w8").unwrap();
        assert_eq!(count_params(&spec), 3 * 64 + 8 + 8 * 2 + 2);
        assert_eq!(count_params(&parse_arch("affine-d8").unwrap()), 18);
        assert_eq!(parse_arch("pinet3-d4-w5-k3").unwrap().classes(), Some(3));
    }
}

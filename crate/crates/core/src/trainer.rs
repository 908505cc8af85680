//! Minibatch SGD with momentum, step learning-rate schedule, metrics and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientSet, Graph};
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Header of the per-run CSV report.
pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_acc";

const CKPT_MAGIC: &[u8; 4] = b"PDCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch: 128,
            lr0: 0.1,
            milestones: vec![40, 60, 80, 100],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `lr0 = 0` is accepted and turns training into a no-op.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} must lie in (0, 1]", self.gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("momentum must lie in [0, 1) and weight decay be >= 0".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!(
                "milestones {:?} must be < epochs {}",
                self.milestones, self.epochs
            ));
        }
        Ok(())
    }
}

/// `lr0 · γᵏ` with `k` the number of milestones `≤ epoch` (epochs count from 0).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let k = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.lr0 * cfg.gamma.powi(k as i32))
}

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = match logits.shape() {
        [k] => (1, *k),
        [b, k] => (*b, *k),
        s => return shape_err(format!("logits must be [B x K], got {s:?}")),
    };
    if labels.len() != b {
        return shape_err(format!("{} labels for {b} rows", labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} >= class count {k}")));
    }
    Ok((b, k))
}

/// Mean negative log-likelihood and its gradient with respect to the logits.
/// A rank-1 `logits` is a single row.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = check_logits(logits, labels)?;
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        for (j, g) in grad[r * k..(r + 1) * k].iter_mut().enumerate() {
            *g = ((row[j] - lse).exp() - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// One momentum step: `v ← μv + g + λθ`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return shape_err("parameter, gradient and velocity lists differ in length");
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return shape_err(format!(
                "shapes {:?} / {:?} / {:?} differ",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        let (pd, vd) = (p.data_mut(), v.data_mut());
        for ((th, vel), gr) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
            *vel = cfg.momentum * *vel + gr + cfg.weight_decay * *th;
            *th -= lr * *vel;
        }
    }
    Ok(())
}

/// Velocity buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies [`sgd_step`] to every trainable parameter of `graph`.
    pub fn step(&mut self, graph: &mut Graph, grads: &GradientSet, lr: f64, cfg: &TrainConfig) -> Result<()> {
        for p in graph.params_mut().filter(|p| p.trainable) {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {}", p.name)))?;
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            sgd_step(
                std::slice::from_mut(&mut p.value),
                std::slice::from_ref(g),
                std::slice::from_mut(v),
                lr,
                cfg,
            )?;
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    // strict comparison keeps the lowest index among ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sample; ties go to the lowest class index.
pub fn predict(graph: &mut Graph, ds: &Dataset) -> Result<Vec<usize>> {
    (0..ds.len())
        .map(|i| Ok(argmax(graph.forward(&ds.sample(i))?.data())))
        .collect()
}

/// Fraction of samples whose argmax logit is the label.
pub fn evaluate(graph: &mut Graph, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(graph, ds)?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

fn add_grads(acc: &mut GradientSet, g: GradientSet) -> Result<()> {
    if acc.is_empty() {
        *acc = g;
        return Ok(());
    }
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&t)?,
            None => {
                acc.insert(name, t);
            }
        }
    }
    Ok(())
}

/// Loss and summed parameter gradients of one batch (mean over the batch).
pub fn batch_gradients(graph: &mut Graph, ds: &Dataset, batch: &[usize]) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::new();
    let mut loss = 0.0;
    for &i in batch {
        let logits = graph.forward(&ds.sample(i))?;
        let (l, g) = cross_entropy_with_grad(&logits, &[ds.labels()[i]])?;
        loss += l;
        add_grads(&mut grads, graph.backward(&g.scale(1.0 / batch.len() as f64))?)?;
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Mean loss over `indices` without touching parameters.
pub fn mean_loss(graph: &mut Graph, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        total += cross_entropy(&graph.forward(&ds.sample(i))?, &[ds.labels()[i]])?;
    }
    Ok(total / indices.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's batches, each taken before its update.
    pub train_loss: f64,
    /// Accuracies measured after the epoch's last update.
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
}

impl RunReport {
    pub fn final_eval_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_acc)
    }

    pub fn final_train_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_acc)
    }

    /// The CSV report; numbers use the shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.eval_acc
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Format(format!("report must start with {CSV_HEADER:?}")));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|v| v.trim().parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad report row {l:?}")))
                };
                if f.len() != 5 {
                    return Err(Error::Format(format!("bad report row {l:?}")));
                }
                Ok(EpochRow {
                    epoch: f[0]
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad epoch in {l:?}")))?,
                    lr: num(1)?,
                    train_loss: num(2)?,
                    train_acc: num(3)?,
                    eval_acc: num(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

/// Trains `graph` in place. Deterministic given the graph's initial
/// parameters, the datasets and `cfg`.
pub fn train(graph: &mut Graph, train_ds: &Dataset, eval_ds: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    if train_ds.is_empty() || eval_ds.is_empty() {
        return Err(Error::InvalidArgument(
            "training and evaluation sets must be non-empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new();
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let (loss, grads) = batch_gradients(graph, train_ds, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(graph, &grads, lr, cfg)?;
        }
        rows.push(EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / train_ds.len() as f64,
            train_acc: evaluate(graph, train_ds)?,
            eval_acc: evaluate(graph, eval_ds)?,
        });
    }
    Ok(RunReport { rows })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Serializes every parameter of `graph`, in graph order.
pub fn write_checkpoint(mut w: impl Write, graph: &Graph) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(graph.params().len() as u32).to_le_bytes())?;
    for p in graph.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&[u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let payload: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&payload)?;
    }
    Ok(())
}

fn take(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

fn take_u32(r: &mut impl Read) -> Result<usize> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

/// Named tensors of a checkpoint, in file order.
pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    if take(&mut r, 4).ok().as_deref() != Some(CKPT_MAGIC.as_slice()) {
        return Err(Error::BadMagic { expected: "PDCK" });
    }
    let version = take_u32(&mut r)?;
    if version != CKPT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = take_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = take_u32(&mut r)?;
        let name =
            String::from_utf8(take(&mut r, len)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = take(&mut r, 1)?[0] as usize;
        let shape = (0..rank).map(|_| take_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = take(&mut r, n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, graph: &Graph) -> Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, graph)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}

/// Overwrites parameters of `graph` by name; the checkpoint must cover every parameter.
pub fn apply_checkpoint(graph: &mut Graph, entries: Vec<(String, Tensor)>) -> Result<()> {
    let expected = graph.params().len();
    if entries.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, network has {expected}",
            entries.len()
        )));
    }
    for (name, t) in entries {
        graph.set_param(&name, t)?;
    }
    Ok(())
}

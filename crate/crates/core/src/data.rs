//! Labelled datasets, their binary file format and the sampling protocols.
//!
//! File layout (little-endian): magic `PDCD`, version `u32 = 1`, flags `u8`
//! (0: 8-bit image payload scaled to `[0, 1]` on load, 1: `f32` vectors),
//! class count `K: u32`, sample count `n: u32`, per-sample rank `u8` and
//! extents `u32[rank]`, payload, then `u16` labels.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PDCD";
const VERSION: u32 = 1;

/// How sample values are stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Bytes `b` loaded as `b / 255`.
    Image,
    /// 32-bit reals.
    Vector,
}

impl SampleKind {
    fn flag(self) -> u8 {
        match self {
            SampleKind::Image => 0,
            SampleKind::Vector => 1,
        }
    }
}

/// Samples are kept flat so that an empty set still records its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: SampleKind,
    sample_shape: Vec<usize>,
    values: Vec<f64>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl Dataset {
    /// Validates and assembles a dataset. Values must be representable in
    /// the storage kind: multiples of `1/255` in `[0, 1]` for images,
    /// exact `f32` values for vectors.
    pub fn new(
        kind: SampleKind,
        sample_shape: Vec<usize>,
        values: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || per == 0 {
            return shape_err(format!(
                "sample shape {sample_shape:?} must be non-empty with positive extents"
            ));
        }
        if values.len() != per * labels.len() {
            return shape_err(format!("{} values for {} samples of {per}", values.len(), labels.len()));
        }
        if classes == 0 || classes > usize::from(u16::MAX) + 1 {
            return Err(Error::InvalidArgument(format!("class count {classes} out of range")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} >= class count {classes}")));
        }
        let representable = match kind {
            SampleKind::Image => values
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v) && quantize(v) as f64 / 255.0 == v),
            SampleKind::Vector => values.iter().all(|&v| (v as f32) as f64 == v && v.is_finite()),
        };
        if !representable {
            return Err(Error::InvalidArgument(format!(
                "values not representable as {kind:?} storage"
            )));
        }
        let mut class_counts = vec![0; classes];
        labels.iter().for_each(|&l| class_counts[l] += 1);
        Ok(Self {
            kind,
            sample_shape,
            values,
            labels,
            class_counts,
        })
    }

    /// Image dataset from raw bytes.
    pub fn from_bytes(sample_shape: Vec<usize>, bytes: &[u8], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let values = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(SampleKind::Image, sample_shape, values, labels, classes)
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn per_sample(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Sample `i` as a tensor of the per-sample shape.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.per_sample();
        Tensor::new(self.sample_shape.clone(), self.values[i * per..(i + 1) * per].to_vec())
            .expect("validated sample shape")
    }

    /// All inputs as one `[n × …]` tensor; `None` when empty.
    pub fn inputs(&self) -> Option<Tensor> {
        if self.is_empty() {
            return None;
        }
        let mut shape = vec![self.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, self.values.clone()).ok()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let per = self.per_sample();
        let mut values = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut class_counts = vec![0; self.classes()];
        for &i in indices {
            values.extend_from_slice(&self.values[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
            class_counts[self.labels[i]] += 1;
        }
        Dataset {
            kind: self.kind,
            sample_shape: self.sample_shape.clone(),
            values,
            labels,
            class_counts,
        }
    }

    fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

/// Serializes `ds` in the dataset format.
pub fn write_dataset(mut w: impl Write, ds: &Dataset) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[ds.kind.flag()])?;
    w.write_all(&u32_of(ds.classes(), "class count")?.to_le_bytes())?;
    w.write_all(&u32_of(ds.len(), "sample count")?.to_le_bytes())?;
    let rank = u8::try_from(ds.sample_shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    w.write_all(&[rank])?;
    for &e in &ds.sample_shape {
        w.write_all(&u32_of(e, "extent")?.to_le_bytes())?;
    }
    let payload: Vec<u8> = match ds.kind {
        SampleKind::Image => ds.values.iter().map(|&v| quantize(v)).collect(),
        SampleKind::Vector => ds.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
    };
    w.write_all(&payload)?;
    let labels: Vec<u8> = ds.labels.iter().flat_map(|&l| (l as u16).to_le_bytes()).collect();
    w.write_all(&labels)?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.r).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a dataset from a reader.
pub fn read_dataset(r: impl Read) -> Result<Dataset> {
    let mut c = Cursor { r };
    let magic = c.bytes(4, "magic").map_err(|_| Error::BadMagic { expected: "PDCD" })?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "PDCD" });
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = match c.u8("flags")? {
        0 => SampleKind::Image,
        1 => SampleKind::Vector,
        f => return Err(Error::Format(format!("unknown flags {f}"))),
    };
    let classes = c.u32("class count")?;
    let n = c.u32("sample count")?;
    let rank = c.u8("rank")? as usize;
    let shape = (0..rank).map(|_| c.u32("extent")).collect::<Result<Vec<_>>>()?;
    let per: usize = shape.iter().product();
    let total = n
        .checked_mul(per)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let values: Vec<f64> = match kind {
        SampleKind::Image => c.bytes(total, "payload")?.iter().map(|&b| b as f64 / 255.0).collect(),
        SampleKind::Vector => c
            .bytes(total * 4, "payload")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
    };
    let labels: Vec<usize> = c
        .bytes(n * 2, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let mut rest = [0u8; 1];
    if c.r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after labels".into()));
    }
    Dataset::new(kind, shape, values, labels, classes)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(io::BufReader::new(fs::File::open(path)?))
}

/// Fixed indefinite form `Q = diag(1, −1, 1, −1, …)` of the synthetic task.
pub fn quadratic_form(z: &[f64]) -> f64 {
    z.iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v * v } else { -v * v })
        .sum()
}

/// Two balanced classes split by the sign of `zᵀQz`, `z ~ N(0, I)` rounded
/// to `f32`. Label 1 marks `zᵀQz > 0`. Draws are rejected once a class is full.
pub fn synth_quadratic(d: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("synthetic task needs d >= 2, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(2 * n_per_class * d);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let mut have = [0usize; 2];
    while have[0] < n_per_class || have[1] < n_per_class {
        let z: Vec<f64> = (0..d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32 as f64
            })
            .collect();
        let label = usize::from(quadratic_form(&z) > 0.0);
        if have[label] < n_per_class {
            have[label] += 1;
            values.extend(z);
            labels.push(label);
        }
    }
    Dataset::new(SampleKind::Vector, vec![d], values, labels, 2)
}

/// Draws `targets[k]` samples of every class `k` uniformly without
/// replacement. Selected samples keep their original relative order.
pub fn subsample_to(ds: &Dataset, targets: &[usize], seed: u64) -> Result<Dataset> {
    if targets.len() != ds.classes() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} classes",
            targets.len(),
            ds.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(targets.iter().sum());
    for (class, &m) in targets.iter().enumerate() {
        let pool = ds.indices_of(class);
        if m > pool.len() {
            return Err(Error::Infeasible(format!(
                "class {class} has {} samples, {m} requested",
                pool.len()
            )));
        }
        chosen.extend(index::sample(&mut rng, pool.len(), m).into_iter().map(|j| pool[j]));
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}

/// Exactly `m` samples of every class.
pub fn subsample_per_class(ds: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    subsample_to(ds, &vec![m; ds.classes()], seed)
}

/// Exponentially decaying class sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceProfile {
    pub classes: usize,
    pub imbalance: f64,
    pub n_max: usize,
    pub targets: Vec<usize>,
}

impl ImbalanceProfile {
    /// Class `i` gets `round(n_max · IF^(−i/(K−1)))` samples.
    pub fn new(classes: usize, imbalance: f64, n_max: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if !imbalance.is_finite() || imbalance < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "imbalance factor {imbalance} must be >= 1"
            )));
        }
        let targets = (0..classes)
            .map(|i| {
                let t = if classes == 1 {
                    0.0
                } else {
                    i as f64 / (classes - 1) as f64
                };
                (n_max as f64 * imbalance.powf(-t)).round() as usize
            })
            .collect();
        Ok(Self {
            classes,
            imbalance,
            n_max,
            targets,
        })
    }

    /// Largest over smallest target; infinite when a class is empty.
    pub fn achieved(&self) -> f64 {
        ratio(&self.targets)
    }
}

fn ratio(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    }
}

/// Largest over smallest class count of a dataset.
pub fn imbalance_factor(ds: &Dataset) -> f64 {
    ratio(ds.class_counts())
}

/// Long-tailed resample: class `i` keeps `round(n_max · IF^(−i/(K−1)))`
/// samples, with `n_max` the largest class count of `ds`.
pub fn longtail_resample(ds: &Dataset, imbalance: f64, seed: u64) -> Result<Dataset> {
    let n_max = ds.class_counts().iter().copied().max().unwrap_or(0);
    let profile = ImbalanceProfile::new(ds.classes(), imbalance, n_max)?;
    subsample_to(ds, &profile.targets, seed)
}

/// Exact per-class counts recomputed from the labels.
pub fn class_histogram(ds: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; ds.classes()];
    ds.labels().iter().for_each(|&l| counts[l] += 1);
    counts
}

//! Labeled binary-classification data on the unit sphere.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntk;
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const DATASET_HEADER: &str = "ntkw-dataset v1";

/// Tolerance on `‖x‖₂ = 1` for stored inputs.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Pairs with `|⟨x_i, x_j⟩|` above this are treated as parallel.
pub const PARALLEL_THRESHOLD: f64 = 1.0 - 1e-9;

/// An IDX image file: `count` images of `rows × cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("truncated {what} header"),
            ))
        })
}

fn truncated(what: &str, want: usize, got: usize) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("truncated {what}: expected {want} payload bytes, found {got}"),
    ))
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = be_u32(bytes, 0, "image")?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(Error::Format(format!(
                "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
            )));
        }
        let count = be_u32(bytes, 4, "image")? as usize;
        let rows = be_u32(bytes, 8, "image")? as usize;
        let cols = be_u32(bytes, 12, "image")? as usize;
        let want = count * rows * cols;
        let payload = &bytes[16..];
        if payload.len() < want {
            return Err(truncated("image file", want, payload.len()));
        }
        if payload.len() > want {
            return Err(Error::Format(format!(
                "image file has {} trailing bytes",
                payload.len() - want
            )));
        }
        Ok(IdxImages {
            count,
            rows,
            cols,
            pixels: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [self.count, self.rows, self.cols] {
            out.extend_from_slice(&(v as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.rows * self.cols;
        &self.pixels[i * len..(i + 1) * len]
    }
}

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = be_u32(bytes, 0, "label")?;
        if magic != IDX_LABELS_MAGIC {
            return Err(Error::Format(format!(
                "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
            )));
        }
        let count = be_u32(bytes, 4, "label")? as usize;
        let payload = &bytes[8..];
        if payload.len() < count {
            return Err(truncated("label file", count, payload.len()));
        }
        if payload.len() > count {
            return Err(Error::Format(format!(
                "label file has {} trailing bytes",
                payload.len() - count
            )));
        }
        Ok(IdxLabels {
            labels: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Read a whole file, transparently gunzipping `*.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)?;
    let mut reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut w = std::io::BufWriter::new(file);
        w.write_all(bytes)?;
        w.flush()?;
    }
    Ok(())
}

/// MNIST-style raw data: images with pixel bytes and digit labels.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub images: IdxImages,
    pub labels: IdxLabels,
    pub source: String,
}

impl RawDataset {
    pub fn from_idx(images: IdxImages, labels: IdxLabels, source: String) -> Result<Self> {
        if images.count != labels.labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.count,
                labels.labels.len()
            )));
        }
        Ok(RawDataset {
            images,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.count
    }

    pub fn is_empty(&self) -> bool {
        self.images.count == 0
    }

    pub fn dim(&self) -> usize {
        self.images.rows * self.images.cols
    }

    /// Pixels of example `i` scaled to `[0, 1]`.
    pub fn pixels(&self, i: usize) -> Vec<f64> {
        self.images
            .image(i)
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels.labels[i]
    }
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let images = IdxImages::parse(&read_maybe_gz(images_path)?)?;
    let labels = IdxLabels::parse(&read_maybe_gz(labels_path)?)?;
    RawDataset::from_idx(
        images,
        labels,
        format!("idx:{}", images_path.display()),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: Option<u64>,
    pub flip_ratio: f64,
}

/// `n` unit-norm inputs in `R^d` with `±1` labels.
///
/// Inputs are stored row-major so each example is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    /// Build a dataset, checking unit norms, labels and sizes.
    pub fn new(inputs: Vec<f64>, labels: Vec<f64>, dim: usize, meta: DatasetMeta) -> Result<Self> {
        if dim < 2 {
            return Err(Error::arg(format!("input dimension {dim} < 2")));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset(0));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Consistency(format!(
                "label {i} is {}, expected ±1",
                labels[i]
            )));
        }
        let ds = LabeledDataset {
            inputs,
            labels,
            dim,
            meta,
        };
        for i in 0..ds.len() {
            let norm = l2(ds.x(i));
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Precondition(format!(
                    "input {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Row-major `n × d` input values.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Replace the label vector (same length, ±1 entries).
    pub fn with_labels(&self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} examples",
                labels.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        out.labels = labels;
        if out.labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Consistency("labels must be ±1".into()));
        }
        Ok(out)
    }

    /// Subset of examples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("index {i} out of range {}", self.len())));
            }
            inputs.extend_from_slice(self.x(i));
            labels.push(self.y(i));
        }
        LabeledDataset::new(inputs, labels, self.dim, self.meta.clone())
    }

    /// Index pairs whose inputs are (anti)parallel up to [`PARALLEL_THRESHOLD`].
    pub fn near_parallel_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if dot(self.x(i), self.x(j)).abs() > PARALLEL_THRESHOLD {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = format!("{DATASET_HEADER}\n{}\n{}\n", self.len(), self.dim).into_bytes();
        for v in &self.inputs {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|&y| (y as i8) as u8));
        out
    }

    pub fn from_cache_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let (fields, body) = split_header(bytes, DATASET_HEADER, 2)?;
        let (n, d) = (fields[0] as usize, fields[1] as usize);
        if body.len() != n * d * 8 + n {
            return Err(Error::Format(format!(
                "dataset cache body is {} bytes, expected {}",
                body.len(),
                n * d * 8 + n
            )));
        }
        let inputs = read_f64s(&body[..n * d * 8]);
        let labels = body[n * d * 8..]
            .iter()
            .map(|&b| f64::from(b as i8))
            .collect();
        LabeledDataset::new(
            inputs,
            labels,
            d,
            DatasetMeta {
                source: source.to_string(),
                seed: None,
                flip_ratio: 0.0,
            },
        )
    }
}

/// Split `header\nv1\nv2\n…\n` off the front of a binary file.
pub(crate) fn split_header<'a>(
    bytes: &'a [u8],
    header: &str,
    n_fields: usize,
) -> Result<(Vec<u64>, &'a [u8])> {
    let mut rest = bytes;
    let mut next_line = |what: &str| -> Result<&'a str> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format(format!("missing {what} line")))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format(format!("{what} line is not UTF-8")))?;
        rest = &rest[end + 1..];
        Ok(line)
    };
    let first = next_line("header")?;
    if first != header {
        return Err(Error::Format(format!(
            "header {first:?}, expected {header:?}"
        )));
    }
    let mut fields = Vec::with_capacity(n_fields);
    for k in 0..n_fields {
        let line = next_line("size")?;
        fields.push(
            line.trim()
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("field {k} {line:?} is not an integer")))?,
        );
    }
    Ok((fields, rest))
}

pub(crate) fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Keep digits `class_pos` (→ +1) and `class_neg` (→ −1), subsample and
/// project onto the unit sphere.
///
/// The subsample is drawn without replacement separately within each class,
/// keeping the class proportions of the filtered data. The result is
/// shuffled so that the two classes interleave.
pub fn binarize_and_normalize(
    raw: &RawDataset,
    class_pos: u8,
    class_neg: u8,
    n_max: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_pos == class_neg {
        return Err(Error::arg("positive and negative classes must differ"));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut dropped = 0usize;
    for i in 0..raw.len() {
        let label = raw.label(i);
        if label != class_pos && label != class_neg {
            continue;
        }
        if raw.images.image(i).iter().all(|&p| p == 0) {
            dropped += 1;
            continue;
        }
        if label == class_pos {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} zero-norm inputs");
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Consistency(format!(
            "digit {} not present in raw data",
            if pos.is_empty() { class_pos } else { class_neg }
        )));
    }

    let total = pos.len() + neg.len();
    let (take_pos, take_neg) = if n_max >= total {
        (pos.len(), neg.len())
    } else {
        let tp = ((n_max as f64) * pos.len() as f64 / total as f64).round() as usize;
        let tp = tp.min(pos.len()).min(n_max);
        let tn = (n_max - tp).min(neg.len());
        (n_max - tn, tn)
    };

    let mut rng = seed::rng(seed::derive(seed, "subsample"));
    let mut chosen: Vec<(usize, f64)> = pos
        .choose_multiple(&mut rng, take_pos)
        .map(|&i| (i, 1.0))
        .chain(neg.choose_multiple(&mut rng, take_neg).map(|&i| (i, -1.0)))
        .collect();
    chosen.shuffle(&mut rng);
    if chosen.len() < 2 {
        return Err(Error::EmptyDataset(chosen.len()));
    }

    let dim = raw.dim();
    let mut inputs = Vec::with_capacity(chosen.len() * dim);
    let mut labels = Vec::with_capacity(chosen.len());
    for &(i, y) in &chosen {
        let mut px = raw.pixels(i);
        normalize(&mut px);
        inputs.extend_from_slice(&px);
        labels.push(y);
    }
    LabeledDataset::new(
        inputs,
        labels,
        dim,
        DatasetMeta {
            source: format!("{} digits {class_pos}/{class_neg}", raw.source),
            seed: Some(seed),
            flip_ratio: 0.0,
        },
    )
}

/// Scale `v` to unit Euclidean norm in place. Returns the original norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let norm = l2(v);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
        // One correction pass keeps the norm within a couple of ulps of 1.
        let second = l2(v);
        v.iter_mut().for_each(|x| *x /= second);
    }
    norm
}

/// Indices negated by [`flip_labels`] for the given size, ratio and seed.
///
/// The set is the first `⌊ratio·n⌋` entries of a seeded uniform permutation,
/// so for a fixed seed the flipped sets are nested in the ratio.
pub fn flip_indices(n: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::arg(format!("flip ratio {ratio} outside [0, 0.5]")));
    }
    // The small offset keeps e.g. 0.3·200 = 60.000000000000007 and
    // 0.29·100 = 28.999999999999996 on the intended integer.
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(seed, "flip-permutation"));
    perm.shuffle(&mut rng);
    perm.truncate(k);
    Ok(perm)
}

pub fn flip_labels(data: &LabeledDataset, ratio: f64, seed: u64) -> Result<LabeledDataset> {
    let idx = flip_indices(data.len(), ratio, seed)?;
    let mut out = data.clone();
    for i in idx {
        out.labels[i] = -out.labels[i];
    }
    out.meta.flip_ratio = ratio;
    out.meta.seed = Some(seed);
    Ok(out)
}

/// Uniform draw on `S^{d−1}`.
pub fn random_unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Synthetic data labelled by the sign of a random kernel expansion.
///
/// See [`synth_ntk_realizable_split`]; this is the variant without a
/// held-out test set.
pub fn synth_ntk_realizable(n: usize, d: usize, depth: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(synth_ntk_realizable_split(n, 0, d, depth, seed)?.0)
}

/// Training and test data from one kernel-realizable target.
///
/// Draws `n_train + n_test` points uniformly on the sphere (resampling any
/// point that is near-parallel to an earlier one), then coefficients
/// `α ~ N(0, I)` on the training points and labels every point by
/// `sign(Σ_j α_j Θ(x, x_j))`. The coefficients are redrawn whenever some
/// point has margin below `1e-6`.
pub fn synth_ntk_realizable_split(
    n_train: usize,
    n_test: usize,
    d: usize,
    depth: usize,
    seed: u64,
) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    if n_train < 2 {
        return Err(Error::arg(format!("n = {n_train} < 2")));
    }
    if d < 2 {
        return Err(Error::arg(format!("d = {d} < 2")));
    }
    if depth < 2 {
        return Err(Error::arg(format!("depth {depth} < 2")));
    }
    let total = n_train + n_test;
    let mut rng = seed::rng(seed::derive(seed, "synth-inputs"));
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(total);
    while points.len() < total {
        let candidate = random_unit_vector(d, &mut rng);
        if points
            .iter()
            .all(|p| dot(p, &candidate).abs() <= PARALLEL_THRESHOLD)
        {
            points.push(candidate);
        }
    }
    let inputs: Vec<f64> = points.concat();
    let stack = ntk::kernel_stack(&inputs, d, depth)?;
    let theta = &stack.theta;

    let mut coef_rng = seed::rng(seed::derive(seed, "synth-coefficients"));
    let labels = loop {
        let alpha: Vec<f64> = (0..n_train)
            .map(|_| coef_rng.sample(StandardNormal))
            .collect();
        let scores: Vec<f64> = (0..total)
            .map(|i| (0..n_train).map(|j| alpha[j] * theta[(i, j)]).sum())
            .collect();
        if scores.iter().all(|s: &f64| s.abs() >= 1e-6) {
            break scores
                .iter()
                .map(|&s| if s > 0.0 { 1.0 } else { -1.0 })
                .collect::<Vec<f64>>();
        }
    };

    let meta = |part: &str| DatasetMeta {
        source: format!("synth-ntk n={n_train} d={d} L={depth} {part}"),
        seed: Some(seed),
        flip_ratio: 0.0,
    };
    let train = LabeledDataset::new(
        inputs[..n_train * d].to_vec(),
        labels[..n_train].to_vec(),
        d,
        meta("train"),
    )?;
    let test = if n_test > 0 {
        Some(LabeledDataset::new(
            inputs[n_train * d..].to_vec(),
            labels[n_train..].to_vec(),
            d,
            meta("test"),
        )?)
    } else {
        None
    };
    Ok((train, test))
}

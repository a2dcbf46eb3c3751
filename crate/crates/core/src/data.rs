//! Dataset loading (MNIST IDX, Iris CSV), stratified splits, batching, and
//! the binary checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Layer, NetworkParams, NetworkSpec};
use crate::numkit::{Matrix, Rng};
use crate::train::AdamState;
use crate::ugmm::UgmmLayerParams;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-feature standardisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant features.
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn compute(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mut mean = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut Matrix) {
        for b in 0..x.rows() {
            for ((v, m), s) in x.row_mut(b).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub class_count: usize,
    /// Label names by class index, when the source has them.
    pub class_names: Vec<String>,
    /// Training-split statistics the features were standardised with.
    pub feature_stats: Option<FeatureStats>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, class_count: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Data(format!("{} samples but {} labels", x.rows(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} outside 0..{class_count}")));
        }
        if !x.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self { x, y, class_count, class_names: Vec::new(), feature_stats: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
            feature_stats: self.feature_stats.clone(),
        }
    }

    /// The first `n` samples (all of them if there are fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{}: truncated IDX header", path.display())))
}

/// Parses an IDX3 image file into `count × (rows·cols)` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let pixels = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != pixels {
        return Err(Error::Data(format!(
            "{}: header promises {count}x{rows}x{cols} = {pixels} pixel bytes, file has {}",
            path.display(),
            body.len()
        )));
    }
    Matrix::from_vec(count, rows * cols, body.iter().map(|&p| f64::from(p) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Data(format!(
            "{}: header promises {count} labels, file has {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.iter().map(|&l| usize::from(l)).collect())
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_file(images_path)?, images_path)?;
    let y = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if x.rows() != y.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels ({} / {})",
            x.rows(),
            y.len(),
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut ds = Dataset::new(x, y, 10)?;
    ds.class_names = (0..10).map(|d| d.to_string()).collect();
    Ok(ds)
}

/// Loads the official train or test pair from a directory holding the four
/// uncompressed IDX files under their usual names.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Four numeric columns and a species label per row. A first line whose
/// first field is not a number is treated as a header. Species map to class
/// indices in order of first appearance.
pub fn load_iris(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_iris(&text, path)
}

pub fn parse_iris(text: &str, path: &Path) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let bad = |why: &str| Error::Data(format!("{} line {}: {why}: `{line}`", path.display(), i + 1));
        if fields.len() != 5 {
            return Err(bad(&format!("expected 5 fields, found {}", fields.len())));
        }
        let mut feats = Vec::with_capacity(4);
        for f in &fields[..4] {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => feats.push(v),
                _ => return Err(bad(&format!("`{f}` is not a number"))),
            }
        }
        let species = fields[4];
        if species.is_empty() || species.parse::<f64>().is_ok() {
            return Err(bad("missing species label"));
        }
        let class = match names.iter().position(|n| n == species) {
            Some(c) => c,
            None if names.len() < 3 => {
                names.push(species.to_string());
                names.len() - 1
            }
            None => return Err(bad(&format!("unknown species `{species}` (already saw {names:?})"))),
        };
        rows.push(feats);
        labels.push(class);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    let mut ds = Dataset::new(Matrix::from_rows(&rows)?, labels, names.len())?;
    ds.class_names = names;
    Ok(ds)
}

/// Per-class shuffled split. Each class contributes `round(n_c · test_fraction)`
/// samples to the test set (at least one, and at least one left for
/// training). Both halves are standardised with training statistics.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("test_fraction", format!("must lie in (0, 1), got {test_fraction}")));
    }
    let mut rng = Rng::new(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..ds.class_count {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!("class {class} has a single sample; cannot split")));
        }
        rng.shuffle(&mut members);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let mut train = ds.subset(&train_idx);
    let mut test = ds.subset(&test_idx);
    let stats = FeatureStats::compute(&train.x);
    stats.apply(&mut train.x);
    stats.apply(&mut test.x);
    train.feature_stats = Some(stats.clone());
    test.feature_stats = Some(stats);
    Ok((train, test))
}

/// Index blocks covering `0..n` exactly once, in shuffled order when asked.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Lazily materialised minibatches.
pub struct Batches<'a> {
    ds: &'a Dataset,
    blocks: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.blocks.next()?;
        let y = idx.iter().map(|&i| self.ds.y[i]).collect();
        Some((self.ds.x.select_rows(&idx), y))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.blocks.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// The shuffle permutation is drawn from `rng` up front, when this is called.
pub fn batches<'a>(ds: &'a Dataset, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Batches<'a> {
    Batches { ds, blocks: batch_indices(ds.len(), batch_size, shuffle, rng).into_iter() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Iris,
    Mnist,
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetName::Iris => "iris",
            DatasetName::Mnist => "mnist",
        })
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iris" => Ok(DatasetName::Iris),
            "mnist" => Ok(DatasetName::Mnist),
            other => Err(Error::config("dataset.name", format!("unknown dataset `{other}`"))),
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Where a dataset lives and how it is split. Iris is split with
/// [`stratified_split`]; MNIST uses its official train/test files, with an
/// optional cap on the number of training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub name: DatasetName,
    /// Iris: the CSV file. MNIST: the directory with the IDX files.
    pub path: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the Iris split; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    /// MNIST: use only the first `train_limit` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
}

impl DataSource {
    /// Loads `(train, test)`. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path, run_seed: u64) -> Result<(Dataset, Dataset)> {
        let path = if self.path.is_absolute() { self.path.clone() } else { base.join(&self.path) };
        match self.name {
            DatasetName::Iris => {
                let ds = load_iris(&path)?;
                stratified_split(&ds, self.test_fraction, self.split_seed.unwrap_or(run_seed))
            }
            DatasetName::Mnist => {
                let mut train = load_mnist_dir(&path, true)?;
                if let Some(n) = self.train_limit {
                    train = train.head(n);
                }
                let test = load_mnist_dir(&path, false)?;
                Ok((train, test))
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UGMMNNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    /// Data the network was trained on, so evaluation can rebuild the split.
    pub source: Option<DataSource>,
    pub params: NetworkParams,
    pub adam: AdamState,
    pub epoch: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: NetworkSpec,
    source: Option<DataSource>,
    epoch: u64,
    adam_t: u64,
}

fn zeros_for(spec: &NetworkSpec) -> Result<NetworkParams> {
    spec.validate().map_err(|e| Error::Checkpoint(format!("embedded spec is invalid: {e}")))?;
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| match spec.kind {
            crate::net::ModelKind::Ugmm => Layer::Ugmm(UgmmLayerParams::zeros(w[0], w[1])),
            crate::net::ModelKind::Ffnn => Layer::Dense(crate::net::DenseLayerParams::zeros(w[0], w[1])),
        })
        .collect();
    Ok(NetworkParams::new(layers)?.with_component_dropout(spec))
}

/// Little-endian layout: 8-byte magic, `u32` version, `u64` header length,
/// JSON header (spec, data source, epoch, Adam step), then every tensor of
/// the parameters, the first moments and the second moments in declaration
/// order, each as a `u64` length followed by that many `f64`s.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if !ckpt.params.matches(&ckpt.spec) {
        return Err(Error::Checkpoint("parameters do not match the spec".into()));
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        spec: ckpt.spec.clone(),
        source: ckpt.source.clone(),
        epoch: ckpt.epoch,
        adam_t: ckpt.adam.t,
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for group in [&ckpt.params, &ckpt.adam.m, &ckpt.adam.v] {
        for t in group.tensors() {
            w.write_all(&(t.len() as u64).to_le_bytes()).map_err(io)?;
            for v in t {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fill(&mut self, dst: &mut [f64], what: &str) -> Result<()> {
        let len = self.u64()? as usize;
        if len != dst.len() {
            return Err(Error::Checkpoint(format!(
                "{what}: tensor has {len} values, spec needs {}",
                dst.len()
            )));
        }
        let raw = self.take(len * 8)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.u64()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut params = zeros_for(&header.spec)?;
    let mut adam = AdamState::new(&params);
    adam.t = header.adam_t;
    for (group, what) in [(&mut params, "parameters"), (&mut adam.m, "first moments"), (&mut adam.v, "second moments")] {
        for t in group.tensors_mut() {
            r.fill(t, what)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { spec: header.spec, source: header.source, params, adam, epoch: header.epoch })
}

//! Datasets, federated partitioning and per-node splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, purpose};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Minimum bootstrap size before capping at the validation set size.
pub const BOOTSTRAP_MIN: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Image { height: usize, width: usize },
    Tabular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub kind: DataKind,
}

impl Dataset {
    pub fn new(features: Array2<f32>, labels: Vec<usize>, num_classes: usize, kind: DataKind) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes = {num_classes}")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let DataKind::Image { height, width } = kind {
            if height * width != features.ncols() {
                return Err(Error::Shape(format!(
                    "{height}x{width} image but {} feature columns",
                    features.ncols()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            kind: self.kind,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.kind != other.kind || self.dims() != other.dims() {
            return Err(Error::Shape("cannot concatenate datasets of different kinds".into()));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(features, labels, self.num_classes.max(other.num_classes), self.kind)
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated IDX {} file", self.what)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses an IDX3 image file: returns (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader { bytes, pos: 0, what: "image" };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(count * rows * cols)?.to_vec();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader { bytes, pos: 0, what: "label" };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = r.u32_be()? as usize;
    Ok(r.take(count)?.to_vec())
}

/// Builds an image dataset from raw IDX contents. Pixels are scaled to [0, 1].
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let features = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    Dataset::new(
        features,
        labels.into_iter().map(usize::from).collect(),
        num_classes,
        DataKind::Image {
            height: rows,
            width: cols,
        },
    )
}

pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_dataset(&images, &labels)
}

/// Encodes a dataset back to IDX byte streams (images, labels).
pub fn to_idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let DataKind::Image { height, width } = ds.kind else {
        return Err(Error::InvalidArgument("IDX export needs an image dataset".into()));
    };
    let mut images = Vec::with_capacity(16 + ds.features.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&(height as u32).to_be_bytes());
    images.extend_from_slice(&(width as u32).to_be_bytes());
    images.extend(ds.features.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} > 255")))?);
    }
    Ok((images, labels))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class structure (means, glyph shapes) is drawn from this fixed stream so
/// every data seed shares the same classes.
const CLASS_STRUCTURE_SEED: u64 = 0x5EED_C1A5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    /// Standard deviation of the per-class mean offsets.
    #[serde(default = "default_separation")]
    pub separation: f32,
    /// Within-class standard deviation.
    #[serde(default = "default_spread")]
    pub spread: f32,
}

fn default_separation() -> f32 {
    0.5
}

fn default_spread() -> f32 {
    1.0
}

impl TabularSpec {
    pub fn new(classes: usize, dims: usize, samples: usize) -> Self {
        TabularSpec {
            classes,
            dims,
            samples,
            separation: default_separation(),
            spread: default_spread(),
        }
    }
}

/// Gaussian class clusters around fixed per-class means, balanced classes.
pub fn synth_tabular(spec: &TabularSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!("classes = {}", spec.classes)));
    }
    let mut structure = seed::rng(CLASS_STRUCTURE_SEED, &[spec.classes as u64, spec.dims as u64]);
    let means: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dims)
                .map(|_| spec.separation * structure.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut rng = seed::rng(seed, &[purpose::DATA]);
    let labels = balanced_labels(spec.classes, spec.samples, &mut rng);
    let mut features = Array2::<f32>::zeros((spec.samples, spec.dims));
    for (mut row, &label) in features.rows_mut().into_iter().zip(&labels) {
        for (v, &mu) in row.iter_mut().zip(&means[label]) {
            *v = mu + spec.spread * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Dataset::new(features, labels, spec.classes, DataKind::Tabular)
}

/// `samples / classes` labels per class (remainder to the lowest classes), shuffled.
fn balanced_labels(classes: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub classes: usize,
    pub samples: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Std-dev (pixels) of per-sample stroke endpoint jitter.
    #[serde(default = "default_jitter")]
    pub jitter: f32,
}

fn default_side() -> usize {
    28
}

fn default_jitter() -> f32 {
    1.5
}

impl ImageSpec {
    pub fn new(classes: usize, samples: usize) -> Self {
        ImageSpec {
            classes,
            samples,
            side: default_side(),
            jitter: default_jitter(),
        }
    }
}

type Stroke = [(f32, f32); 2];

/// Handwriting-like glyph images: each class is a fixed set of strokes drawn
/// inside a central box (borders stay blank, as in MNIST), rendered per
/// sample with endpoint jitter, a small translation and intensity variation.
pub fn synth_images(spec: &ImageSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!("classes = {}", spec.classes)));
    }
    if spec.side < 12 {
        return Err(Error::InvalidArgument(format!("image side {} < 12", spec.side)));
    }
    let side = spec.side as f32;
    // Ink reaches 2.2px from a stroke; this keeps a 5px border blank.
    let margin = (side * 0.26).min(7.3);
    let lo = side * 0.25;
    let hi = side * 0.75;
    let mut structure = seed::rng(CLASS_STRUCTURE_SEED, &[spec.classes as u64, spec.side as u64]);
    let glyphs: Vec<Vec<Stroke>> = (0..spec.classes)
        .map(|_| {
            let n_strokes = structure.random_range(2..=4);
            let mut pen = (structure.random_range(lo..hi), structure.random_range(lo..hi));
            (0..n_strokes)
                .map(|_| {
                    let next = (structure.random_range(lo..hi), structure.random_range(lo..hi));
                    let stroke = [pen, next];
                    pen = next;
                    stroke
                })
                .collect()
        })
        .collect();

    let mut rng = seed::rng(seed, &[purpose::DATA]);
    let labels = balanced_labels(spec.classes, spec.samples, &mut rng);
    let pixels = spec.side * spec.side;
    let mut features = Array2::<f32>::zeros((spec.samples, pixels));
    for (mut row, &label) in features.rows_mut().into_iter().zip(&labels) {
        let dx = rng.random_range(-1i32..=1) as f32;
        let dy = rng.random_range(-1i32..=1) as f32;
        let gain = rng.random_range(0.75f32..1.0);
        let mut jit = |v: f32| v + spec.jitter * rng.sample::<f32, _>(StandardNormal);
        let clamp = |v: f32| v.clamp(margin, side - margin);
        let strokes: Vec<Stroke> = glyphs[label]
            .iter()
            .map(|s| {
                [
                    (clamp(jit(s[0].0) + dx), clamp(jit(s[0].1) + dy)),
                    (clamp(jit(s[1].0) + dx), clamp(jit(s[1].1) + dy)),
                ]
            })
            .collect();
        for (p, v) in row.iter_mut().enumerate() {
            let x = (p % spec.side) as f32 + 0.5;
            let y = (p / spec.side) as f32 + 0.5;
            let d = strokes
                .iter()
                .map(|s| segment_distance((x, y), s))
                .fold(f32::INFINITY, f32::min);
            let ink = (2.2 - d).clamp(0.0, 1.0);
            *v = (ink * gain).clamp(0.0, 1.0);
        }
    }
    Dataset::new(
        features,
        labels,
        spec.classes,
        DataKind::Image {
            height: spec.side,
            width: spec.side,
        },
    )
}

fn segment_distance(p: (f32, f32), s: &Stroke) -> f32 {
    let (ax, ay) = s[0];
    let (bx, by) = s[1];
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - ax) * vx + (p.1 - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * vx - p.0, ay + t * vy - p.1);
    (cx * cx + cy * cy).sqrt()
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub nodes: usize,
    pub seed: u64,
    /// Fraction of each node's allocation held out for testing (6:1 train:test).
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fraction of the remaining training allocation used for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

pub fn default_test_fraction() -> f64 {
    1.0 / 7.0
}

pub fn default_val_fraction() -> f64 {
    0.1
}

impl PartitionConfig {
    pub fn new(mode: PartitionMode, nodes: usize, seed: u64) -> Self {
        PartitionConfig {
            mode,
            nodes,
            seed,
            test_fraction: default_test_fraction(),
            val_fraction: default_val_fraction(),
        }
    }
}

/// Sample indices (into the partitioned dataset) of one node's splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub bootstrap: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NodeData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub bootstrap: Dataset,
    pub indices: SplitIndices,
}

/// Node id → split indices; serialized as the partition manifest.
pub type PartitionManifest = BTreeMap<usize, SplitIndices>;

pub fn manifest(nodes: &[NodeData]) -> PartitionManifest {
    nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (i, n.indices.clone()))
        .collect()
}

/// Splits `ds` across `cfg.nodes` nodes and carves train/val/test/bootstrap.
pub fn partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Vec<NodeData>> {
    if cfg.nodes == 0 {
        return Err(Error::InvalidArgument("zero nodes".into()));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidArgument("split fractions must lie in [0, 1)".into()));
    }
    if ds.len() < cfg.nodes * ds.num_classes {
        return Err(Error::InsufficientSamples(format!(
            "{} samples cannot give {} nodes {} samples each",
            ds.len(),
            cfg.nodes,
            ds.num_classes
        )));
    }
    let allocations = match cfg.mode {
        PartitionMode::Iid => allocate_iid(ds, cfg),
        PartitionMode::Dirichlet { alpha } => allocate_dirichlet(ds, cfg, alpha)?,
    };

    allocations
        .into_iter()
        .enumerate()
        .map(|(node, alloc)| split_node(ds, alloc, cfg, node))
        .collect()
}

fn class_pools(ds: &Dataset, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    pools
}

/// Deals every class round-robin, continuing the node cursor across classes,
/// so sizes and per-class counts differ by at most one.
fn allocate_iid(ds: &Dataset, cfg: &PartitionConfig) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(cfg.seed, &[purpose::PARTITION]);
    let mut out = vec![Vec::new(); cfg.nodes];
    let mut cursor = 0;
    for pool in class_pools(ds, &mut rng) {
        for idx in pool {
            out[cursor % cfg.nodes].push(idx);
            cursor += 1;
        }
    }
    for alloc in &mut out {
        alloc.shuffle(&mut rng);
    }
    out
}

const DIRICHLET_MAX_ATTEMPTS: usize = 1000;

/// Per class, node proportions ~ Dir(alpha) with nodes already at the mean
/// allocation size excluded; counts by largest remainder. Redrawn until every
/// node holds at least `num_classes` samples.
fn allocate_dirichlet(ds: &Dataset, cfg: &PartitionConfig, alpha: f64) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet alpha {alpha}: {e}")))?;
    let mut rng = seed::rng(cfg.seed, &[purpose::PARTITION]);
    let mean_size = ds.len() as f64 / cfg.nodes as f64;
    let min_size = ds.num_classes;

    for _ in 0..DIRICHLET_MAX_ATTEMPTS {
        let mut out = vec![Vec::new(); cfg.nodes];
        for pool in class_pools(ds, &mut rng) {
            let mut props: Vec<f64> = (0..cfg.nodes)
                .map(|k| {
                    let g = gamma.sample(&mut rng);
                    if (out[k].len() as f64) < mean_size {
                        g
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = props.iter().sum();
            if total <= 0.0 {
                props.iter_mut().for_each(|p| *p = 1.0);
            }
            let counts = largest_remainder(&props, pool.len());
            let mut start = 0;
            for (k, c) in counts.into_iter().enumerate() {
                out[k].extend_from_slice(&pool[start..start + c]);
                start += c;
            }
        }
        if out.iter().all(|a| a.len() >= min_size) {
            for alloc in &mut out {
                alloc.shuffle(&mut rng);
            }
            return Ok(out);
        }
    }
    Err(Error::InsufficientSamples(format!(
        "no Dirichlet draw gave every node {min_size} samples after {DIRICHLET_MAX_ATTEMPTS} attempts"
    )))
}

/// Integer counts proportional to `weights` summing exactly to `total`.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Largest fractional part first; ties to the lower index.
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn split_node(ds: &Dataset, alloc: Vec<usize>, cfg: &PartitionConfig, node: usize) -> Result<NodeData> {
    let n = alloc.len();
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n.saturating_sub(2));
    let rest = n - n_test;
    let n_val = ((rest as f64 * cfg.val_fraction).round() as usize).clamp(1, rest.saturating_sub(1));
    if n < 3 || rest - n_val == 0 {
        return Err(Error::InsufficientSamples(format!("node {node} received {n} samples")));
    }
    let test = alloc[..n_test].to_vec();
    let val = alloc[n_test..n_test + n_val].to_vec();
    let train = alloc[n_test + n_val..].to_vec();
    let bs_seed = seed::derive(cfg.seed, &[purpose::BOOTSTRAP, node as u64]);
    let bootstrap: Vec<usize> = bootstrap_positions(val.len(), bs_seed)
        .into_iter()
        .map(|p| val[p])
        .collect();
    Ok(NodeData {
        train: ds.subset(&train),
        val: ds.subset(&val),
        test: ds.subset(&test),
        bootstrap: ds.subset(&bootstrap),
        indices: SplitIndices {
            train,
            val,
            test,
            bootstrap,
        },
    })
}

/// `min(n, max(ceil(n / 3), 300))`.
pub fn bootstrap_size(val_len: usize) -> usize {
    val_len.min(val_len.div_ceil(3).max(BOOTSTRAP_MIN))
}

fn bootstrap_positions(val_len: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[purpose::BOOTSTRAP]);
    let mut picks = index::sample(&mut rng, val_len, bootstrap_size(val_len)).into_vec();
    picks.sort_unstable();
    picks
}

/// Uniform sample without replacement from a node's validation set.
pub fn sample_bootstrap(val: &Dataset, seed: u64) -> Result<Dataset> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(val.subset(&bootstrap_positions(val.len(), seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f32);
        Dataset::new(features, labels, classes, DataKind::Tabular).unwrap()
    }

    fn idx_pair(count: u32, rows: u32, cols: u32, fill: u8) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for v in [count, rows, cols] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&count.to_be_bytes());
        labels.extend((0..count).map(|i| (i % 10) as u8));
        (images, labels)
    }

    #[test]
    fn idx_well_formed() {
        let (images, labels) = idx_pair(10, 28, 28, 255);
        let ds = idx_dataset(&images, &labels).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.dims(), 784);
        assert_eq!(ds.num_classes, 10);
        assert!(ds.features.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_errors() {
        let (mut images, labels) = idx_pair(2, 4, 4, 7);
        let truncated = &images[..images.len() - 1];
        assert!(matches!(idx_dataset(truncated, &labels), Err(Error::Format(_))));
        images[3] = 0x01;
        assert!(matches!(idx_dataset(&images, &labels), Err(Error::Format(_))));
        let (images, _) = idx_pair(2, 4, 4, 7);
        let (_, labels3) = idx_pair(3, 4, 4, 7);
        assert!(matches!(idx_dataset(&images, &labels3), Err(Error::Format(_))));
    }

    #[test]
    fn idx_round_trip_through_files() {
        let ds = synth_images(&ImageSpec::new(3, 12), 1).unwrap();
        let (img, lab) = to_idx_bytes(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        let back = load_idx_images(&ip, &lp).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.features.iter().zip(ds.features.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn tabular_deterministic_and_balanced() {
        let spec = TabularSpec::new(2, 10, 600);
        let a = synth_tabular(&spec, 3).unwrap();
        assert_eq!(a, synth_tabular(&spec, 3).unwrap());
        assert_eq!(a.class_counts(), vec![300, 300]);
        assert_ne!(a, synth_tabular(&spec, 4).unwrap());
    }

    #[test]
    fn tabular_linearly_separable_by_default() {
        // Nearest-class-mean probe, a linear classifier for shared isotropic spread.
        let ds = synth_tabular(&TabularSpec::new(2, 20, 600), 11).unwrap();
        let mut means = Array2::<f64>::zeros((2, ds.dims()));
        let counts = ds.class_counts();
        for (row, &l) in ds.features.rows().into_iter().zip(&ds.labels) {
            for (m, &v) in means.row_mut(l).iter_mut().zip(row.iter()) {
                *m += v as f64 / counts[l] as f64;
            }
        }
        let correct = ds
            .features
            .rows()
            .into_iter()
            .zip(&ds.labels)
            .filter(|(row, &l)| {
                let d = |c: usize| {
                    row.iter()
                        .zip(means.row(c).iter())
                        .map(|(&x, &m)| (x as f64 - m).powi(2))
                        .sum::<f64>()
                };
                (if d(0) < d(1) { 0 } else { 1 }) == l
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.9, "accuracy {correct}/600");
    }

    #[test]
    fn images_have_blank_corner_and_valid_range() {
        let ds = synth_images(&ImageSpec::new(10, 200), 5).unwrap();
        assert_eq!(ds.dims(), 784);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for row in ds.features.rows() {
            for r in 0..5 {
                for c in 0..5 {
                    assert_eq!(row[r * 28 + c], 0.0);
                }
            }
            assert!(row.iter().any(|&v| v > 0.5));
        }
    }

    #[test]
    fn iid_exact_divisibility() {
        let ds = labelled((0..100).map(|i| i % 10).collect(), 10);
        let cfg = PartitionConfig::new(PartitionMode::Iid, 10, 9);
        let allocs = allocate_iid(&ds, &cfg);
        for alloc in &allocs {
            assert_eq!(alloc.len(), 10);
            let classes: HashSet<usize> = alloc.iter().map(|&i| ds.labels[i]).collect();
            assert_eq!(classes.len(), 10);
        }
    }

    #[test]
    fn partition_disjoint_and_conserving() {
        let ds = labelled((0..1003).map(|i| i % 7).collect(), 7);
        for mode in [PartitionMode::Iid, PartitionMode::Dirichlet { alpha: 0.5 }] {
            let nodes = partition(&ds, &PartitionConfig::new(mode, 6, 2)).unwrap();
            let mut seen = HashSet::new();
            let mut total = 0;
            for n in &nodes {
                for &i in n.indices.train.iter().chain(&n.indices.val).chain(&n.indices.test) {
                    assert!(seen.insert(i), "index {i} assigned twice");
                }
                total += n.train.len() + n.val.len() + n.test.len();
                let val: HashSet<_> = n.indices.val.iter().collect();
                assert!(n.indices.bootstrap.iter().all(|i| val.contains(i)));
            }
            assert_eq!(total, ds.len());
        }
    }

    #[test]
    fn iid_histograms_within_one() {
        let ds = labelled((0..1037).map(|i| (i * 7) % 10).collect(), 10);
        for alloc in [allocate_iid(&ds, &PartitionConfig::new(PartitionMode::Iid, 7, 1))] {
            for c in 0..10 {
                let per_node: Vec<usize> = alloc
                    .iter()
                    .map(|a| a.iter().filter(|&&i| ds.labels[i] == c).count())
                    .collect();
                let (lo, hi) = (per_node.iter().min().unwrap(), per_node.iter().max().unwrap());
                assert!(hi - lo <= 1, "class {c}: {per_node:?}");
            }
        }
    }

    #[test]
    fn dirichlet_skews_class_mix() {
        let ds = labelled((0..5000).map(|i| i % 10).collect(), 10);
        for seed in 0..5 {
            let cfg = PartitionConfig::new(PartitionMode::Dirichlet { alpha: 0.5 }, 10, seed);
            let allocs = allocate_dirichlet(&ds, &cfg, 0.5).unwrap();
            let skewed = allocs.iter().any(|a| {
                let mut counts = [0usize; 10];
                a.iter().for_each(|&i| counts[ds.labels[i]] += 1);
                counts.iter().any(|&c| c as f64 / a.len() as f64 > 2.0 * 0.1)
            });
            assert!(skewed, "seed {seed} produced no skewed node");
        }
    }

    #[test]
    fn split_ratios() {
        let ds = labelled((0..7000).map(|i| i % 10).collect(), 10);
        let nodes = partition(&ds, &PartitionConfig::new(PartitionMode::Iid, 10, 0)).unwrap();
        for n in &nodes {
            assert_eq!(n.test.len(), 100);
            assert_eq!(n.val.len(), 60);
            assert_eq!(n.train.len(), 540);
            assert_eq!(n.bootstrap.len(), 60);
        }
    }

    #[test]
    fn insufficient_samples() {
        let ds = labelled((0..20).map(|i| i % 10).collect(), 10);
        let cfg = PartitionConfig::new(PartitionMode::Iid, 3, 0);
        assert!(matches!(partition(&ds, &cfg), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn bootstrap_sizes() {
        assert_eq!(bootstrap_size(1200), 400);
        assert_eq!(bootstrap_size(200), 200);
        assert_eq!(bootstrap_size(600), 300);
        assert_eq!(bootstrap_size(1), 1);
    }

    #[test]
    fn bootstrap_sampling_is_deterministic_subset() {
        let val = labelled((0..1200).map(|i| i % 3).collect(), 3);
        let a = sample_bootstrap(&val, 4).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, sample_bootstrap(&val, 4).unwrap());
        let picks = bootstrap_positions(1200, 4);
        let unique: HashSet<_> = picks.iter().collect();
        assert_eq!(unique.len(), 400);
        assert!(sample_bootstrap(&labelled(vec![], 3), 0).is_err());
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 2.0], 5), vec![0, 5]);
    }
}

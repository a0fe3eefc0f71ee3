//! Experiment files.
//!
//! A file is TOML with flat sections. It is first read into raw tables that
//! reject unknown keys, then checked field by field so a single pass reports
//! every problem. [`ExperimentConfig::to_toml`] writes a file with every
//! default filled in that parses back to an identical config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregatorKind, NormRatio, SentinelConfig};
use crate::attacks::{AttackConfig, AttackKind, Corner, Trigger};
use crate::data::{
    default_test_fraction, default_val_fraction, DataKind, ImageSpec, PartitionConfig, PartitionMode, TabularSpec,
};
use crate::error::{Error, Result};
use crate::metrics::F1Average;
use crate::model::{AdamConfig, MlpSpec, TrainConfig};
use crate::sim::{FederationConfig, NetworkConfig, Topology};

/// Directory against which relative IDX paths are resolved, when set.
pub const DATA_DIR_ENV: &str = "DFL_DATA_DIR";

/// Default backdoor trigger on tabular data: the first seven features.
pub const DEFAULT_TABULAR_TRIGGER_K: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    SyntheticImages(ImageSpec),
    SyntheticTabular(TabularSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        limit: Option<usize>,
    },
}

impl DatasetSource {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DatasetSource::SyntheticImages(_) => "synthetic_images",
            DatasetSource::SyntheticTabular(_) => "synthetic_tabular",
            DatasetSource::Idx { .. } => "idx",
        }
    }

    fn is_tabular(&self) -> bool {
        matches!(self, DatasetSource::SyntheticTabular(_))
    }

    fn classes(&self) -> Option<usize> {
        match self {
            DatasetSource::SyntheticImages(s) => Some(s.classes),
            DatasetSource::SyntheticTabular(s) => Some(s.classes),
            DatasetSource::Idx { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Label used in summaries and plot titles.
    pub name: String,
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repeats: usize,
    pub output_dir: Option<PathBuf>,
    /// Write every node's parameters after every round.
    pub checkpoints: bool,
    pub f1_average: F1Average,
    pub dataset: DatasetConfig,
    pub partition: PartitionMode,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
    /// `federation.seed` always equals `seed`.
    pub federation: FederationConfig,
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        raw.into_config()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    /// Every field written out explicitly.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&RawConfig::from_config(self)).map_err(|e| Error::Format(format!("config echo: {e}")))
    }

    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            mode: self.partition,
            nodes: self.federation.n_nodes,
            seed,
            test_fraction: self.test_fraction,
            val_fraction: self.val_fraction,
        }
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> MlpSpec {
        MlpSpec::new(input_dim, self.hidden_dims.clone(), num_classes)
    }

    /// Seed of repeat `r`: the experiment seed itself for the first run,
    /// derived seeds for the others.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        if r == 0 {
            self.seed
        } else {
            crate::seed::derive(self.seed, &[crate::seed::purpose::REPEAT, r as u64])
        }
    }

    /// IDX paths: absolute paths as-is, relative ones under `$DFL_DATA_DIR`
    /// when set and otherwise under `base`.
    pub fn resolve_data_path(path: &Path, base: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(path),
            _ => base.join(path),
        }
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    repeats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    checkpoints: Option<bool>,
    f1_average: Option<F1Average>,
    dataset: Option<RawDataset>,
    partition: Option<RawPartition>,
    model: Option<RawModel>,
    train: Option<RawTrain>,
    federation: Option<RawFederation>,
    aggregator: Option<RawAggregator>,
    attack: Option<RawAttack>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    side: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jitter: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dims: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    separation: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spread: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    limit: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    test_fraction: Option<f64>,
    val_fraction: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden_dims: Option<Vec<usize>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs_per_round: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f32>,
    beta1: Option<f32>,
    beta2: Option<f32>,
    eps: Option<f32>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    n_nodes: Option<usize>,
    rounds: Option<usize>,
    topology: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adjacency: Option<Vec<Vec<usize>>>,
    threads: Option<usize>,
    bandwidth_mbps: Option<f64>,
    loss: Option<f64>,
    delay_ms: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAggregator {
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    l_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    norm_ratio: Option<NormRatio>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trim_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    /// Per-node overrides keyed by node id.
    #[serde(skip_serializing_if = "Option::is_none")]
    node: Option<BTreeMap<String, RawAggregator>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    src: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger_corner: Option<Corner>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger_k: Option<usize>,
}

/// Names of the listed `Option` fields that are set.
macro_rules! present {
    ($s:expr; $($f:ident),*) => {{
        let mut v: Vec<&'static str> = Vec::new();
        $( if $s.$f.is_some() { v.push(stringify!($f)); } )*
        v
    }};
}

/// Collects field-level problems.
#[derive(Default)]
struct Problems(Vec<String>);

impl Problems {
    fn push(&mut self, msg: impl Into<String>) {
        self.0.push(msg.into());
    }

    fn missing(&mut self, field: &str) {
        self.push(format!("{field} is required"));
    }

    fn unused(&mut self, section: &str, set: &[&str], allowed: &[&str], kind: &str) {
        for f in set.iter().filter(|f| !allowed.contains(f)) {
            self.push(format!("{section}.{f} does not apply to kind = \"{kind}\""));
        }
    }

    fn positive(&mut self, field: &str, v: usize) {
        if v == 0 {
            self.push(format!("{field} must be at least 1"));
        }
    }

    fn unit(&mut self, field: &str, v: f64) {
        if !(0.0..=1.0).contains(&v) {
            self.push(format!("{field} = {v} must lie in [0, 1]"));
        }
    }
}

impl RawConfig {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut p = Problems::default();
        let seed = self.seed.unwrap_or_else(|| {
            p.missing("seed");
            0
        });
        let repeats = self.repeats.unwrap_or(1);
        p.positive("repeats", repeats);

        let dataset = match self.dataset {
            Some(d) => d.into_config(&mut p),
            None => {
                p.missing("[dataset]");
                None
            }
        };
        let is_tabular = dataset.as_ref().is_some_and(|d| d.source.is_tabular());
        // A missing class count is already reported; skip label checks then.
        let classes = dataset.as_ref().and_then(|d| d.source.classes()).filter(|&c| c > 0);

        let raw_part = self.partition.unwrap_or_default();
        let partition = raw_part.mode(&mut p);
        let test_fraction = raw_part.test_fraction.unwrap_or_else(default_test_fraction);
        let val_fraction = raw_part.val_fraction.unwrap_or_else(default_val_fraction);
        for (f, v) in [("partition.test_fraction", test_fraction), ("partition.val_fraction", val_fraction)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("{f} = {v} must lie in [0, 1)"));
            }
        }

        let hidden_dims = self.model.and_then(|m| m.hidden_dims).unwrap_or_else(|| {
            if is_tabular {
                vec![256]
            } else {
                vec![256, 128]
            }
        });
        if hidden_dims.contains(&0) {
            p.push("model.hidden_dims entries must be positive");
        }

        let train = self.train.unwrap_or_default().into_config(&mut p);
        let n_nodes = self.federation.as_ref().and_then(|f| f.n_nodes).unwrap_or(10);
        let aggregator = match self.aggregator {
            Some(a) => {
                let overrides = a.overrides(&mut p, n_nodes);
                a.into_config(&mut p, "aggregator").map(|k| (k, overrides))
            }
            None => {
                p.missing("[aggregator]");
                None
            }
        };
        let federation = self.federation.unwrap_or_default().into_config(&mut p, seed, aggregator);
        let attack = self.attack.unwrap_or_default().into_config(&mut p, is_tabular, dataset.as_ref());
        if let Some(a) = &attack {
            p.0.extend(a.problems(classes));
            if let (Some(obs), Some(f)) = (a.observer, &federation) {
                if obs >= f.n_nodes {
                    p.push(format!("attack.observer = {obs} is not a node id (n_nodes = {})", f.n_nodes));
                }
            }
        }

        match (p.0.is_empty(), dataset, partition, federation, attack) {
            (true, Some(dataset), Some(partition), Some(federation), Some(attack)) => Ok(ExperimentConfig {
                seed,
                repeats,
                output_dir: self.output_dir,
                checkpoints: self.checkpoints.unwrap_or(false),
                f1_average: self.f1_average.unwrap_or_default(),
                dataset,
                partition,
                test_fraction,
                val_fraction,
                hidden_dims,
                train,
                federation,
                attack,
            }),
            _ => Err(Error::Config(p.0)),
        }
    }

    fn from_config(c: &ExperimentConfig) -> RawConfig {
        let t = &c.train;
        let fed = &c.federation;
        RawConfig {
            seed: Some(c.seed),
            repeats: Some(c.repeats),
            output_dir: c.output_dir.clone(),
            checkpoints: Some(c.checkpoints),
            f1_average: Some(c.f1_average),
            dataset: Some(RawDataset::from_config(&c.dataset)),
            partition: Some(RawPartition {
                mode: Some(
                    match c.partition {
                        PartitionMode::Iid => "iid",
                        PartitionMode::Dirichlet { .. } => "dirichlet",
                    }
                    .into(),
                ),
                alpha: match c.partition {
                    PartitionMode::Dirichlet { alpha } => Some(alpha),
                    PartitionMode::Iid => None,
                },
                test_fraction: Some(c.test_fraction),
                val_fraction: Some(c.val_fraction),
            }),
            model: Some(RawModel {
                hidden_dims: Some(c.hidden_dims.clone()),
            }),
            train: Some(RawTrain {
                epochs_per_round: Some(t.epochs_per_round),
                batch_size: Some(t.batch_size),
                lr: Some(t.adam.lr),
                beta1: Some(t.adam.beta1),
                beta2: Some(t.adam.beta2),
                eps: Some(t.adam.eps),
            }),
            federation: Some(RawFederation {
                n_nodes: Some(fed.n_nodes),
                rounds: Some(fed.rounds),
                topology: Some(
                    match fed.topology {
                        Topology::Full => "full",
                        Topology::Ring => "ring",
                        Topology::Custom { .. } => "custom",
                    }
                    .into(),
                ),
                adjacency: match &fed.topology {
                    Topology::Custom { adjacency } => Some(adjacency.clone()),
                    _ => None,
                },
                threads: Some(fed.threads),
                bandwidth_mbps: Some(fed.network.bandwidth_mbps),
                loss: Some(fed.network.loss),
                delay_ms: Some(fed.network.delay_ms),
            }),
            aggregator: Some({
                let mut a = RawAggregator::from_kind(&fed.aggregator);
                if !fed.overrides.is_empty() {
                    a.node = Some(
                        fed.overrides
                            .iter()
                            .map(|(id, k)| (id.to_string(), RawAggregator::from_kind(k)))
                            .collect(),
                    );
                }
                a
            }),
            attack: Some(RawAttack::from_config(&c.attack)),
        }
    }
}

impl RawDataset {
    fn into_config(self, p: &mut Problems) -> Option<DatasetConfig> {
        let set = present!(self; name, classes, samples, side, jitter, dims, separation, spread, images, labels, limit);
        let Some(kind) = self.kind.clone() else {
            p.missing("dataset.kind");
            return None;
        };
        let need = |field: &str, v: Option<usize>, p: &mut Problems| -> usize {
            match v {
                Some(v) => {
                    p.positive(&format!("dataset.{field}"), v);
                    v
                }
                None => {
                    p.missing(&format!("dataset.{field}"));
                    0
                }
            }
        };
        let source = match kind.as_str() {
            "synthetic_images" => {
                p.unused("dataset", &set, &["name", "classes", "samples", "side", "jitter"], &kind);
                let mut spec = ImageSpec::new(need("classes", self.classes, p), need("samples", self.samples, p));
                if let Some(side) = self.side {
                    if side < 12 {
                        p.push(format!("dataset.side = {side} must be at least 12"));
                    }
                    spec.side = side;
                }
                if let Some(j) = self.jitter {
                    if !(j.is_finite() && j >= 0.0) {
                        p.push(format!("dataset.jitter = {j} must be non-negative"));
                    }
                    spec.jitter = j;
                }
                DatasetSource::SyntheticImages(spec)
            }
            "synthetic_tabular" => {
                p.unused("dataset", &set, &["name", "classes", "samples", "dims", "separation", "spread"], &kind);
                let mut spec = TabularSpec::new(
                    need("classes", self.classes, p),
                    need("dims", self.dims, p),
                    need("samples", self.samples, p),
                );
                if let Some(s) = self.separation {
                    spec.separation = s;
                }
                if let Some(s) = self.spread {
                    spec.spread = s;
                }
                for (f, v) in [("separation", spec.separation), ("spread", spec.spread)] {
                    if !(v.is_finite() && v >= 0.0) {
                        p.push(format!("dataset.{f} = {v} must be non-negative"));
                    }
                }
                DatasetSource::SyntheticTabular(spec)
            }
            "idx" => {
                p.unused("dataset", &set, &["name", "images", "labels", "limit"], &kind);
                if self.images.is_none() {
                    p.missing("dataset.images");
                }
                if self.labels.is_none() {
                    p.missing("dataset.labels");
                }
                if self.limit == Some(0) {
                    p.push("dataset.limit must be at least 1");
                }
                DatasetSource::Idx {
                    images: self.images.unwrap_or_default(),
                    labels: self.labels.unwrap_or_default(),
                    limit: self.limit,
                }
            }
            other => {
                p.push(format!(
                    "dataset.kind = \"{other}\" is not one of synthetic_images, synthetic_tabular, idx"
                ));
                return None;
            }
        };
        if let DatasetSource::SyntheticImages(ImageSpec { classes, .. }) | DatasetSource::SyntheticTabular(TabularSpec { classes, .. }) = &source {
            if *classes == 1 {
                p.push("dataset.classes must be at least 2");
            }
        }
        Some(DatasetConfig {
            name: self.name.unwrap_or_else(|| source.kind_name().to_string()),
            source,
        })
    }

    fn from_config(d: &DatasetConfig) -> RawDataset {
        let mut raw = RawDataset {
            kind: Some(d.source.kind_name().into()),
            name: Some(d.name.clone()),
            ..Default::default()
        };
        match &d.source {
            DatasetSource::SyntheticImages(s) => {
                raw.classes = Some(s.classes);
                raw.samples = Some(s.samples);
                raw.side = Some(s.side);
                raw.jitter = Some(s.jitter);
            }
            DatasetSource::SyntheticTabular(s) => {
                raw.classes = Some(s.classes);
                raw.samples = Some(s.samples);
                raw.dims = Some(s.dims);
                raw.separation = Some(s.separation);
                raw.spread = Some(s.spread);
            }
            DatasetSource::Idx { images, labels, limit } => {
                raw.images = Some(images.clone());
                raw.labels = Some(labels.clone());
                raw.limit = *limit;
            }
        }
        raw
    }
}

impl RawPartition {
    fn mode(&self, p: &mut Problems) -> Option<PartitionMode> {
        match self.mode.as_deref().unwrap_or("iid") {
            "iid" => {
                if self.alpha.is_some() {
                    p.push("partition.alpha does not apply to mode = \"iid\"");
                }
                Some(PartitionMode::Iid)
            }
            "dirichlet" => match self.alpha {
                Some(alpha) if alpha > 0.0 && alpha.is_finite() => Some(PartitionMode::Dirichlet { alpha }),
                Some(alpha) => {
                    p.push(format!("partition.alpha = {alpha} must be positive"));
                    None
                }
                None => {
                    p.missing("partition.alpha");
                    None
                }
            },
            other => {
                p.push(format!("partition.mode = \"{other}\" is not one of iid, dirichlet"));
                None
            }
        }
    }
}

impl RawTrain {
    fn into_config(self, p: &mut Problems) -> TrainConfig {
        let d = TrainConfig::default();
        let adam = AdamConfig {
            lr: self.lr.unwrap_or(d.adam.lr),
            beta1: self.beta1.unwrap_or(d.adam.beta1),
            beta2: self.beta2.unwrap_or(d.adam.beta2),
            eps: self.eps.unwrap_or(d.adam.eps),
        };
        let cfg = TrainConfig {
            epochs_per_round: self.epochs_per_round.unwrap_or(d.epochs_per_round),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            adam,
            seed: 0,
        };
        p.positive("train.epochs_per_round", cfg.epochs_per_round);
        p.positive("train.batch_size", cfg.batch_size);
        if !(adam.lr > 0.0 && adam.lr.is_finite()) {
            p.push(format!("train.lr = {} must be positive", adam.lr));
        }
        for (f, v) in [("train.beta1", adam.beta1), ("train.beta2", adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("{f} = {v} must lie in [0, 1)"));
            }
        }
        if !(adam.eps > 0.0 && adam.eps.is_finite()) {
            p.push(format!("train.eps = {} must be positive", adam.eps));
        }
        cfg
    }
}

impl RawFederation {
    fn into_config(
        self,
        p: &mut Problems,
        seed: u64,
        aggregator: Option<(AggregatorKind, BTreeMap<usize, AggregatorKind>)>,
    ) -> Option<FederationConfig> {
        let n_nodes = self.n_nodes.unwrap_or(10);
        p.positive("federation.n_nodes", n_nodes);
        let topology = match self.topology.as_deref().unwrap_or("full") {
            "full" | "ring" if self.adjacency.is_some() => {
                p.push("federation.adjacency only applies to topology = \"custom\"");
                None
            }
            "full" => Some(Topology::Full),
            "ring" => Some(Topology::Ring),
            "custom" => match self.adjacency {
                Some(adjacency) => {
                    let t = Topology::Custom { adjacency };
                    if let Err(e) = t.adjacency(n_nodes) {
                        p.push(format!("federation.adjacency: {e}"));
                    }
                    Some(t)
                }
                None => {
                    p.missing("federation.adjacency");
                    None
                }
            },
            other => {
                p.push(format!("federation.topology = \"{other}\" is not one of full, ring, custom"));
                None
            }
        };
        let threads = self.threads.unwrap_or(1);
        p.positive("federation.threads", threads);
        let d = NetworkConfig::default();
        let network = NetworkConfig {
            bandwidth_mbps: self.bandwidth_mbps.unwrap_or(d.bandwidth_mbps),
            loss: self.loss.unwrap_or(d.loss),
            delay_ms: self.delay_ms.unwrap_or(d.delay_ms),
        };
        if !(network.bandwidth_mbps > 0.0 && network.bandwidth_mbps.is_finite()) {
            p.push(format!("federation.bandwidth_mbps = {} must be positive", network.bandwidth_mbps));
        }
        p.unit("federation.loss", network.loss);
        if !(network.delay_ms >= 0.0 && network.delay_ms.is_finite()) {
            p.push(format!("federation.delay_ms = {} must be non-negative", network.delay_ms));
        }
        let (aggregator, overrides) = aggregator?;
        Some(FederationConfig {
            n_nodes,
            topology: topology?,
            rounds: self.rounds.unwrap_or(10),
            aggregator,
            overrides,
            seed,
            network,
            threads,
        })
    }
}

impl RawAggregator {
    /// Per-node kinds from `[aggregator.node.<id>]` tables.
    fn overrides(&self, p: &mut Problems, n_nodes: usize) -> BTreeMap<usize, AggregatorKind> {
        let mut out = BTreeMap::new();
        for (key, raw) in self.node.clone().unwrap_or_default() {
            let field = format!("aggregator.node.{key}");
            match key.parse::<usize>() {
                Ok(id) if id < n_nodes => {
                    if raw.node.is_some() {
                        p.push(format!("{field}.node: overrides cannot nest"));
                    }
                    if let Some(k) = raw.into_config(p, &field) {
                        out.insert(id, k);
                    }
                }
                _ => p.push(format!("{field}: \"{key}\" is not a node id below {n_nodes}")),
            }
        }
        out
    }

    fn into_config(self, p: &mut Problems, section: &str) -> Option<AggregatorKind> {
        let set = present!(self; tau_s, tau_l, l_min, norm_ratio, trim_k, f, m);
        let Some(kind) = self.kind.clone() else {
            p.missing(&format!("{section}.kind"));
            return None;
        };
        let out = match kind.as_str() {
            "fedavg" | "median" | "fltrust" => {
                p.unused(section, &set, &[], &kind);
                match kind.as_str() {
                    "fedavg" => AggregatorKind::FedAvg,
                    "median" => AggregatorKind::Median,
                    _ => AggregatorKind::FlTrust,
                }
            }
            "trimmed_mean" => {
                p.unused(section, &set, &["trim_k"], &kind);
                AggregatorKind::TrimmedMean { trim_k: self.trim_k }
            }
            "krum" => {
                p.unused(section, &set, &["f", "m"], &kind);
                AggregatorKind::Krum {
                    f: self.f,
                    m: self.m.unwrap_or(1),
                }
            }
            "sentinel" => {
                p.unused(section, &set, &["tau_s", "tau_l", "l_min", "norm_ratio"], &kind);
                if self.tau_s.is_none() {
                    p.missing(&format!("{section}.tau_s"));
                }
                if self.tau_l.is_none() {
                    p.missing(&format!("{section}.tau_l"));
                }
                let d = SentinelConfig::default();
                AggregatorKind::Sentinel(SentinelConfig {
                    tau_s: self.tau_s.unwrap_or(d.tau_s),
                    tau_l: self.tau_l.unwrap_or(d.tau_l),
                    l_min: self.l_min.unwrap_or(d.l_min),
                    norm_ratio: self.norm_ratio.unwrap_or_default(),
                })
            }
            other => {
                p.push(format!(
                    "{section}.kind = \"{other}\" is not one of fedavg, median, trimmed_mean, krum, fltrust, sentinel"
                ));
                return None;
            }
        };
        for msg in out.problems() {
            p.push(msg.replacen("aggregator.", &format!("{section}."), 1));
        }
        Some(out)
    }

    fn from_kind(kind: &AggregatorKind) -> RawAggregator {
        let mut raw = RawAggregator {
            kind: Some(kind.name().into()),
            ..Default::default()
        };
        match kind {
            AggregatorKind::TrimmedMean { trim_k } => raw.trim_k = *trim_k,
            AggregatorKind::Krum { f, m } => {
                raw.f = *f;
                raw.m = Some(*m);
            }
            AggregatorKind::Sentinel(s) => {
                raw.tau_s = Some(s.tau_s);
                raw.tau_l = Some(s.tau_l);
                raw.l_min = Some(s.l_min);
                raw.norm_ratio = Some(s.norm_ratio);
            }
            AggregatorKind::FedAvg | AggregatorKind::Median | AggregatorKind::FlTrust => {}
        }
        raw
    }
}

impl RawAttack {
    fn into_config(self, p: &mut Problems, is_tabular: bool, dataset: Option<&DatasetConfig>) -> Option<AttackConfig> {
        let set = present!(self; pnr, observer, nr, amplitude, src, target, fraction, trigger, trigger_size, trigger_corner, trigger_k);
        let kind_name = self.kind.clone().unwrap_or_else(|| "none".into());
        let required = |p: &mut Problems, field: &str, v: Option<usize>| -> usize {
            v.unwrap_or_else(|| {
                p.missing(&format!("attack.{field}"));
                0
            })
        };
        let common = ["pnr", "observer"];
        let allowed = |extra: &[&'static str]| -> Vec<&'static str> { common.iter().chain(extra).copied().collect() };
        let kind = match kind_name.as_str() {
            "none" => {
                p.unused("attack", &set, &[], &kind_name);
                AttackKind::None
            }
            "model_poison" => {
                p.unused("attack", &set, &allowed(&["nr", "amplitude"]), &kind_name);
                AttackKind::ModelPoison {
                    nr: self.nr.unwrap_or(0.8),
                    amplitude: self.amplitude.unwrap_or(1.0),
                }
            }
            "label_flip_untargeted" => {
                p.unused("attack", &set, &allowed(&[]), &kind_name);
                AttackKind::LabelFlipUntargeted
            }
            "label_flip_targeted" => {
                p.unused("attack", &set, &allowed(&["src", "target"]), &kind_name);
                AttackKind::LabelFlipTargeted {
                    src: required(p, "src", self.src),
                    target: required(p, "target", self.target),
                }
            }
            "backdoor" => {
                p.unused(
                    "attack",
                    &set,
                    &allowed(&["target", "fraction", "trigger", "trigger_size", "trigger_corner", "trigger_k"]),
                    &kind_name,
                );
                let trigger_kind = self
                    .trigger
                    .clone()
                    .unwrap_or_else(|| if is_tabular { "tabular_ones" } else { "image_x" }.into());
                let trigger = match trigger_kind.as_str() {
                    "image_x" => {
                        if self.trigger_k.is_some() {
                            p.push("attack.trigger_k does not apply to trigger = \"image_x\"");
                        }
                        let d = Trigger::default();
                        let Trigger::ImageX { size, corner } = d else { unreachable!() };
                        Some(Trigger::ImageX {
                            size: self.trigger_size.unwrap_or(size),
                            corner: self.trigger_corner.unwrap_or(corner),
                        })
                    }
                    "tabular_ones" => {
                        if self.trigger_size.is_some() || self.trigger_corner.is_some() {
                            p.push("attack.trigger_size and attack.trigger_corner do not apply to trigger = \"tabular_ones\"");
                        }
                        Some(Trigger::TabularOnes {
                            k: self.trigger_k.unwrap_or(DEFAULT_TABULAR_TRIGGER_K),
                        })
                    }
                    other => {
                        p.push(format!("attack.trigger = \"{other}\" is not one of image_x, tabular_ones"));
                        None
                    }
                };
                if let (Some(t), Some(d)) = (trigger, dataset) {
                    check_trigger(p, &t, d);
                }
                AttackKind::Backdoor {
                    target: required(p, "target", self.target),
                    trigger: trigger.unwrap_or_default(),
                    fraction: self.fraction.unwrap_or(0.2),
                }
            }
            other => {
                p.push(format!(
                    "attack.kind = \"{other}\" is not one of none, model_poison, label_flip_untargeted, label_flip_targeted, backdoor"
                ));
                return None;
            }
        };
        let pnr = self.pnr.unwrap_or(0.0);
        if !matches!(kind, AttackKind::None) && self.pnr.is_none() {
            p.missing("attack.pnr");
        }
        Some(AttackConfig {
            kind,
            pnr,
            observer: self.observer,
        })
    }

    fn from_config(a: &AttackConfig) -> RawAttack {
        let mut raw = RawAttack::default();
        let name = match &a.kind {
            AttackKind::None => "none",
            AttackKind::ModelPoison { nr, amplitude } => {
                raw.nr = Some(*nr);
                raw.amplitude = Some(*amplitude);
                "model_poison"
            }
            AttackKind::LabelFlipUntargeted => "label_flip_untargeted",
            AttackKind::LabelFlipTargeted { src, target } => {
                raw.src = Some(*src);
                raw.target = Some(*target);
                "label_flip_targeted"
            }
            AttackKind::Backdoor {
                target,
                trigger,
                fraction,
            } => {
                raw.target = Some(*target);
                raw.fraction = Some(*fraction);
                match trigger {
                    Trigger::ImageX { size, corner } => {
                        raw.trigger = Some("image_x".into());
                        raw.trigger_size = Some(*size);
                        raw.trigger_corner = Some(*corner);
                    }
                    Trigger::TabularOnes { k } => {
                        raw.trigger = Some("tabular_ones".into());
                        raw.trigger_k = Some(*k);
                    }
                }
                "backdoor"
            }
        };
        raw.kind = Some(name.into());
        if !a.is_none() {
            raw.pnr = Some(a.pnr);
        }
        raw.observer = a.observer;
        raw
    }
}

fn check_trigger(p: &mut Problems, trigger: &Trigger, d: &DatasetConfig) {
    let (kind, dims) = match &d.source {
        DatasetSource::SyntheticImages(s) => (
            DataKind::Image {
                height: s.side,
                width: s.side,
            },
            s.side * s.side,
        ),
        DatasetSource::SyntheticTabular(s) => (DataKind::Tabular, s.dims),
        // Shape is known only after loading.
        DatasetSource::Idx { .. } => return,
    };
    if let Err(e) = trigger.cells(kind, dims) {
        p.push(format!("attack.trigger: {e}"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[dataset]
kind = "synthetic_images"
classes = 10
samples = 2000

[aggregator]
kind = "sentinel"
tau_s = 0.5
tau_l = 0.1
"#;

    fn errors(text: &str) -> Vec<String> {
        match ExperimentConfig::parse_str(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.repeats, 1);
        assert_eq!(c.federation.n_nodes, 10);
        assert_eq!(c.federation.rounds, 10);
        assert_eq!(c.federation.topology, Topology::Full);
        assert_eq!(c.federation.seed, 7);
        assert_eq!(c.hidden_dims, vec![256, 128]);
        assert_eq!(c.train, TrainConfig::default());
        assert!(c.attack.is_none());
        assert_eq!(c.partition, PartitionMode::Iid);
        assert_eq!(c.dataset.name, "synthetic_images");
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        let dumped = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse_str(&dumped).unwrap(), c);

        let rich = r#"
seed = 3
repeats = 2
output_dir = "out/x"
checkpoints = true
f1_average = "micro"

[dataset]
kind = "synthetic_tabular"
name = "tab"
classes = 4
dims = 16
samples = 900
separation = 0.75

[partition]
mode = "dirichlet"
alpha = 0.5

[federation]
n_nodes = 3
rounds = 2
topology = "custom"
adjacency = [[1, 2], [0], [0]]
threads = 2

[aggregator]
kind = "krum"
f = 0

[aggregator.node.1]
kind = "sentinel"
tau_s = 0.3
tau_l = 0.2
norm_ratio = "neighbor_over_local"

[attack]
kind = "backdoor"
pnr = 0.34
target = 1
fraction = 0.5
"#;
        let c = ExperimentConfig::parse_str(rich).unwrap();
        assert_eq!(c.attack.kind, AttackKind::Backdoor {
            target: 1,
            trigger: Trigger::TabularOnes { k: DEFAULT_TABULAR_TRIGGER_K },
            fraction: 0.5,
        });
        assert_eq!(c.federation.overrides.len(), 1);
        assert_eq!(c.hidden_dims, vec![256]);
        let dumped = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse_str(&dumped).unwrap(), c);
    }

    #[test]
    fn out_of_range_pnr_names_the_field() {
        let text = format!("{MINIMAL}\n[attack]\nkind = \"label_flip_untargeted\"\npnr = 1.5\n");
        let e = errors(&text);
        assert!(e.iter().any(|m| m.contains("attack.pnr")), "{e:?}");
    }

    #[test]
    fn sentinel_thresholds_are_mandatory() {
        let text = MINIMAL.replace("tau_s = 0.5\n", "");
        let e = errors(&text);
        assert_eq!(e, vec!["aggregator.tau_s is required".to_string()]);
        let text = MINIMAL.replace("tau_s = 0.5\ntau_l = 0.1\n", "");
        assert_eq!(errors(&text).len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\nsede = 8");
        assert!(errors(&text)[0].contains("sede"));
        let text = MINIMAL.replace("tau_l = 0.1", "tau_l = 0.1\ntau_x = 1.0");
        assert!(errors(&text)[0].contains("tau_x"));
    }

    #[test]
    fn irrelevant_fields_are_rejected() {
        let text = MINIMAL.replace("kind = \"sentinel\"", "kind = \"fedavg\"");
        let e = errors(&text);
        assert_eq!(e.len(), 2, "{e:?}");
        assert!(e[0].contains("aggregator.tau_s does not apply"));
    }

    #[test]
    fn all_problems_reported_together() {
        let text = r#"
[dataset]
kind = "synthetic_images"
classes = 10

[train]
batch_size = 0

[aggregator]
kind = "sentinel"
tau_s = 0.5
tau_l = 2.0

[attack]
kind = "label_flip_targeted"
pnr = 0.5
src = 3
target = 3
"#;
        let e = errors(text);
        for needle in ["seed", "dataset.samples", "train.batch_size", "aggregator.tau_l", "attack.src"] {
            assert!(e.iter().any(|m| m.contains(needle)), "{needle} missing from {e:?}");
        }
    }

    #[test]
    fn trigger_must_fit_the_data() {
        let text = format!("{MINIMAL}\n[attack]\nkind = \"backdoor\"\npnr = 0.5\ntarget = 0\ntrigger = \"tabular_ones\"\n");
        assert!(errors(&text).iter().any(|m| m.contains("attack.trigger")));
        let text = format!("{MINIMAL}\n[attack]\nkind = \"backdoor\"\npnr = 0.5\ntarget = 0\ntrigger_size = 40\n");
        assert!(errors(&text).iter().any(|m| m.contains("attack.trigger")));
        let text = format!("{MINIMAL}\n[attack]\nkind = \"backdoor\"\npnr = 0.5\ntarget = 10\n");
        assert!(errors(&text).iter().any(|m| m.contains("attack.target")));
    }

    #[test]
    fn override_ids_are_checked() {
        let text = format!("{MINIMAL}\n[aggregator.node.12]\nkind = \"fedavg\"\n");
        assert!(errors(&text)[0].contains("aggregator.node.12"));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let e = errors("seed = \n");
        assert!(e[0].contains("line 1"), "{e:?}");
    }

    #[test]
    fn repeat_seeds() {
        let c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(c.repeat_seed(0), 7);
        assert_ne!(c.repeat_seed(1), c.repeat_seed(2));
    }

    #[test]
    fn data_paths() {
        let base = Path::new("/cfg");
        assert_eq!(ExperimentConfig::resolve_data_path(Path::new("/abs/x"), base), PathBuf::from("/abs/x"));
    }
}

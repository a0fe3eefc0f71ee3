//! Runs an experiment config and writes its outputs.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.toml              normalized config (every default explicit)
//! summary.json             final-round metrics pooled over all repeats
//! repeat-<r>/rounds.csv    round,node,benign,f1,test_loss,asr_lf,ba,n_filtered
//! repeat-<r>/summary.json  final-round metrics of this repeat
//! repeat-<r>/trace.jsonl   one aggregation record per node per round
//! repeat-<r>/partition.json
//! repeat-<r>/checkpoints/round-<k>/node-<i>.lprm   (when enabled)
//! ```
//!
//! Every file is a pure function of the config.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{self, Dataset, NodeData};
use crate::error::{Error, Result};
use crate::sim::{self, ExperimentReport, MeanStd, NodeRecord, SimSetup, Summary};

pub const METRICS: [&str; 5] = ["f1", "test_loss", "asr_lf", "ba", "n_filtered"];

/// Final-round metrics over benign nodes, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub attack: String,
    pub pnr: f64,
    pub aggregator: String,
    pub seed: u64,
    pub repeats: usize,
    pub rounds: usize,
    pub n_nodes: usize,
    /// Pooled over the benign nodes of every repeat.
    pub metrics: BTreeMap<String, MeanStd>,
    pub per_repeat: Vec<RepeatSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: usize,
    pub seed: u64,
    pub malicious: Vec<usize>,
    pub metrics: BTreeMap<String, MeanStd>,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<RunSummary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn metric_map(s: &Summary) -> BTreeMap<String, MeanStd> {
    METRICS
        .iter()
        .filter_map(|&m| s.metric(m).map(|v| (m.to_string(), v)))
        .collect()
}

pub fn attack_name(kind: &AttackKind) -> &'static str {
    match kind {
        AttackKind::None => "none",
        AttackKind::ModelPoison { .. } => "model_poison",
        AttackKind::LabelFlipUntargeted => "label_flip_untargeted",
        AttackKind::LabelFlipTargeted { .. } => "label_flip_targeted",
        AttackKind::Backdoor { .. } => "backdoor",
    }
}

/// Loads or generates the full dataset for one run. `base` anchors relative
/// IDX paths.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64, base: &Path) -> Result<Dataset> {
    match &cfg.dataset.source {
        DatasetSource::SyntheticImages(spec) => data::synth_images(spec, seed),
        DatasetSource::SyntheticTabular(spec) => data::synth_tabular(spec, seed),
        DatasetSource::Idx { images, labels, limit } => {
            let ds = data::load_idx_images(
                &ExperimentConfig::resolve_data_path(images, base),
                &ExperimentConfig::resolve_data_path(labels, base),
            )?;
            Ok(match limit {
                Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>()),
                _ => ds,
            })
        }
    }
}

/// Data and simulator setup of repeat `r`.
pub fn prepare(cfg: &ExperimentConfig, r: usize, base: &Path) -> Result<(SimSetup, Vec<NodeData>)> {
    let seed = cfg.repeat_seed(r);
    let ds = load_dataset(cfg, seed, base)?;
    let problems = cfg.attack.problems(Some(ds.num_classes));
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let nodes = data::partition(&ds, &cfg.partition_config(seed))?;
    let mut federation = cfg.federation.clone();
    federation.seed = seed;
    let setup = SimSetup {
        model: cfg.model_spec(ds.dims(), ds.num_classes),
        federation,
        train: cfg.train,
        attack: cfg.attack.clone(),
        f1_average: cfg.f1_average,
    };
    Ok((setup, nodes))
}

/// Runs every repeat in memory without writing anything.
pub fn run_in_memory(cfg: &ExperimentConfig, base: &Path) -> Result<Vec<ExperimentReport>> {
    (0..cfg.repeats)
        .map(|r| {
            let (setup, nodes) = prepare(cfg, r, base)?;
            sim::run_experiment(setup, nodes)
        })
        .collect()
}

pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Replace outputs of an earlier run in `out_dir`.
    pub force: bool,
    /// Directory of the config file, for relative data paths.
    pub base_dir: PathBuf,
}

/// Runs all repeats and writes the output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    prepare_out_dir(&opts.out_dir, opts.force)?;
    write_file(&opts.out_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    let mut pooled: Vec<NodeRecord> = Vec::new();
    for r in 0..cfg.repeats {
        let dir = opts.out_dir.join(format!("repeat-{r}"));
        mkdir(&dir)?;
        let (setup, nodes) = prepare(cfg, r, &opts.base_dir)?;
        info!(
            "repeat {r}: {} nodes, {} rounds, aggregator {}, attack {}",
            setup.federation.n_nodes,
            setup.federation.rounds,
            setup.federation.aggregator.name(),
            attack_name(&setup.attack.kind)
        );
        write_json(&dir.join("partition.json"), &data::manifest(&nodes))?;

        let mut csv = csv::Writer::from_writer(BufWriter::new(create(&dir.join("rounds.csv"))?));
        let mut trace = BufWriter::new(create(&dir.join("trace.jsonl"))?);
        let csv_err = |e: csv::Error| Error::Format(format!("rounds.csv: {e}"));
        let trace_path = dir.join("trace.jsonl");
        let checkpoints = cfg.checkpoints.then(|| dir.join("checkpoints"));

        let report = sim::run_experiment_with(setup, nodes, |fed, round| {
            for rec in &round.records {
                csv.serialize(CsvRow::from(rec)).map_err(csv_err)?;
            }
            for t in &round.traces {
                serde_json::to_writer(&mut trace, t)?;
                trace.write_all(b"\n").map_err(|e| Error::io(&trace_path, e))?;
            }
            if let Some(root) = &checkpoints {
                let dir = root.join(format!("round-{:03}", round.round));
                mkdir(&dir)?;
                for node in &fed.nodes {
                    node.params.save(&dir.join(format!("node-{:03}.lprm", node.id)))?;
                }
            }
            Ok(())
        })?;
        csv.flush().map_err(|e| Error::io(dir.join("rounds.csv"), e))?;
        trace.flush().map_err(|e| Error::io(&trace_path, e))?;

        let summary = RepeatSummary {
            repeat: r,
            seed: cfg.repeat_seed(r),
            malicious: report.malicious.clone(),
            metrics: metric_map(&report.summary),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        pooled.extend(report.final_records().iter().cloned());
        per_repeat.push(summary);
    }

    let rounds = cfg.federation.rounds;
    let summary = RunSummary {
        dataset: cfg.dataset.name.clone(),
        attack: attack_name(&cfg.attack.kind).to_string(),
        pnr: cfg.attack.pnr,
        aggregator: cfg.federation.aggregator.name().to_string(),
        seed: cfg.seed,
        repeats: cfg.repeats,
        rounds,
        n_nodes: cfg.federation.n_nodes,
        metrics: metric_map(&Summary::from_records(rounds, &pooled)),
        per_repeat,
    };
    write_json(&opts.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct CsvRow {
    round: usize,
    node: usize,
    benign: bool,
    f1: f64,
    test_loss: f64,
    asr_lf: Option<f64>,
    ba: Option<f64>,
    n_filtered: usize,
}

impl From<&NodeRecord> for CsvRow {
    fn from(r: &NodeRecord) -> Self {
        CsvRow {
            round: r.round,
            node: r.node,
            benign: r.benign,
            f1: r.f1,
            test_loss: r.test_loss,
            asr_lf: r.asr_lf,
            ba: r.ba,
            n_filtered: r.n_filtered,
        }
    }
}

/// Refuses a non-empty directory unless `force`, in which case only files
/// this runner writes are removed.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.peekable();
        if entries.peek().is_some() {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let path = entry.path();
                if name == "config.toml" || name == "summary.json" {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                } else if name.starts_with("repeat-") && path.is_dir() {
                    fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
    }
    mkdir(dir)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

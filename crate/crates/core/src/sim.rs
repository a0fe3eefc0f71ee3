//! Synchronous round-based federation.
//!
//! Each round runs four barrier-separated phases: local training, model
//! poisoning of outgoing parameters, exchange along the topology, and
//! aggregation. Every node's work within a phase depends only on inputs
//! fixed before the phase started, so sequential and parallel execution
//! produce bit-identical results.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationInput, AggregationTrace, AggregatorKind, LossHistory, NodeId};
use crate::attacks::{self, AttackConfig, AttackKind};
use crate::data::{Dataset, NodeData};
use crate::error::{Error, Result};
use crate::metrics::{self, F1Average};
use crate::model::{self, MlpSpec, TrainConfig};
use crate::params::LayeredParams;
use crate::seed::{self, purpose};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    Full,
    Ring,
    Custom { adjacency: Vec<Vec<usize>> },
}

impl Topology {
    /// Sorted neighbor lists; rejects asymmetric or self-looped adjacency.
    pub fn adjacency(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let adj: Vec<Vec<usize>> = match self {
            Topology::Full => (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
            Topology::Ring => (0..n)
                .map(|i| {
                    let set: BTreeSet<usize> = [(i + n - 1) % n, (i + 1) % n].into_iter().filter(|&j| j != i).collect();
                    set.into_iter().collect()
                })
                .collect(),
            Topology::Custom { adjacency } => {
                if adjacency.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency has {} rows for {n} nodes",
                        adjacency.len()
                    )));
                }
                let mut adj = Vec::with_capacity(n);
                for (i, row) in adjacency.iter().enumerate() {
                    let set: BTreeSet<usize> = row.iter().copied().collect();
                    if set.contains(&i) {
                        return Err(Error::InvalidArgument(format!("node {i} is its own neighbor")));
                    }
                    if let Some(j) = set.iter().find(|&&j| j >= n) {
                        return Err(Error::InvalidArgument(format!("node {i} lists unknown node {j}")));
                    }
                    adj.push(set.into_iter().collect::<Vec<_>>());
                }
                for (i, row) in adj.iter().enumerate() {
                    for &j in row {
                        if !adj[j].contains(&i) {
                            return Err(Error::InvalidArgument(format!("edge {i}->{j} has no reverse edge")));
                        }
                    }
                }
                adj
            }
        };
        Ok(adj)
    }
}

/// Link properties. Accepted for completeness; synchronous simulation
/// delivers every message intact, so they do not change behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub bandwidth_mbps: f64,
    pub loss: f64,
    pub delay_ms: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            bandwidth_mbps: 1.0,
            loss: 0.0,
            delay_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub n_nodes: usize,
    pub topology: Topology,
    pub rounds: usize,
    pub aggregator: AggregatorKind,
    /// Per-node aggregator overrides.
    pub overrides: BTreeMap<NodeId, AggregatorKind>,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Worker threads for per-node phases; 1 runs everything inline.
    pub threads: usize,
}

impl FederationConfig {
    pub fn new(n_nodes: usize, rounds: usize, aggregator: AggregatorKind, seed: u64) -> Self {
        FederationConfig {
            n_nodes,
            topology: Topology::Full,
            rounds,
            aggregator,
            overrides: BTreeMap::new(),
            seed,
            network: NetworkConfig::default(),
            threads: 1,
        }
    }

    pub fn aggregator_for(&self, node: NodeId) -> &AggregatorKind {
        self.overrides.get(&node).unwrap_or(&self.aggregator)
    }
}

/// Everything except the data needed to run a federation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSetup {
    pub model: MlpSpec,
    pub federation: FederationConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub f1_average: F1Average,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub params: LayeredParams,
    /// Training split as the node uses it (poisoned for malicious nodes).
    pub train: Dataset,
    pub data: NodeData,
    pub backdoor_eval: Option<Dataset>,
    pub loss_history: LossHistory,
    pub malicious: bool,
    pub aggregator: AggregatorKind,
}

/// One node's evaluation after a round (round 0 is the initial model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub round: usize,
    pub node: NodeId,
    pub benign: bool,
    pub f1: f64,
    pub test_loss: f64,
    pub asr_lf: Option<f64>,
    pub ba: Option<f64>,
    pub n_filtered: usize,
    pub adopted: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub records: Vec<NodeRecord>,
    pub traces: Vec<AggregationTrace>,
    /// Number of neighbor models each node received.
    pub received: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; `None` for no values.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Final-round statistics over benign nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub round: usize,
    pub f1: Option<MeanStd>,
    pub test_loss: Option<MeanStd>,
    pub asr_lf: Option<MeanStd>,
    pub ba: Option<MeanStd>,
    pub n_filtered: Option<MeanStd>,
}

impl Summary {
    pub fn from_records<'a>(round: usize, records: impl IntoIterator<Item = &'a NodeRecord>) -> Summary {
        let benign: Vec<&NodeRecord> = records.into_iter().filter(|r| r.benign).collect();
        let collect = |f: &dyn Fn(&NodeRecord) -> Option<f64>| -> Option<MeanStd> {
            MeanStd::of(&benign.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        Summary {
            round,
            f1: collect(&|r| Some(r.f1)),
            test_loss: collect(&|r| Some(r.test_loss)),
            asr_lf: collect(&|r| r.asr_lf),
            ba: collect(&|r| r.ba),
            n_filtered: collect(&|r| Some(r.n_filtered as f64)),
        }
    }

    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        match name {
            "f1" => self.f1,
            "test_loss" => self.test_loss,
            "asr_lf" => self.asr_lf,
            "ba" => self.ba,
            "n_filtered" => self.n_filtered,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub malicious: Vec<NodeId>,
    pub initial: Vec<NodeRecord>,
    pub rounds: Vec<RoundReport>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn final_records(&self) -> &[NodeRecord] {
        self.rounds.last().map(|r| r.records.as_slice()).unwrap_or(&self.initial)
    }
}

pub struct Federation {
    pub setup: SimSetup,
    pub nodes: Vec<NodeState>,
    pub adjacency: Vec<Vec<NodeId>>,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    /// Assigns data, picks malicious nodes, poisons their training data and
    /// gives every node the same initial model.
    pub fn new(setup: SimSetup, node_data: Vec<NodeData>) -> Result<Self> {
        let fed = &setup.federation;
        if node_data.len() != fed.n_nodes {
            return Err(Error::InvalidArgument(format!(
                "{} data shards for {} nodes",
                node_data.len(),
                fed.n_nodes
            )));
        }
        setup.train.validate()?;
        let mut problems = setup.attack.problems(None);
        problems.extend(fed.aggregator.problems());
        for kind in fed.overrides.values() {
            problems.extend(kind.problems());
        }
        if let Some(&id) = fed.overrides.keys().find(|&&id| id >= fed.n_nodes) {
            problems.push(format!("aggregator override for unknown node {id}"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let adjacency = fed.topology.adjacency(fed.n_nodes)?;
        let malicious = if setup.attack.is_none() {
            BTreeSet::new()
        } else {
            attacks::select_malicious(fed.n_nodes, setup.attack.pnr, fed.seed, setup.attack.observer)
        };
        let init = model::init_params(&setup.model, seed::derive(fed.seed, &[purpose::INIT]))?;

        let mut nodes = Vec::with_capacity(fed.n_nodes);
        for (id, data) in node_data.into_iter().enumerate() {
            let is_malicious = malicious.contains(&id);
            let train = if is_malicious {
                attacks::poison_training_data(
                    &data.train,
                    &setup.attack.kind,
                    seed::derive(fed.seed, &[purpose::POISON_DATA, id as u64]),
                )?
            } else {
                data.train.clone()
            };
            let backdoor_eval = match &setup.attack.kind {
                AttackKind::Backdoor { trigger, .. } => Some(attacks::build_backdoor_eval_set(&data.test, trigger)?),
                _ => None,
            };
            nodes.push(NodeState {
                id,
                params: init.clone(),
                train,
                data,
                backdoor_eval,
                loss_history: LossHistory::default(),
                malicious: is_malicious,
                aggregator: fed.aggregator_for(id).clone(),
            });
        }
        let pool = if fed.threads == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(fed.threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        };
        Ok(Federation {
            setup,
            nodes,
            adjacency,
            pool,
        })
    }

    pub fn malicious(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.malicious).map(|n| n.id).collect()
    }

    /// Runs `f` for every node index, in parallel when a pool exists;
    /// results are always in node order.
    fn per_node<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.pool {
            None => (0..self.nodes.len()).map(f).collect(),
            Some(pool) => pool.install(|| (0..self.nodes.len()).into_par_iter().map(f).collect()),
        }
    }

    fn evaluate_node(&self, node: &NodeState, round: usize) -> Result<NodeRecord> {
        let (test_loss, cm) = model::evaluate(&node.params, &node.data.test)?;
        let asr_lf = match self.setup.attack.kind {
            AttackKind::LabelFlipTargeted { src, target } => metrics::asr_label_flip(&cm, src, target),
            _ => None,
        };
        let ba = match (&self.setup.attack.kind, &node.backdoor_eval) {
            (AttackKind::Backdoor { target, .. }, Some(b)) => {
                let (_, cm_b) = model::evaluate(&node.params, b)?;
                metrics::backdoor_accuracy(&cm_b, *target, b.len() as u64)
            }
            _ => None,
        };
        Ok(NodeRecord {
            round,
            node: node.id,
            benign: !node.malicious,
            f1: metrics::f1(&cm, self.setup.f1_average),
            test_loss,
            asr_lf,
            ba,
            n_filtered: 0,
            adopted: true,
            error: None,
        })
    }

    pub fn evaluate(&self, round: usize) -> Result<Vec<NodeRecord>> {
        self.per_node(|i| self.evaluate_node(&self.nodes[i], round))
            .into_iter()
            .collect()
    }

    pub fn run_round(&mut self, round: usize) -> Result<RoundReport> {
        let fed_seed = self.setup.federation.seed;

        // Phase 1: local training.
        let trained: Vec<Result<LayeredParams>> = self.per_node(|i| {
            let node = &self.nodes[i];
            let cfg = TrainConfig {
                seed: seed::derive(fed_seed, &[purpose::TRAIN, i as u64, round as u64]),
                ..self.setup.train
            };
            model::train_local(&node.params, &node.train, &cfg)
        });
        let mut errors: Vec<Option<String>> = vec![None; self.nodes.len()];
        let trained: Vec<LayeredParams> = trained
            .into_iter()
            .enumerate()
            .map(|(i, r)| match r {
                Ok(p) => Ok(p),
                Err(e @ Error::Numerical(_)) => {
                    warn!("round {round}: node {i} training failed: {e}");
                    errors[i] = Some(e.to_string());
                    Ok(self.nodes[i].params.clone())
                }
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;

        // Phase 2: poison outgoing models.
        let shared: Vec<LayeredParams> = self.per_node(|i| match self.setup.attack.kind {
            AttackKind::ModelPoison { nr, amplitude } if self.nodes[i].malicious => attacks::poison_model(
                &trained[i],
                nr,
                amplitude,
                seed::derive(fed_seed, &[purpose::POISON_MODEL, i as u64, round as u64]),
            ),
            _ => trained[i].clone(),
        });

        // Phases 3 and 4: exchange along the topology, then aggregate.
        let mut histories: Vec<LossHistory> = self.nodes.iter_mut().map(|n| std::mem::take(&mut n.loss_history)).collect();
        let nodes = &self.nodes;
        let adjacency = &self.adjacency;
        let aggregate_one = |i: usize, history: &mut LossHistory| {
            let node = &nodes[i];
            let input = AggregationInput {
                node: i,
                local: &trained[i],
                neighbors: adjacency[i].iter().map(|&j| (j, &shared[j])).collect(),
                bootstrap: &node.data.bootstrap,
                round,
            };
            node.aggregator.aggregate(&input, history)
        };
        let outcomes: Vec<Result<_>> = match &self.pool {
            None => histories.iter_mut().enumerate().map(|(i, h)| aggregate_one(i, h)).collect(),
            Some(pool) => pool.install(|| {
                histories
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, h)| aggregate_one(i, h))
                    .collect()
            }),
        };

        let mut traces = Vec::with_capacity(self.nodes.len());
        let mut filtered = vec![0usize; self.nodes.len()];
        let mut adopted = vec![false; self.nodes.len()];
        for (i, (outcome, history)) in outcomes.into_iter().zip(histories).enumerate() {
            let node = &mut self.nodes[i];
            node.loss_history = history;
            match outcome {
                Ok(out) if out.params.is_finite() && errors[i].is_none() => {
                    filtered[i] = out.n_filtered();
                    adopted[i] = true;
                    traces.push(AggregationTrace {
                        round,
                        node: i,
                        aggregator: node.aggregator.name().to_string(),
                        adopted: true,
                        local_loss: out.local_loss,
                        neighbors: out.neighbors,
                    });
                    node.params = out.params;
                }
                Ok(out) => {
                    let reason = errors[i].clone().unwrap_or_else(|| "non-finite aggregate".into());
                    warn!("round {round}: node {i} keeps its previous model ({reason})");
                    errors[i] = Some(reason);
                    traces.push(AggregationTrace {
                        round,
                        node: i,
                        aggregator: node.aggregator.name().to_string(),
                        adopted: false,
                        local_loss: out.local_loss,
                        neighbors: out.neighbors,
                    });
                }
                Err(e @ (Error::Numerical(_) | Error::DegenerateAggregation(_))) => {
                    warn!("round {round}: node {i} keeps its previous model ({e})");
                    errors[i] = Some(e.to_string());
                    traces.push(AggregationTrace {
                        round,
                        node: i,
                        aggregator: node.aggregator.name().to_string(),
                        adopted: false,
                        local_loss: None,
                        neighbors: Vec::new(),
                    });
                }
                Err(e) => return Err(e),
            }
        }

        let mut records = self.evaluate(round)?;
        for (i, r) in records.iter_mut().enumerate() {
            r.n_filtered = filtered[i];
            r.adopted = adopted[i];
            r.error = errors[i].take();
        }
        Ok(RoundReport {
            round,
            records,
            traces,
            received: self.adjacency.iter().map(Vec::len).collect(),
        })
    }
}

/// Runs all rounds, calling `observe` after each one.
pub fn run_experiment_with(
    setup: SimSetup,
    node_data: Vec<NodeData>,
    mut observe: impl FnMut(&Federation, &RoundReport) -> Result<()>,
) -> Result<ExperimentReport> {
    let rounds = setup.federation.rounds;
    let mut fed = Federation::new(setup, node_data)?;
    let initial = fed.evaluate(0)?;
    let mut reports = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let report = fed.run_round(round)?;
        observe(&fed, &report)?;
        if let Some(f1) = Summary::from_records(round, &report.records).f1 {
            info!("round {round}: benign F1 {:.4} ± {:.4}", f1.mean, f1.std);
        }
        reports.push(report);
    }
    let (last_round, last) = match reports.last() {
        Some(r) => (r.round, r.records.as_slice()),
        None => (0, initial.as_slice()),
    };
    let summary = Summary::from_records(last_round, last);
    Ok(ExperimentReport {
        malicious: fed.malicious(),
        initial,
        rounds: reports,
        summary,
    })
}

pub fn run_experiment(setup: SimSetup, node_data: Vec<NodeData>) -> Result<ExperimentReport> {
    run_experiment_with(setup, node_data, |_, _| Ok(()))
}

//! Aggregation rules a node applies to its local model and the models
//! received from its neighbors.

mod baselines;
mod sentinel;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::LayeredParams;

pub use baselines::{coordinate_median, default_krum_f, fedavg, fltrust, krum, trimmed_mean};
pub use sentinel::{
    map_loss_distance, normalize_model, pre_threshold_weight, sentinel, similarity_filter, LossHistory, NormRatio,
    SentinelConfig, SimilarityFilter,
};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    Median,
    TrimmedMean {
        #[serde(default)]
        trim_k: Option<usize>,
    },
    Krum {
        #[serde(default)]
        f: Option<usize>,
        #[serde(default = "one")]
        m: usize,
    },
    #[serde(rename = "fltrust")]
    FlTrust,
    Sentinel(SentinelConfig),
}

fn one() -> usize {
    1
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean { .. } => "trimmed_mean",
            AggregatorKind::Krum { .. } => "krum",
            AggregatorKind::FlTrust => "fltrust",
            AggregatorKind::Sentinel(_) => "sentinel",
        }
    }

    pub fn problems(&self) -> Vec<String> {
        match self {
            AggregatorKind::Sentinel(cfg) => cfg.problems(),
            AggregatorKind::Krum { m, .. } if *m == 0 => vec!["aggregator.m must be at least 1".into()],
            _ => Vec::new(),
        }
    }

    /// Runs this rule. `history` is only read and written by Sentinel.
    pub fn aggregate(&self, input: &AggregationInput, history: &mut LossHistory) -> Result<AggregationOutcome> {
        input.validate()?;
        match self {
            AggregatorKind::FedAvg => fedavg(input),
            AggregatorKind::Median => coordinate_median(input),
            AggregatorKind::TrimmedMean { trim_k } => trimmed_mean(input, *trim_k),
            AggregatorKind::Krum { f, m } => krum(input, *f, *m),
            AggregatorKind::FlTrust => fltrust(input),
            AggregatorKind::Sentinel(cfg) => sentinel(input, cfg, history),
        }
    }
}

/// Everything a node holds when it aggregates.
#[derive(Debug, Clone)]
pub struct AggregationInput<'a> {
    pub node: NodeId,
    pub local: &'a LayeredParams,
    pub neighbors: BTreeMap<NodeId, &'a LayeredParams>,
    pub bootstrap: &'a Dataset,
    pub round: usize,
}

impl AggregationInput<'_> {
    pub fn validate(&self) -> Result<()> {
        if !self.local.is_finite() {
            return Err(Error::Numerical(format!("local model of node {}", self.node)));
        }
        for (id, p) in &self.neighbors {
            self.local.check_compatible(p)?;
            if !p.is_finite() {
                return Err(Error::Numerical(format!("model received from node {id}")));
            }
        }
        Ok(())
    }

    /// Local model followed by neighbors, ordered by node id.
    pub(crate) fn models_by_id(&self) -> Vec<(NodeId, &LayeredParams)> {
        let mut all: Vec<(NodeId, &LayeredParams)> = self.neighbors.iter().map(|(&id, &p)| (id, p)).collect();
        all.push((self.node, self.local));
        all.sort_by_key(|(id, _)| *id);
        all
    }

    pub(crate) fn all_models(&self) -> Vec<&LayeredParams> {
        std::iter::once(self.local).chain(self.neighbors.values().copied()).collect()
    }
}

/// Per-neighbor diagnostics of one aggregation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTrace {
    pub id: NodeId,
    pub similarity: Option<f64>,
    pub bootstrap_loss: Option<f64>,
    pub weight: Option<f64>,
    pub norm_scales: Option<Vec<f64>>,
    pub filtered: bool,
}

impl NeighborTrace {
    pub(crate) fn kept(id: NodeId) -> Self {
        NeighborTrace {
            id,
            similarity: None,
            bootstrap_loss: None,
            weight: None,
            norm_scales: None,
            filtered: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub params: LayeredParams,
    pub local_loss: Option<f64>,
    pub neighbors: Vec<NeighborTrace>,
}

impl AggregationOutcome {
    pub fn n_filtered(&self) -> usize {
        self.neighbors.iter().filter(|n| n.filtered).count()
    }
}

/// One JSON line of the aggregation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationTrace {
    pub round: usize,
    pub node: NodeId,
    pub aggregator: String,
    pub adopted: bool,
    pub local_loss: Option<f64>,
    pub neighbors: Vec<NeighborTrace>,
}

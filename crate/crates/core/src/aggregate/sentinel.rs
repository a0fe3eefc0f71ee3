//! Sentinel: similarity filtering, bootstrap validation and layer
//! normalization, followed by a weighted average with the local model at
//! weight 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AggregationInput, AggregationOutcome, NeighborTrace, NodeId};
use crate::error::{Error, Result};
use crate::model;
use crate::params::{cosine_similarity, layer_norms, weighted_average, LayeredParams};

/// Which ratio bounds the per-layer scale factor in normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRatio {
    /// `min(1, ‖M[l]‖ / ‖P[l]‖)`: neighbor layers above the local norm are
    /// clipped down to it.
    #[default]
    LocalOverNeighbor,
    /// `min(1, ‖P[l]‖ / ‖M[l]‖)`, the literal printed form of the rule.
    NeighborOverLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelConfig {
    /// Similarity threshold; neighbors strictly below it are dropped.
    pub tau_s: f64,
    /// Mapped weights strictly below this are zeroed.
    pub tau_l: f64,
    /// Floor on the local mean loss in the damping factor.
    #[serde(default = "default_l_min")]
    pub l_min: f64,
    #[serde(default)]
    pub norm_ratio: NormRatio,
}

fn default_l_min() -> f64 {
    0.001
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig {
            tau_s: 0.5,
            tau_l: 0.1,
            l_min: default_l_min(),
            norm_ratio: NormRatio::default(),
        }
    }
}

impl SentinelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.tau_s.is_finite() {
            out.push(format!("aggregator.tau_s = {} must be finite", self.tau_s));
        }
        if !(0.0..=1.0).contains(&self.tau_l) {
            out.push(format!("aggregator.tau_l = {} must lie in [0, 1]", self.tau_l));
        }
        if !(self.l_min > 0.0 && self.l_min.is_finite()) {
            out.push(format!("aggregator.l_min = {} must be positive", self.l_min));
        }
        out
    }
}

/// Bootstrap losses per node (including the owner) per round. Only rounds
/// in which a neighbor passed similarity filtering have entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    entries: BTreeMap<NodeId, BTreeMap<usize, f64>>,
}

impl LossHistory {
    pub fn record(&mut self, node: NodeId, round: usize, loss: f64) {
        self.entries.entry(node).or_default().insert(round, loss);
    }

    pub fn losses(&self, node: NodeId) -> Vec<f64> {
        self.entries
            .get(&node)
            .map(|h| h.values().copied().collect())
            .unwrap_or_default()
    }

    pub fn rounds(&self, node: NodeId) -> Vec<usize> {
        self.entries
            .get(&node)
            .map(|h| h.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn mean(&self, node: NodeId) -> Option<f64> {
        let h = self.entries.get(&node)?;
        (!h.is_empty()).then(|| h.values().sum::<f64>() / h.len() as f64)
    }
}

pub struct SimilarityFilter<'a> {
    pub survivors: BTreeMap<NodeId, &'a LayeredParams>,
    pub similarities: BTreeMap<NodeId, f64>,
}

/// Keeps neighbor `j` iff `cos(P_j, M) >= tau_s`.
pub fn similarity_filter<'a>(
    local: &LayeredParams,
    neighbors: &BTreeMap<NodeId, &'a LayeredParams>,
    tau_s: f64,
) -> Result<SimilarityFilter<'a>> {
    let mut survivors = BTreeMap::new();
    let mut similarities = BTreeMap::new();
    for (&id, &p) in neighbors {
        let s = cosine_similarity(p, local)?;
        similarities.insert(id, s);
        if s >= tau_s {
            survivors.insert(id, p);
        }
    }
    Ok(SimilarityFilter {
        survivors,
        similarities,
    })
}

/// `exp(-κ · max(l̄_j - l̄_i, 0))` with `κ = 1 / max(l̄_i, l_min)`.
pub fn pre_threshold_weight(mean_local: f64, mean_neighbor: f64, l_min: f64) -> f64 {
    let kappa = 1.0 / mean_local.max(l_min);
    let distance = (mean_neighbor - mean_local).max(0.0);
    (-kappa * distance).exp()
}

/// Maps the gap between mean loss histories to an aggregation weight in
/// `[0, 1]`; weights below `tau_l` become 0.
pub fn map_loss_distance(hist_local: &[f64], hist_neighbor: &[f64], tau_l: f64, l_min: f64) -> Result<f64> {
    if hist_local.is_empty() || hist_neighbor.is_empty() {
        return Err(Error::InvalidArgument("loss history is empty".into()));
    }
    let mean = |h: &[f64]| h.iter().sum::<f64>() / h.len() as f64;
    let w = pre_threshold_weight(mean(hist_local), mean(hist_neighbor), l_min);
    Ok(if w < tau_l { 0.0 } else { w })
}

/// Scales each neighbor layer by `ρ_l ≤ 1`; returns the scaled model and
/// the factors. A zero-norm denominator leaves the layer unchanged.
pub fn normalize_model(local: &LayeredParams, neighbor: &LayeredParams, ratio: NormRatio) -> Result<(LayeredParams, Vec<f64>)> {
    local.check_compatible(neighbor)?;
    let scales: Vec<f64> = layer_norms(local)
        .into_iter()
        .zip(layer_norms(neighbor))
        .map(|(nm, np)| {
            let (num, den) = match ratio {
                NormRatio::LocalOverNeighbor => (nm, np),
                NormRatio::NeighborOverLocal => (np, nm),
            };
            if den > 0.0 {
                (num / den).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    let mut out = neighbor.clone();
    for (layer, &rho) in out.layers_mut().iter_mut().zip(&scales) {
        if rho < 1.0 {
            layer.values.iter_mut().for_each(|v| *v = (*v as f64 * rho) as f32);
        }
    }
    Ok((out, scales))
}

/// One Sentinel aggregation for `input.node`, updating its loss history.
pub fn sentinel(input: &AggregationInput, cfg: &SentinelConfig, history: &mut LossHistory) -> Result<AggregationOutcome> {
    let filter = similarity_filter(input.local, &input.neighbors, cfg.tau_s)?;

    let local_loss = model::mean_loss(input.local, input.bootstrap)?;
    history.record(input.node, input.round, local_loss);
    let local_hist = history.losses(input.node);

    let mut models: Vec<LayeredParams> = vec![input.local.clone()];
    let mut weights = vec![1.0];
    let mut traces = Vec::with_capacity(input.neighbors.len());
    for (&id, &sim) in &filter.similarities {
        let Some(&p) = filter.survivors.get(&id) else {
            traces.push(NeighborTrace {
                similarity: Some(sim),
                filtered: true,
                ..NeighborTrace::kept(id)
            });
            continue;
        };
        let loss = model::mean_loss(p, input.bootstrap)?;
        history.record(id, input.round, loss);
        let w = map_loss_distance(&local_hist, &history.losses(id), cfg.tau_l, cfg.l_min)?;
        let (normalized, scales) = normalize_model(input.local, p, cfg.norm_ratio)?;
        traces.push(NeighborTrace {
            id,
            similarity: Some(sim),
            bootstrap_loss: Some(loss),
            weight: Some(w),
            norm_scales: Some(scales),
            filtered: w == 0.0,
        });
        if w > 0.0 {
            models.push(normalized);
            weights.push(w);
        }
    }

    let params = if models.len() == 1 {
        input.local.clone()
    } else {
        let refs: Vec<&LayeredParams> = models.iter().collect();
        weighted_average(&refs, &weights)?
    };
    Ok(AggregationOutcome {
        params,
        local_loss: Some(local_loss),
        neighbors: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::params;
    use super::*;
    use crate::data::{DataKind, Dataset};
    use crate::model::{init_params, MlpSpec};
    use crate::params::flatten;
    use ndarray::Array2;

    fn bootstrap() -> Dataset {
        let features = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 3 + j) % 5) as f32 * 0.25 - 0.5);
        Dataset::new(features, (0..12).map(|i| i % 2).collect(), 2, DataKind::Tabular).unwrap()
    }

    fn net(seed: u64) -> LayeredParams {
        init_params(&MlpSpec::new(3, vec![4], 2), seed).unwrap()
    }

    fn run(local: &LayeredParams, neighbors: &[LayeredParams], cfg: &SentinelConfig, h: &mut LossHistory) -> AggregationOutcome {
        let bs = bootstrap();
        let input = AggregationInput {
            node: 0,
            local,
            neighbors: neighbors.iter().enumerate().map(|(i, p)| (i + 1, p)).collect(),
            bootstrap: &bs,
            round: 0,
        };
        sentinel(&input, cfg, h).unwrap()
    }

    #[test]
    fn no_neighbors_returns_local() {
        let local = net(1);
        let out = run(&local, &[], &SentinelConfig::default(), &mut LossHistory::default());
        assert_eq!(out.params, local);
    }

    #[test]
    fn identical_neighbors_return_local() {
        let local = net(1);
        let out = run(&local, &[local.clone(), local.clone()], &SentinelConfig::default(), &mut LossHistory::default());
        for (a, b) in flatten(&out.params).iter().zip(flatten(&local)) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
        }
        assert!(out.neighbors.iter().all(|n| n.weight == Some(1.0)));
    }

    #[test]
    fn inverted_neighbor_is_filtered() {
        let local = net(1);
        let mut h = LossHistory::default();
        let out = run(&local, &[local.clone(), local.scaled(-1.0)], &SentinelConfig::default(), &mut h);
        let inverted = &out.neighbors[1];
        assert!(inverted.filtered);
        // Weight rows give -1; the zero-initialized bias rows contribute 0.
        assert!((inverted.similarity.unwrap() + 0.5).abs() < 1e-9);
        assert_eq!(inverted.bootstrap_loss, None);
        for (a, b) in flatten(&out.params).iter().zip(flatten(&local)) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
        }
        // Filtered neighbors leave no loss history entry.
        assert!(h.losses(2).is_empty());
        assert_eq!(h.losses(1).len(), 1);
        assert_eq!(h.losses(0).len(), 1);
    }

    #[test]
    fn everything_filtered_returns_local_exactly() {
        let local = net(1);
        let cfg = SentinelConfig {
            tau_s: 1.0 + 1e-9,
            ..SentinelConfig::default()
        };
        let out = run(&local, &[local.clone(), net(2)], &cfg, &mut LossHistory::default());
        assert_eq!(out.params, local);
        assert_eq!(out.n_filtered(), 2);
    }

    #[test]
    fn similarity_boundary_is_kept() {
        let local = params(&[1.0, 0.0]);
        let neighbor = params(&[1.0, 1.0]);
        let neighbors = BTreeMap::from([(1, &neighbor)]);
        let s = cosine_similarity(&neighbor, &local).unwrap();
        let f = similarity_filter(&local, &neighbors, s).unwrap();
        assert!(f.survivors.contains_key(&1));
        let f = similarity_filter(&local, &neighbors, s + 1e-12).unwrap();
        assert!(f.survivors.is_empty());

        let inverted = local.scaled(-1.0);
        let f = similarity_filter(&local, &BTreeMap::from([(1, &inverted)]), 0.5).unwrap();
        assert!(f.survivors.is_empty());
        let twin = local.clone();
        let f = similarity_filter(&local, &BTreeMap::from([(1, &twin)]), 1.0).unwrap();
        assert_eq!(f.survivors.len(), 1);
    }

    #[test]
    fn loss_distance_examples() {
        assert_eq!(map_loss_distance(&[0.5], &[0.4], 0.1, 0.001).unwrap(), 1.0);
        assert_eq!(map_loss_distance(&[0.5], &[0.5], 0.1, 0.001).unwrap(), 1.0);
        let w = map_loss_distance(&[0.5], &[1.0], 0.1, 0.001).unwrap();
        assert!((w - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(map_loss_distance(&[0.5], &[3.0], 0.1, 0.001).unwrap(), 0.0);
        assert!(((-5f64).exp() - 0.0067).abs() < 1e-4);
        // Means over histories: local 0.5, neighbor 1.0.
        let w = map_loss_distance(&[0.4, 0.6], &[1.5, 0.5], 0.1, 0.001).unwrap();
        assert!((w - (-1f64).exp()).abs() < 1e-12);
        // l_min floors the damping factor.
        let w = map_loss_distance(&[0.0], &[0.0005], 0.0, 0.001).unwrap();
        assert!((w - (-0.5f64).exp()).abs() < 1e-12);
        assert!(map_loss_distance(&[], &[1.0], 0.1, 0.001).is_err());
    }

    #[test]
    fn damping_adapts_to_local_loss() {
        assert!(pre_threshold_weight(0.1, 1.1, 0.001) < pre_threshold_weight(1.0, 2.0, 0.001));
    }

    #[test]
    fn history_means_skip_missing_rounds() {
        let mut h = LossHistory::default();
        h.record(3, 0, 1.0);
        h.record(3, 2, 3.0);
        assert_eq!(h.mean(3), Some(2.0));
        assert_eq!(h.rounds(3), vec![0, 2]);
        assert_eq!(h.mean(4), None);
    }

    #[test]
    fn normalize_examples() {
        let local = params(&[3.0, 4.0]);
        let small = params(&[0.3, 0.4]);
        let (out, scales) = normalize_model(&local, &small, NormRatio::default()).unwrap();
        assert_eq!(out, small);
        assert_eq!(scales, vec![1.0]);

        let double = local.scaled(2.0);
        let (out, scales) = normalize_model(&local, &double, NormRatio::default()).unwrap();
        assert_eq!(scales, vec![0.5]);
        assert!((layer_norms(&out)[0] - 5.0).abs() < 1e-6);

        let zero = local.zeros_like();
        let (out, _) = normalize_model(&local, &zero, NormRatio::default()).unwrap();
        assert_eq!(out, zero);
    }

    #[test]
    fn normalize_scaled_copy_matches_local_norms() {
        let local = net(4);
        let (out, _) = normalize_model(&local, &local.scaled(3.5), NormRatio::default()).unwrap();
        for (a, b) in layer_norms(&out).iter().zip(layer_norms(&local)) {
            assert!((a - b).abs() <= 1e-5 * b.max(1e-12));
        }
    }

    #[test]
    fn printed_ratio_shrinks_small_neighbors() {
        let local = params(&[3.0, 4.0]);
        let small = params(&[0.3, 0.4]);
        let (out, scales) = normalize_model(&local, &small, NormRatio::NeighborOverLocal).unwrap();
        assert!((scales[0] - 0.1).abs() < 1e-6);
        assert!((layer_norms(&out)[0] - 0.05).abs() < 1e-6);
        let big = local.scaled(2.0);
        assert_eq!(normalize_model(&local, &big, NormRatio::NeighborOverLocal).unwrap().0, big);
    }

    #[test]
    fn history_accumulates_over_rounds() {
        let local = net(1);
        let other = net(2);
        let cfg = SentinelConfig {
            tau_s: -1.0,
            tau_l: 0.0,
            ..SentinelConfig::default()
        };
        let bs = bootstrap();
        let mut h = LossHistory::default();
        for round in 0..3 {
            let input = AggregationInput {
                node: 0,
                local: &local,
                neighbors: BTreeMap::from([(1, &other)]),
                bootstrap: &bs,
                round,
            };
            sentinel(&input, &cfg, &mut h).unwrap();
        }
        assert_eq!(h.rounds(0), vec![0, 1, 2]);
        assert_eq!(h.rounds(1), vec![0, 1, 2]);
    }
}

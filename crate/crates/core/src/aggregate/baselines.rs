//! FedAvg, coordinate-wise median, trimmed mean, (Multi-)Krum and FLTrust.

use log::warn;

use super::{AggregationInput, AggregationOutcome, NeighborTrace, NodeId};
use crate::error::{Error, Result};
use crate::params::{cosine_similarity, flatten, layer_norms, unflatten, weighted_average, LayeredParams};

fn kept_all(input: &AggregationInput) -> Vec<NeighborTrace> {
    input.neighbors.keys().map(|&id| NeighborTrace::kept(id)).collect()
}

/// Unweighted mean of the local model and every neighbor.
pub fn fedavg(input: &AggregationInput) -> Result<AggregationOutcome> {
    let models = input.all_models();
    let params = weighted_average(&models, &vec![1.0; models.len()])?;
    Ok(AggregationOutcome {
        params,
        local_loss: None,
        neighbors: kept_all(input),
    })
}

/// Applies `reduce` to the sorted values of every coordinate.
fn coordinatewise(models: &[&LayeredParams], reduce: impl Fn(&[f32]) -> f32) -> Result<LayeredParams> {
    let flats: Vec<Vec<f32>> = models.iter().map(|m| flatten(m)).collect();
    let mut column = vec![0.0f32; flats.len()];
    let out: Vec<f32> = (0..flats[0].len())
        .map(|k| {
            for (c, f) in column.iter_mut().zip(&flats) {
                *c = f[k];
            }
            column.sort_by(f32::total_cmp);
            reduce(&column)
        })
        .collect();
    unflatten(&models[0].schema(), &out)
}

fn mean(values: &[f32]) -> f32 {
    (values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64) as f32
}

/// Per-coordinate median; even counts take the midpoint of the middle pair.
pub fn coordinate_median(input: &AggregationInput) -> Result<AggregationOutcome> {
    let params = coordinatewise(&input.all_models(), |sorted| {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            mean(&sorted[n / 2 - 1..=n / 2])
        }
    })?;
    Ok(AggregationOutcome {
        params,
        local_loss: None,
        neighbors: kept_all(input),
    })
}

/// Drops the `trim_k` smallest and largest values per coordinate and
/// averages the rest. Defaults to `floor(0.2 * count)`.
pub fn trimmed_mean(input: &AggregationInput, trim_k: Option<usize>) -> Result<AggregationOutcome> {
    let models = input.all_models();
    let n = models.len();
    let k = trim_k.unwrap_or(n / 5);
    if n <= 2 * k {
        return Err(Error::InsufficientModels { needed: 2 * k, actual: n });
    }
    let params = coordinatewise(&models, |sorted| mean(&sorted[k..n - k]))?;
    Ok(AggregationOutcome {
        params,
        local_loss: None,
        neighbors: kept_all(input),
    })
}

/// `floor((n - 2) / 2)`, capped so that `n - f - 2 >= 1`.
pub fn default_krum_f(n: usize) -> usize {
    (n.saturating_sub(2) / 2).min(n.saturating_sub(3))
}

/// Scores each model by the summed squared distance to its `n - f - 2`
/// nearest others and averages the `m` lowest scores (`m = 1` is Krum).
/// Ties go to the lower node id. Falls back to FedAvg when `n < f + 3`.
pub fn krum(input: &AggregationInput, f: Option<usize>, m: usize) -> Result<AggregationOutcome> {
    let candidates = input.models_by_id();
    let n = candidates.len();
    let f = f.unwrap_or_else(|| default_krum_f(n));
    if n < f + 3 {
        warn!("krum: {n} models cannot tolerate f = {f}; falling back to fedavg");
        return fedavg(input);
    }
    let scores = krum_scores(&candidates, f);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(candidates[a].0.cmp(&candidates[b].0)));
    let chosen: Vec<usize> = order.into_iter().take(m.clamp(1, n)).collect();

    let selected: Vec<&LayeredParams> = chosen.iter().map(|&i| candidates[i].1).collect();
    let params = if selected.len() == 1 {
        selected[0].clone()
    } else {
        weighted_average(&selected, &vec![1.0; selected.len()])?
    };
    let chosen_ids: Vec<NodeId> = chosen.iter().map(|&i| candidates[i].0).collect();
    let neighbors = input
        .neighbors
        .keys()
        .map(|&id| NeighborTrace {
            filtered: !chosen_ids.contains(&id),
            ..NeighborTrace::kept(id)
        })
        .collect();
    Ok(AggregationOutcome {
        params,
        local_loss: None,
        neighbors,
    })
}

fn krum_scores(candidates: &[(NodeId, &LayeredParams)], f: usize) -> Vec<f64> {
    let flats: Vec<Vec<f32>> = candidates.iter().map(|(_, p)| flatten(p)).collect();
    let n = flats.len();
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = flats[i]
                .iter()
                .zip(&flats[j])
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let closest = n - f - 2;
    (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..closest].iter().sum()
        })
        .collect()
}

/// Rescales each layer of `p` to the norm of the matching layer of
/// `reference`. Zero-norm layers pass through.
fn match_layer_norms(p: &LayeredParams, reference: &LayeredParams) -> (LayeredParams, Vec<f64>) {
    let mut out = p.clone();
    let scales: Vec<f64> = layer_norms(p)
        .into_iter()
        .zip(layer_norms(reference))
        .map(|(np, nr)| if np > 0.0 { nr / np } else { 1.0 })
        .collect();
    for (layer, &s) in out.layers_mut().iter_mut().zip(&scales) {
        layer.values.iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
    }
    (out, scales)
}

/// Trust score `max(0, cos(P_j, M))` with the local model as the trusted
/// reference; neighbors are rescaled to the local layer norms and averaged
/// together with the local model at trust 1.
pub fn fltrust(input: &AggregationInput) -> Result<AggregationOutcome> {
    let mut models = vec![input.local.clone()];
    let mut weights = vec![1.0];
    let mut neighbors = Vec::with_capacity(input.neighbors.len());
    for (&id, &p) in &input.neighbors {
        let sim = cosine_similarity(p, input.local)?;
        let trust = sim.max(0.0);
        let (scaled, scales) = match_layer_norms(p, input.local);
        neighbors.push(NeighborTrace {
            id,
            similarity: Some(sim),
            bootstrap_loss: None,
            weight: Some(trust),
            norm_scales: Some(scales),
            filtered: trust == 0.0,
        });
        if trust > 0.0 {
            models.push(scaled);
            weights.push(trust);
        }
    }
    let refs: Vec<&LayeredParams> = models.iter().collect();
    let params = weighted_average(&refs, &weights)?;
    Ok(AggregationOutcome {
        params,
        local_loss: None,
        neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    fn values(out: &AggregationOutcome) -> Vec<f32> {
        flatten(&out.params)
    }

    #[test]
    fn fedavg_examples() {
        let bs = dummy_bootstrap();
        let local = params(&[1.0, -2.0]);
        assert_eq!(values(&fedavg(&input(&local, &[], &bs)).unwrap()), vec![1.0, -2.0]);
        let twin = [local.clone()];
        assert_eq!(fedavg(&input(&local, &twin, &bs)).unwrap().params, local);
        let other = [params(&[3.0, 0.0])];
        assert_eq!(values(&fedavg(&input(&local, &other, &bs)).unwrap()), vec![2.0, -1.0]);
    }

    #[test]
    fn median_examples() {
        let bs = dummy_bootstrap();
        let local = params(&[1.0]);
        let odd = [params(&[100.0]), params(&[2.0])];
        assert_eq!(values(&coordinate_median(&input(&local, &odd, &bs)).unwrap()), vec![2.0]);
        let even = [params(&[2.0]), params(&[3.0]), params(&[10.0])];
        assert_eq!(values(&coordinate_median(&input(&local, &even, &bs)).unwrap()), vec![2.5]);
        let same = [local.clone(), local.clone()];
        assert_eq!(coordinate_median(&input(&local, &same, &bs)).unwrap().params, local);
    }

    #[test]
    fn trimmed_mean_examples() {
        let bs = dummy_bootstrap();
        let local = params(&[1.0, 7.0]);
        let others = [params(&[2.0, 5.0]), params(&[3.0, 1e6]), params(&[4.0, 6.0]), params(&[5.0, 4.0])];
        let inp = input(&local, &others, &bs);
        assert_eq!(values(&trimmed_mean(&inp, Some(1)).unwrap()), vec![3.0, 6.0]);
        assert_eq!(
            trimmed_mean(&inp, Some(0)).unwrap().params,
            fedavg(&inp).unwrap().params
        );
        assert!(matches!(
            trimmed_mean(&inp, Some(3)),
            Err(Error::InsufficientModels { .. })
        ));
    }

    #[test]
    fn krum_picks_cluster_member() {
        let bs = dummy_bootstrap();
        let local = params(&[0.0, 0.0]);
        let others = [
            params(&[0.1, 0.0]),
            params(&[0.0, 0.1]),
            params(&[-0.1, 0.0]),
            params(&[0.0, -0.1]),
            params(&[50.0, 50.0]),
        ];
        let out = krum(&input(&local, &others, &bs), Some(1), 1).unwrap();
        assert!(values(&out).iter().all(|v| v.abs() <= 0.1));
        assert!(out.neighbors.iter().find(|n| n.id == 5).unwrap().filtered);
    }

    #[test]
    fn krum_identical_models_tie_break() {
        let bs = dummy_bootstrap();
        let local = params(&[4.0]);
        let same = [local.clone(), local.clone(), local.clone()];
        let out = krum(&input(&local, &same, &bs), None, 1).unwrap();
        assert_eq!(out.params, local);
        // Node 0 (local) wins the tie; all neighbors are marked unselected.
        assert!(out.neighbors.iter().all(|n| n.filtered));
    }

    #[test]
    fn krum_falls_back_when_too_few() {
        let bs = dummy_bootstrap();
        let local = params(&[0.0]);
        let other = [params(&[2.0])];
        let out = krum(&input(&local, &other, &bs), None, 1).unwrap();
        assert_eq!(values(&out), vec![1.0]);
    }

    #[test]
    fn multi_krum_averages_best() {
        let bs = dummy_bootstrap();
        let local = params(&[0.0]);
        let others = [params(&[1.0]), params(&[2.0]), params(&[100.0])];
        let out = krum(&input(&local, &others, &bs), Some(1), 2).unwrap();
        // n=4, f=1: one nearest neighbor each; scores 1, 1, 1, 98^2.
        assert_eq!(values(&out), vec![0.5]);
    }

    #[test]
    fn default_f_bounds() {
        assert_eq!(default_krum_f(10), 4);
        assert_eq!(default_krum_f(3), 0);
        assert_eq!(default_krum_f(4), 1);
        for n in 3..20 {
            assert!(n - default_krum_f(n) - 2 >= 1);
        }
    }

    #[test]
    fn fltrust_examples() {
        let bs = dummy_bootstrap();
        let local = params(&[1.0, 2.0]);
        let twins = [local.clone(), local.clone()];
        assert_eq!(fltrust(&input(&local, &twins, &bs)).unwrap().params, local);

        let inverted = [local.scaled(-1.0)];
        let out = fltrust(&input(&local, &inverted, &bs)).unwrap();
        assert_eq!(out.params, local);
        assert_eq!(out.neighbors[0].weight, Some(0.0));
        assert!(out.neighbors[0].filtered);

        let orthogonal = [params(&[2.0, -1.0])];
        let out = fltrust(&input(&local, &orthogonal, &bs)).unwrap();
        assert_eq!(out.neighbors[0].weight, Some(0.0));
    }

    #[test]
    fn fltrust_rescales_to_local_norm() {
        let bs = dummy_bootstrap();
        let local = params(&[3.0, 4.0]);
        let big = [params(&[30.0, 40.0])];
        let out = fltrust(&input(&local, &big, &bs)).unwrap();
        assert_eq!(out.neighbors[0].norm_scales, Some(vec![0.1]));
        for (a, b) in values(&out).iter().zip([3.0, 4.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

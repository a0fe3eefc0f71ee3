//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dfl_core::aggregate::AggregationInput;
use dfl_core::data::{DataKind, Dataset};
use dfl_core::params::{Layer, LayerKind, LayeredParams};
use ndarray::Array2;
use proptest::prelude::*;

pub fn schema_strategy() -> impl Strategy<Value = Vec<LayerKind>> {
    prop::collection::vec(
        prop_oneof![
            (1usize..5, 1usize..6).prop_map(|(rows, cols)| LayerKind::Matrix { rows, cols }),
            (1usize..7).prop_map(|len| LayerKind::Vector { len }),
        ],
        1..4,
    )
}

pub fn params_with(schema: &[LayerKind], values: Vec<f32>) -> LayeredParams {
    let mut it = values.into_iter();
    let layers = schema
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let vals: Vec<f32> = it.by_ref().take(kind.len()).collect();
            match *kind {
                LayerKind::Matrix { rows, cols } => Layer::matrix(format!("l{i}"), rows, cols, vals).unwrap(),
                LayerKind::Vector { .. } => Layer::vector(format!("l{i}"), vals).unwrap(),
            }
        })
        .collect();
    LayeredParams::new(layers).unwrap()
}

/// `count` models sharing one random schema, values from `value`.
pub fn models(
    count: usize,
    value: impl Strategy<Value = f32> + Clone + 'static,
) -> impl Strategy<Value = Vec<LayeredParams>> {
    schema_strategy().prop_flat_map(move |schema| {
        let total: usize = schema.iter().map(LayerKind::len).sum();
        prop::collection::vec(prop::collection::vec(value.clone(), total), count)
            .prop_map(move |all| all.into_iter().map(|v| params_with(&schema, v)).collect::<Vec<_>>())
    })
}

/// Non-zero magnitudes so that no row is all zeros.
pub fn nonzero_value() -> impl Strategy<Value = f32> + Clone {
    (0.05f32..10.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
}

pub fn dummy_bootstrap(dims: usize) -> Dataset {
    Dataset::new(Array2::zeros((1, dims)), vec![0], 2, DataKind::Tabular).unwrap()
}

/// Aggregation input with the local model at node id `local_id` and
/// neighbors numbered around it.
pub fn input<'a>(
    local_id: usize,
    local: &'a LayeredParams,
    neighbors: &'a [LayeredParams],
    bootstrap: &'a Dataset,
) -> AggregationInput<'a> {
    let ids = (0..=neighbors.len()).filter(|&i| i != local_id);
    AggregationInput {
        node: local_id,
        local,
        neighbors: ids.zip(neighbors).collect::<BTreeMap<_, _>>(),
        bootstrap,
        round: 1,
    }
}

//! Fully-connected ReLU network with softmax output, hand-written backprop
//! and Adam.
//!
//! Weight matrices are stored `out x in` (one row per output unit), so the
//! row-wise similarity used by aggregation compares individual neurons.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::params::{Layer, LayerKind, LayeredParams};
use crate::seed;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
        }
    }

    /// Two hidden layers of 256 and 128 units.
    pub fn image_default(input_dim: usize, num_classes: usize) -> Self {
        MlpSpec::new(input_dim, vec![256, 128], num_classes)
    }

    /// One hidden layer of 256 units.
    pub fn tabular_default(input_dim: usize, num_classes: usize) -> Self {
        MlpSpec::new(input_dim, vec![256], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs_per_round: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    3
}

fn default_batch_size() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_round: default_epochs(),
            batch_size: default_batch_size(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// He-style uniform init in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<LayeredParams> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[seed::purpose::INIT]);
    let mut layers = Vec::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        layers.push(Layer::matrix(format!("fc{i}.weight"), fan_out, fan_in, w)?);
        layers.push(Layer::vector(format!("fc{i}.bias"), vec![0.0; fan_out])?);
    }
    LayeredParams::new(layers)
}

/// One dense layer, `w` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

/// Working representation used for forward and backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Dense<T>>,
}

fn cast<A: ToPrimitive, B: FromPrimitive>(a: A) -> B {
    B::from_f64(a.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(|| B::from_f64(f64::NAN).unwrap())
}

impl<T: NdFloat + FromPrimitive> Network<T> {
    /// Interprets `params` as alternating `(weight matrix, bias vector)` pairs.
    pub fn from_params(params: &LayeredParams) -> Result<Self> {
        let layers = params.layers();
        if !layers.len().is_multiple_of(2) {
            return Err(Error::Shape("expected weight/bias layer pairs".into()));
        }
        let mut out: Vec<Dense<T>> = Vec::with_capacity(layers.len() / 2);
        for pair in layers.chunks(2) {
            let (LayerKind::Matrix { rows, cols }, LayerKind::Vector { len }) = (pair[0].kind, pair[1].kind) else {
                return Err(Error::Shape(format!("{} / {} are not a weight/bias pair", pair[0].name, pair[1].name)));
            };
            if len != rows {
                return Err(Error::Shape(format!("bias {} has {len} entries for {rows} units", pair[1].name)));
            }
            if let Some(prev) = out.last() {
                if prev.w.nrows() != cols {
                    return Err(Error::Shape(format!("{} expects {cols} inputs, previous layer has {}", pair[0].name, prev.w.nrows())));
                }
            }
            let w = Array2::from_shape_vec((rows, cols), pair[0].values.iter().map(|&v| cast(v)).collect())
                .map_err(|e| Error::Shape(e.to_string()))?;
            let b = pair[1].values.iter().map(|&v| cast(v)).collect();
            out.push(Dense { w, b });
        }
        Ok(Network { layers: out })
    }

    pub fn to_params(&self) -> Result<LayeredParams> {
        let mut layers = Vec::with_capacity(self.layers.len() * 2);
        for (i, d) in self.layers.iter().enumerate() {
            let (rows, cols) = d.w.dim();
            layers.push(Layer::matrix(format!("fc{i}.weight"), rows, cols, d.w.iter().map(|&v| cast(v)).collect())?);
            layers.push(Layer::vector(format!("fc{i}.bias"), d.b.iter().map(|&v| cast(v)).collect())?);
        }
        LayeredParams::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|d| d.w.nrows()).unwrap_or(0)
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn pre_activations(&self, x: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut zs: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        for (i, d) in self.layers.iter().enumerate() {
            let input = if i == 0 { x.to_owned() } else { relu(&zs[i - 1]) };
            let mut z = input.dot(&d.w.t());
            z += &d.b;
            zs.push(z);
        }
        Ok(zs)
    }

    pub fn probabilities(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let zs = self.pre_activations(x)?;
        let logits = zs.last().expect("network has layers");
        let mut probs = log_softmax(logits)?;
        probs.mapv_inplace(Float::exp);
        Ok(probs)
    }

    /// Mean cross-entropy and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<T>, labels: &[usize]) -> Result<(f64, Network<T>)> {
        let n = labels.len();
        if n == 0 || x.nrows() != n {
            return Err(Error::Shape(format!("{} rows, {} labels", x.nrows(), n)));
        }
        let classes = self.num_classes();
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {classes}")));
        }
        let zs = self.pre_activations(x)?;
        let logp = log_softmax(zs.last().expect("network has layers"))?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -logp[[i, y]].to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            / n as f64;

        let inv_n: T = cast(1.0 / n as f64);
        let mut delta = logp.mapv(Float::exp);
        for (i, &y) in labels.iter().enumerate() {
            delta[[i, y]] -= T::one();
        }
        delta.mapv_inplace(|v| v * inv_n);

        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x.to_owned() } else { relu(&zs[l - 1]) };
            let gw = delta.t().dot(&input);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&self.layers[l].w);
                ndarray::Zip::from(&mut upstream)
                    .and(&zs[l - 1])
                    .for_each(|g, &z| {
                        if z <= T::zero() {
                            *g = T::zero();
                        }
                    });
                delta = upstream;
            }
            grads.push(Dense { w: gw, b: gb });
        }
        grads.reverse();
        Ok((loss, Network { layers: grads }))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().flat_map(|d| {
            [
                d.w.as_slice_mut().expect("standard layout"),
                d.b.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    fn zeros_like(&self) -> Network<T> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    w: Array2::zeros(d.w.raw_dim()),
                    b: Array1::zeros(d.b.raw_dim()),
                })
                .collect(),
        }
    }
}

fn relu<T: NdFloat>(z: &Array2<T>) -> Array2<T> {
    z.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Row-wise log-softmax with the row max subtracted first.
fn log_softmax<T: NdFloat>(logits: &Array2<T>) -> Result<Array2<T>> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("logits".into()));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| v - max);
        let lse = row.iter().map(|&v| v.exp()).fold(T::zero(), |a, b| a + b).ln();
        row.mapv_inplace(|v| v - lse);
    }
    Ok(out)
}

fn net(params: &LayeredParams) -> Result<Network<f32>> {
    Network::from_params(params)
}

/// Class probabilities for each row of `batch`.
pub fn forward(params: &LayeredParams, batch: ArrayView2<f32>) -> Result<Array2<f32>> {
    net(params)?.probabilities(batch)
}

pub fn loss_and_grad(params: &LayeredParams, batch: ArrayView2<f32>, labels: &[usize]) -> Result<(f64, LayeredParams)> {
    let (loss, grads) = net(params)?.loss_and_grad(batch, labels)?;
    Ok((loss, grads.to_params()?))
}

struct Adam<'a> {
    cfg: &'a AdamConfig,
    m: Network<f32>,
    v: Network<f32>,
    step: i32,
}

impl<'a> Adam<'a> {
    fn new(cfg: &'a AdamConfig, like: &Network<f32>) -> Self {
        Adam {
            cfg,
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Network<f32>, grads: &mut Network<f32>) {
        self.step += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step);
        let bias2 = 1.0 - c.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors_mut())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

/// `epochs_per_round` epochs of shuffled mini-batch Adam. Optimizer state
/// starts fresh on every call.
pub fn train_local(params: &LayeredParams, ds: &Dataset, cfg: &TrainConfig) -> Result<LayeredParams> {
    train_local_with_losses(params, ds, cfg).map(|(p, _)| p)
}

/// Like [`train_local`], also returning the mean training loss of each epoch.
pub fn train_local_with_losses(params: &LayeredParams, ds: &Dataset, cfg: &TrainConfig) -> Result<(LayeredParams, Vec<f64>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut network = net(params)?;
    let mut adam = Adam::new(&cfg.adam, &network);
    let mut rng = seed::rng(cfg.seed, &[seed::purpose::TRAIN]);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_per_round);
    for _ in 0..cfg.epochs_per_round {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = ds.features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let (loss, mut grads) = network.loss_and_grad(x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical("training loss".into()));
            }
            loss_sum += loss * batch.len() as f64;
            adam.update(&mut network, &mut grads);
        }
        epoch_losses.push(loss_sum / ds.len() as f64);
    }
    Ok((network.to_params()?, epoch_losses))
}

/// Mean cross-entropy and confusion matrix over `ds`.
pub fn evaluate(params: &LayeredParams, ds: &Dataset) -> Result<(f64, ConfusionMatrix)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let network = net(params)?;
    let mut cm = ConfusionMatrix::new(network.num_classes().max(ds.num_classes));
    let mut loss_sum = 0.0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let zs = network.pre_activations(ds.features.slice(s![start..end, ..]))?;
        let logp = log_softmax(zs.last().expect("network has layers"))?;
        for (row, &y) in logp.rows().into_iter().zip(&ds.labels[start..end]) {
            loss_sum -= row[y] as f64;
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            cm.record(y, pred);
        }
    }
    Ok((loss_sum / ds.len() as f64, cm))
}

/// Mean cross-entropy over `ds` (the bootstrap validation loss).
pub fn mean_loss(params: &LayeredParams, ds: &Dataset) -> Result<f64> {
    evaluate(params, ds).map(|(loss, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataKind;
    use ndarray::array;

    fn toy_separable(n: usize) -> Dataset {
        let mut rng = seed::rng(99, &[]);
        let mut labels = Vec::with_capacity(n);
        let features = Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                labels.push(i % 2);
            }
            let centre = if i % 2 == 0 { -1.0 } else { 1.0 };
            centre + rng.random_range(-0.5f32..0.5)
        });
        Dataset::new(features, labels, 2, DataKind::Tabular).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = MlpSpec::new(30, vec![8, 4], 3);
        let a = init_params(&spec, 5).unwrap();
        assert_eq!(a, init_params(&spec, 5).unwrap());
        assert_ne!(a, init_params(&spec, 6).unwrap());
        for layer in a.layers() {
            match layer.kind {
                LayerKind::Vector { .. } => assert!(layer.values.iter().all(|&v| v == 0.0)),
                LayerKind::Matrix { cols, .. } => {
                    let bound = (6.0 / cols as f64).sqrt() as f32;
                    assert!(layer.values.iter().all(|v| v.abs() <= bound));
                }
            }
        }
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let spec = MlpSpec::new(5, vec![7], 4);
        let p = init_params(&spec, 1).unwrap();
        let x = Array2::from_shape_fn((9, 5), |(i, j)| (i as f32 - 3.0) * (j as f32 + 0.5));
        let probs = forward(&p, x.view()).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let spec = MlpSpec::new(3, vec![4], 5);
        let p = init_params(&spec, 1).unwrap().zeros_like();
        let probs = forward(&p, array![[1.0f32, -2.0, 3.0]].view()).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn hand_computed_tiny_net() {
        // 1 -> 1 -> 2: h = relu(2x - 1), logits = [3h + 0.5, -h]
        let p = LayeredParams::new(vec![
            Layer::matrix("fc0.weight", 1, 1, vec![2.0]).unwrap(),
            Layer::vector("fc0.bias", vec![-1.0]).unwrap(),
            Layer::matrix("fc1.weight", 2, 1, vec![3.0, -1.0]).unwrap(),
            Layer::vector("fc1.bias", vec![0.5, 0.0]).unwrap(),
        ])
        .unwrap();
        let probs = forward(&p, array![[1.5f32], [0.2]].view()).unwrap();
        // x = 1.5: h = 2, logits [6.5, -2]; x = 0.2: h = 0, logits [0.5, 0]
        let p0 = 1.0 / (1.0 + (-8.5f64).exp());
        let p1 = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((probs[[0, 0]] as f64 - p0).abs() < 1e-6);
        assert!((probs[[1, 0]] as f64 - p1).abs() < 1e-6);
        assert!((probs[[1, 1]] as f64 - (1.0 - p1)).abs() < 1e-6);
    }

    #[test]
    fn loss_limits() {
        let spec = MlpSpec::new(2, vec![3], 4);
        let zero = init_params(&spec, 0).unwrap().zeros_like();
        let (loss, grads) = loss_and_grad(&zero, array![[0.3f32, 0.1]].view(), &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
        assert!(grads.is_compatible(&zero));

        let mut saturated = zero.clone();
        saturated.layers_mut()[3].values = vec![0.0, 40.0, 0.0, 0.0];
        let (loss, _) = loss_and_grad(&saturated, array![[0.3f32, 0.1]].view(), &[1]).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn non_finite_params_are_numerical_errors() {
        let spec = MlpSpec::new(2, vec![3], 2);
        let mut p = init_params(&spec, 0).unwrap();
        p.layers_mut()[3].values[0] = f32::NAN;
        assert!(matches!(
            loss_and_grad(&p, array![[1.0f32, 1.0]].view(), &[0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = init_params(&MlpSpec::new(3, vec![2], 2), 0).unwrap();
        assert!(matches!(forward(&p, array![[1.0f32, 2.0]].view()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let ds = toy_separable(40);
        let p = init_params(&MlpSpec::new(2, vec![4], 2), 3).unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        assert_eq!(train_local(&p, &ds, &cfg).unwrap(), p);
    }

    #[test]
    fn training_is_deterministic_and_decreasing() {
        let ds = toy_separable(256);
        let p = init_params(&MlpSpec::new(2, vec![8], 2), 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
            seed: 17,
            ..TrainConfig::default()
        };
        let (a, losses) = train_local_with_losses(&p, &ds, &cfg).unwrap();
        let (b, _) = train_local_with_losses(&p, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(losses.len(), 3);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "losses {losses:?}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = toy_separable(4).subset(&[]);
        let p = init_params(&MlpSpec::new(2, vec![2], 2), 0).unwrap();
        assert!(matches!(train_local(&p, &ds, &TrainConfig::default()), Err(Error::EmptyDataset)));
        assert!(matches!(evaluate(&p, &ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn evaluate_counts_and_uniform_loss() {
        let ds = toy_separable(10);
        let p = init_params(&MlpSpec::new(2, vec![3], 2), 0).unwrap().zeros_like();
        let (loss, cm) = evaluate(&p, &ds).unwrap();
        assert_eq!(cm.total(), 10);
        assert!((loss - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn perfect_classifier_gives_diagonal() {
        // Identity-like 2 -> 2 -> 2 net on the separable toy: logit_c = +/- 10 x0.
        let p = LayeredParams::new(vec![
            Layer::matrix("fc0.weight", 2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
            Layer::vector("fc0.bias", vec![0.0, 0.0]).unwrap(),
            Layer::matrix("fc1.weight", 2, 2, vec![0.0, 10.0, 10.0, 0.0]).unwrap(),
            Layer::vector("fc1.bias", vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let (_, cm) = evaluate(&p, &toy_separable(50)).unwrap();
        assert_eq!(cm.get(0, 1) + cm.get(1, 0), 0);
        assert_eq!(cm.get(0, 0) + cm.get(1, 1), 50);
    }
}

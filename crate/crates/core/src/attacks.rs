//! Poisoning behaviours of malicious nodes.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataKind, Dataset};
use crate::error::{Error, Result};
use crate::params::LayeredParams;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    /// Both diagonals of a `size x size` square.
    ImageX { size: usize, corner: Corner },
    /// First `k` features set to 1.
    TabularOnes { k: usize },
}

impl Default for Trigger {
    fn default() -> Self {
        Trigger::ImageX {
            size: 5,
            corner: Corner::TopLeft,
        }
    }
}

impl Trigger {
    /// Feature indices the trigger sets to 1.0 for a dataset of this kind.
    pub fn cells(&self, kind: DataKind, dims: usize) -> Result<Vec<usize>> {
        match (*self, kind) {
            (Trigger::ImageX { size, corner }, DataKind::Image { height, width }) => {
                if size == 0 || size > height || size > width {
                    return Err(Error::Trigger(format!("{size}x{size} X in a {height}x{width} image")));
                }
                let (r0, c0) = match corner {
                    Corner::TopLeft => (0, 0),
                    Corner::TopRight => (0, width - size),
                    Corner::BottomLeft => (height - size, 0),
                    Corner::BottomRight => (height - size, width - size),
                    Corner::Center => ((height - size) / 2, (width - size) / 2),
                };
                let mut cells: Vec<usize> = (0..size)
                    .flat_map(|i| [(r0 + i) * width + c0 + i, (r0 + i) * width + c0 + size - 1 - i])
                    .collect();
                cells.sort_unstable();
                cells.dedup();
                Ok(cells)
            }
            (Trigger::TabularOnes { k }, DataKind::Tabular) => {
                if k == 0 || k > dims {
                    return Err(Error::Trigger(format!("{k} trigger dims of {dims}")));
                }
                Ok((0..k).collect())
            }
            (t, k) => Err(Error::Trigger(format!("{t:?} does not apply to {k:?} data"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    None,
    /// Salt noise on the shared model: a fraction `nr` of parameters is set to `±amplitude`.
    ModelPoison {
        #[serde(default = "default_nr")]
        nr: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f32,
    },
    LabelFlipUntargeted,
    LabelFlipTargeted { src: usize, target: usize },
    Backdoor {
        target: usize,
        #[serde(default)]
        trigger: Trigger,
        #[serde(default = "default_backdoor_fraction")]
        fraction: f64,
    },
}

fn default_nr() -> f64 {
    0.8
}

fn default_amplitude() -> f32 {
    1.0
}

fn default_backdoor_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Poisoned node ratio.
    #[serde(default)]
    pub pnr: f64,
    /// Node never chosen as malicious.
    #[serde(default)]
    pub observer: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            pnr: 0.0,
            observer: None,
        }
    }
}

impl AttackConfig {
    pub fn is_none(&self) -> bool {
        matches!(self.kind, AttackKind::None)
    }

    /// Field-level validation messages (empty when valid).
    pub fn problems(&self, num_classes: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.pnr) {
            out.push(format!("attack.pnr = {} must lie in [0, 1]", self.pnr));
        }
        let check_label = |out: &mut Vec<String>, field: &str, v: usize| {
            if let Some(c) = num_classes {
                if v >= c {
                    out.push(format!("attack.{field} = {v} is not a label of a {c}-class dataset"));
                }
            }
        };
        match &self.kind {
            AttackKind::ModelPoison { nr, amplitude } => {
                if !(*nr > 0.0 && *nr <= 1.0) {
                    out.push(format!("attack.nr = {nr} must lie in (0, 1]"));
                }
                if !(amplitude.is_finite() && *amplitude > 0.0) {
                    out.push(format!("attack.amplitude = {amplitude} must be positive"));
                }
            }
            AttackKind::LabelFlipTargeted { src, target } => {
                if src == target {
                    out.push("attack.src and attack.target must differ".into());
                }
                check_label(&mut out, "src", *src);
                check_label(&mut out, "target", *target);
            }
            AttackKind::Backdoor { target, fraction, .. } => {
                if !(0.0..=1.0).contains(fraction) {
                    out.push(format!("attack.fraction = {fraction} must lie in [0, 1]"));
                }
                check_label(&mut out, "target", *target);
            }
            AttackKind::None | AttackKind::LabelFlipUntargeted => {}
        }
        out
    }
}

/// `round(pnr * n)` distinct node ids, never the observer.
pub fn select_malicious(n_nodes: usize, pnr: f64, seed: u64, observer: Option<usize>) -> BTreeSet<usize> {
    let pool: Vec<usize> = (0..n_nodes).filter(|&i| Some(i) != observer).collect();
    let count = ((pnr.clamp(0.0, 1.0) * n_nodes as f64).round() as usize).min(pool.len());
    let mut rng = seed::rng(seed, &[seed::purpose::MALICIOUS]);
    index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Replaces exactly `round(nr * total)` parameters with `±amplitude`.
pub fn poison_model(p: &LayeredParams, nr: f64, amplitude: f32, seed: u64) -> LayeredParams {
    let total = p.num_params();
    let count = ((nr.clamp(0.0, 1.0) * total as f64).round() as usize).min(total);
    let mut rng = seed::rng(seed, &[seed::purpose::POISON_MODEL]);
    let mut picks = index::sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let signs: Vec<bool> = (0..count).map(|_| rng.random()).collect();

    let mut out = p.clone();
    let mut offsets = Vec::with_capacity(out.layers().len());
    let mut acc = 0;
    for layer in out.layers() {
        offsets.push(acc);
        acc += layer.values.len();
    }
    let mut layer = 0;
    let layers = out.layers_mut();
    for (flat, positive) in picks.into_iter().zip(signs) {
        while flat >= offsets[layer] + layers[layer].values.len() {
            layer += 1;
        }
        layers[layer].values[flat - offsets[layer]] = if positive { amplitude } else { -amplitude };
    }
    out
}

/// Every label replaced by a uniform draw from the other classes.
pub fn flip_labels_untargeted(ds: &Dataset, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed, &[seed::purpose::POISON_DATA]);
    let mut out = ds.clone();
    for l in &mut out.labels {
        let r = rng.random_range(0..ds.num_classes - 1);
        *l = if r >= *l { r + 1 } else { r };
    }
    out
}

/// Relabels every `src` sample as `target`.
pub fn flip_labels_targeted(ds: &Dataset, src: usize, target: usize) -> Dataset {
    let mut out = ds.clone();
    if !ds.labels.contains(&src) {
        warn!("targeted flip: label {src} absent, data unchanged");
        return out;
    }
    for l in out.labels.iter_mut().filter(|l| **l == src) {
        *l = target;
    }
    out
}

/// Stamps the trigger on a `fraction` of samples and relabels them `target`.
pub fn implant_backdoor(ds: &Dataset, trigger: &Trigger, target: usize, fraction: f64, seed: u64) -> Result<Dataset> {
    let cells = trigger.cells(ds.kind, ds.dims())?;
    let count = ((fraction.clamp(0.0, 1.0) * ds.len() as f64).round() as usize).min(ds.len());
    let mut rng = seed::rng(seed, &[seed::purpose::POISON_DATA]);
    let picks = index::sample(&mut rng, ds.len(), count);
    let mut out = ds.clone();
    for i in picks {
        let mut row = out.features.row_mut(i);
        for &c in &cells {
            row[c] = 1.0;
        }
        out.labels[i] = target;
    }
    Ok(out)
}

/// The triggered evaluation set: every sample stamped, true labels kept.
pub fn build_backdoor_eval_set(test: &Dataset, trigger: &Trigger) -> Result<Dataset> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cells = trigger.cells(test.kind, test.dims())?;
    let mut out = test.clone();
    for mut row in out.features.rows_mut() {
        for &c in &cells {
            row[c] = 1.0;
        }
    }
    Ok(out)
}

/// Applies the data-side part of an attack to a malicious node's training set.
pub fn poison_training_data(ds: &Dataset, kind: &AttackKind, seed: u64) -> Result<Dataset> {
    Ok(match kind {
        AttackKind::None | AttackKind::ModelPoison { .. } => ds.clone(),
        AttackKind::LabelFlipUntargeted => flip_labels_untargeted(ds, seed),
        AttackKind::LabelFlipTargeted { src, target } => flip_labels_targeted(ds, *src, *target),
        AttackKind::Backdoor {
            target,
            trigger,
            fraction,
        } => implant_backdoor(ds, trigger, *target, *fraction, seed)?,
    })
}

//! Layered model parameters and the algebra aggregators need on them.
//!
//! Values are stored as `f32`; every reduction (dot products, norms,
//! averages) accumulates in `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPRM";
const FORMAT_VERSION: u16 = 1;
const TAG_MATRIX: u8 = 0;
const TAG_VECTOR: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

impl LayerKind {
    pub fn len(&self) -> usize {
        match *self {
            LayerKind::Matrix { rows, cols } => rows * cols,
            LayerKind::Vector { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row length used for row-wise similarity. Vectors form a single row.
    pub fn row_len(&self) -> usize {
        match *self {
            LayerKind::Matrix { cols, .. } => cols,
            LayerKind::Vector { len } => len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub values: Vec<f32>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if values.len() != kind.len() {
            return Err(Error::Shape(format!(
                "layer {name}: {:?} needs {} values, got {}",
                kind,
                kind.len(),
                values.len()
            )));
        }
        Ok(Layer { name, kind, values })
    }

    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        Layer::new(name, LayerKind::Matrix { rows, cols }, values)
    }

    pub fn vector(name: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let len = values.len();
        Layer::new(name, LayerKind::Vector { len }, values)
    }

    /// Rows for similarity purposes; a vector layer is one row.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let row_len = self.kind.row_len().max(1);
        self.values.chunks(row_len)
    }

    /// Frobenius norm (L2 norm for vectors).
    pub fn norm(&self) -> f64 {
        sq_norm(&self.values).sqrt()
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.name == other.name && self.kind == other.kind
    }
}

/// Ordered layer list: the unit nodes exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParams {
    layers: Vec<Layer>,
}

/// Names and kinds of a parameter set, without values.
pub type Schema = Vec<(String, LayerKind)>;

impl LayeredParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("parameter set has no layers".into()));
        }
        Ok(LayeredParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn schema(&self) -> Schema {
        self.layers.iter().map(|l| (l.name.clone(), l.kind)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values.iter().all(|v| v.is_finite()))
    }

    pub fn is_compatible(&self, other: &LayeredParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn check_compatible(&self, other: &LayeredParams) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "layer count {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if !a.same_shape(b) {
                return Err(Error::Shape(format!(
                    "layer {} {:?} vs {} {:?}",
                    a.name, a.kind, b.name, b.kind
                )));
            }
        }
        Ok(())
    }

    /// Same shape, every value zero.
    pub fn zeros_like(&self) -> LayeredParams {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                kind: l.kind,
                values: vec![0.0; l.values.len()],
            })
            .collect();
        LayeredParams { layers }
    }

    pub fn scaled(&self, factor: f32) -> LayeredParams {
        let mut out = self.clone();
        out.layers
            .iter_mut()
            .flat_map(|l| l.values.iter_mut())
            .for_each(|v| *v *= factor);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_params() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&(layer.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(layer.name.as_bytes());
            match layer.kind {
                LayerKind::Matrix { rows, cols } => {
                    buf.push(TAG_MATRIX);
                    buf.extend_from_slice(&(rows as u32).to_le_bytes());
                    buf.extend_from_slice(&(cols as u32).to_le_bytes());
                }
                LayerKind::Vector { len } => {
                    buf.push(TAG_VECTOR);
                    buf.extend_from_slice(&(len as u32).to_le_bytes());
                }
            }
            for v in &layer.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad parameter blob magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported parameter blob version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("layer name: {e}")))?
                .to_string();
            let kind = match r.take(1)?[0] {
                TAG_MATRIX => LayerKind::Matrix {
                    rows: r.u32()? as usize,
                    cols: r.u32()? as usize,
                },
                TAG_VECTOR => LayerKind::Vector { len: r.u32()? as usize },
                tag => return Err(Error::Format(format!("unknown layer kind tag {tag}"))),
            };
            let payload = r.take(kind.len() * 4)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            layers.push(Layer::new(name, kind, values)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        LayeredParams::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        LayeredParams::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated parameter blob".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn sq_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum()
}

/// Layer-wise average of row-wise average cosine similarity.
///
/// Each matrix row of `p` is compared with the matching row of `m`; vector
/// layers count as one row. A row with zero norm on either side contributes 0.
pub fn cosine_similarity(p: &LayeredParams, m: &LayeredParams) -> Result<f64> {
    p.check_compatible(m)?;
    let mut total = 0.0;
    for (lp, lm) in p.layers.iter().zip(&m.layers) {
        let mut layer_sum = 0.0;
        let mut rows = 0usize;
        for (rp, rm) in lp.rows().zip(lm.rows()) {
            let denom = (sq_norm(rp) * sq_norm(rm)).sqrt();
            if denom > 0.0 {
                layer_sum += dot(rp, rm) / denom;
            }
            rows += 1;
        }
        if rows > 0 {
            total += layer_sum / rows as f64;
        }
    }
    Ok((total / p.layers.len() as f64).clamp(-1.0, 1.0))
}

/// Frobenius norm of each layer, in layer order.
pub fn layer_norms(p: &LayeredParams) -> Vec<f64> {
    p.layers.iter().map(Layer::norm).collect()
}

/// Convex combination `Σ w_i p_i / Σ w_i`, accumulated in `f64`.
pub fn weighted_average(params: &[&LayeredParams], weights: &[f64]) -> Result<LayeredParams> {
    let first = params
        .first()
        .ok_or(Error::InsufficientModels { needed: 0, actual: 0 })?;
    if params.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!("aggregation weight {w}")));
    }
    for p in &params[1..] {
        first.check_compatible(p)?;
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateAggregation(total));
    }

    let mut out = first.zeros_like();
    for (l, out_layer) in out.layers.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; out_layer.values.len()];
        for (p, &w) in params.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(&p.layers[l].values) {
                *a += w * v as f64;
            }
        }
        for (o, a) in out_layer.values.iter_mut().zip(acc) {
            *o = (a / total) as f32;
        }
    }
    Ok(out)
}

/// Concatenates layers in order, row-major within each layer.
pub fn flatten(p: &LayeredParams) -> Vec<f32> {
    let mut out = Vec::with_capacity(p.num_params());
    for layer in &p.layers {
        out.extend_from_slice(&layer.values);
    }
    out
}

pub fn unflatten(schema: &Schema, values: &[f32]) -> Result<LayeredParams> {
    let expected: usize = schema.iter().map(|(_, k)| k.len()).sum();
    if expected != values.len() {
        return Err(Error::Shape(format!(
            "schema needs {expected} values, got {}",
            values.len()
        )));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(schema.len());
    for (name, kind) in schema {
        let n = kind.len();
        layers.push(Layer::new(name.clone(), *kind, values[offset..offset + n].to_vec())?);
        offset += n;
    }
    LayeredParams::new(layers)
}

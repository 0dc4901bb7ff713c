//! Low-rank adaptation of named weight matrices, plus the binding layer
//! that decides how parameters enter a computation graph: as trainable
//! leaves, frozen constants, or base weights composed with adapter factors.
//!
//! For a base matrix `W` of shape `[out_dim, in_dim]` the adapted value is
//! `W + (alpha/rank) * B * A` with `A: [rank, in_dim]` and `B: [out_dim,
//! rank]`. `B` starts at zero, so a fresh adapter is an exact identity.

use crate::ckpt::{decode_f32_base64, encode_f32_base64};
use crate::error::{Error, Result};
use crate::flow::PatchMixer;
use crate::graph::{Gradients, Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// How parameters are introduced into a graph. Models call `bind` once per
/// parameter per forward pass and use the returned node.
pub trait WeightBinder<T: Real> {
    fn bind(&mut self, g: &mut Graph<T>, name: &str, value: &Tensor<T>) -> NodeId;

    /// Whether this binder introduces gradient-tracked leaves.
    fn tracks_gradients(&self) -> bool {
        false
    }
}

/// Binds every parameter directly: trainable for pretraining, frozen for
/// plain inference.
pub struct PlainBinder {
    trainable: bool,
    bound: Vec<(String, NodeId)>,
}

impl PlainBinder {
    pub fn trainable() -> Self {
        PlainBinder {
            trainable: true,
            bound: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        PlainBinder {
            trainable: false,
            bound: Vec::new(),
        }
    }

    pub fn bound(&self) -> &[(String, NodeId)] {
        &self.bound
    }

    /// Gradients keyed by parameter name. A parameter bound several times in
    /// one graph (multi-step sampling) gets its contributions summed.
    pub fn collect_grads<T: Real>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, id) in &self.bound {
            if let Some(g) = grads.get(*id) {
                out.entry(name.clone())
                    .and_modify(|acc| *acc = acc.add(g).unwrap())
                    .or_insert_with(|| g.clone());
            }
        }
        out
    }
}

impl<T: Real> WeightBinder<T> for PlainBinder {
    fn bind(&mut self, g: &mut Graph<T>, name: &str, value: &Tensor<T>) -> NodeId {
        let id = g.leaf(value.clone(), self.trainable);
        if self.trainable {
            self.bound.push((name.to_string(), id));
        }
        id
    }

    fn tracks_gradients(&self) -> bool {
        self.trainable
    }
}

/// Rule selecting which base matrices receive adapter factors.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TargetSelector {
    /// Every 2-D weight matrix large enough to host the rank in both
    /// dimensions. Smaller tables (for example tiny embedding matrices)
    /// cannot carry a rank-r factorization and are skipped.
    All2d,
    /// 2-D matrices whose name ends with the given suffix.
    Suffix(String),
    /// An explicit list of parameter names.
    Names(Vec<String>),
}

impl TargetSelector {
    fn matches(&self, name: &str, shape: &[usize]) -> bool {
        match self {
            TargetSelector::All2d => shape.len() == 2,
            TargetSelector::Suffix(s) => name.ends_with(s.as_str()),
            TargetSelector::Names(list) => list.iter().any(|n| n == name),
        }
    }
}

/// One adapted matrix: `A` is `[rank, in_dim]`, `B` is `[out_dim, rank]`,
/// where the base matrix has shape `[out_dim, in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T> {
    pub name: String,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> LoraLayer<T> {
    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }
}

/// The distilled artifact: low-rank factor pairs for a set of base
/// matrices, with the scale metadata needed to apply them.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation used to draw the A matrices at init; recorded so
    /// a run is reproducible from its artifacts alone.
    pub init_scale: f64,
    pub target_selector: TargetSelector,
    /// Sorted by layer name.
    pub layers: Vec<LoraLayer<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub init_scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 40.0,
            init_scale: 0.02,
        }
    }
}

impl<T: Real> LoraAdapter<T> {
    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    pub fn layer(&self, name: &str) -> Option<&LoraLayer<T>> {
        self.layers
            .binary_search_by(|l| l.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LoraLayer<T>> {
        match self.layers.binary_search_by(|l| l.name.as_str().cmp(name)) {
            Ok(i) => Some(&mut self.layers[i]),
            Err(_) => None,
        }
    }

    /// Total number of adapter parameters (all A and B entries).
    pub fn total_elements(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.a.numel() + l.b.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            init_scale: self.init_scale,
            target_selector: self.target_selector.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    name: l.name.clone(),
                    a: l.a.cast::<U>(),
                    b: l.b.cast::<U>(),
                })
                .collect(),
        }
    }

    /// Largest elementwise difference across all factor matrices. Errors if
    /// the two adapters have different layer sets or factor shapes.
    pub fn max_abs_diff(&self, other: &LoraAdapter<T>) -> Result<T> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::adapter("adapters have different layer counts"));
        }
        let mut m = T::zero();
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name {
                return Err(Error::adapter(format!(
                    "layer mismatch: '{}' vs '{}'",
                    a.name, b.name
                )));
            }
            m = m.max(a.a.max_abs_diff(&b.a)).max(a.b.max_abs_diff(&b.b));
        }
        Ok(m)
    }

    /// Checks that every adapted layer exists in the model with the shape
    /// the factors were built for.
    pub fn validate_against(&self, model: &PatchMixer<T>) -> Result<()> {
        for l in &self.layers {
            let w = model.params().get(&l.name).map_err(|_| {
                Error::adapter(format!("model has no parameter '{}'", l.name))
            })?;
            if w.shape() != [l.out_dim(), l.in_dim()] {
                return Err(Error::adapter(format!(
                    "layer '{}': base shape {:?}, adapter built for [{}, {}]",
                    l.name,
                    w.shape(),
                    l.out_dim(),
                    l.in_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Initialize an adapter against a velocity model. Every B is zero and
/// every A is zero-mean gaussian with `init_scale` standard deviation, so
/// the adapted model is initially identical to the base model.
pub fn init_adapter<T: Real>(
    model: &PatchMixer<T>,
    cfg: LoraConfig,
    selector: TargetSelector,
    rng: &mut ChaCha8Rng,
) -> Result<LoraAdapter<T>> {
    if cfg.rank == 0 {
        return Err(Error::invalid("rank must be >= 1"));
    }
    if !(cfg.alpha > 0.0) || !cfg.alpha.is_finite() {
        return Err(Error::invalid("alpha must be positive and finite"));
    }
    let mut layers = Vec::new();
    for (name, w) in model.params().iter() {
        if !selector.matches(name, w.shape()) {
            continue;
        }
        if w.shape().len() != 2 {
            return Err(Error::adapter(format!(
                "selector matched '{}' which is not 2-D (shape {:?})",
                name,
                w.shape()
            )));
        }
        let (rows, cols) = w.dims2()?;
        if cfg.rank > rows.min(cols) {
            if matches!(selector, TargetSelector::All2d) {
                // The blanket selector quietly skips matrices too small to
                // host the rank; explicit selectors fail loudly below.
                continue;
            }
            return Err(Error::adapter(format!(
                "rank {} exceeds a dimension of '{}' (shape {:?})",
                cfg.rank,
                name,
                w.shape()
            )));
        }
        layers.push(LoraLayer {
            name: name.clone(),
            a: Tensor::randn_scaled(vec![cfg.rank, cols], T::from_f64(cfg.init_scale), rng),
            b: Tensor::zeros(vec![rows, cfg.rank]),
        });
    }
    if layers.is_empty() {
        return Err(Error::adapter("target selector matched no parameters"));
    }
    Ok(LoraAdapter {
        rank: cfg.rank,
        alpha: cfg.alpha,
        init_scale: cfg.init_scale,
        target_selector: selector,
        layers,
    })
}

/// `W + (alpha/rank) * B * A`, the runtime-composed weight.
pub fn effective_weight<T: Real>(
    w: &Tensor<T>,
    layer: &LoraLayer<T>,
    rank: usize,
    alpha: f64,
) -> Result<Tensor<T>> {
    let (rows, cols) = w.dims2()?;
    if layer.b.shape() != [rows, rank] || layer.a.shape() != [rank, cols] {
        return Err(Error::adapter(format!(
            "layer '{}': factors A {:?} / B {:?} do not fit base {:?} at rank {}",
            layer.name,
            layer.a.shape(),
            layer.b.shape(),
            w.shape(),
            rank
        )));
    }
    let delta = layer.b.matmul(&layer.a)?;
    w.add_scaled(&delta, T::from_f64(alpha / rank as f64))
}

/// Add every layer's scaled `B*A` into the model weights, replacing runtime
/// composition with plain inference.
pub fn merge<T: Real>(model: &mut PatchMixer<T>, adapter: &LoraAdapter<T>) -> Result<()> {
    adapter.validate_against(model)?;
    for l in &adapter.layers {
        let w = model.params().get(&l.name)?.clone();
        let merged = effective_weight(&w, l, adapter.rank, adapter.alpha)?;
        *model.params_mut().get_mut(&l.name)? = merged;
    }
    Ok(())
}

/// Subtract every layer's scaled `B*A`, restoring base weights to within
/// floating-point rounding.
pub fn unmerge<T: Real>(model: &mut PatchMixer<T>, adapter: &LoraAdapter<T>) -> Result<()> {
    adapter.validate_against(model)?;
    let s = adapter.scale();
    for l in &adapter.layers {
        let delta = l.b.matmul(&l.a)?;
        let w = model.params().get(&l.name)?.clone();
        *model.params_mut().get_mut(&l.name)? = w.add_scaled(&delta, -s)?;
    }
    Ok(())
}

/// A merged copy, leaving the original model untouched.
pub fn merged_model<T: Real>(
    model: &PatchMixer<T>,
    adapter: &LoraAdapter<T>,
) -> Result<PatchMixer<T>> {
    let mut m = PatchMixer::from_params(*model.config(), model.params().clone())?;
    merge(&mut m, adapter)?;
    Ok(m)
}

/// Binds base weights as constants and adapter factors as (optionally
/// trainable) leaves, composing `W + (alpha/rank) * B * A` in-graph so that
/// gradients reach only A and B.
pub struct LoraBinder<'a, T: Real> {
    adapter: &'a LoraAdapter<T>,
    trainable: bool,
    bound: Vec<(String, NodeId, NodeId)>,
}

impl<'a, T: Real> LoraBinder<'a, T> {
    pub fn trainable(adapter: &'a LoraAdapter<T>) -> Self {
        LoraBinder {
            adapter,
            trainable: true,
            bound: Vec::new(),
        }
    }

    pub fn frozen(adapter: &'a LoraAdapter<T>) -> Self {
        LoraBinder {
            adapter,
            trainable: false,
            bound: Vec::new(),
        }
    }

    /// Per-layer (A, B) gradients, summed over repeated bindings.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, (Tensor<T>, Tensor<T>)> {
        let mut out: BTreeMap<String, (Tensor<T>, Tensor<T>)> = BTreeMap::new();
        for (name, a_id, b_id) in &self.bound {
            let (ga, gb) = match (grads.get(*a_id), grads.get(*b_id)) {
                (Some(ga), Some(gb)) => (ga.clone(), gb.clone()),
                _ => continue,
            };
            out.entry(name.clone())
                .and_modify(|(aa, bb)| {
                    *aa = aa.add(&ga).unwrap();
                    *bb = bb.add(&gb).unwrap();
                })
                .or_insert((ga, gb));
        }
        out
    }
}

impl<'a, T: Real> WeightBinder<T> for LoraBinder<'a, T> {
    fn bind(&mut self, g: &mut Graph<T>, name: &str, value: &Tensor<T>) -> NodeId {
        match self.adapter.layer(name) {
            None => g.constant(value.clone()),
            Some(l) => {
                let w = g.constant(value.clone());
                let a = g.leaf(l.a.clone(), self.trainable);
                let b = g.leaf(l.b.clone(), self.trainable);
                if self.trainable {
                    self.bound.push((name.to_string(), a, b));
                }
                let delta = g.matmul(b, a);
                g.add_scaled(w, delta, self.adapter.scale())
            }
        }
    }

    fn tracks_gradients(&self) -> bool {
        self.trainable
    }
}

const ADAPTER_FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct LayerFile {
    name: String,
    in_dim: usize,
    out_dim: usize,
    #[serde(rename = "A")]
    a: String,
    #[serde(rename = "B")]
    b: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AdapterFile {
    format_version: u32,
    rank: usize,
    alpha: f64,
    init_scale: f64,
    target_selector: TargetSelector,
    layers: Vec<LayerFile>,
}

/// Serialize to the adapter checkpoint JSON. Matrices are stored as base64
/// little-endian 32-bit floats, row-major, so the file is precision-stable
/// regardless of the in-memory scalar type.
pub fn adapter_to_json<T: Real>(adapter: &LoraAdapter<T>) -> Result<String> {
    let layers = adapter
        .layers
        .iter()
        .map(|l| LayerFile {
            name: l.name.clone(),
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            a: encode_f32_base64(&l.a.cast::<f32>()),
            b: encode_f32_base64(&l.b.cast::<f32>()),
        })
        .collect();
    let file = AdapterFile {
        format_version: ADAPTER_FORMAT_VERSION,
        rank: adapter.rank,
        alpha: adapter.alpha,
        init_scale: adapter.init_scale,
        target_selector: adapter.target_selector.clone(),
        layers,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn adapter_from_json<T: Real>(text: &str) -> Result<LoraAdapter<T>> {
    let file: AdapterFile = serde_json::from_str(text)?;
    if file.format_version != ADAPTER_FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "adapter format version {} (supported: {})",
            file.format_version, ADAPTER_FORMAT_VERSION
        )));
    }
    if file.rank == 0 {
        return Err(Error::checkpoint("adapter rank must be >= 1"));
    }
    if !(file.alpha > 0.0) || !file.alpha.is_finite() {
        return Err(Error::checkpoint("adapter alpha must be positive"));
    }
    let mut layers: Vec<LoraLayer<T>> = Vec::with_capacity(file.layers.len());
    for lf in &file.layers {
        let a32 = decode_f32_base64(&lf.a, vec![file.rank, lf.in_dim]).map_err(|e| {
            Error::checkpoint(format!("layer '{}': A payload: {}", lf.name, e))
        })?;
        let b32 = decode_f32_base64(&lf.b, vec![lf.out_dim, file.rank]).map_err(|e| {
            Error::checkpoint(format!("layer '{}': B payload: {}", lf.name, e))
        })?;
        if !a32.is_finite() || !b32.is_finite() {
            return Err(Error::checkpoint(format!(
                "layer '{}': non-finite factor entries",
                lf.name
            )));
        }
        layers.push(LoraLayer {
            name: lf.name.clone(),
            a: a32.cast::<T>(),
            b: b32.cast::<T>(),
        });
    }
    layers.sort_by(|x, y| x.name.cmp(&y.name));
    for w in layers.windows(2) {
        if w[0].name == w[1].name {
            return Err(Error::checkpoint(format!(
                "duplicate adapter layer '{}'",
                w[0].name
            )));
        }
    }
    Ok(LoraAdapter {
        rank: file.rank,
        alpha: file.alpha,
        init_scale: file.init_scale,
        target_selector: file.target_selector,
        layers,
    })
}

pub fn save_adapter<T: Real>(adapter: &LoraAdapter<T>, path: &Path) -> Result<()> {
    std::fs::write(path, adapter_to_json(adapter)?)?;
    Ok(())
}

pub fn load_adapter<T: Real>(path: &Path) -> Result<LoraAdapter<T>> {
    let text = std::fs::read_to_string(path)?;
    adapter_from_json(&text)
}

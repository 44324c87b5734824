//! Design space: ladders, layer catalog, configurations and exact memory
//! accounting.
//!
//! A [`Config`] assigns one bit-width and one adapter rank to every layer of
//! a [`LayerCatalog`]. Both are drawn from discrete [`Ladder`]s. Memory is
//! counted in whole bytes: quantized backbone storage, per-group quantization
//! metadata, and adapter storage at `adapter_precision_bits`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing list of positive integers (bit-widths or ranks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Ladder(Vec<u32>);

impl Ladder {
    pub fn new(values: Vec<u32>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidLadder(format!(
                "need at least 2 rungs, got {}",
                values.len()
            )));
        }
        if values[0] < 1 {
            return Err(Error::InvalidLadder("values must be >= 1".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidLadder(format!(
                "values must be strictly increasing: {values:?}"
            )));
        }
        Ok(Ladder(values))
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    pub fn max(&self) -> u32 {
        self.0[self.0.len() - 1]
    }

    pub fn index_of(&self, value: u32) -> Option<usize> {
        self.0.iter().position(|&v| v == value)
    }

    pub fn value(&self, index: usize) -> u32 {
        self.0[index]
    }

    /// Nearest lower rung, if any.
    pub fn lower(&self, value: u32) -> Option<u32> {
        let i = self.index_of(value)?;
        (i > 0).then(|| self.0[i - 1])
    }

    /// Nearest higher rung, if any.
    pub fn higher(&self, value: u32) -> Option<u32> {
        let i = self.index_of(value)?;
        self.0.get(i + 1).copied()
    }

    /// Population mean and standard deviation of the index set `{0..K-1}`.
    fn index_stats(&self) -> (f64, f64) {
        let k = self.0.len() as f64;
        let mean = (k - 1.0) / 2.0;
        let std = ((k * k - 1.0) / 12.0).sqrt();
        (mean, std)
    }
}

impl TryFrom<Vec<u32>> for Ladder {
    type Error = Error;
    fn try_from(values: Vec<u32>) -> Result<Self> {
        Ladder::new(values)
    }
}

impl From<Ladder> for Vec<u32> {
    fn from(ladder: Ladder) -> Self {
        ladder.0
    }
}

/// The bit-width ladder `q` and the rank ladder `r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ladders {
    pub q: Ladder,
    pub r: Ladder,
}

impl Ladders {
    pub fn get(&self, knob: Knob) -> &Ladder {
        match knob {
            Knob::Q => &self.q,
            Knob::R => &self.r,
        }
    }
}

impl Default for Ladders {
    fn default() -> Self {
        Ladders {
            q: Ladder(vec![2, 4, 8]),
            r: Ladder(vec![4, 8, 16]),
        }
    }
}

/// Which variable of a layer an edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knob {
    Q,
    R,
}

impl Knob {
    pub const ALL: [Knob; 2] = [Knob::Q, Knob::R];
}

impl fmt::Display for Knob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Knob::Q => f.write_str("q"),
            Knob::R => f.write_str("r"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub backbone_params: u64,
    /// `(d_in, d_out)` of every adapted linear map in the layer.
    pub adapter_targets: Vec<(u64, u64)>,
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidLayer {
            layer: self.name.clone(),
            reason,
        };
        if self.backbone_params == 0 {
            return Err(bad("backbone_params must be positive".into()));
        }
        for (i, &(d_in, d_out)) in self.adapter_targets.iter().enumerate() {
            if d_in == 0 {
                return Err(bad(format!("adapter target {i}: d_in must be positive")));
            }
            if d_out == 0 {
                return Err(bad(format!("adapter target {i}: d_out must be positive")));
            }
        }
        Ok(())
    }
}

/// Ordered, non-empty list of layers with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct LayerCatalog {
    layers: Vec<LayerSpec>,
}

impl LayerCatalog {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            layer.validate()?;
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::InvalidLayer {
                    layer: layer.name.clone(),
                    reason: "duplicate layer name".into(),
                });
            }
        }
        Ok(LayerCatalog { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl TryFrom<Vec<LayerSpec>> for LayerCatalog {
    type Error = Error;
    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        LayerCatalog::new(layers)
    }
}

impl From<LayerCatalog> for Vec<LayerSpec> {
    fn from(c: LayerCatalog) -> Self {
        c.layers
    }
}

/// Storage conventions for adapters and quantization metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryPolicy {
    pub adapter_precision_bits: u32,
    pub quant_group_size: u64,
    /// One scale plus one zero-point per group, 2 bytes each by default.
    pub meta_bytes_per_group: u64,
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        MemoryPolicy {
            adapter_precision_bits: 16,
            quant_group_size: 64,
            meta_bytes_per_group: 4,
        }
    }
}

impl MemoryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.adapter_precision_bits == 0 {
            return Err(Error::InvalidPolicy(
                "adapter_precision_bits must be positive".into(),
            ));
        }
        if self.quant_group_size == 0 {
            return Err(Error::InvalidPolicy("quant_group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer bit-widths `q` and adapter ranks `r`, stored as ladder values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Config {
    pub q: Vec<u32>,
    pub r: Vec<u32>,
}

impl Config {
    pub fn uniform(layers: usize, q: u32, r: u32) -> Self {
        Config {
            q: vec![q; layers],
            r: vec![r; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn get(&self, knob: Knob, layer: usize) -> u32 {
        match knob {
            Knob::Q => self.q[layer],
            Knob::R => self.r[layer],
        }
    }

    pub fn set(&mut self, knob: Knob, layer: usize, value: u32) {
        match knob {
            Knob::Q => self.q[layer] = value,
            Knob::R => self.r[layer] = value,
        }
    }

    pub fn with(&self, knob: Knob, layer: usize, value: u32) -> Config {
        let mut c = self.clone();
        c.set(knob, layer, value);
        c
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, (q, r)) in self.q.iter().zip(&self.r).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{q}/{r}")?;
        }
        f.write_str("]")
    }
}

/// Standardized ordinal-index coordinates: `q` block then `r` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Adapter parameter count: `rank * (d_in + d_out)` summed over targets.
pub fn adapter_param_count(layer: &LayerSpec, rank: u32) -> u64 {
    layer
        .adapter_targets
        .iter()
        .map(|&(d_in, d_out)| rank as u64 * (d_in + d_out))
        .sum()
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Bytes used by a single layer at bit-width `q` and rank `r`.
pub fn layer_memory(layer: &LayerSpec, q: u32, r: u32, policy: &MemoryPolicy) -> u64 {
    let n = layer.backbone_params;
    let backbone = ceil_div(n * q as u64, 8);
    let meta = ceil_div(n, policy.quant_group_size) * policy.meta_bytes_per_group;
    let adapter = ceil_div(
        adapter_param_count(layer, r) * policy.adapter_precision_bits as u64,
        8,
    );
    backbone + meta + adapter
}

/// Sum of [`layer_memory`] over all layers.
pub fn total_memory(config: &Config, catalog: &LayerCatalog, policy: &MemoryPolicy) -> Result<u64> {
    check_dims(config, catalog.len())?;
    Ok(catalog
        .layers()
        .iter()
        .zip(config.q.iter().zip(&config.r))
        .map(|(layer, (&q, &r))| layer_memory(layer, q, r, policy))
        .sum())
}

fn check_dims(config: &Config, layers: usize) -> Result<()> {
    if config.q.len() != layers {
        return Err(Error::DimensionMismatch {
            expected: layers,
            actual: config.q.len(),
        });
    }
    if config.r.len() != layers {
        return Err(Error::DimensionMismatch {
            expected: layers,
            actual: config.r.len(),
        });
    }
    Ok(())
}

/// Catalog, ladders and memory policy bundled together; most search code
/// works against this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: LayerCatalog,
    #[serde(default)]
    pub ladders: Ladders,
    #[serde(default)]
    pub memory_policy: MemoryPolicy,
}

impl ModelSpec {
    pub fn new(catalog: LayerCatalog, ladders: Ladders, policy: MemoryPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(ModelSpec {
            layers: catalog,
            ladders,
            memory_policy: policy,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec =
            serde_json::from_str(text).map_err(|e| Error::json("model spec", e))?;
        spec.memory_policy.validate()?;
        Ok(spec)
    }

    pub fn catalog(&self) -> &LayerCatalog {
        &self.layers
    }

    pub fn policy(&self) -> &MemoryPolicy {
        &self.memory_policy
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate_config(&self, config: &Config) -> Result<()> {
        check_dims(config, self.num_layers())?;
        for knob in Knob::ALL {
            let ladder = self.ladders.get(knob);
            for layer in 0..config.len() {
                let v = config.get(knob, layer);
                if ladder.index_of(v).is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "layer {layer}: {knob}={v} is not on ladder {:?}",
                        ladder.values()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn memory(&self, config: &Config) -> u64 {
        total_memory(config, &self.layers, &self.memory_policy)
            .expect("config dimension matches catalog")
    }

    pub fn layer_memory(&self, layer: usize, q: u32, r: u32) -> u64 {
        layer_memory(&self.layers.layers()[layer], q, r, &self.memory_policy)
    }

    pub fn min_config(&self) -> Config {
        Config::uniform(self.num_layers(), self.ladders.q.min(), self.ladders.r.min())
    }

    pub fn max_config(&self) -> Config {
        Config::uniform(self.num_layers(), self.ladders.q.max(), self.ladders.r.max())
    }

    pub fn index(&self, config: &Config, knob: Knob, layer: usize) -> usize {
        self.ladders
            .get(knob)
            .index_of(config.get(knob, layer))
            .expect("config value on ladder")
    }

    /// Config moved one rung up (`up == true`) or down on `(layer, knob)`.
    pub fn step(&self, config: &Config, layer: usize, knob: Knob, up: bool) -> Option<Config> {
        let ladder = self.ladders.get(knob);
        let v = config.get(knob, layer);
        let next = if up { ladder.higher(v) } else { ladder.lower(v) }?;
        Some(config.with(knob, layer, next))
    }

    /// 2L-dimensional standardized ordinal embedding.
    pub fn embed(&self, config: &Config) -> Embedding {
        let mut coords = Vec::with_capacity(2 * config.len());
        for knob in Knob::ALL {
            let ladder = self.ladders.get(knob);
            let (mean, std) = ladder.index_stats();
            for layer in 0..config.len() {
                let i = self.index(config, knob, layer) as f64;
                coords.push((i - mean) / std);
            }
        }
        Embedding(coords)
    }

    /// Minimum number of single-rung edits turning `a` into `b`.
    pub fn atomic_distance(&self, a: &Config, b: &Config) -> Result<usize> {
        check_dims(a, self.num_layers())?;
        check_dims(b, self.num_layers())?;
        let mut d = 0;
        for knob in Knob::ALL {
            for layer in 0..a.len() {
                d += self
                    .index(a, knob, layer)
                    .abs_diff(self.index(b, knob, layer));
            }
        }
        Ok(d)
    }

    /// Size of the full space `(|Q|·|R|)^L`, saturating.
    pub fn space_size(&self) -> u128 {
        let per = (self.ladders.q.len() * self.ladders.r.len()) as u128;
        let mut total: u128 = 1;
        for _ in 0..self.num_layers() {
            total = total.saturating_mul(per);
        }
        total
    }
}

/// Reads a model-spec JSON file.
pub fn load_model_spec(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelSpec::from_json(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path.display().to_string(), source),
        other => other,
    })
}

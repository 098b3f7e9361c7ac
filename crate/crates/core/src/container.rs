//! On-disk model container: a directory holding `manifest.json` and one
//! little-endian `f32` blob per tensor.
//!
//! Expanded layers store each order's integer codes as an `f32` blob (exact
//! for `|code| < 2²⁴`) and its per-channel scales as JSON numbers, so a
//! reloaded expansion reconstructs bit-identical kernels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ensemble::EnsembleNetwork;
use crate::error::{Error, Result};
use crate::network::{Activation, BatchNorm, Conv2d, Dense, Layer, Network, Padding};
use crate::quantizer::{ExpansionTerm, LayerExpansion, QuantConfig, QuantizedTensor, ResidualExpansion, StructuredMask};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const KNOWN_KINDS: [&str; 6] = ["dense", "conv2d", "batch_norm", "activation", "expanded_dense", "expanded_conv2d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub gamma: f64,
    pub kept_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSpec {
    pub order: usize,
    pub codes: String,
    pub scales: Vec<f64>,
    pub mask: Option<MaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedSpec {
    pub bits: u32,
    pub axis: Option<usize>,
    pub bias: Option<String>,
    pub orders: Vec<OrderSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        weight: String,
        bias: Option<String>,
    },
    Conv2d {
        weight: String,
        bias: Option<String>,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        epsilon: f64,
    },
    Activation {
        function: Activation,
    },
    ExpandedDense {
        #[serde(flatten)]
        expanded: ExpandedSpec,
    },
    ExpandedConv2d {
        stride: usize,
        padding: Padding,
        #[serde(flatten)]
        expanded: ExpandedSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u64,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Orders of one stored expanded layer, as loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredExpansion {
    pub orders: Vec<usize>,
    pub terms: Vec<ExpansionTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    /// Expanded layers appear with their reconstructed kernels.
    pub network: Network,
    pub expanded: BTreeMap<usize, StoredExpansion>,
}

/// What to write for one expanded layer.
struct ExpandedOut<'a> {
    expansion: &'a LayerExpansion,
    orders: Vec<usize>,
    bias: Option<Tensor>,
}

struct Writer {
    dir: PathBuf,
    tensors: BTreeMap<String, TensorEntry>,
}

impl Writer {
    fn blob(&mut self, name: String, shape: &[usize], values: impl Iterator<Item = f64>) -> Result<String> {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
        let path = self.dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        self.tensors.insert(
            name.clone(),
            TensorEntry {
                shape: shape.to_vec(),
                file,
            },
        );
        Ok(name)
    }

    fn tensor(&mut self, name: String, t: &Tensor) -> Result<String> {
        self.blob(name, t.shape(), t.data().iter().copied())
    }
}

fn save_with<'a>(net: &Network, dir: &Path, mut expanded: impl FnMut(usize) -> Option<ExpandedOut<'a>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer {
        dir: dir.to_path_buf(),
        tensors: BTreeMap::new(),
    };
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        if let Some(out) = expanded(i) {
            let bias = out.bias.as_ref().map(|b| w.tensor(format!("layer{i}.bias"), b)).transpose()?;
            let mut orders = Vec::with_capacity(out.orders.len());
            for &k in &out.orders {
                let term = out.expansion.term(k);
                let q = &term.quantized;
                let codes = w.blob(format!("layer{i}.order{k}.codes"), q.shape(), q.values().iter().map(|&v| f64::from(v)))?;
                orders.push(OrderSpec {
                    order: k,
                    codes,
                    scales: q.scales().to_vec(),
                    mask: term.mask.as_ref().map(|m| MaskSpec {
                        gamma: m.gamma(),
                        kept_rows: (0..m.total_rows()).filter(|&r| m.kept_rows()[r]).collect(),
                    }),
                });
            }
            let cfg = out.expansion.config();
            let expanded = ExpandedSpec {
                bits: cfg.bits(),
                axis: cfg.axis(),
                bias,
                orders,
            };
            layers.push(match layer {
                Layer::Dense(_) => LayerSpec::ExpandedDense { expanded },
                Layer::Conv2d(c) => LayerSpec::ExpandedConv2d {
                    stride: c.stride(),
                    padding: c.padding(),
                    expanded,
                },
                other => return Err(Error::Structure(format!("cannot expand a {} layer", other.kind_name()))),
            });
            continue;
        }
        layers.push(match layer {
            Layer::Dense(d) => LayerSpec::Dense {
                weight: w.tensor(format!("layer{i}.weight"), d.weight())?,
                bias: d.bias().map(|b| w.tensor(format!("layer{i}.bias"), b)).transpose()?,
            },
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                weight: w.tensor(format!("layer{i}.weight"), c.weight())?,
                bias: c.bias().map(|b| w.tensor(format!("layer{i}.bias"), b)).transpose()?,
                stride: c.stride(),
                padding: c.padding(),
            },
            Layer::BatchNorm(bn) => LayerSpec::BatchNorm {
                gamma: w.tensor(format!("layer{i}.gamma"), bn.gamma())?,
                beta: w.tensor(format!("layer{i}.beta"), bn.beta())?,
                mean: w.tensor(format!("layer{i}.mean"), bn.mean())?,
                var: w.tensor(format!("layer{i}.var"), bn.var())?,
                epsilon: bn.epsilon(),
            },
            Layer::Activation(a) => LayerSpec::Activation { function: *a },
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: net.shape_before(0).to_vec(),
        layers,
        tensors: w.tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))? + "\n";
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes a plain network; tensors are stored as `f32`.
pub fn save_model(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    save_with(net, dir.as_ref(), |_| None)
}

/// Writes `net` with every weighted layer stored as its full expansion.
pub fn save_expanded(net: &Network, expansion: &ResidualExpansion, dir: impl AsRef<Path>) -> Result<()> {
    expansion.check_matches(net)?;
    save_with(net, dir.as_ref(), |i| {
        expansion.layer(i).map(|e| ExpandedOut {
            expansion: e,
            orders: (1..=e.order()).collect(),
            bias: net.layers()[i].bias().cloned(),
        })
    })
}

/// Writes ensemble member `m` (0-based) of `ens`, built from `expansion`.
pub fn save_ensemble_member(
    net: &Network,
    expansion: &ResidualExpansion,
    ens: &EnsembleNetwork,
    m: usize,
    dir: impl AsRef<Path>,
) -> Result<()> {
    expansion.check_matches(net)?;
    if m >= ens.members().len() {
        return Err(Error::invalid(format!("ensemble has no member {}", m + 1)));
    }
    save_with(net, dir.as_ref(), |i| {
        expansion.layer(i).map(|e| ExpandedOut {
            expansion: e,
            orders: ens.member_orders(m, i),
            bias: ens.members()[m].layers()[i].bias().cloned(),
        })
    })
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Manifest("missing integer `format_version`".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let layers = value
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Manifest("missing `layers` list".into()))?;
    for layer in layers {
        let kind = layer
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Manifest("layer without a `kind`".into()))?;
        if !KNOWN_KINDS.contains(&kind) {
            return Err(Error::UnknownLayerKind(kind.to_string()));
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn raw(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("unresolved tensor reference `{name}`")))?;
        let path = self.dir.join(&entry.file);
        if !path.is_file() {
            return Err(Error::MissingBlob(name.to_string()));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = 4 * entry.shape.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(Error::BlobSize {
                name: name.to_string(),
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok((entry.shape.clone(), data))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.raw(name)?;
        Tensor::new(shape, data).map_err(|e| Error::Manifest(format!("tensor `{name}`: {e}")))
    }

    fn opt(&self, name: &Option<String>) -> Result<Option<Tensor>> {
        name.as_deref().map(|n| self.tensor(n)).transpose()
    }

    fn expansion(&self, spec: &ExpandedSpec) -> Result<(Tensor, StoredExpansion)> {
        if spec.orders.is_empty() {
            return Err(Error::Manifest("expanded layer lists no orders".into()));
        }
        let cfg = QuantConfig::with_axis(spec.bits, spec.axis)?;
        let mut terms = Vec::with_capacity(spec.orders.len());
        for o in &spec.orders {
            let (shape, data) = self.raw(&o.codes)?;
            let values = data
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && v.abs() <= f64::from(i32::MAX) {
                        Ok(v as i32)
                    } else {
                        Err(Error::Manifest(format!("tensor `{}` holds non-integer code {v}", o.codes)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let quantized = QuantizedTensor::from_parts(shape, values, o.scales.clone(), cfg)?;
            let mask = match &o.mask {
                Some(m) => {
                    let rows = quantized.shape()[0];
                    let mut kept = vec![false; rows];
                    for &r in &m.kept_rows {
                        *kept
                            .get_mut(r)
                            .ok_or_else(|| Error::Manifest(format!("mask row {r} outside {rows} rows")))? = true;
                    }
                    Some(StructuredMask::new(kept, m.gamma)?)
                }
                None => None,
            };
            terms.push(ExpansionTerm { quantized, mask });
        }
        let shape = terms[0].quantized.shape().to_vec();
        // the stored orders become 1..=n of a throwaway expansion; the sum
        // runs through the same routine as in-memory reconstruction
        let local = LayerExpansion::from_terms(Tensor::zeros(shape), cfg, unmasked_first(&terms))?;
        let kernel = local.reconstruct(terms.len());
        let orders = spec.orders.iter().map(|o| o.order).collect();
        Ok((kernel, StoredExpansion { orders, terms }))
    }
}

// `from_terms` insists the first term is unmasked; members may start at a
// masked order, and the mask is already baked into the codes.
fn unmasked_first(terms: &[ExpansionTerm]) -> Vec<ExpansionTerm> {
    let mut t = terms.to_vec();
    t[0].mask = None;
    t
}

/// Loads a container, keeping the stored orders of expanded layers.
pub fn load_model_full(dir: impl AsRef<Path>) -> Result<LoadedModel> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let r = Reader {
        dir,
        manifest: &manifest,
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut expanded = BTreeMap::new();
    for (i, spec) in manifest.layers.iter().enumerate() {
        let layer = (|| -> Result<Layer> {
            Ok(match spec {
                LayerSpec::Dense { weight, bias } => Layer::Dense(Dense::new(r.tensor(weight)?, r.opt(bias)?)?),
                LayerSpec::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => Layer::Conv2d(Conv2d::new(r.tensor(weight)?, r.opt(bias)?, *stride, *padding)?),
                LayerSpec::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    epsilon,
                } => Layer::BatchNorm(BatchNorm::new(
                    r.tensor(gamma)?,
                    r.tensor(beta)?,
                    r.tensor(mean)?,
                    r.tensor(var)?,
                    *epsilon,
                )?),
                LayerSpec::Activation { function } => Layer::Activation(*function),
                LayerSpec::ExpandedDense { expanded: e } => {
                    let (kernel, stored) = r.expansion(e)?;
                    expanded.insert(i, stored);
                    Layer::Dense(Dense::new(kernel, r.opt(&e.bias)?)?)
                }
                LayerSpec::ExpandedConv2d {
                    stride,
                    padding,
                    expanded: e,
                } => {
                    let (kernel, stored) = r.expansion(e)?;
                    expanded.insert(i, stored);
                    Layer::Conv2d(Conv2d::new(kernel, r.opt(&e.bias)?, *stride, *padding)?)
                }
            })
        })()
        .map_err(|e| e.at_layer(i))?;
        layers.push(layer);
    }
    let network = Network::new(manifest.input_shape.clone(), layers)?;
    Ok(LoadedModel { network, expanded })
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Network> {
    load_model_full(dir).map(|m| m.network)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub index: usize,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
    /// Stored orders and bit width of expanded layers.
    pub orders: Option<Vec<usize>>,
    pub bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
    pub layers: Vec<LayerDescription>,
}

pub fn describe(model: &LoadedModel) -> ModelDescription {
    let net = &model.network;
    let layers: Vec<LayerDescription> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let parameters = match l {
                Layer::BatchNorm(bn) => 4 * bn.channels(),
                other => other.weight().map_or(0, Tensor::len) + other.bias().map_or(0, Tensor::len),
            };
            let stored = model.expanded.get(&i);
            LayerDescription {
                index: i,
                kind: if stored.is_some() { format!("expanded_{}", l.kind_name()) } else { l.kind_name().to_string() },
                output_shape: net.shape_before(i + 1).to_vec(),
                parameters,
                orders: stored.map(|s| s.orders.clone()),
                bits: stored.map(|s| s.terms[0].quantized.bits()),
            }
        })
        .collect();
    ModelDescription {
        input_shape: net.shape_before(0).to_vec(),
        output_shape: net.output_shape().to_vec(),
        parameters: layers.iter().map(|l| l.parameters).sum(),
        layers,
    }
}

/// Errors that come from a broken container rather than a broken layer;
/// unwraps the layer context added while loading.
pub fn root_cause(err: &Error) -> &Error {
    match err {
        Error::Layer { source, .. } => root_cause(source),
        other => other,
    }
}

//! End-to-end run: fold, expand, optionally ensemble, then bound, cost and
//! measure. Produces a [`Report`] that serializes to canonical JSON.

mod activation;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use activation::FakeQuantNetwork;

use crate::bounds::{ensemble_bound, main_text_bound, network_bound, BoundKind, BoundReport};
use crate::container::{save_ensemble_member, save_expanded};
use crate::ensemble::{
    build_ensemble, default_candidates, logit_norm_from_batch_norm, logit_norm_from_inputs, select_grouping,
    EnsembleNetwork, Grouping, DEFAULT_THRESHOLD_RATIO,
};
use crate::error::{Error, Result};
use crate::headcount::{bops_network, CostReport};
use crate::network::{fold_batch_norm, logits_max_error, Activation, Network};
use crate::quantizer::{expand_network, QuantConfig, ResidualExpansion};
use crate::synth;
use crate::tensor::Tensor;

/// Inputs drawn for the data-free logit-norm estimate.
const PROBE_INPUTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GroupingChoice {
    Explicit {
        sizes: Vec<usize>,
    },
    /// Empty `candidates` means the balanced splits of `K` into 1..=K members.
    Auto {
        candidates: Vec<Vec<usize>>,
        threshold_ratio: f64,
    },
}

impl GroupingChoice {
    pub fn auto() -> Self {
        GroupingChoice::Auto {
            candidates: Vec::new(),
            threshold_ratio: DEFAULT_THRESHOLD_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub bits: u32,
    pub order: usize,
    pub sparsity: f64,
    pub mask_from_order: usize,
    pub grouping: Option<GroupingChoice>,
    pub activation_bits: Option<u32>,
    pub seed: u64,
    pub calibration_inputs: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(bits: u32, order: usize) -> Self {
        RunConfig {
            bits,
            order,
            sparsity: 1.0,
            mask_from_order: 2,
            grouping: None,
            activation_bits: None,
            seed: 0,
            calibration_inputs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        QuantConfig::new(self.bits)?;
        if self.order < 1 {
            return Err(Error::invalid("order must be at least 1"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::invalid(format!("sparsity {} outside (0, 1]", self.sparsity)));
        }
        if self.mask_from_order < 2 {
            return Err(Error::invalid("masking can start at order 2 at the earliest"));
        }
        if let Some(b) = self.activation_bits {
            QuantConfig::new(b)?;
        }
        match &self.grouping {
            Some(GroupingChoice::Explicit { sizes }) => {
                let g = Grouping::new(sizes.clone())?;
                if g.total() != self.order {
                    return Err(Error::invalid(format!("grouping [{g}] does not sum to order {}", self.order)));
                }
            }
            Some(GroupingChoice::Auto { candidates, threshold_ratio }) => {
                if !threshold_ratio.is_finite() {
                    return Err(Error::invalid("threshold ratio must be finite"));
                }
                for c in candidates {
                    let g = Grouping::new(c.clone())?;
                    if g.total() != self.order {
                        return Err(Error::invalid(format!("candidate [{g}] does not sum to order {}", self.order)));
                    }
                }
            }
            None => {}
        }
        Ok(())
    }

    fn masked(&self) -> bool {
        self.sparsity < 1.0 && self.mask_from_order <= self.order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub layers: usize,
    pub weighted_layers: Vec<usize>,
    pub batch_norm_folded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub order: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub kept_rows: usize,
    pub total_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub kind: String,
    pub shape: Vec<usize>,
    pub orders: Vec<OrderSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// False when an activation other than relu/identity rules out
    /// certification; every bound is then absent.
    pub certified: bool,
    pub dense: Option<BoundReport>,
    pub sparse: Option<BoundReport>,
    pub main_text: Option<BoundReport>,
    pub ensemble: Option<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingSummary {
    pub selected: Vec<usize>,
    pub auto: bool,
    pub logit_norm_estimate: Option<f64>,
    pub logit_norm_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Empirical {
    pub inputs: usize,
    /// `max ‖f(x) − f̂(x)‖_∞` between the folded network and its expansion.
    pub u_empirical: f64,
    /// Same, with activations fake-quantized.
    pub u_empirical_activations: Option<f64>,
    /// `max ‖f̂(x) − ensemble(x)‖_∞`.
    pub ensemble_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub model: ModelSummary,
    pub layers: Vec<LayerSummary>,
    /// Headline certified bound: sparse kind when orders are masked, dense
    /// otherwise. Absent when not certified.
    #[serde(rename = "U")]
    pub u: Option<f64>,
    pub bounds: Bounds,
    pub cost: CostReport,
    pub grouping: Option<GroupingSummary>,
    pub empirical: Option<Empirical>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing_ms: Option<f64>,
}

pub struct PipelineOutput {
    pub report: Report,
    /// Folded network rounded to `f32`; the reference every bound refers to.
    pub folded: Network,
    pub expansion: ResidualExpansion,
    pub expanded: Network,
    pub ensemble: Option<EnsembleNetwork>,
}

/// Reads calibration inputs: a JSON list of flat input vectors, or an object
/// with such a list under `inputs`.
pub fn load_calibration(path: impl AsRef<Path>, input_shape: &[usize]) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("calibration file {}: {e}", path.display())))?;
    let list = match &value {
        Value::Object(m) => m.get("inputs").cloned().unwrap_or(Value::Null),
        other => other.clone(),
    };
    let rows: Vec<Vec<f64>> = serde_json::from_value(list)
        .map_err(|e| Error::invalid(format!("calibration file {}: expected a list of number lists ({e})", path.display())))?;
    if rows.is_empty() {
        return Err(Error::invalid("calibration file holds no inputs"));
    }
    rows.into_iter()
        .map(|r| Tensor::new(vec![r.len()], r)?.reshape(input_shape.to_vec()))
        .collect()
}

fn certifiable(net: &Network) -> bool {
    net.activations()
        .all(|a| matches!(a, Activation::Relu | Activation::Identity))
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("{what} is not finite ({v})")))
    }
}

fn layer_summaries(net: &Network, expansion: &ResidualExpansion) -> Vec<LayerSummary> {
    expansion
        .layers()
        .iter()
        .map(|(&i, e)| LayerSummary {
            layer: i,
            kind: net.layers()[i].kind_name().to_string(),
            shape: e.original().shape().to_vec(),
            orders: e
                .terms()
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let scales = t.quantized.scales();
                    let rows = e.original().shape()[0];
                    OrderSummary {
                        order: k + 1,
                        scale_min: scales.iter().copied().fold(f64::INFINITY, f64::min),
                        scale_max: scales.iter().copied().fold(0.0, f64::max),
                        kept_rows: t.mask.as_ref().map_or(rows, |m| m.kept_count()),
                        total_rows: rows,
                    }
                })
                .collect(),
        })
        .collect()
}

fn choose_grouping(
    source: &Network,
    folded: &Network,
    expansion: &ResidualExpansion,
    expanded: &Network,
    config: &RunConfig,
    calib: Option<&[Tensor]>,
) -> Result<Option<GroupingSummary>> {
    match &config.grouping {
        None => Ok(None),
        Some(GroupingChoice::Explicit { sizes }) => Ok(Some(GroupingSummary {
            selected: sizes.clone(),
            auto: false,
            logit_norm_estimate: None,
            logit_norm_source: None,
        })),
        Some(GroupingChoice::Auto { candidates, threshold_ratio }) => {
            let candidates = if candidates.is_empty() {
                default_candidates(config.order)
            } else {
                candidates.iter().map(|c| Grouping::new(c.clone())).collect::<Result<_>>()?
            };
            let (estimate, src) = match (calib, logit_norm_from_batch_norm(source)) {
                (Some(xs), _) => (logit_norm_from_inputs(expanded, xs)?, "calibration"),
                (None, Some(v)) => (v, "batch_norm"),
                (None, None) => {
                    let probes = synth::unit_inputs(&mut synth::rng(config.seed), folded.shape_before(0), PROBE_INPUTS);
                    (logit_norm_from_inputs(expanded, &probes)?, "unit_probes")
                }
            };
            let g = if estimate > 0.0 {
                select_grouping(folded, expansion, &candidates, estimate, *threshold_ratio)?
            } else {
                Grouping::whole(config.order)
            };
            Ok(Some(GroupingSummary {
                selected: g.sizes().to_vec(),
                auto: true,
                logit_norm_estimate: Some(finite(estimate, "logit norm estimate")?),
                logit_norm_source: Some(src.to_string()),
            }))
        }
    }
}

/// Runs the whole pipeline on `source`. `calib` overrides
/// `config.calibration_inputs`; when neither is given no empirical error is
/// measured. Timing is recorded only when `timing` is set, keeping default
/// reports byte-identical across runs.
pub fn run_pipeline(source: &Network, config: &RunConfig, calib: Option<&[Tensor]>, timing: bool) -> Result<PipelineOutput> {
    config.validate()?;
    let loaded;
    let calib = match (calib, &config.calibration_inputs) {
        (Some(xs), _) => Some(xs),
        (None, Some(path)) => {
            loaded = load_calibration(path, source.shape_before(0))?;
            Some(loaded.as_slice())
        }
        (None, None) => None,
    };
    if config.activation_bits.is_some() && calib.is_none() {
        return Err(Error::invalid("activation quantization needs calibration inputs"));
    }

    let folded = fold_batch_norm(source)?.round_to_f32();
    let cfg = QuantConfig::new(config.bits)?;
    let started = Instant::now();
    let expansion = expand_network(&folded, &cfg, config.order, config.sparsity, config.mask_from_order)?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    let expanded = expansion.apply(&folded)?;

    let grouping = choose_grouping(source, &folded, &expansion, &expanded, config, calib)?;
    let ensemble = match &grouping {
        Some(g) => Some(build_ensemble(&folded, &expansion, &Grouping::new(g.selected.clone())?)?),
        None => None,
    };

    let certified = certifiable(&folded);
    let bounds = if certified {
        let masked = config.masked();
        Bounds {
            certified,
            dense: (!masked).then(|| network_bound(&folded, &expansion, BoundKind::Dense)).transpose()?,
            sparse: masked.then(|| network_bound(&folded, &expansion, BoundKind::Sparse)).transpose()?,
            main_text: Some(main_text_bound(&folded, &expansion)?),
            ensemble: ensemble
                .as_ref()
                .map(|e| ensemble_bound(&folded, &expansion, e.grouping()))
                .transpose()?,
        }
    } else {
        Bounds {
            certified,
            dense: None,
            sparse: None,
            main_text: None,
            ensemble: None,
        }
    };
    for b in [&bounds.dense, &bounds.sparse, &bounds.main_text, &bounds.ensemble].into_iter().flatten() {
        finite(b.u, "error bound")?;
    }
    let u = bounds.sparse.as_ref().or(bounds.dense.as_ref()).map(|b| b.u);

    let cost = bops_network(&folded, Some(&expansion), ensemble.as_ref())?;
    finite(cost.original_total, "original cost")?;

    let empirical = match calib {
        Some(xs) => {
            let activations = match config.activation_bits {
                Some(bits) => {
                    let fq = FakeQuantNetwork::calibrate(&expanded, bits, xs)?;
                    Some(logits_max_error(&folded, &fq, xs)?)
                }
                None => None,
            };
            Some(Empirical {
                inputs: xs.len(),
                u_empirical: logits_max_error(&folded, &expanded, xs)?,
                u_empirical_activations: activations,
                ensemble_gap: ensemble.as_ref().map(|e| logits_max_error(&expanded, e, xs)).transpose()?,
            })
        }
        None => None,
    };

    let report = Report {
        config: config.clone(),
        model: ModelSummary {
            input_shape: source.shape_before(0).to_vec(),
            output_shape: source.output_shape().to_vec(),
            layers: folded.layers().len(),
            weighted_layers: folded.weighted_layers(),
            batch_norm_folded: source.layers().len() - folded.layers().len(),
        },
        layers: layer_summaries(&folded, &expansion),
        u,
        bounds,
        cost,
        grouping,
        empirical,
        timing_ms: timing.then_some(elapsed_ms),
    };
    Ok(PipelineOutput {
        report,
        folded,
        expansion,
        expanded,
        ensemble,
    })
}

/// Sorted keys, shortest round-trip floats, two-space indent, trailing
/// newline. Rejects non-finite numbers instead of writing `null`.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Invariant(format!("report serialization: {e}")))?;
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Invariant(format!("report serialization: {e}")))?;
    Ok(text + "\n")
}

pub fn write_report(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, canonical_json(report)?).map_err(|e| Error::io(path, e))
}

/// Writes `dir/expanded` and, for ensembles, `dir/member_<m>` containers.
pub fn write_outputs(out: &PipelineOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    save_expanded(&out.folded, &out.expansion, dir.join("expanded"))?;
    if let Some(ens) = &out.ensemble {
        for m in 0..ens.members().len() {
            save_ensemble_member(&out.folded, &out.expansion, ens, m, dir.join(format!("member_{}", m + 1)))?;
        }
    }
    Ok(())
}

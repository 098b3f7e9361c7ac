//! Bit-operation (BOPs) cost model.
//!
//! A `b`-bit multiplication costs `b·log₂b`; additions are not counted.
//! Full-precision arithmetic is 32-bit. Every expanded layer also pays one
//! full-precision rescale of its inputs and outputs.

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleNetwork;
use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::quantizer::ResidualExpansion;

const FULL_BITS: f64 = 32.0;

/// `b·log₂b`.
pub fn mult_cost(bits: f64) -> f64 {
    bits * bits.log2()
}

/// Geometry of one weighted layer; dense layers use `D = d = s = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    /// Input spatial area `D²` (`H·W` for non-square inputs).
    pub area: usize,
    pub kernel: usize,
    pub stride: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl LayerGeometry {
    pub fn new(d_extent: usize, kernel: usize, stride: usize, n_in: usize, n_out: usize) -> Result<Self> {
        let g = LayerGeometry {
            area: d_extent * d_extent,
            kernel,
            stride,
            n_in,
            n_out,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn dense(n_in: usize, n_out: usize) -> Result<Self> {
        LayerGeometry::new(1, 1, 1, n_in, n_out)
    }

    fn validate(&self) -> Result<()> {
        if [self.area, self.kernel, self.stride, self.n_in, self.n_out].contains(&0) {
            return Err(Error::invalid(format!("layer geometry {self:?} has a zero dimension")));
        }
        Ok(())
    }

    /// Multiplications per full layer evaluation: `D²·d²·n_i·n_o/s²`.
    pub fn multiplies(&self) -> f64 {
        let s2 = (self.stride * self.stride) as f64;
        self.area as f64 * (self.kernel * self.kernel * self.n_in * self.n_out) as f64 / s2
    }

    fn rescales(&self) -> f64 {
        let s2 = (self.stride * self.stride) as f64;
        self.area as f64 * (self.n_in as f64 + self.n_out as f64 / s2)
    }

    /// Geometry of a weighted layer given its input shape.
    pub fn of_layer(layer: &Layer, input_shape: &[usize]) -> Result<Self> {
        match layer {
            Layer::Dense(d) => LayerGeometry::dense(d.in_features(), d.out_features()),
            Layer::Conv2d(c) => {
                let g = LayerGeometry {
                    area: input_shape[1] * input_shape[2],
                    kernel: c.kernel_size(),
                    stride: c.stride(),
                    n_in: c.in_channels(),
                    n_out: c.out_channels(),
                };
                g.validate()?;
                Ok(g)
            }
            other => Err(Error::Structure(format!("{} layers have no cost geometry", other.kind_name()))),
        }
    }
}

/// `D²·(d²·n_i·n_o/s²)·32·log₂32`.
pub fn bops_original(d_extent: usize, kernel: usize, stride: usize, n_in: usize, n_out: usize) -> Result<f64> {
    Ok(original_cost(&LayerGeometry::new(d_extent, kernel, stride, n_in, n_out)?).total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    #[serde(flatten)]
    pub geometry: LayerGeometry,
    pub bits: u32,
    pub order: usize,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub rescale_bops: f64,
    pub mac_bops: f64,
    pub total: f64,
    /// `mac_bops` with a `b`-bit multiply costing `b` instead of `b·log₂b`.
    pub mac_bops_linear: f64,
    pub params: CostParams,
}

/// Full-precision layer: no rescale, 32-bit multiplies.
pub fn original_cost(g: &LayerGeometry) -> LayerCost {
    let mac = g.multiplies() * mult_cost(FULL_BITS);
    LayerCost {
        rescale_bops: 0.0,
        mac_bops: mac,
        total: mac,
        mac_bops_linear: g.multiplies() * FULL_BITS,
        params: CostParams {
            geometry: *g,
            bits: 32,
            order: 1,
            gamma: vec![1.0],
        },
    }
}

/// Rescale `D²·(n_i + n_o/s²)·32·log₂32` plus `b`-bit MACs weighted by the
/// kept fraction of every order.
pub fn bops_expanded(g: &LayerGeometry, bits: u32, gammas: &[f64]) -> Result<LayerCost> {
    g.validate()?;
    if bits < 2 {
        return Err(Error::invalid(format!("bit width {bits} below 2")));
    }
    if gammas.is_empty() {
        return Err(Error::invalid("at least one order is required"));
    }
    if let Some(bad) = gammas.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid(format!("order fraction {bad} outside [0, 1]")));
    }
    let b = f64::from(bits);
    let mass: f64 = gammas.iter().sum();
    let rescale = g.rescales() * mult_cost(FULL_BITS);
    let mac = g.multiplies() * mult_cost(b) * mass;
    Ok(LayerCost {
        rescale_bops: rescale,
        mac_bops: mac,
        total: rescale + mac,
        mac_bops_linear: g.multiplies() * b * mass,
        params: CostParams {
            geometry: *g,
            bits,
            order: gammas.len(),
            gamma: gammas.to_vec(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostEntry {
    pub layer: usize,
    pub kind: String,
    pub original: LayerCost,
    pub expanded: Option<LayerCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCost {
    pub grouping: Vec<usize>,
    /// Each member pays its own rescale at every weighted layer.
    pub member_totals: Vec<f64>,
    pub combined_total: f64,
    /// Largest member, the critical path when members run in parallel.
    pub max_member_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCostEntry>,
    pub original_total: f64,
    pub expanded_total: Option<f64>,
    pub expanded_ratio: Option<f64>,
    pub ensemble: Option<EnsembleCost>,
    pub ensemble_ratio: Option<f64>,
}

/// Costs of `net`, its expansion and an ensemble built from that expansion.
pub fn bops_network(
    net: &Network,
    expansion: Option<&ResidualExpansion>,
    ensemble: Option<&EnsembleNetwork>,
) -> Result<CostReport> {
    if let Some(e) = expansion {
        e.check_matches(net)?;
    }
    if ensemble.is_some() && expansion.is_none() {
        return Err(Error::invalid("ensemble costs need the expansion it was built from"));
    }
    let bits = expansion.map(|e| e.config().bits());
    let mut layers = Vec::new();
    let mut member_totals = ensemble.map(|ens| vec![0.0; ens.members().len()]);
    for i in net.weighted_layers() {
        let layer = &net.layers()[i];
        let g = LayerGeometry::of_layer(layer, net.shape_before(i)).map_err(|e| e.at_layer(i))?;
        let expanded = match expansion {
            Some(e) => {
                let le = e.layer(i).expect("checked coverage");
                let gammas: Vec<f64> = le.terms().iter().map(|t| t.kept_fraction()).collect();
                Some(bops_expanded(&g, bits.unwrap(), &gammas)?)
            }
            None => None,
        };
        if let (Some(ens), Some(totals), Some(e)) = (ensemble, member_totals.as_mut(), expansion) {
            let le = e.layer(i).expect("checked coverage");
            for (m, total) in totals.iter_mut().enumerate() {
                let gammas: Vec<f64> = ens
                    .member_orders(m, i)
                    .into_iter()
                    .map(|k| le.term(k).kept_fraction())
                    .collect();
                *total += bops_expanded(&g, bits.unwrap(), &gammas)?.total;
            }
        }
        layers.push(LayerCostEntry {
            layer: i,
            kind: layer.kind_name().to_string(),
            original: original_cost(&g),
            expanded,
        });
    }
    let original_total: f64 = layers.iter().map(|l| l.original.total).sum();
    let expanded_total = expansion.map(|_| layers.iter().map(|l| l.expanded.as_ref().unwrap().total).sum::<f64>());
    let ensemble = match (ensemble, member_totals) {
        (Some(ens), Some(totals)) => Some(EnsembleCost {
            grouping: ens.grouping().sizes().to_vec(),
            combined_total: totals.iter().sum(),
            max_member_total: totals.iter().copied().fold(0.0, f64::max),
            member_totals: totals,
        }),
        _ => None,
    };
    Ok(CostReport {
        expanded_ratio: expanded_total.map(|t| t / original_total),
        ensemble_ratio: ensemble.as_ref().map(|e| e.combined_total / original_total),
        layers,
        original_total,
        expanded_total,
        ensemble,
    })
}

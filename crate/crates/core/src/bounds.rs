//! Certified worst-case logit error for expanded and ensembled networks.
//!
//! All network bounds are stated for unit-norm inputs. Per-weight bounds are
//! element-wise: `|W − Ŵ| ≤ u` for every element of a channel.

use serde::{Deserialize, Serialize};

use crate::ensemble::Grouping;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm_default;
use crate::network::{Activation, Layer, Network};
use crate::quantizer::{q_max, LayerExpansion, ResidualExpansion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Dense,
    Sparse,
    Ensemble,
    MainText,
}

/// One weighted layer's contribution.
///
/// For `dense`, `sparse` and `main_text` reports `spectral_norm` is `s_l`
/// of the full-precision kernel (1 for `main_text`) and `weight_bound` is
/// the max-over-channels `u_l`. For `ensemble` reports `spectral_norm` is
/// `Σ_k ‖R_l^k‖` and `weight_bound` is the tail-cluster norm sum at the split
/// layer (0 elsewhere).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTerm {
    pub layer: usize,
    pub spectral_norm: f64,
    pub weight_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub bits: u32,
    pub order: usize,
    pub gamma: f64,
    pub grouping: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    #[serde(rename = "U")]
    pub u: f64,
    pub per_layer_terms: Vec<LayerTerm>,
    pub params: BoundParams,
}

fn check_order(e: &LayerExpansion, k: usize) -> Result<()> {
    if k < 1 || k > e.order() {
        return Err(Error::invalid(format!(
            "bound order {k} outside the expansion's 1..={}",
            e.order()
        )));
    }
    Ok(())
}

/// Per-channel `(1/q)^{K−1} · λ₁/2`, with `λ₁` the base-order scale.
pub fn weight_bound(e: &LayerExpansion, k: usize) -> Result<Vec<f64>> {
    check_order(e, k)?;
    let q = f64::from(e.config().q_max());
    let factor = q.powi(-(k as i32 - 1)) / 2.0;
    Ok(e.effective_scales(1).iter().map(|l| l * factor).collect())
}

/// `‖N‖ · λ / (2 q^K)`, the sparse lemma with a precomputed normalized
/// residual norm.
pub fn sparse_bound_from_norm(normalized: f64, lambda: f64, bits: u32, k: usize) -> f64 {
    let q = f64::from(q_max(bits));
    normalized * lambda / (2.0 * q.powi(k as i32))
}

/// Per-channel `‖N‖ · λ₁ / (2 q^K)` for a masked order `K`.
///
/// `‖N‖` is the largest certified error at order `K`, in units of
/// `λ₁/(2 q^K)` of its channel: kept rows contribute their rounding half-step
/// `λ_K/2`, pruned rows their exact residual. All-zero gives the `‖0‖ = 1`
/// convention.
pub fn sparse_weight_bound(e: &LayerExpansion, k: usize) -> Result<Vec<f64>> {
    check_order(e, k)?;
    let term = e.term(k);
    let mask = term
        .mask
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("order {k} carries no mask")))?;
    let bits = e.config().bits();
    let lambda1 = e.effective_scales(1);
    let lambda_k = e.effective_scales(k);
    let resid = e.residual_before(k);
    let cols = resid.len() / mask.total_rows();
    let mut norm: f64 = 0.0;
    for (idx, r) in resid.data().iter().enumerate() {
        let c = term.quantized.channel_of(idx);
        let unit = sparse_bound_from_norm(1.0, lambda1[c], bits, k);
        if unit == 0.0 {
            continue;
        }
        let err = if mask.kept_rows()[idx / cols] { lambda_k[c] / 2.0 } else { r.abs() };
        norm = norm.max(err / unit);
    }
    if norm == 0.0 {
        norm = 1.0;
    }
    Ok(lambda1
        .iter()
        .map(|&l| sparse_bound_from_norm(norm, l, bits, k))
        .collect())
}

/// `∏_l (Σ_{i≤l} s_i u_i + 1) − 1`, evaluated as `expm1(Σ ln1p)` so tiny
/// bounds keep their precision.
pub fn product_bound(terms: &[(f64, f64)]) -> f64 {
    let mut prefix = 0.0;
    let mut log_sum = 0.0;
    for &(s, u) in terms {
        prefix += s * u;
        log_sum += f64::ln_1p(prefix);
    }
    f64::exp_m1(log_sum)
}

fn check_bound_network(net: &Network, expansion: &ResidualExpansion) -> Result<()> {
    if net.has_batch_norm() {
        return Err(Error::invalid("bounds need a folded network (no batch-norm)"));
    }
    if let Some(a) = net
        .activations()
        .find(|a| !matches!(a, Activation::Relu | Activation::Identity))
    {
        return Err(Error::invalid(format!(
            "bounds are certified for relu/identity activations, found {}",
            a.name()
        )));
    }
    expansion.check_matches(net)
}

fn params(expansion: &ResidualExpansion, grouping: Option<&Grouping>) -> BoundParams {
    BoundParams {
        bits: expansion.config().bits(),
        order: expansion.order(),
        gamma: expansion.gamma(),
        grouping: grouping.map(|g| g.sizes().to_vec()),
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// True when some order actually prunes a row.
fn is_masked(e: &LayerExpansion) -> bool {
    e.terms()
        .iter()
        .filter_map(|t| t.mask.as_ref())
        .any(|m| m.kept_count() < m.total_rows())
}

/// Whole-network bound of the full expansion.
///
/// `Sparse` uses the sparse lemma on every layer and needs the last order to
/// be masked.
pub fn network_bound(net: &Network, expansion: &ResidualExpansion, kind: BoundKind) -> Result<BoundReport> {
    check_bound_network(net, expansion)?;
    let k = expansion.order();
    let per_layer_terms = expansion
        .layers()
        .iter()
        .map(|(&i, e)| {
            let u = match kind {
                BoundKind::Dense if is_masked(e) => Err(Error::invalid(
                    "dense bound on a masked expansion is not certified; use the sparse kind",
                )),
                BoundKind::Dense => weight_bound(e, k),
                BoundKind::Sparse => sparse_weight_bound(e, k),
                other => Err(Error::invalid(format!("network_bound does not compute {other:?} bounds"))),
            }
            .map_err(|err| err.at_layer(i))?;
            let s = spectral_norm_default(e.original()).map_err(|err| err.at_layer(i))?;
            Ok(LayerTerm {
                layer: i,
                spectral_norm: s,
                weight_bound: max_of(&u),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(f64, f64)> = per_layer_terms.iter().map(|t| (t.spectral_norm, t.weight_bound)).collect();
    Ok(BoundReport {
        kind,
        u: product_bound(&terms),
        per_layer_terms,
        params: params(expansion, None),
    })
}

/// `∏_l (Σ_{i≤l} (1/q)^{K−1} s_{R^i}/2 + 1) − 1` with `s_{R^i}` the largest
/// base-order scale of layer `i`; no spectral-norm factor. Masked layers use
/// the sparse per-layer term instead.
pub fn main_text_bound(net: &Network, expansion: &ResidualExpansion) -> Result<BoundReport> {
    check_bound_network(net, expansion)?;
    let per_layer_terms = expansion
        .layers()
        .iter()
        .map(|(&i, e)| {
            Ok(LayerTerm {
                layer: i,
                spectral_norm: 1.0,
                weight_bound: max_of(&if is_masked(e) {
                    sparse_weight_bound(e, expansion.order())?
                } else {
                    weight_bound(e, expansion.order())?
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(f64, f64)> = per_layer_terms.iter().map(|t| (1.0, t.weight_bound)).collect();
    Ok(BoundReport {
        kind: BoundKind::MainText,
        u: product_bound(&terms),
        per_layer_terms,
        params: params(expansion, None),
    })
}

/// Bound on `‖ensemble(x) − expansion(x)‖_∞` for `‖x‖ = 1`.
///
/// `U = A · ∏_{l after split} Σ_k ‖R_l^k‖ · Σ_{k > K₁} ‖R_split^k‖` where `A`
/// counts ReLU layers after the split layer. Each crossed ReLU adds at most
/// the tail members' pre-activation magnitude, since
/// `|σ(Σ_m z_m) − Σ_m σ(z_m)| ≤ Σ_{m≥2} |z_m|` element-wise. `U = 0` when
/// no ReLU is crossed, the ensemble then being exact.
pub fn ensemble_bound(net: &Network, expansion: &ResidualExpansion, grouping: &Grouping) -> Result<BoundReport> {
    check_bound_network(net, expansion)?;
    if grouping.total() != expansion.order() {
        return Err(Error::invalid(format!(
            "grouping [{grouping}] sums to {}, expansion order is {}",
            grouping.total(),
            expansion.order()
        )));
    }
    let weighted = net.weighted_layers();
    let split = *weighted
        .first()
        .ok_or_else(|| Error::Structure("network has no weighted layer".into()))?;
    let relus = net.layers()[split..]
        .iter()
        .filter(|l| matches!(l, Layer::Activation(Activation::Relu)))
        .count();
    let tail_orders = grouping.sizes()[0] + 1..=expansion.order();

    let mut per_layer_terms = Vec::with_capacity(weighted.len());
    let mut u = 1.0;
    for &i in &weighted {
        let e = expansion.layer(i).expect("checked coverage");
        let norms = e
            .terms()
            .iter()
            .map(|t| spectral_norm_default(&t.dequantized()))
            .collect::<Result<Vec<_>>>()
            .map_err(|err| err.at_layer(i))?;
        let total: f64 = norms.iter().sum();
        let tail = if i == split {
            tail_orders.clone().map(|k| norms[k - 1]).sum()
        } else {
            0.0
        };
        u *= if i == split { tail } else { total };
        per_layer_terms.push(LayerTerm {
            layer: i,
            spectral_norm: total,
            weight_bound: tail,
        });
    }
    let u = relus as f64 * u;
    Ok(BoundReport {
        kind: BoundKind::Ensemble,
        u,
        per_layer_terms,
        params: params(expansion, Some(grouping)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Dense;
    use crate::quantizer::{expand, expand_network, QuantConfig};
    use crate::synth;
    use crate::tensor::Tensor;

    fn dense_net(w: Tensor) -> Network {
        let rows = w.shape()[0];
        Network::new(vec![w.shape()[1]], vec![Layer::Dense(Dense::new(w, None).unwrap())])
            .inspect(|n| {
                assert_eq!(n.output_shape(), &[rows]);
            })
            .unwrap()
    }

    #[test]
    fn lemma_at_first_order() {
        // λ = 1 needs max|W| = q
        let w = Tensor::matrix(1, 2, vec![127.0, 3.0]).unwrap();
        let e = expand(&w, &QuantConfig::new(8).unwrap(), 2, 1.0, 3).unwrap();
        assert_eq!(weight_bound(&e, 1).unwrap(), vec![0.5]);
        assert_eq!(weight_bound(&e, 2).unwrap(), vec![0.5 / 127.0]);
        assert!(weight_bound(&e, 3).is_err());
        assert!(weight_bound(&e, 0).is_err());
    }

    #[test]
    fn identity_network_example() {
        let net = dense_net(Tensor::eye(2));
        let e = expand_network(&net, &QuantConfig::new(8).unwrap(), 1, 1.0, 2).unwrap();
        let r = network_bound(&net, &e, BoundKind::Dense).unwrap();
        assert!((r.u - 1.0 / 254.0).abs() < 1e-12);
        assert!((r.per_layer_terms[0].spectral_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn main_text_single_layer_is_half_scale() {
        let mut rng = synth::rng(61);
        let w = synth::gaussian(&mut rng, vec![3, 3], 1.0);
        let net = dense_net(w.clone());
        let e = expand_network(&net, &QuantConfig::new(8).unwrap(), 1, 1.0, 2).unwrap();
        let s = w.max_abs() / 127.0;
        let r = main_text_bound(&net, &e).unwrap();
        assert!((r.u - s / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_bound() {
        let net = dense_net(Tensor::zeros(vec![2, 3]));
        let e = expand_network(&net, &QuantConfig::new(4).unwrap(), 2, 1.0, 3).unwrap();
        assert_eq!(network_bound(&net, &e, BoundKind::Dense).unwrap().u, 0.0);
    }

    #[test]
    fn product_formula() {
        assert_eq!(product_bound(&[]), 0.0);
        let u = product_bound(&[(2.0, 0.5), (1.0, 1.0)]);
        assert!((u - (2.0 * 3.0 - 1.0)).abs() < 1e-12);
        assert!(product_bound(&[(1.0, 1e-20)]) > 0.0);
    }

    #[test]
    fn sparse_formula_examples() {
        assert!((sparse_bound_from_norm(0.8, 1.0, 8, 2) - 0.8 / (127.0f64.powi(2) * 2.0)).abs() < 1e-18);
        assert!((sparse_bound_from_norm(1.0, 2.0, 4, 1) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_requires_mask() {
        let mut rng = synth::rng(62);
        let w = synth::gaussian(&mut rng, vec![4, 4], 1.0);
        let e = expand(&w, &QuantConfig::new(4).unwrap(), 2, 0.5, 3).unwrap();
        assert!(sparse_weight_bound(&e, 2).is_err());
        let e = expand(&w, &QuantConfig::new(4).unwrap(), 2, 0.5, 2).unwrap();
        assert!(sparse_weight_bound(&e, 2).is_ok());
    }

    #[test]
    fn sparse_bound_covers_reconstruction() {
        for seed in 0..20 {
            let mut rng = synth::rng(63 + seed);
            let w = synth::gaussian(&mut rng, vec![9, 7], 1.0);
            for bits in [2, 3, 4, 8] {
                for gamma in [0.25, 0.5, 1.0] {
                    let e = expand(&w, &QuantConfig::new(bits).unwrap(), 3, gamma, 2).unwrap();
                    let u = sparse_weight_bound(&e, 3).unwrap();
                    let err = w.sub(&e.reconstruct(3)).unwrap();
                    for (idx, v) in err.data().iter().enumerate() {
                        assert!(v.abs() <= u[idx / 7] * (1.0 + 1e-12), "seed {seed} b{bits} g{gamma}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_unfolded_and_sigmoid_networks() {
        let mut rng = synth::rng(64);
        let init = synth::Init {
            activation: Activation::Sigmoid,
            ..Default::default()
        };
        let net = synth::mlp(&mut rng, &[3, 4, 2], init).unwrap();
        let e = expand_network(&net, &QuantConfig::new(4).unwrap(), 1, 1.0, 2).unwrap();
        assert!(network_bound(&net, &e, BoundKind::Dense).is_err());
        let mut layers = synth::mlp(&mut rng, &[3, 4], Default::default()).unwrap().layers().to_vec();
        layers.push(Layer::BatchNorm(synth::batch_norm(&mut rng, 4).unwrap()));
        let bn_net = Network::new(vec![3], layers).unwrap();
        let folded = crate::network::fold_batch_norm(&bn_net).unwrap();
        let e = expand_network(&folded, &QuantConfig::new(4).unwrap(), 1, 1.0, 2).unwrap();
        assert!(network_bound(&bn_net, &e, BoundKind::Dense).is_err());
        assert!(network_bound(&folded, &e, BoundKind::Dense).is_ok());
    }

    #[test]
    fn ensemble_bound_edge_cases() {
        let mut rng = synth::rng(65);
        let net = synth::mlp(&mut rng, &[4, 6, 3], Default::default()).unwrap();
        let e = expand_network(&net, &QuantConfig::new(3).unwrap(), 3, 1.0, 4).unwrap();
        assert_eq!(ensemble_bound(&net, &e, &Grouping::whole(3)).unwrap().u, 0.0);
        assert!(ensemble_bound(&net, &e, &Grouping::new(vec![1, 1]).unwrap()).is_err());
        let u1 = ensemble_bound(&net, &e, &Grouping::new(vec![1, 2]).unwrap()).unwrap().u;
        let u2 = ensemble_bound(&net, &e, &Grouping::new(vec![2, 1]).unwrap()).unwrap().u;
        assert!(u1 >= u2 && u2 > 0.0);
    }

    #[test]
    fn report_serializes_with_upper_case_u() {
        let net = dense_net(Tensor::eye(2));
        let e = expand_network(&net, &QuantConfig::new(8).unwrap(), 1, 1.0, 2).unwrap();
        let r = network_bound(&net, &e, BoundKind::Dense).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["kind"], "dense");
        assert!(v["U"].as_f64().unwrap() > 0.0);
    }
}

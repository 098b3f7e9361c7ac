use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{compute_scales, dequantize, quantize, QuantConfig, QuantizedTensor};
use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;

/// Output rows retained by one residual order.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMask {
    kept_rows: Vec<bool>,
    gamma: f64,
}

impl StructuredMask {
    pub fn new(kept_rows: Vec<bool>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let want = kept_count(gamma, kept_rows.len());
        let have = kept_rows.iter().filter(|&&k| k).count();
        if want != have {
            return Err(Error::invalid(format!(
                "mask keeps {have} of {} rows, gamma {gamma} requires {want}",
                kept_rows.len()
            )));
        }
        Ok(StructuredMask { kept_rows, gamma })
    }

    pub fn kept_rows(&self) -> &[bool] {
        &self.kept_rows
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kept_count(&self) -> usize {
        self.kept_rows.iter().filter(|&&k| k).count()
    }

    pub fn total_rows(&self) -> usize {
        self.kept_rows.len()
    }

    /// Fraction of rows actually kept.
    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.total_rows() as f64
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("sparsity gamma {gamma} outside (0, 1]")))
    }
}

/// `⌈γ·rows⌉`, guarded against products like `2.0000000000000004`.
fn kept_count(gamma: f64, rows: usize) -> usize {
    ((gamma * rows as f64 - 1e-9).ceil() as usize).clamp(1, rows)
}

/// Keeps the `⌈γ·rows⌉` rows of `residual_error` with the largest L2 norm;
/// ties go to the lower row index.
pub fn make_structured_mask(residual_error: &Tensor, gamma: f64) -> Result<StructuredMask> {
    check_gamma(gamma)?;
    let (rows, _) = residual_error.rows_cols();
    let norms: Vec<f64> = (0..rows)
        .map(|r| residual_error.row(r).iter().map(|v| v * v).sum())
        .collect();
    let mut order: Vec<usize> = (0..rows).collect();
    // stable sort keeps lower indices first among equal norms
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut kept_rows = vec![false; rows];
    for &r in order.iter().take(kept_count(gamma, rows)) {
        kept_rows[r] = true;
    }
    Ok(StructuredMask { kept_rows, gamma })
}

/// One residual order `R^k`: codes and scales, plus the mask applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTerm {
    pub quantized: QuantizedTensor,
    pub mask: Option<StructuredMask>,
}

impl ExpansionTerm {
    /// Dequantized term; masked rows are already zero in the codes.
    pub fn dequantized(&self) -> Tensor {
        dequantize(&self.quantized)
    }

    pub fn kept_fraction(&self) -> f64 {
        self.mask.as_ref().map_or(1.0, StructuredMask::kept_fraction)
    }
}

/// Residual expansion of one weight tensor.
///
/// Orders are 1-based in the public API: `term(1)` is the base quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExpansion {
    original: Tensor,
    config: QuantConfig,
    terms: Vec<ExpansionTerm>,
}

impl LayerExpansion {
    /// Reassembles an expansion from stored terms.
    pub fn from_terms(original: Tensor, config: QuantConfig, terms: Vec<ExpansionTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("expansion needs at least one order"));
        }
        if terms[0].mask.is_some() {
            return Err(Error::invalid("the base order cannot be masked"));
        }
        for t in &terms {
            if t.quantized.shape() != original.shape() {
                return Err(Error::shape(format!(
                    "term shape {:?} differs from weight shape {:?}",
                    t.quantized.shape(),
                    original.shape()
                )));
            }
        }
        Ok(LayerExpansion {
            original,
            config,
            terms,
        })
    }

    pub fn original(&self) -> &Tensor {
        &self.original
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn order(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[ExpansionTerm] {
        &self.terms
    }

    pub fn term(&self, k: usize) -> &ExpansionTerm {
        &self.terms[k - 1]
    }

    /// `Σ_{k ∈ orders} deq(R^k)`, summed in the order given starting from zero.
    /// Every reconstruction in the crate goes through here so that equal order
    /// sets give bit-identical kernels.
    pub fn reconstruct_orders(&self, orders: impl IntoIterator<Item = usize>) -> Tensor {
        let mut acc = vec![0.0; self.original.len()];
        for k in orders {
            for (a, v) in acc.iter_mut().zip(self.term(k).dequantized().data()) {
                *a += v;
            }
        }
        Tensor::from_parts(self.original.shape().to_vec(), acc)
    }

    /// Partial sum through order `k`.
    pub fn reconstruct(&self, k: usize) -> Tensor {
        self.reconstruct_orders(1..=k)
    }

    /// `W − Σ_{j<k} R^j`, the residual quantized at order `k`.
    pub fn residual_before(&self, k: usize) -> Tensor {
        residual(&self.original, &self.reconstruct(k - 1))
    }

    /// Effective per-channel scales of order `k` (0 for all-zero channels).
    pub fn effective_scales(&self, k: usize) -> Vec<f64> {
        self.term(k).quantized.effective_scales()
    }
}

fn residual(w: &Tensor, partial: &Tensor) -> Tensor {
    w.sub(partial).expect("same shape")
}

/// Residual expansion of one tensor to order `order`.
///
/// Each order re-derives per-channel scales on the current residual. Orders
/// `k ≥ from_order` are masked to the `⌈γ·rows⌉` rows with the largest
/// residual; the masked term is what later orders subtract.
pub fn expand(w: &Tensor, cfg: &QuantConfig, order: usize, gamma: f64, from_order: usize) -> Result<LayerExpansion> {
    if order < 1 {
        return Err(Error::invalid("expansion order must be at least 1"));
    }
    check_gamma(gamma)?;
    if from_order < 2 {
        return Err(Error::invalid(format!(
            "masking from order {from_order}: the base order is never masked"
        )));
    }
    let mut terms: Vec<ExpansionTerm> = Vec::with_capacity(order);
    let mut partial = Tensor::zeros(w.shape().to_vec());
    for k in 1..=order {
        let resid = residual(w, &partial);
        let scales = compute_scales(&resid, cfg)?;
        let mut quantized = quantize(&resid, &scales, cfg)?;
        let mask = if k >= from_order {
            let m = make_structured_mask(&resid, gamma)?;
            quantized.zero_rows(m.kept_rows());
            Some(m)
        } else {
            None
        };
        terms.push(ExpansionTerm { quantized, mask });
        let mut acc = vec![0.0; w.len()];
        for t in &terms {
            for (a, v) in acc.iter_mut().zip(t.dequantized().data()) {
                *a += v;
            }
        }
        partial = Tensor::from_parts(w.shape().to_vec(), acc);
    }
    LayerExpansion::from_terms(w.clone(), *cfg, terms)
}

/// Residual expansion of every Dense/Conv2D kernel of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualExpansion {
    config: QuantConfig,
    order: usize,
    gamma: f64,
    from_order: usize,
    layers: BTreeMap<usize, LayerExpansion>,
}

impl ResidualExpansion {
    pub fn from_layers(
        config: QuantConfig,
        order: usize,
        gamma: f64,
        from_order: usize,
        layers: BTreeMap<usize, LayerExpansion>,
    ) -> Result<Self> {
        if let Some((i, l)) = layers.iter().find(|(_, l)| l.order() != order) {
            return Err(Error::invalid(format!(
                "layer {i} has {} orders, expected {order}",
                l.order()
            )));
        }
        Ok(ResidualExpansion {
            config,
            order,
            gamma,
            from_order,
            layers,
        })
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn from_order(&self) -> usize {
        self.from_order
    }

    /// Expansions keyed by layer index in the source network.
    pub fn layers(&self) -> &BTreeMap<usize, LayerExpansion> {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerExpansion> {
        self.layers.get(&index)
    }

    /// Expanded network: every kernel replaced by the sum of all its orders.
    pub fn apply(&self, net: &Network) -> Result<Network> {
        self.apply_with(net, |_, e| e.reconstruct(e.order()), |_, l| l.bias().cloned())
    }

    /// Network whose kernels are `Σ_{k ≤ order} R^k` (truncated expansion).
    pub fn apply_truncated(&self, net: &Network, order: usize) -> Result<Network> {
        if order < 1 || order > self.order {
            return Err(Error::invalid(format!(
                "truncation order {order} outside 1..={}",
                self.order
            )));
        }
        self.apply_with(net, |_, e| e.reconstruct(order), |_, l| l.bias().cloned())
    }

    /// Rebuilds `net` with caller-chosen kernels and biases for expanded layers.
    pub fn apply_with(
        &self,
        net: &Network,
        mut kernel: impl FnMut(usize, &LayerExpansion) -> Tensor,
        mut bias: impl FnMut(usize, &Layer) -> Option<Tensor>,
    ) -> Result<Network> {
        self.check_matches(net)?;
        net.map_layers(|i, layer| match self.layers.get(&i) {
            Some(e) => layer.with_params(kernel(i, e), bias(i, layer)),
            None => Ok(layer.clone()),
        })
    }

    /// Checks that the expansion covers exactly the weighted layers of `net`.
    pub fn check_matches(&self, net: &Network) -> Result<()> {
        let weighted = net.weighted_layers();
        if weighted.len() != self.layers.len() || weighted.iter().any(|i| !self.layers.contains_key(i)) {
            return Err(Error::invalid(
                "expansion does not cover the network's weighted layers",
            ));
        }
        for (&i, e) in &self.layers {
            if net.layers()[i].weight().map(Tensor::shape) != Some(e.original().shape()) {
                return Err(Error::shape(format!("layer {i} kernel shape differs from expansion")));
            }
        }
        Ok(())
    }
}

/// Expands every Dense/Conv2D kernel of `net`. Layers are processed in
/// parallel; the result does not depend on scheduling.
pub fn expand_network(
    net: &Network,
    cfg: &QuantConfig,
    order: usize,
    gamma: f64,
    from_order: usize,
) -> Result<ResidualExpansion> {
    let layers = net
        .weighted_layers()
        .into_par_iter()
        .map(|i| {
            let w = net.layers()[i].weight().unwrap();
            expand(w, cfg, order, gamma, from_order)
                .map(|e| (i, e))
                .map_err(|e| e.at_layer(i))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    ResidualExpansion::from_layers(*cfg, order, gamma, from_order, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn base_case_matches_plain_quantization() {
        let mut rng = synth::rng(31);
        let cfg = QuantConfig::new(4).unwrap();
        let w = synth::gaussian(&mut rng, vec![5, 6], 1.0);
        let e = expand(&w, &cfg, 1, 1.0, 2).unwrap();
        let plain = dequantize(&quantize(&w, &compute_scales(&w, &cfg).unwrap(), &cfg).unwrap());
        assert_eq!(e.reconstruct(1), plain);
    }

    #[test]
    fn two_order_hand_example() {
        let cfg = QuantConfig::per_tensor(2).unwrap();
        let w = Tensor::from_vec(vec![0.7, 0.2]).unwrap();
        let e = expand(&w, &cfg, 2, 1.0, 3).unwrap();
        assert_eq!(e.term(1).quantized.scales(), &[0.7]);
        assert_eq!(e.term(1).dequantized().data(), &[0.7, 0.0]);
        assert!((e.term(2).quantized.scales()[0] - 0.2).abs() < 1e-15);
        assert_eq!(e.term(2).quantized.values(), &[0, 1]);
        assert_eq!(e.reconstruct(2).max_abs_diff(&w).unwrap(), 0.0);
    }

    #[test]
    fn exactly_representable_weights_leave_zero_residuals() {
        let cfg = QuantConfig::new(3).unwrap();
        let w = Tensor::matrix(2, 3, vec![0.75, -0.25, 0.5, 0.0, 0.5, -0.5]).unwrap();
        let e = expand(&w, &cfg, 4, 1.0, 5).unwrap();
        for k in 2..=4 {
            assert!(e.term(k).dequantized().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(e.reconstruct(4), w);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = QuantConfig::new(4).unwrap();
        let w = Tensor::eye(2);
        assert!(expand(&w, &cfg, 0, 1.0, 2).is_err());
        assert!(expand(&w, &cfg, 2, 0.0, 2).is_err());
        assert!(expand(&w, &cfg, 2, 1.5, 2).is_err());
        assert!(expand(&w, &cfg, 2, 0.5, 1).is_err());
    }

    #[test]
    fn mask_examples() {
        let rows = |norms: &[f64]| Tensor::matrix(norms.len(), 1, norms.to_vec()).unwrap();
        let all = make_structured_mask(&rows(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        assert_eq!(all.kept_rows(), &[true, true, true]);

        let one = make_structured_mask(&rows(&[3.0, 1.0, 2.0]), 1.0 / 3.0).unwrap();
        assert_eq!(one.kept_rows(), &[true, false, false]);

        let tie = make_structured_mask(&rows(&[1.0, 1.0, 5.0]), 2.0 / 3.0).unwrap();
        assert_eq!(tie.kept_rows(), &[true, false, true]);
    }

    #[test]
    fn mask_validates_budget() {
        assert!(StructuredMask::new(vec![true, false], 0.5).is_ok());
        assert!(StructuredMask::new(vec![true, true], 0.5).is_err());
    }

    #[test]
    fn masked_orders_zero_pruned_rows() {
        let mut rng = synth::rng(32);
        let cfg = QuantConfig::new(4).unwrap();
        let w = synth::gaussian(&mut rng, vec![8, 5], 1.0);
        let e = expand(&w, &cfg, 3, 0.25, 2).unwrap();
        assert!(e.term(1).mask.is_none());
        for k in 2..=3 {
            let m = e.term(k).mask.as_ref().unwrap();
            assert_eq!(m.kept_count(), 2);
            let d = e.term(k).dequantized();
            for r in 0..8 {
                if !m.kept_rows()[r] {
                    assert!(d.row(r).iter().all(|&v| v == 0.0));
                }
            }
        }
        // the masked term is what the next order sees
        let resid3 = e.residual_before(3);
        let manual = w.sub(&e.term(1).dequantized()).unwrap().sub(&e.term(2).dequantized()).unwrap();
        assert!(resid3.max_abs_diff(&manual).unwrap() < 1e-15);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn refinement_is_monotone_on_unmasked_rows(seed in 0u64..10_000, bits in 2u32..=8) {
            let mut rng = synth::rng(seed);
            let cfg = QuantConfig::new(bits).unwrap();
            let w = synth::gaussian(&mut rng, vec![6, 9], 1.0);
            let e = expand(&w, &cfg, 5, 1.0, 6).unwrap();
            let mut prev: Option<Vec<f64>> = None;
            for k in 1..=5 {
                let err: Vec<f64> = w.sub(&e.reconstruct(k)).unwrap().data().iter().map(|v| v.abs()).collect();
                if let Some(p) = &prev {
                    for (a, b) in err.iter().zip(p) {
                        proptest::prop_assert!(*a <= *b + 1e-15);
                    }
                }
                prev = Some(err);
            }
        }

        #[test]
        fn mask_keeps_ceil_budget(seed in 0u64..10_000, rows in 1usize..40, gamma in 0.01f64..=1.0) {
            let mut rng = synth::rng(seed);
            let r = synth::gaussian(&mut rng, vec![rows, 3], 1.0);
            let m = make_structured_mask(&r, gamma).unwrap();
            let want = ((gamma * rows as f64) - 1e-9).ceil().max(1.0) as usize;
            proptest::prop_assert_eq!(m.kept_count(), want.min(rows));
        }
    }
}

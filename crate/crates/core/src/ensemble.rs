//! Rewriting an expanded network as a sum of independent member networks.
//!
//! The expansion orders of the first weighted layer are partitioned into
//! clusters `[K₁, …, K_M]`; member `m` carries cluster `m` at that layer and
//! the full expansion at every later weighted layer. Only member 1 carries
//! biases. With identity activations the member outputs sum exactly to the
//! expanded network; with ReLU the gap comes from `σ(a + b) ≠ σ(a) + σ(b)` at
//! each activation and is bounded by [`crate::bounds::ensemble_bound`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bounds::ensemble_bound;
use crate::error::{Error, Result};
use crate::network::{Activation, Evaluate, Layer, Network};
use crate::quantizer::ResidualExpansion;
use crate::tensor::Tensor;

/// Partition of the expansion orders into consecutive clusters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grouping {
    sizes: Vec<usize>,
}

impl Grouping {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "grouping {sizes:?} must be a non-empty list of positive sizes"
            )));
        }
        Ok(Grouping { sizes })
    }

    /// The single-member grouping `[order]`.
    pub fn whole(order: usize) -> Self {
        Grouping { sizes: vec![order] }
    }

    /// `[K/M, …]` with the remainder spread over the leading members.
    pub fn balanced(order: usize, members: usize) -> Result<Self> {
        if members == 0 || members > order {
            return Err(Error::invalid(format!(
                "cannot split {order} orders into {members} members"
            )));
        }
        let (q, r) = (order / members, order % members);
        Grouping::new((0..members).map(|m| q + usize::from(m < r)).collect())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn members(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn max_size(&self) -> usize {
        *self.sizes.iter().max().unwrap()
    }

    /// 1-based orders of cluster `m` (0-based member index).
    pub fn cluster(&self, m: usize) -> std::ops::RangeInclusive<usize> {
        let start: usize = self.sizes[..m].iter().sum();
        start + 1..=start + self.sizes[m]
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sizes = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad grouping entry `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Grouping::new(sizes)
    }
}

/// Member networks sharing one architecture; their outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleNetwork {
    members: Vec<Network>,
    grouping: Grouping,
    split_layer: usize,
    order: usize,
}

impl EnsembleNetwork {
    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    /// Index of the weighted layer whose orders are split across members.
    pub fn split_layer(&self) -> usize {
        self.split_layer
    }

    /// Orders member `m` (0-based) carries at layer `layer`.
    pub fn member_orders(&self, m: usize, layer: usize) -> Vec<usize> {
        if layer == self.split_layer {
            self.grouping.cluster(m).collect()
        } else {
            (1..=self.order).collect()
        }
    }

    /// `Σ_m forward(member_m, x)`, members evaluated in parallel and summed in
    /// ascending member order.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outputs = self
            .members
            .par_iter()
            .map(|m| m.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let mut iter = outputs.into_iter();
        let mut acc = iter.next().expect("at least one member");
        for out in iter {
            acc = acc.add(&out)?;
        }
        Ok(acc)
    }
}

impl Evaluate for EnsembleNetwork {
    fn input_shape(&self) -> &[usize] {
        self.members[0].shape_before(0)
    }

    fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

fn check_ensemble_inputs(net: &Network, expansion: &ResidualExpansion, grouping: &Grouping) -> Result<()> {
    if grouping.total() != expansion.order() {
        return Err(Error::invalid(format!(
            "grouping [{grouping}] sums to {}, expansion order is {}",
            grouping.total(),
            expansion.order()
        )));
    }
    if net.has_batch_norm() {
        return Err(Error::invalid("ensembling needs a folded network (no batch-norm)"));
    }
    if let Some(a) = net
        .activations()
        .find(|a| !matches!(a, Activation::Relu | Activation::Identity))
    {
        return Err(Error::invalid(format!(
            "ensembling supports relu/identity activations, found {}",
            a.name()
        )));
    }
    expansion.check_matches(net)
}

pub fn build_ensemble(net: &Network, expansion: &ResidualExpansion, grouping: &Grouping) -> Result<EnsembleNetwork> {
    check_ensemble_inputs(net, expansion, grouping)?;
    let split_layer = *net
        .weighted_layers()
        .first()
        .ok_or_else(|| Error::Structure("network has no weighted layer to split".into()))?;
    let members = (0..grouping.members())
        .map(|m| {
            expansion.apply_with(
                net,
                |i, e| {
                    if i == split_layer {
                        e.reconstruct_orders(grouping.cluster(m))
                    } else {
                        e.reconstruct(e.order())
                    }
                },
                |_, layer: &Layer| if m == 0 { layer.bias().cloned() } else { None },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleNetwork {
        members,
        grouping: grouping.clone(),
        split_layer,
        order: expansion.order(),
    })
}

pub fn ensemble_forward(ens: &EnsembleNetwork, x: &Tensor) -> Result<Tensor> {
    ens.forward(x)
}

/// Bound must not exceed this fraction of the logit norm for a split to be
/// accepted.
pub const DEFAULT_THRESHOLD_RATIO: f64 = 0.1;

/// Picks the most balanced candidate (smallest largest cluster) whose
/// ensemble bound is at most `threshold_ratio · logit_norm_estimate`.
/// Falls back to `[K]` when no candidate qualifies or the ratio is not
/// positive.
pub fn select_grouping(
    net: &Network,
    expansion: &ResidualExpansion,
    candidates: &[Grouping],
    logit_norm_estimate: f64,
    threshold_ratio: f64,
) -> Result<Grouping> {
    if candidates.is_empty() {
        return Err(Error::invalid("select_grouping needs at least one candidate"));
    }
    if !(logit_norm_estimate > 0.0) {
        return Err(Error::invalid(format!(
            "logit norm estimate {logit_norm_estimate} must be positive"
        )));
    }
    let fallback = Grouping::whole(expansion.order());
    if !(threshold_ratio > 0.0) {
        return Ok(fallback);
    }
    let limit = threshold_ratio * logit_norm_estimate;
    let mut best: Option<&Grouping> = None;
    for g in candidates {
        let u = ensemble_bound(net, expansion, g)?.u;
        if u <= limit && best.is_none_or(|b| g.max_size() < b.max_size()) {
            best = Some(g);
        }
    }
    Ok(best.cloned().unwrap_or(fallback))
}

/// Balanced candidates `[K]`, `[⌈K/2⌉, ⌊K/2⌋]`, …, `[1, …, 1]`.
pub fn default_candidates(order: usize) -> Vec<Grouping> {
    (1..=order)
        .map(|m| Grouping::balanced(order, m).expect("1 <= m <= order"))
        .collect()
}

/// Mean `‖f(x)‖_∞` over `xs`.
pub fn logit_norm_from_inputs<E: Evaluate + ?Sized>(model: &E, xs: &[Tensor]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("logit norm estimate needs at least one input"));
    }
    let mut total = 0.0;
    for x in xs {
        total += model.evaluate(x)?.max_abs();
    }
    Ok(total / xs.len() as f64)
}

/// Data-free logit magnitude from a trailing batch-norm: outputs are
/// approximately `N(β_c, γ_c²)` per channel, so `max_c √(β_c² + γ_c²)` is
/// used as the typical `‖·‖_∞`. `None` unless the (unfolded) network ends in
/// a batch-norm layer.
pub fn logit_norm_from_batch_norm(net: &Network) -> Option<f64> {
    match net.layers().last()? {
        Layer::BatchNorm(bn) => Some(
            bn.beta()
                .data()
                .iter()
                .zip(bn.gamma().data())
                .map(|(b, g)| (b * b + g * g).sqrt())
                .fold(0.0, f64::max),
        ),
        _ => None,
    }
}

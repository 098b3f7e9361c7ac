//! Symmetric uniform quantization, residual expansion, structured masks and
//! fused-kernel emission.

mod expansion;
mod fuse;

pub use expansion::{
    expand, expand_network, make_structured_mask, ExpansionTerm, LayerExpansion, ResidualExpansion,
    StructuredMask,
};
pub use fuse::{fuse_kernels, FusedLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Bit width and scaling granularity. Rounding is always half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u32,
    /// Channel axis for per-channel scales; `None` means one scale per tensor.
    axis: Option<usize>,
}

impl QuantConfig {
    /// Per-channel along the output axis (axis 0).
    pub fn new(bits: u32) -> Result<Self> {
        Self::with_axis(bits, Some(0))
    }

    pub fn per_tensor(bits: u32) -> Result<Self> {
        Self::with_axis(bits, None)
    }

    pub fn with_axis(bits: u32, axis: Option<usize>) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::invalid(format!(
                "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        Ok(QuantConfig { bits, axis })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn axis(&self) -> Option<usize> {
        self.axis
    }

    /// Top code `2^{b−1} − 1`; codes are clamped to `±q_max`.
    pub fn q_max(&self) -> i32 {
        q_max(self.bits)
    }
}

pub fn q_max(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Maps flat indices to channel indices for a given axis.
#[derive(Debug, Clone, Copy)]
struct ChannelLayout {
    channels: usize,
    inner: usize,
}

impl ChannelLayout {
    fn new(shape: &[usize], axis: Option<usize>) -> Result<Self> {
        match axis {
            None => Ok(ChannelLayout {
                channels: 1,
                inner: shape.iter().product(),
            }),
            Some(a) if a < shape.len() => Ok(ChannelLayout {
                channels: shape[a],
                inner: shape[a + 1..].iter().product(),
            }),
            Some(a) => Err(Error::invalid(format!(
                "channel axis {a} out of range for shape {shape:?}"
            ))),
        }
    }

    fn channel(&self, idx: usize) -> usize {
        (idx / self.inner) % self.channels
    }
}

/// Integer codes with one scale per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    scales: Vec<f64>,
    bits: u32,
    axis: Option<usize>,
}

impl QuantizedTensor {
    /// Rebuilds a quantized tensor from stored parts (e.g. a container),
    /// re-checking the code range.
    pub fn from_parts(
        shape: Vec<usize>,
        values: Vec<i32>,
        scales: Vec<f64>,
        config: QuantConfig,
    ) -> Result<Self> {
        let layout = ChannelLayout::new(&shape, config.axis)?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} codes for shape {shape:?}",
                values.len()
            )));
        }
        if scales.len() != layout.channels {
            return Err(Error::shape(format!(
                "{} scales for {} channels",
                scales.len(),
                layout.channels
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("scale {s} must be positive")));
        }
        let q = config.q_max();
        if let Some(v) = values.iter().find(|v| v.abs() > q) {
            return Err(Error::invalid(format!("code {v} outside ±{q}")));
        }
        Ok(QuantizedTensor {
            shape,
            values,
            scales,
            bits: config.bits,
            axis: config.axis,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            axis: self.axis,
        }
    }

    /// Scales with all-zero channels reported as 0 instead of the stored 1.0.
    pub fn effective_scales(&self) -> Vec<f64> {
        let layout = ChannelLayout::new(&self.shape, self.axis).expect("validated layout");
        let mut nonzero = vec![false; layout.channels];
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0 {
                nonzero[layout.channel(i)] = true;
            }
        }
        self.scales
            .iter()
            .zip(nonzero)
            .map(|(&s, nz)| if nz { s } else { 0.0 })
            .collect()
    }

    /// Channel that flat element `idx` belongs to.
    pub fn channel_of(&self, idx: usize) -> usize {
        ChannelLayout::new(&self.shape, self.axis).expect("validated layout").channel(idx)
    }

    /// Zeroes every code whose row (index along axis 0) is not kept.
    pub(crate) fn zero_rows(&mut self, kept: &[bool]) {
        let cols = self.values.len() / kept.len();
        for (r, keep) in kept.iter().enumerate() {
            if !keep {
                self.values[r * cols..(r + 1) * cols].fill(0);
            }
        }
    }
}

/// Per-channel scale `max|W_c| / (2^{b−1} − 1)`; all-zero channels get 1.0.
pub fn compute_scales(w: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    let layout = ChannelLayout::new(w.shape(), cfg.axis)?;
    let mut max = vec![0.0_f64; layout.channels];
    for (i, v) in w.data().iter().enumerate() {
        let c = layout.channel(i);
        max[c] = max[c].max(v.abs());
    }
    let q = cfg.q_max() as f64;
    let scales = max
        .into_iter()
        .map(|m| if m > 0.0 { m / q } else { 1.0 })
        .collect();
    Ok(Tensor::from_parts(vec![layout.channels], scales))
}

/// `clamp(round_half_away(W / s), −q_max, q_max)` per channel.
pub fn quantize(w: &Tensor, scales: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    let layout = ChannelLayout::new(w.shape(), cfg.axis)?;
    if scales.len() != layout.channels {
        return Err(Error::shape(format!(
            "{} scales for {} channels",
            scales.len(),
            layout.channels
        )));
    }
    if let Some(s) = scales.data().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::invalid(format!("scale {s} must be positive")));
    }
    let q = cfg.q_max() as f64;
    let values = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = scales.data()[layout.channel(i)];
            // f64::round rounds half away from zero.
            (v / s).round().clamp(-q, q) as i32
        })
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        values,
        scales: scales.data().to_vec(),
        bits: cfg.bits,
        axis: cfg.axis,
    })
}

/// `values · scale` per channel.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let layout = ChannelLayout::new(&q.shape, q.axis).expect("validated layout");
    let data = q
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 * q.scales[layout.channel(i)])
        .collect();
    Tensor::from_parts(q.shape.clone(), data)
}

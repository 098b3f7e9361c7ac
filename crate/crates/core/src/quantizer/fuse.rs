use super::LayerExpansion;
use crate::error::{Error, Result};
use crate::network::Layer;
use crate::tensor::Tensor;

/// All orders of an expanded layer concatenated along the output dimension,
/// so a single Dense/Conv2D call evaluates every order at once.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLayer {
    kernel: Layer,
    /// `summation_map[j]` is the logical output channel fused output `j` adds into.
    summation_map: Vec<usize>,
    bias: Option<Tensor>,
    out_channels: usize,
}

impl FusedLayer {
    pub fn kernel(&self) -> &Layer {
        &self.kernel
    }

    pub fn summation_map(&self) -> &[usize] {
        &self.summation_map
    }

    pub fn fused_outputs(&self) -> usize {
        self.summation_map.len()
    }

    /// Runs the fused kernel, folds its outputs back onto the logical
    /// channels and adds the bias.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.kernel.apply(x);
        let per_channel = y.len() / self.summation_map.len();
        let mut shape = y.shape().to_vec();
        shape[0] = self.out_channels;
        let mut out = vec![0.0; self.out_channels * per_channel];
        for (j, &c) in self.summation_map.iter().enumerate() {
            let src = &y.data()[j * per_channel..(j + 1) * per_channel];
            for (o, v) in out[c * per_channel..(c + 1) * per_channel].iter_mut().zip(src) {
                *o += v;
            }
        }
        if let Some(b) = &self.bias {
            for (c, chunk) in out.chunks_mut(per_channel).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[c]);
            }
        }
        Tensor::new(shape, out)
    }
}

/// Concatenates every order's dequantized kernel (dropping masked rows) into
/// one layer of the same kind as `layer`.
pub fn fuse_kernels(expansion: &LayerExpansion, layer: &Layer) -> Result<FusedLayer> {
    let weight = layer
        .weight()
        .ok_or_else(|| Error::Structure(format!("cannot fuse a {} layer", layer.kind_name())))?;
    if weight.shape() != expansion.original().shape() {
        return Err(Error::shape(format!(
            "layer kernel {:?} differs from expansion {:?}",
            weight.shape(),
            expansion.original().shape()
        )));
    }
    let (rows, cols) = weight.rows_cols();
    let mut data = Vec::new();
    let mut summation_map = Vec::new();
    for term in expansion.terms() {
        let deq = term.dequantized();
        let kept = term.mask.as_ref().map(|m| m.kept_rows());
        for r in 0..rows {
            if kept.is_none_or(|k| k[r]) {
                data.extend_from_slice(deq.row(r));
                summation_map.push(r);
            }
        }
    }
    let mut shape = weight.shape().to_vec();
    shape[0] = summation_map.len();
    debug_assert_eq!(data.len(), summation_map.len() * cols);
    let kernel = layer.with_params(Tensor::new(shape, data)?, None)?;
    Ok(FusedLayer {
        kernel,
        summation_map,
        bias: layer.bias().cloned(),
        out_channels: rows,
    })
}

use crate::error::{Error, Result};
use crate::network::{Evaluate, Layer, Network};
use crate::quantizer::q_max;
use crate::tensor::Tensor;

/// Symmetric per-tensor fake-quantization of the network input and of every
/// activation output, with ranges taken from calibration inputs.
#[derive(Debug, Clone)]
pub struct FakeQuantNetwork<'a> {
    net: &'a Network,
    bits: u32,
    input_scale: f64,
    /// Scale after layer `i`, or `None` when layer `i` is not an activation.
    scales: Vec<Option<f64>>,
}

fn scale_for(max_abs: f64, bits: u32) -> f64 {
    if max_abs > 0.0 {
        max_abs / f64::from(q_max(bits))
    } else {
        1.0
    }
}

fn fake_quant(x: &Tensor, scale: f64, bits: u32) -> Tensor {
    let q = f64::from(q_max(bits));
    x.map(|v| (v / scale).round().clamp(-q, q) * scale)
}

impl<'a> FakeQuantNetwork<'a> {
    pub fn calibrate(net: &'a Network, bits: u32, xs: &[Tensor]) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::invalid(format!("activation bits {bits} outside 2..=16")));
        }
        if xs.is_empty() {
            return Err(Error::invalid("activation calibration needs at least one input"));
        }
        let mut input_max: f64 = 0.0;
        let mut maxima = vec![0.0f64; net.layers().len()];
        for x in xs {
            input_max = input_max.max(x.max_abs());
            for (i, t) in net.forward_trace(x)?.iter().enumerate() {
                maxima[i] = maxima[i].max(t.max_abs());
            }
        }
        let scales = net
            .layers()
            .iter()
            .zip(maxima)
            .map(|(l, m)| matches!(l, Layer::Activation(_)).then(|| scale_for(m, bits)))
            .collect();
        Ok(FakeQuantNetwork {
            net,
            bits,
            input_scale: scale_for(input_max, bits),
            scales,
        })
    }
}

impl Evaluate for FakeQuantNetwork<'_> {
    fn input_shape(&self) -> &[usize] {
        self.net.shape_before(0)
    }

    fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(format!(
                "input {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape()
            )));
        }
        let mut h = fake_quant(x, self.input_scale, self.bits);
        for (layer, scale) in self.net.layers().iter().zip(&self.scales) {
            h = layer.apply(&h);
            if let Some(s) = scale {
                h = fake_quant(&h, *s, self.bits);
            }
        }
        Ok(h)
    }
}

//! Feed-forward network representation, reference forward pass and
//! batch-norm folding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
    Gelu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Gelu => {
                // tanh approximation
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            "sigmoid" => Activation::Sigmoid,
            "gelu" => Activation::Gelu,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Dense {
    /// `weight` is `[out, in]`; `bias`, when present, has `out` entries.
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!(
                "dense weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        check_bias(&bias, weight.shape()[0])?;
        Ok(Dense { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    /// `weight` is `[out, in, d, d]`; only square kernels are accepted.
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: Padding) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("conv weight must be 4-D, got {s:?}")));
        }
        if s[2] != s[3] {
            return Err(Error::shape(format!("conv kernel must be square, got {}x{}", s[2], s[3])));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        check_bias(&bias, s[0])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Output extent and leading padding along one spatial axis.
    pub fn geometry(&self, extent: usize) -> Result<(usize, usize)> {
        let (d, s) = (self.kernel_size(), self.stride);
        match self.padding {
            Padding::Same => {
                let out = extent.div_ceil(s);
                let total = ((out - 1) * s + d).saturating_sub(extent);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if extent < d {
                    return Err(Error::shape(format!(
                        "valid conv with kernel {d} on extent {extent}"
                    )));
                }
                Ok(((extent - d) / s + 1, 0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
    epsilon: f64,
}

impl BatchNorm {
    pub fn new(gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, epsilon: f64) -> Result<Self> {
        let n = gamma.len();
        for (name, t) in [("gamma", &gamma), ("beta", &beta), ("mean", &mean), ("var", &var)] {
            if t.rank() != 1 || t.len() != n {
                return Err(Error::shape(format!(
                    "batch-norm {name} has shape {:?}, expected [{n}]",
                    t.shape()
                )));
            }
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("batch-norm epsilon {epsilon} must be >= 0")));
        }
        if let Some(v) = var.data().iter().find(|&&v| v < 0.0 || v + epsilon <= 0.0) {
            return Err(Error::invalid(format!(
                "batch-norm variance {v} (epsilon {epsilon}) must give a positive denominator"
            )));
        }
        Ok(BatchNorm {
            gamma,
            beta,
            mean,
            var,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn var(&self) -> &Tensor {
        &self.var
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Per-channel multiplier `γ / √(var + ε)`.
    pub fn channel_scale(&self, c: usize) -> f64 {
        self.gamma.data()[c] / (self.var.data()[c] + self.epsilon).sqrt()
    }
}

fn check_bias(bias: &Option<Tensor>, out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.rank() != 1 || b.len() != out {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {out} outputs",
                b.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Activation(Activation),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Activation(_) => "activation",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(l) => Some(&l.weight),
            Layer::Conv2d(l) => Some(&l.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(l) => l.bias.as_ref(),
            Layer::Conv2d(l) => l.bias.as_ref(),
            _ => None,
        }
    }

    /// Same layer with its kernel and bias replaced. Non-weighted layers are
    /// returned unchanged.
    pub fn with_params(&self, weight: Tensor, bias: Option<Tensor>) -> Result<Layer> {
        Ok(match self {
            Layer::Dense(_) => Layer::Dense(Dense::new(weight, bias)?),
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d::new(weight, bias, c.stride, c.padding)?),
            other => other.clone(),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(l) => {
                let n: usize = input.iter().product();
                if n != l.in_features() {
                    return Err(Error::shape(format!(
                        "dense expects {} inputs, got shape {input:?}",
                        l.in_features()
                    )));
                }
                Ok(vec![l.out_features()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(Error::shape(format!(
                        "conv2d expects [{}, H, W], got {input:?}",
                        c.in_channels()
                    )));
                }
                let (oh, _) = c.geometry(input[1])?;
                let (ow, _) = c.geometry(input[2])?;
                Ok(vec![c.out_channels(), oh, ow])
            }
            Layer::BatchNorm(bn) => {
                if input.is_empty() || input[0] != bn.channels() {
                    return Err(Error::shape(format!(
                        "batch-norm over {} channels, got shape {input:?}",
                        bn.channels()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Activation(_) => Ok(input.to_vec()),
        }
    }

    /// Evaluates the layer. `x` must already have a shape accepted by
    /// [`Layer::output_shape`].
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Dense(l) => {
                let mut y = l.weight.matvec(x.data());
                if let Some(b) = &l.bias {
                    for (v, bv) in y.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                Tensor::from_parts(vec![y.len()], y)
            }
            Layer::Conv2d(c) => conv2d(c, x),
            Layer::BatchNorm(bn) => {
                let per_channel = x.len() / bn.channels();
                let mut out = x.data().to_vec();
                for (c, chunk) in out.chunks_mut(per_channel).enumerate() {
                    let a = bn.channel_scale(c);
                    let (m, beta) = (bn.mean.data()[c], bn.beta.data()[c]);
                    for v in chunk {
                        *v = (*v - m) * a + beta;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            Layer::Activation(a) => x.map(|v| a.apply(v)),
        }
    }
}

fn conv2d(c: &Conv2d, x: &Tensor) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c.kernel_size();
    let s = c.stride;
    let (oh, ph) = c.geometry(h).expect("shape checked at construction");
    let (ow, pw) = c.geometry(w).expect("shape checked at construction");
    let cout = c.out_channels();
    let wd = c.weight.data();
    let xd = x.data();
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let bias = c.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..cin {
                    for ky in 0..d {
                        let iy = (oy * s + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..d {
                            let ix = (ox * s + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wd[((o * cin + i) * d + ky) * d + kx]
                                * xd[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc + bias;
            }
        }
    }
    Tensor::from_parts(vec![cout, oh, ow], out)
}

/// Anything that maps an input tensor to logits.
pub trait Evaluate {
    fn input_shape(&self) -> &[usize];
    fn evaluate(&self, x: &Tensor) -> Result<Tensor>;
}

/// Sequential feed-forward network. Immutable once built; shapes are
/// inferred and checked at construction so evaluation cannot hit a shape
/// error after the input check.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| e.at_layer(i))?;
            shapes.push(next);
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Input shape of layer `i` (`i == layers.len()` gives the output shape).
    pub fn shape_before(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Indices of the Dense/Conv2D layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn activations(&self) -> impl Iterator<Item = Activation> + '_ {
        self.layers.iter().filter_map(|l| match l {
            Layer::Activation(a) => Some(*a),
            _ => None,
        })
    }

    /// Replaces layer parameters through `f(index, layer)`, re-running shape
    /// inference on the result.
    pub fn map_layers(&self, mut f: impl FnMut(usize, &Layer) -> Result<Layer>) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| f(i, l).map_err(|e| e.at_layer(i)))
            .collect::<Result<Vec<_>>>()?;
        Network::new(self.input_shape.clone(), layers)
    }

    /// Copy with every parameter rounded to `f32` precision (the container
    /// storage precision).
    pub fn round_to_f32(&self) -> Network {
        let round = |t: &Tensor| t.round_to_f32();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    weight: round(&d.weight),
                    bias: d.bias.as_ref().map(round),
                }),
                Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                    weight: round(&c.weight),
                    bias: c.bias.as_ref().map(round),
                    ..c.clone()
                }),
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                    gamma: round(&bn.gamma),
                    beta: round(&bn.beta),
                    mean: round(&bn.mean),
                    var: round(&bn.var),
                    epsilon: bn.epsilon as f32 as f64,
                }),
                Layer::Activation(a) => Layer::Activation(*a),
            })
            .collect();
        Network {
            layers,
            ..self.clone()
        }
    }

    /// Reference evaluation of the network on one input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.apply(&cur);
        }
        Ok(cur)
    }

    /// Forward pass that also returns the output of every layer.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.apply(&cur);
            trace.push(cur.clone());
        }
        Ok(trace)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "input shape {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }
}

impl Evaluate for Network {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// Absorbs every BatchNorm into the Dense/Conv2D layer right before it.
pub fn fold_batch_norm(net: &Network) -> Result<Network> {
    let mut layers: Vec<Layer> = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let Layer::BatchNorm(bn) = layer else {
            layers.push(layer.clone());
            continue;
        };
        let prev = layers.pop().filter(Layer::is_weighted).ok_or_else(|| {
            Error::Structure(format!(
                "batch-norm at layer {i} is not preceded by a dense or conv2d layer"
            ))
        })?;
        let weight = prev.weight().unwrap();
        let (rows, cols) = weight.rows_cols();
        if rows != bn.channels() {
            return Err(Error::Structure(format!(
                "batch-norm at layer {i} has {} channels, preceding layer has {rows}",
                bn.channels()
            )));
        }
        let mut w = weight.data().to_vec();
        let mut b = vec![0.0; rows];
        for c in 0..rows {
            let a = bn.channel_scale(c);
            for v in &mut w[c * cols..(c + 1) * cols] {
                *v *= a;
            }
            let old = prev.bias().map_or(0.0, |t| t.data()[c]);
            b[c] = (old - bn.mean.data()[c]) * a + bn.beta.data()[c];
        }
        let folded = prev.with_params(
            Tensor::from_parts(weight.shape().to_vec(), w),
            Some(Tensor::from_parts(vec![rows], b)),
        )?;
        layers.push(folded);
    }
    Network::new(net.input_shape.clone(), layers)
}

/// `max over xs of ‖f(x) − g(x)‖_∞`.
pub fn logits_max_error<F, G>(f: &F, g: &G, xs: &[Tensor]) -> Result<f64>
where
    F: Evaluate + ?Sized,
    G: Evaluate + ?Sized,
{
    if xs.is_empty() {
        return Err(Error::invalid("logits_max_error needs at least one input"));
    }
    let mut worst = 0.0_f64;
    for x in xs {
        let d = f.evaluate(x)?.max_abs_diff(&g.evaluate(x)?)?;
        worst = worst.max(d);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn dense(w: Tensor, b: Option<Vec<f64>>) -> Layer {
        Layer::Dense(Dense::new(w, b.map(|b| Tensor::from_vec(b).unwrap())).unwrap())
    }

    #[test]
    fn identity_dense_relu() {
        let net = Network::new(vec![2], vec![dense(Tensor::eye(2), None), Layer::Activation(Activation::Relu)]).unwrap();
        let y = net.forward(&Tensor::from_vec(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn empty_network_is_identity() {
        let net = Network::new(vec![3], vec![]).unwrap();
        let x = Tensor::from_vec(vec![0.5, -2.0, 7.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::new(vec![2], vec![dense(Tensor::eye(2), None)]).unwrap();
        let err = net.forward(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn shape_inference_rejects_non_composable() {
        let r = Network::new(
            vec![2],
            vec![dense(Tensor::eye(2), None), dense(Tensor::eye(3), None)],
        );
        assert!(matches!(r, Err(Error::Layer { layer: 1, .. })));
    }

    #[test]
    fn conv_same_and_valid_geometry() {
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let same = Conv2d::new(w.clone(), None, 2, Padding::Same).unwrap();
        assert_eq!(same.geometry(5).unwrap(), (3, 1));
        let valid = Conv2d::new(w, None, 1, Padding::Valid).unwrap();
        assert_eq!(valid.geometry(5).unwrap(), (3, 0));
        assert!(valid.geometry(2).is_err());
    }

    #[test]
    fn conv_box_filter() {
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let conv = Layer::Conv2d(Conv2d::new(w, None, 1, Padding::Same).unwrap());
        let net = Network::new(vec![1, 3, 3], vec![conv]).unwrap();
        let y = net.forward(&Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn fold_identity_normalization_is_noop() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bn = BatchNorm::new(
            Tensor::from_vec(vec![1.0, 1.0]).unwrap(),
            Tensor::from_vec(vec![0.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![0.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![1.0, 1.0]).unwrap(),
            0.0,
        )
        .unwrap();
        let net = Network::new(vec![2], vec![dense(w.clone(), Some(vec![0.5, -0.5])), Layer::BatchNorm(bn)]).unwrap();
        let folded = fold_batch_norm(&net).unwrap();
        assert_eq!(folded.layers().len(), 1);
        assert_eq!(folded.layers()[0].weight().unwrap(), &w);
        assert_eq!(folded.layers()[0].bias().unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn fold_hand_example() {
        let bn = BatchNorm::new(
            Tensor::from_vec(vec![3.0]).unwrap(),
            Tensor::from_vec(vec![1.0]).unwrap(),
            Tensor::from_vec(vec![0.0]).unwrap(),
            Tensor::from_vec(vec![1.0]).unwrap(),
            0.0,
        )
        .unwrap();
        let net = Network::new(
            vec![1],
            vec![dense(Tensor::matrix(1, 1, vec![2.0]).unwrap(), Some(vec![0.0])), Layer::BatchNorm(bn)],
        )
        .unwrap();
        let folded = fold_batch_norm(&net).unwrap();
        assert_eq!(folded.layers()[0].weight().unwrap().data(), &[6.0]);
        assert_eq!(folded.layers()[0].bias().unwrap().data(), &[1.0]);
    }

    #[test]
    fn fold_rejects_orphan_batch_norm() {
        let bn = BatchNorm::new(
            Tensor::from_vec(vec![1.0]).unwrap(),
            Tensor::from_vec(vec![0.0]).unwrap(),
            Tensor::from_vec(vec![0.0]).unwrap(),
            Tensor::from_vec(vec![1.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        let net = Network::new(
            vec![1],
            vec![
                dense(Tensor::eye(1), None),
                Layer::Activation(Activation::Relu),
                Layer::BatchNorm(bn),
            ],
        )
        .unwrap();
        assert!(matches!(fold_batch_norm(&net), Err(Error::Structure(_))));
    }

    #[test]
    fn logits_error_cases() {
        let mut rng = synth::rng(7);
        let f = synth::mlp(&mut rng, &[4, 5, 3], synth::Init::default()).unwrap();
        let xs = synth::unit_inputs(&mut rng, &[4], 10);
        assert_eq!(logits_max_error(&f, &f, &xs).unwrap(), 0.0);
        assert!(logits_max_error(&f, &f, &[]).is_err());

        let last = f.layers().len() - 1;
        let g = f
            .map_layers(|i, l| {
                if i != last {
                    return Ok(l.clone());
                }
                let mut b = l.bias().unwrap().data().to_vec();
                b[1] += 0.2;
                l.with_params(l.weight().unwrap().clone(), Some(Tensor::from_vec(b)?))
            })
            .unwrap();
        let e = logits_max_error(&f, &g, &xs).unwrap();
        assert!((e - 0.2).abs() < 1e-12, "{e}");
    }
}

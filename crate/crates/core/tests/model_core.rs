use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use resq_core::bounds::{network_bound, BoundKind};
use resq_core::linalg::spectral_norm_default;
use resq_core::network::{fold_batch_norm, logits_max_error, Activation, BatchNorm, Conv2d, Dense, Layer, Padding};
use resq_core::quantizer::{expand_network, QuantConfig};
use resq_core::synth;
use resq_core::{Error, Network, Tensor};

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec()).unwrap()
}

fn dense(w: &Tensor, b: Option<&Tensor>) -> Layer {
    Layer::Dense(Dense::new(w.clone(), b.cloned()).unwrap())
}

#[test]
fn identity_relu_example() {
    let net = Network::new(vec![2], vec![dense(&Tensor::eye(2), None), Layer::Activation(Activation::Relu)]).unwrap();
    assert_eq!(net.forward(&t(&[1.0, -1.0])).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn empty_network_is_identity() {
    let net = Network::new(vec![3], vec![]).unwrap();
    let x = t(&[0.5, -2.0, 7.0]);
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn mlp_matches_matrix_oracle() {
    for seed in 0..10 {
        let mut rng = synth::rng(seed);
        let net = synth::mlp(&mut rng, &[7, 13, 9, 4], Default::default()).unwrap();
        let mats: Vec<(DMatrix<f64>, DVector<f64>)> = net
            .layers()
            .iter()
            .filter_map(|l| {
                let w = l.weight()?;
                let (r, c) = w.rows_cols();
                Some((DMatrix::from_row_slice(r, c, w.data()), DVector::from_column_slice(l.bias().unwrap().data())))
            })
            .collect();
        for x in synth::unit_inputs(&mut rng, &[7], 20) {
            let mut h = DVector::from_column_slice(x.data());
            for (i, (w, b)) in mats.iter().enumerate() {
                h = w * h + b;
                if i + 1 < mats.len() {
                    h = h.map(|v| v.max(0.0));
                }
            }
            let got = net.forward(&x).unwrap();
            for (a, b) in got.data().iter().zip(h.iter()) {
                assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

/// Cross-correlation on an explicitly zero-padded copy of the input.
fn conv_oracle(w: &Tensor, b: &Tensor, stride: usize, pad: (usize, usize), out: (usize, usize), x: &Tensor) -> Vec<f64> {
    let [o_ch, i_ch, d, _] = w.shape().try_into().unwrap();
    let [_, h, wd] = x.shape().try_into().unwrap();
    let (ph, pw) = (h + 2 * d, wd + 2 * d);
    let mut padded = vec![0.0; i_ch * ph * pw];
    for c in 0..i_ch {
        for y in 0..h {
            for z in 0..wd {
                padded[(c * ph + y + pad.0) * pw + z + pad.1] = x.data()[(c * h + y) * wd + z];
            }
        }
    }
    let mut y = Vec::new();
    for o in 0..o_ch {
        for oy in 0..out.0 {
            for ox in 0..out.1 {
                let mut acc = b.data()[o];
                for c in 0..i_ch {
                    for ky in 0..d {
                        for kx in 0..d {
                            acc += w.data()[((o * i_ch + c) * d + ky) * d + kx]
                                * padded[(c * ph + oy * stride + ky) * pw + ox * stride + kx];
                        }
                    }
                }
                y.push(acc);
            }
        }
    }
    y
}

#[test]
fn conv_matches_padded_oracle() {
    let mut rng = synth::rng(40);
    for (d, stride, padding, h) in [(3, 1, Padding::Same, 5usize), (3, 2, Padding::Same, 6), (2, 2, Padding::Same, 5), (3, 1, Padding::Valid, 5), (1, 2, Padding::Valid, 7)] {
        let w = synth::gaussian(&mut rng, vec![3, 2, d, d], 1.0);
        let b = synth::gaussian(&mut rng, vec![3], 0.1);
        let conv = Conv2d::new(w.clone(), Some(b.clone()), stride, padding).unwrap();
        let (out, lead) = match padding {
            Padding::Same => {
                let out = h.div_ceil(stride);
                (out, ((out - 1) * stride + d).saturating_sub(h) / 2)
            }
            Padding::Valid => ((h - d) / stride + 1, 0),
        };
        let layer = Layer::Conv2d(conv);
        assert_eq!(layer.output_shape(&[2, h, h]).unwrap(), vec![3, out, out]);
        let x = synth::gaussian(&mut rng, vec![2, h, h], 1.0);
        let got = layer.apply(&x);
        let want = conv_oracle(&w, &b, stride, (lead, lead), (out, out), &x);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn fold_identity_normalization_is_noop() {
    let w = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
    let b = t(&[0.25, -1.0]);
    let bn = BatchNorm::new(t(&[1.0, 1.0]), t(&[0.0, 0.0]), t(&[0.0, 0.0]), t(&[1.0, 1.0]), 0.0).unwrap();
    let net = Network::new(vec![2], vec![dense(&w, Some(&b)), Layer::BatchNorm(bn)]).unwrap();
    let folded = fold_batch_norm(&net).unwrap();
    assert_eq!(folded.layers(), &[dense(&w, Some(&b))]);
}

#[test]
fn fold_hand_example() {
    let bn = BatchNorm::new(t(&[3.0]), t(&[1.0]), t(&[0.0]), t(&[1.0]), 0.0).unwrap();
    let w = Tensor::matrix(1, 1, vec![2.0]).unwrap();
    let net = Network::new(vec![1], vec![dense(&w, Some(&t(&[0.0]))), Layer::BatchNorm(bn)]).unwrap();
    let folded = fold_batch_norm(&net).unwrap();
    let want = dense(&Tensor::matrix(1, 1, vec![6.0]).unwrap(), Some(&t(&[1.0])));
    assert_eq!(folded.layers(), &[want]);
}

#[test]
fn fold_conv_network_preserves_outputs() {
    let mut rng = synth::rng(41);
    let base = synth::cnn(&mut rng, 6, &[2, 4, 3], 5, Default::default()).unwrap();
    let mut layers = Vec::new();
    for l in base.layers() {
        layers.push(l.clone());
        if let Layer::Conv2d(c) = l {
            layers.push(Layer::BatchNorm(synth::batch_norm(&mut rng, c.out_channels()).unwrap()));
        }
    }
    let net = Network::new(vec![2, 6, 6], layers).unwrap();
    let folded = fold_batch_norm(&net).unwrap();
    assert!(!folded.has_batch_norm());
    for _ in 0..20 {
        let x = synth::gaussian(&mut rng, vec![2, 6, 6], 1.0);
        let (a, b) = (net.forward(&x).unwrap(), folded.forward(&x).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0));
        }
    }
}

#[test]
fn fold_without_predecessor_is_structural_error() {
    let bn = BatchNorm::new(t(&[1.0]), t(&[0.0]), t(&[0.0]), t(&[1.0]), 1e-5).unwrap();
    let net = Network::new(vec![1], vec![Layer::BatchNorm(bn.clone())]).unwrap();
    assert!(matches!(fold_batch_norm(&net), Err(Error::Structure(_))));
    let after_relu = Network::new(
        vec![1],
        vec![dense(&Tensor::eye(1), None), Layer::Activation(Activation::Relu), Layer::BatchNorm(bn)],
    )
    .unwrap();
    assert!(matches!(fold_batch_norm(&after_relu), Err(Error::Structure(_))));
}

#[test]
fn spectral_norm_examples() {
    assert!((spectral_norm_default(&Tensor::eye(2)).unwrap() - 1.0).abs() < 1e-12);
    let diag = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((spectral_norm_default(&diag).unwrap() - 3.0).abs() < 1e-9);
    for seed in 0..5 {
        let w = synth::gaussian(&mut synth::rng(seed), vec![8, 5], 1.0);
        let svd = DMatrix::from_row_slice(8, 5, w.data()).singular_values();
        let want = svd.max();
        let got = spectral_norm_default(&w).unwrap();
        assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
    }
}

#[test]
fn logits_max_error_examples() {
    let mut rng = synth::rng(42);
    let net = synth::mlp(&mut rng, &[5, 8, 3], Default::default()).unwrap();
    let xs = synth::unit_inputs(&mut rng, &[5], 10);
    assert_eq!(logits_max_error(&net, &net, &xs).unwrap(), 0.0);

    let shifted = net
        .map_layers(|i, l| {
            if i + 1 == net.layers().len() {
                let mut b = l.bias().unwrap().data().to_vec();
                b[1] += 0.2;
                l.with_params(l.weight().unwrap().clone(), Some(Tensor::from_vec(b).unwrap()))
            } else {
                Ok(l.clone())
            }
        })
        .unwrap();
    assert!((logits_max_error(&net, &shifted, &xs).unwrap() - 0.2).abs() < 1e-12);
    assert!(matches!(logits_max_error(&net, &net, &[]), Err(Error::InvalidInput(_))));
}

#[test]
fn expansion_error_within_network_bound() {
    let mut rng = synth::rng(43);
    let net = synth::mlp(&mut rng, &[10, 20, 20, 5], Default::default()).unwrap();
    let e = expand_network(&net, &QuantConfig::new(8).unwrap(), 4, 1.0, 5).unwrap();
    let xs = synth::unit_inputs(&mut rng, &[10], 100);
    let measured = logits_max_error(&net, &e.apply(&net).unwrap(), &xs).unwrap();
    assert!(measured <= network_bound(&net, &e, BoundKind::Dense).unwrap().u);
}

#[test]
fn shape_errors_are_caught_at_construction() {
    let w = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
    assert!(Network::new(vec![3], vec![dense(&w, None)]).is_err());
    let net = Network::new(vec![2], vec![dense(&w, None)]).unwrap();
    assert!(net.forward(&t(&[1.0, 2.0, 3.0])).is_err());
}

#[test]
fn forward_is_thread_safe() {
    let net = synth::mlp(&mut synth::rng(44), &[6, 12, 4], Default::default()).unwrap();
    let xs = synth::unit_inputs(&mut synth::rng(45), &[6], 8);
    let want: Vec<Tensor> = xs.iter().map(|x| net.forward(x).unwrap()).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = xs.iter().map(|x| s.spawn(|| net.forward(x).unwrap())).collect();
        for (h, w) in handles.into_iter().zip(&want) {
            assert_eq!(&h.join().unwrap(), w);
        }
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_pure(seed in 0u64..1000, width in 1usize..16) {
        let mut rng = synth::rng(seed);
        let net = synth::mlp(&mut rng, &[4, width, 3], Default::default()).unwrap();
        let x = synth::gaussian(&mut rng, vec![4], 1.0);
        prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn folding_preserves_outputs(seed in 0u64..1000, hidden in 1usize..12) {
        let mut rng = synth::rng(seed);
        let base = synth::mlp(&mut rng, &[5, hidden, 3], Default::default()).unwrap();
        let mut layers = base.layers().to_vec();
        layers.insert(1, Layer::BatchNorm(synth::batch_norm(&mut rng, hidden).unwrap()));
        let net = Network::new(vec![5], layers).unwrap();
        let folded = fold_batch_norm(&net).unwrap();
        let x = synth::gaussian(&mut rng, vec![5], 1.0);
        let (a, b) = (net.forward(&x).unwrap(), folded.forward(&x).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0));
        }
    }
}

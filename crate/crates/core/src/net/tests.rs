use super::*;
use crate::gradcheck::rel_err;

fn randn(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn batch_of(net: &Network<f64>, b: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut s = vec![b];
    s.extend_from_slice(net.input_shape());
    randn(s, rng)
}

/// Random BN affine parameters and running statistics so that eval-mode
/// normalization is not the identity.
fn scramble_bn(net: &mut Network<f64>, rng: &mut Rng) {
    for (i, l) in net.layers.iter().enumerate() {
        let (pidx, bufs): (&[usize], usize) = match l {
            LayerSpec::BatchNorm { .. } => (&[0, 1], 2),
            LayerSpec::Residual { .. } => (&[1, 2, 4, 5], 4),
            _ => continue,
        };
        for &k in pidx {
            for v in net.params[i][k].data_mut() {
                *v = if k % 3 == 1 { 1.0 + 0.3 * rng.normal() } else { 0.3 * rng.normal() };
            }
        }
        for k in 0..bufs {
            for v in net.buffers[i][k].data_mut() {
                *v = if k % 2 == 0 { 0.5 * rng.normal() } else { 0.5 + rng.uniform() };
            }
        }
    }
}

// ---- independent per-sample reference forward (direct loops, eval mode) ----

struct Fm {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn ref_conv(x: &Fm, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize) -> Fm {
    let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let o = w.shape()[0];
    let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.at(&[oc, ic, ky, kx]) * x.data[(ic * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = s;
            }
        }
    }
    Fm {
        shape: vec![o, oh, ow],
        data: out,
    }
}

fn ref_bn(x: &Fm, gamma: &Tensor<f64>, beta: &Tensor<f64>, mean: &Tensor<f64>, var: &Tensor<f64>) -> Fm {
    let c = x.shape[0];
    let plane = x.data.len() / c;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            (v - mean.data()[ch]) / (var.data()[ch] + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch]
        })
        .collect();
    Fm {
        shape: x.shape.clone(),
        data,
    }
}

fn ref_relu(x: Fm) -> Fm {
    Fm {
        data: x.data.into_iter().map(|v| v.max(0.0)).collect(),
        shape: x.shape,
    }
}

fn ref_forward(net: &Network<f64>, sample: &[f64]) -> Vec<f64> {
    let mut x = Fm {
        shape: net.input_shape().to_vec(),
        data: sample.to_vec(),
    };
    for (i, l) in net.layers.iter().enumerate() {
        let p = &net.params[i];
        let bu = &net.buffers[i];
        x = match *l {
            LayerSpec::Dense { inputs, outputs } => Fm {
                shape: vec![outputs],
                data: (0..outputs)
                    .map(|o| p[1].data()[o] + (0..inputs).map(|k| p[0].at(&[o, k]) * x.data[k]).sum::<f64>())
                    .collect(),
            },
            LayerSpec::Conv3x3 { stride, bias, .. } => ref_conv(&x, &p[0], bias.then(|| &p[1]), stride),
            LayerSpec::Relu => ref_relu(x),
            LayerSpec::MaxPool2 => {
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let mut d = Vec::new();
                for ch in 0..c {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let at = |dy: usize, dx: usize| x.data[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                            d.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                        }
                    }
                }
                Fm {
                    shape: vec![c, h / 2, w / 2],
                    data: d,
                }
            }
            LayerSpec::BatchNorm { .. } => ref_bn(&x, &p[0], &p[1], &bu[0], &bu[1]),
            LayerSpec::GlobalAvgPool => {
                let c = x.shape[0];
                let plane = x.data.len() / c;
                Fm {
                    shape: vec![c],
                    data: x.data.chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect(),
                }
            }
            LayerSpec::Dropout { .. } => x,
            LayerSpec::Flatten => Fm {
                shape: vec![x.data.len()],
                data: x.data,
            },
            LayerSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                let a = ref_relu(ref_bn(&ref_conv(&x, &p[0], None, stride), &p[1], &p[2], &bu[0], &bu[1]));
                let mut m = ref_bn(&ref_conv(&a, &p[3], None, 1), &p[4], &p[5], &bu[2], &bu[3]);
                let (h, w) = (x.shape[1], x.shape[2]);
                let (oh, ow) = (m.shape[1], m.shape[2]);
                for ch in 0..in_channels.min(out_channels) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            m.data[(ch * oh + y) * ow + xx] += x.data[(ch * h + y * stride) * w + xx * stride];
                        }
                    }
                }
                ref_relu(m)
            }
        };
    }
    x.data
}

fn check_against_reference(arch: &str, shape: &[usize], divisor: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let opts = ArchOptions {
        dropout: None,
        width_divisor: divisor,
    };
    let mut net = Network::<f64>::build_with(arch, shape, 5, &opts, &mut rng).unwrap();
    scramble_bn(&mut net, &mut rng);
    let x = batch_of(&net, 3, &mut rng);
    let y = net.forward_eval(&x).unwrap();
    for i in 0..3 {
        let want = ref_forward(&net, x.row(i));
        for (a, b) in y.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{arch}: {a} vs {b}");
        }
    }
}

#[test]
fn forward_matches_direct_loop_reference() {
    check_against_reference("mlp-small", &[1, 8, 8], 1, 1);
    check_against_reference("cnn-6", &[3, 8, 8], 16, 2);
    check_against_reference("cnn-10", &[3, 32, 32], 32, 3);
    check_against_reference("resnet8", &[3, 8, 8], 4, 4);
    check_against_reference("resnet14", &[3, 16, 16], 8, 5);
}

#[test]
fn mlp_1024_has_paper_widths() {
    let net = Network::<f32>::build("mlp-1024", &[1, 28, 28], 10, &mut Rng::new(0)).unwrap();
    let dense: Vec<(usize, usize)> = net
        .layers()
        .iter()
        .filter_map(|l| match *l {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        })
        .collect();
    assert_eq!(dense, vec![(784, 1024), (1024, 1024), (1024, 10)]);
    assert_eq!(net.param_count(), 784 * 1024 + 1024 + 1024 * 1024 + 1024 + 1024 * 10 + 10);
}

#[test]
fn resnet_depths_count_weighted_layers() {
    for depth in [8, 14, 20, 26] {
        let net = Network::<f32>::build(&format!("resnet{depth}"), &[3, 32, 32], 10, &mut Rng::new(0)).unwrap();
        assert_eq!(net.weighted_layer_count(), depth);
    }
    for (name, depth) in [("cnn-6", 7), ("cnn-8", 9), ("cnn-10", 11)] {
        let net = Network::<f32>::build(name, &[3, 32, 32], 10, &mut Rng::new(0)).unwrap();
        assert_eq!(net.weighted_layer_count(), depth);
    }
}

#[test]
fn odd_spatial_sizes_are_rejected_at_build_time() {
    let err = Network::<f32>::build("cnn-8", &[1, 28, 28], 10, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
    let err = Network::<f32>::build("resnet9", &[3, 32, 32], 10, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, Error::Configuration(_)));
}

#[test]
fn initialization_is_seeded() {
    let a = Network::<f32>::build("cnn-6", &[3, 8, 8], 4, &mut Rng::new(11)).unwrap();
    let b = Network::<f32>::build("cnn-6", &[3, 8, 8], 4, &mut Rng::new(11)).unwrap();
    let c = Network::<f32>::build("cnn-6", &[3, 8, 8], 4, &mut Rng::new(12)).unwrap();
    assert!(a.params().eq(b.params()));
    assert!(!a.params().eq(c.params()));
}

#[test]
fn he_initialization_has_expected_spread() {
    let net = Network::<f64>::build("mlp-1024", &[1, 28, 28], 10, &mut Rng::new(3)).unwrap();
    let w = net.params().next().unwrap();
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    assert!((var / (2.0 / 784.0) - 1.0).abs() < 0.02, "{var}");
    assert!(net.params().nth(1).unwrap().data().iter().all(|&b| b == 0.0));
}

#[test]
fn zero_weights_give_zero_logits() {
    let mut net = Network::<f64>::build("cnn-6", &[3, 8, 8], 3, &mut Rng::new(0)).unwrap();
    for p in net.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = batch_of(&net, 2, &mut Rng::new(1));
    assert!(net.forward_eval(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_input_shape_is_a_dimension_error() {
    let net = Network::<f32>::build("mlp-small", &[1, 8, 8], 3, &mut Rng::new(0)).unwrap();
    let err = net.forward_eval(&Tensor::zeros(vec![2, 1, 8, 9])).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn eval_forward_is_independent_of_batch_order() {
    let mut rng = Rng::new(9);
    let mut net = Network::<f64>::build_with(
        "resnet8",
        &[3, 8, 8],
        4,
        &ArchOptions {
            dropout: None,
            width_divisor: 4,
        },
        &mut rng,
    )
    .unwrap();
    scramble_bn(&mut net, &mut rng);
    let x = batch_of(&net, 5, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let y = net.forward_eval(&x).unwrap();
    let yp = net.forward_eval(&x.select_rows(&perm).unwrap()).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        assert_eq!(yp.row(r), y.row(src));
    }
}

fn bn_only(c: usize) -> Network<f64> {
    Network::from_layers("custom", &[c], c, vec![LayerSpec::BatchNorm { channels: c }], &mut Rng::new(0)).unwrap()
}

#[test]
fn train_mode_batchnorm_standardizes_and_updates_running_stats() {
    let mut rng = Rng::new(4);
    let mut net = bn_only(3);
    let x = Tensor::from_fn(vec![6, 3], |i| 2.0 + (i % 3) as f64 + rng.normal());
    let (y, _) = net.forward_train(&x, &mut rng).unwrap();
    for ch in 0..3 {
        let col: Vec<f64> = (0..6).map(|i| y.row(i)[ch]).collect();
        let m = col.iter().sum::<f64>() / 6.0;
        let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4);
        let xs: Vec<f64> = (0..6).map(|i| x.row(i)[ch]).collect();
        let xm = xs.iter().sum::<f64>() / 6.0;
        let xv = xs.iter().map(|a| (a - xm).powi(2)).sum::<f64>() / 5.0;
        assert!((net.buffers[0][0].data()[ch] - 0.1 * xm).abs() < 1e-12);
        assert!((net.buffers[0][1].data()[ch] - (0.9 + 0.1 * xv)).abs() < 1e-12);
    }
}

#[test]
fn plain_forward_never_mutates() {
    let mut rng = Rng::new(2);
    let net = bn_only(2);
    let x = randn(vec![4, 2], &mut rng);
    let before = net.buffers.clone();
    net.forward(&x, ForwardOpts::train(&mut rng)).unwrap();
    assert_eq!(net.buffers, before);
}

#[test]
fn dropout_is_inverted_and_off_in_eval() {
    let layers = vec![LayerSpec::Dropout { rate: 0.5 }];
    let net = Network::<f64>::from_layers("custom", &[2000], 2000, layers, &mut Rng::new(0)).unwrap();
    let x = Tensor::full(vec![1, 2000], 1.0);
    assert_eq!(net.forward_eval(&x).unwrap(), x);
    let (y, _) = net.forward(&x, ForwardOpts::train(&mut Rng::new(5))).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = y.data().iter().filter(|&&v| v == 2.0).count();
    assert!((900..1100).contains(&kept), "{kept}");
}

#[test]
fn zero_seed_gives_zero_gradients() {
    let mut rng = Rng::new(6);
    let net = Network::<f64>::build_with(
        "resnet8",
        &[3, 8, 8],
        3,
        &ArchOptions {
            dropout: None,
            width_divisor: 8,
        },
        &mut rng,
    )
    .unwrap();
    let x = batch_of(&net, 2, &mut rng);
    let (_, tape) = net.forward(&x, ForwardOpts::train(&mut rng)).unwrap();
    let g = net.backward_params(tape, &Tensor::zeros(vec![2, 3])).unwrap();
    assert_eq!(g.len(), net.params().count());
    assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn dense_gradients_have_closed_form() {
    let mut rng = Rng::new(8);
    let layers = vec![LayerSpec::Dense { inputs: 4, outputs: 3 }];
    let net = Network::<f64>::from_layers("custom", &[4], 3, layers, &mut rng).unwrap();
    let x = randn(vec![5, 4], &mut rng);
    let dy = randn(vec![5, 3], &mut rng);
    let (_, tape) = net.forward(&x, ForwardOpts::eval()).unwrap();
    let g = net.backward(tape, &dy, BackwardRequest {
        input: true,
        ..BackwardRequest::params()
    })
    .unwrap();
    let p = g.params.unwrap();
    let w = &net.params[0][0];
    for o in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..5).map(|i| dy.row(i)[o] * x.row(i)[k]).sum();
            assert!((p[0].at(&[o, k]) - want).abs() < 1e-12);
        }
        let want: f64 = (0..5).map(|i| dy.row(i)[o]).sum();
        assert!((p[1].data()[o] - want).abs() < 1e-12);
    }
    let dx = g.input.unwrap();
    for i in 0..5 {
        for k in 0..4 {
            let want: f64 = (0..3).map(|o| dy.row(i)[o] * w.at(&[o, k])).sum();
            assert!((dx.row(i)[k] - want).abs() < 1e-12);
        }
    }
}

/// `⟨seed, logits⟩` under the given batchnorm mode.
fn probe(net: &Network<f64>, x: &Tensor<f64>, seed: &Tensor<f64>, batch_stats: bool) -> (f64, u64) {
    let opts = ForwardOpts {
        batch_stats,
        ..ForwardOpts::eval()
    };
    let (y, tape) = net.forward(x, opts).unwrap();
    (y.dot(seed).unwrap(), tape.activation_signature())
}

fn fd_check_every_param(net: &mut Network<f64>, x: &Tensor<f64>, batch_stats: bool) {
    let mut rng = Rng::new(77);
    let seed = randn(vec![x.batch(), net.num_classes()], &mut rng);
    let opts = ForwardOpts {
        batch_stats,
        ..ForwardOpts::eval()
    };
    let (_, tape) = net.forward(x, opts).unwrap();
    let sig = tape.activation_signature();
    let analytic = net.backward_params(tape, &seed).unwrap();
    let h = 1e-5;
    let (mut worst, mut skipped, mut total) = (0.0f64, 0, 0);
    for t in 0..analytic.len() {
        for k in 0..analytic[t].len() {
            let orig = net.params_mut().nth(t).unwrap().data()[k];
            net.params_mut().nth(t).unwrap().data_mut()[k] = orig + h;
            let (fp, sp) = probe(net, x, &seed, batch_stats);
            net.params_mut().nth(t).unwrap().data_mut()[k] = orig - h;
            let (fm, sm) = probe(net, x, &seed, batch_stats);
            net.params_mut().nth(t).unwrap().data_mut()[k] = orig;
            total += 1;
            if sp != sig || sm != sig {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic[t].data()[k], (fp - fm) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-6, "max relative error {worst}");
    assert!(skipped * 5 <= total, "{skipped} of {total} skipped");
}

#[test]
fn every_layer_kind_passes_exhaustive_finite_differences() {
    let mut rng = Rng::new(31);
    let layers = vec![
        LayerSpec::Conv3x3 {
            in_channels: 2,
            out_channels: 3,
            stride: 1,
            bias: true,
        },
        LayerSpec::BatchNorm { channels: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Residual {
            in_channels: 3,
            out_channels: 4,
            stride: 2,
        },
        LayerSpec::Residual {
            in_channels: 4,
            out_channels: 4,
            stride: 1,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { inputs: 4, outputs: 3 },
    ];
    let mut net = Network::<f64>::from_layers("custom", &[2, 8, 8], 3, layers, &mut rng).unwrap();
    scramble_bn(&mut net, &mut rng);
    let x = batch_of(&net, 3, &mut rng);
    fd_check_every_param(&mut net, &x, true);
    fd_check_every_param(&mut net, &x, false);

    let layers = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 12, outputs: 6 },
        LayerSpec::BatchNorm { channels: 6 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 6, outputs: 2 },
    ];
    let mut net = Network::<f64>::from_layers("custom", &[3, 2, 2], 2, layers, &mut rng).unwrap();
    scramble_bn(&mut net, &mut rng);
    let x = batch_of(&net, 4, &mut rng);
    fd_check_every_param(&mut net, &x, true);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = Rng::new(12);
    let mut net = Network::<f64>::build_with(
        "resnet8",
        &[3, 8, 8],
        4,
        &ArchOptions {
            dropout: None,
            width_divisor: 4,
        },
        &mut rng,
    )
    .unwrap();
    scramble_bn(&mut net, &mut rng);
    let x = batch_of(&net, 2, &mut rng);
    let seed = randn(vec![2, 4], &mut rng);
    let (_, tape) = net.forward(&x, ForwardOpts::eval()).unwrap();
    let sig = tape.activation_signature();
    let g = net.backward_input(tape, &seed, ReluMode::Standard).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for k in (0..x.len()).step_by(5) {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let (fp, sp) = probe(&net, &xp, &seed, false);
        let (fm, sm) = probe(&net, &xm, &seed, false);
        if sp != sig || sm != sig {
            continue;
        }
        checked += 1;
        let e = rel_err(g.data()[k], (fp - fm) / (2.0 * h));
        assert!(e < 1e-6, "coord {k}: {e}");
    }
    assert!(checked > 60);
}

#[test]
fn relu_free_networks_have_identical_guided_and_plain_gradients() {
    let mut rng = Rng::new(3);
    let layers = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 8, outputs: 5 },
        LayerSpec::Dense { inputs: 5, outputs: 3 },
    ];
    let net = Network::<f64>::from_layers("custom", &[2, 2, 2], 3, layers, &mut rng).unwrap();
    let x = batch_of(&net, 3, &mut rng);
    let sel = randn(vec![3, 3], &mut rng);
    let a = net.backward_input(net.forward(&x, ForwardOpts::eval()).unwrap().1, &sel, ReluMode::Standard);
    let b = net.backward_input(net.forward(&x, ForwardOpts::eval()).unwrap().1, &sel, ReluMode::Guided);
    assert_eq!(a.unwrap(), b.unwrap());
}

#[test]
fn guided_backprop_matches_hand_rule_on_one_hidden_layer() {
    let mut rng = Rng::new(21);
    let layers = vec![
        LayerSpec::Dense { inputs: 6, outputs: 8 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 8, outputs: 3 },
    ];
    let net = Network::<f64>::from_layers("custom", &[6], 3, layers, &mut rng).unwrap();
    let x = randn(vec![4, 6], &mut rng);
    let mut sel = Tensor::zeros(vec![4, 3]);
    for i in 0..4 {
        sel.row_mut(i)[i % 3] = 1.0;
    }
    let (_, tape) = net.forward(&x, ForwardOpts::eval()).unwrap();
    let g = net.backward_input(tape, &sel, ReluMode::Guided).unwrap();
    let (w1, b1, w2) = (&net.params[0][0], &net.params[0][1], &net.params[2][0]);
    for i in 0..4 {
        let hidden: Vec<f64> = (0..8)
            .map(|j| b1.data()[j] + (0..6).map(|k| w1.at(&[j, k]) * x.row(i)[k]).sum::<f64>())
            .collect();
        let upstream: Vec<f64> = (0..8).map(|j| w2.at(&[i % 3, j])).collect();
        for k in 0..6 {
            let want: f64 = (0..8)
                .filter(|&j| hidden[j] > 0.0 && upstream[j] > 0.0)
                .map(|j| upstream[j] * w1.at(&[j, k]))
                .sum();
            assert!((g.row(i)[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn guided_relu_taps_are_nonnegative_and_masked() {
    let mut rng = Rng::new(5);
    let net = Network::<f64>::build_with(
        "resnet8",
        &[3, 8, 8],
        3,
        &ArchOptions {
            dropout: None,
            width_divisor: 8,
        },
        &mut rng,
    )
    .unwrap();
    let x = batch_of(&net, 2, &mut rng);
    let sel = randn(vec![2, 3], &mut rng);
    let (_, tape) = net.forward(&x, ForwardOpts::eval()).unwrap();
    let req = BackwardRequest {
        relu_taps: true,
        ..BackwardRequest::input(ReluMode::Guided)
    };
    let g = net.backward(tape, &sel, req).unwrap();
    assert!(g.relu_taps.len() >= 7);
    for tap in &g.relu_taps {
        for (&gv, &y) in tap.grad.data().iter().zip(tap.forward_output.data()) {
            assert!(gv >= 0.0);
            if y <= 0.0 {
                assert_eq!(gv, 0.0);
            }
        }
    }
}

#[test]
fn feature_gradients_through_global_pooling_have_closed_form() {
    let mut rng = Rng::new(14);
    let layers = vec![
        LayerSpec::Conv3x3 {
            in_channels: 1,
            out_channels: 3,
            stride: 1,
            bias: true,
        },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { inputs: 3, outputs: 4 },
    ];
    let net = Network::<f64>::from_layers("custom", &[1, 4, 4], 4, layers, &mut rng).unwrap();
    assert_eq!(net.feature_layers(), vec![0, 1]);
    assert_eq!(net.default_feature_layer().unwrap(), 1);
    let x = batch_of(&net, 2, &mut rng);
    let mut sel = Tensor::zeros(vec![2, 4]);
    sel.row_mut(0)[2] = 1.0;
    sel.row_mut(1)[0] = 1.0;
    let (_, tape) = net.forward(&x, ForwardOpts::eval().capture(1)).unwrap();
    let fg = net.feature_grads(tape, &sel, 1).unwrap();
    let w = &net.params[3][0];
    for (i, class) in [(0, 2), (1, 0)] {
        for ch in 0..3 {
            for p in 0..16 {
                assert!((fg.grads.row(i)[ch * 16 + p] - w.at(&[class, ch]) / 16.0).abs() < 1e-14);
            }
        }
        let direct = ref_relu(ref_conv(
            &Fm {
                shape: vec![1, 4, 4],
                data: x.row(i).to_vec(),
            },
            &net.params[0][0],
            Some(&net.params[0][1]),
            1,
        ));
        for (a, b) in fg.activations.row(i).iter().zip(&direct.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn feature_gradients_need_a_capturing_tape() {
    let mut rng = Rng::new(1);
    let net = Network::<f32>::build_with(
        "cnn-6",
        &[3, 8, 8],
        3,
        &ArchOptions {
            dropout: None,
            width_divisor: 16,
        },
        &mut rng,
    )
    .unwrap();
    let x = Tensor::zeros(vec![1, 3, 8, 8]);
    let sel = Tensor::full(vec![1, 3], 1.0);
    let (_, tape) = net.forward(&x, ForwardOpts::eval()).unwrap();
    let layer = net.default_feature_layer().unwrap();
    assert!(matches!(net.feature_grads(tape, &sel, layer), Err(Error::State(_))));
    assert!(matches!(
        net.forward(&x, ForwardOpts::eval().capture(net.layers().len() - 1)),
        Err(Error::Configuration(_))
    ));
    let mlp = Network::<f32>::build("mlp-small", &[1, 4, 4], 3, &mut rng).unwrap();
    assert!(mlp.default_feature_layer().is_err());
}

#[test]
fn stale_tapes_are_rejected() {
    let mut rng = Rng::new(1);
    let mut net = Network::<f32>::build("mlp-small", &[1, 4, 4], 3, &mut rng).unwrap();
    let x = Tensor::from_fn(vec![2, 1, 4, 4], |_| rng.normal() as f32);
    let (_, tape) = net.forward(&x, ForwardOpts::eval()).unwrap();
    net.params_mut().next().unwrap().data_mut()[0] += 1.0;
    let err = net.backward_params(tape, &Tensor::zeros(vec![2, 3])).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn mismatched_seed_shape_is_a_dimension_error() {
    let mut rng = Rng::new(1);
    let net = Network::<f32>::build("mlp-small", &[1, 4, 4], 3, &mut rng).unwrap();
    let (_, tape) = net.forward(&Tensor::zeros(vec![2, 1, 4, 4]), ForwardOpts::eval()).unwrap();
    let err = net.backward_params(tape, &Tensor::zeros(vec![2, 4])).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn f32_forward_tracks_f64_forward() {
    let mut rng = Rng::new(19);
    let net64 = Network::<f64>::build_with(
        "cnn-6",
        &[3, 8, 8],
        5,
        &ArchOptions {
            dropout: None,
            width_divisor: 8,
        },
        &mut rng,
    )
    .unwrap();
    let net32: Network<f32> = net64.cast();
    let x = batch_of(&net64, 3, &mut rng);
    let a = net64.forward_eval(&x).unwrap();
    let b = net32.forward_eval(&x.cast()).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - *v as f64).abs() < 1e-4 * (1.0 + u.abs()));
    }
}

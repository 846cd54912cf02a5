use bevda_grad::{gradient_check, ConvSpec, GradCheckConfig, GradError, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar probe `sum(y * r)` with a fixed random `r`, so every output
/// element contributes with a distinct weight.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, g.shape(y));
    let r = g.constant(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let report = gradient_check(f, inputs, &GradCheckConfig::default()).unwrap();
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(
        report.max_rel_error < 1e-4,
        "{name}: max relative error {}",
        report.max_rel_error
    );
}

#[test]
fn identity_pointwise_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.constant(w).unwrap();
    let y = g.conv2d(xv, wv, None, ConvSpec::new(1, 0)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn identity_centered_3x3_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 7]);
    let mut w = Tensor::zeros(&[2, 2, 3, 3]);
    for c in 0..2 {
        w.data_mut()[(c * 2 + c) * 9 + 4] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.constant(w).unwrap();
    let y = g.conv2d(xv, wv, None, ConvSpec::new(1, 1)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, cin, h, w, cout, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
    let x = rand_tensor(&mut rng, &[n, cin, h, w]);
    let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
    let b = rand_tensor(&mut rng, &[cout]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()).unwrap(), g.constant(wt.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let y = g.conv2d(xv, wv, Some(bv), ConvSpec::new(s, p)).unwrap();
    let [_, _, oh, ow] = g.value(y).dims4("t").unwrap();
    assert_eq!((oh, ow), ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1));
    for bi in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (ii, jj) = ((i * s + ki) as isize - p as isize, (j * s + kj) as isize - p as isize);
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += wt.data()[((o * cin + c) * k + ki) * k + kj]
                                        * x.data()[((bi * cin + c) * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[((bi * cout + o) * oh + i) * ow + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4("x").unwrap();
    let [cout, _, kh, kw] = w.dims4("w").unwrap();
    let (s, p, d) = (spec.stride, spec.pad, spec.dilation);
    let oh = (h + 2 * p - d * (kh - 1) - 1) / s + 1;
    let ow = (wd + 2 * p - d * (kw - 1) - 1) / s + 1;
    Tensor::from_fn(&[n, cout, oh, ow], |idx| {
        let (j, i, o, b) = (idx % ow, idx / ow % oh, idx / (ow * oh) % cout, idx / (ow * oh * cout));
        let mut acc = 0.0;
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let ii = (i * s + ki * d) as isize - p as isize;
                    let jj = (j * s + kj * d) as isize - p as isize;
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                        acc += w.data()[((o * cin + c) * kh + ki) * kw + kj]
                            * x.data()[((b * cin + c) * h + ii as usize) * wd + jj as usize];
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn stride_one_lowerings_match_reference() {
    // (cin, cout) pairs exercising the tap-loop, im2col and per-tap GEMM
    // lowerings; kernel 5 takes the generic tap-width fallback.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (cin, cout) in [(3, 2), (3, 6), (9, 6), (8, 4)] {
        for k in [3, 4, 5, 7] {
            for (pad, dil) in [(0, 1), (1, 1), (3, 1), (2, 2)] {
                let (h, w) = (11, 9);
                if h + 2 * pad < dil * (k - 1) + 1 || w + 2 * pad < dil * (k - 1) + 1 {
                    continue;
                }
                let x = rand_tensor(&mut rng, &[2, cin, h, w]);
                let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
                let spec = ConvSpec::new(1, pad).dilated(dil);
                let mut g = Graph::new();
                let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(wt.clone()).unwrap());
                let y = g.conv2d(xv, wv, None, spec).unwrap();
                let want = naive_conv(&x, &wt, spec);
                assert_eq!(g.shape(y), want.shape());
                for (a, b) in g.value(y).data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-11, "cin {cin} cout {cout} k {k} {spec:?}");
                }
            }
        }
    }
}

#[test]
fn stride_one_lowerings_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (cin, cout, k, pad, dil) in [(3, 2, 7, 3, 1), (9, 6, 3, 1, 1), (8, 5, 3, 2, 2), (10, 3, 4, 1, 1), (8, 7, 5, 0, 1)] {
        let x = rand_tensor(&mut rng, &[2, cin, 10, 12]);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        check("stride-1 conv2d", &[x, wt, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, pad).dilated(dil))?;
            probe(g, y, 7)
        });
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for matching geometry
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 3, 8, 8]);
    let wt = rand_tensor(&mut rng, &[5, 3, 3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.constant(wt.clone()).unwrap();
    let cx = g.conv2d(xv, wv, None, ConvSpec::new(2, 1)).unwrap();
    let y = rand_tensor(&mut rng, g.shape(cx));
    let yv = g.constant(y.clone()).unwrap();
    // conv weight (Cout=5, Cin=3) doubles as transposed weight (Cin=5, Cout=3)
    let ty = g.conv_transpose2d(yv, wv, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(ty), &[1, 3, 8, 8]);
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn tanh_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0f64)).unwrap();
    let y = g.tanh(x).unwrap();
    assert_eq!(g.value(y).item().unwrap(), 0.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item().unwrap(), 1.0);
}

#[test]
fn instance_norm_of_constant_channel_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 2, 4, 4], 3.5f64)).unwrap();
    let y = g.instance_norm(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn instance_norm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[2, 3, 6, 5])).unwrap();
    let y = g.instance_norm(x).unwrap();
    for plane in g.value(y).data().chunks(30) {
        let m: f64 = plane.iter().sum::<f64>() / 30.0;
        let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 30.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn pixel_shuffle_rearranges() {
    let x = Tensor::from_fn(&[1, 4, 3, 2], |i| i as f64);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = g.pixel_shuffle(xv, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 6, 4]);
    let mut got = g.value(y).data().to_vec();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, x.data());
    // top-left 2x2 block of the output comes from position (0,0) of each input channel
    let yv = g.value(y).data();
    assert_eq!([yv[0], yv[1], yv[4], yv[5]], [0.0, 6.0, 12.0, 18.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 8, 5, 5], |_| rng.random_range(-20.0..20.0))).unwrap();
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y).data();
    for b in 0..2 {
        for p in 0..25 {
            let s: f64 = (0..8).map(|c| v[(b * 8 + c) * 25 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_identity_at_zero_and_scales_survivors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 100, 100], 1.0f64)).unwrap();
    let same = g.dropout(x, 0.0, 7).unwrap();
    assert_eq!(same, x);
    let y = g.dropout(x, 0.5, 7).unwrap();
    let v = g.value(y).data();
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    let again = g.dropout(x, 0.5, 7).unwrap();
    assert_eq!(g.value(again), g.value(y));
    assert!(g.dropout(x, 1.0, 7).is_err());
}

#[test]
fn shape_errors_carry_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    match g.add(a, b) {
        Err(GradError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    assert!(matches!(g.constant(Tensor::scalar(f64::NAN)), Err(GradError::NonFinite { .. })));
    let x = g.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(g.mul(x, x), Err(GradError::NonFinite { .. })));
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.backward(x), Err(GradError::Contract(_))));
}

#[test]
fn gradient_check_rejects_non_scalar() {
    let x = Tensor::zeros(&[3]);
    let r = gradient_check(|g, v| g.tanh(v[0]), &[x], &GradCheckConfig::default());
    assert!(matches!(r, Err(GradError::Contract(_))));
}

#[test]
fn gradient_check_of_mean_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 7]);
    let report = gradient_check(|g, v| g.mean(v[0]), &[x], &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
}

#[test]
fn gradient_check_excludes_abs_kink() {
    let x = Tensor::new(&[3], vec![0.0, 0.7, -0.4]).unwrap();
    let report = gradient_check(
        |g, v| {
            let a = g.abs(v[0])?;
            g.sum(a)
        },
        &[x],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-9);
}

#[test]
fn two_layer_conv_relu_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 12, 10]);
    let w1 = rand_tensor(&mut rng, &[6, 3, 3, 3]);
    let b1 = rand_tensor(&mut rng, &[6]);
    let w2 = rand_tensor(&mut rng, &[2, 6, 3, 3]);
    check("conv+relu net", &[x, w1, b1, w2], |g, v| {
        let h = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1))?;
        let h = g.relu(h)?;
        let y = g.conv2d(h, v[3], None, ConvSpec::new(2, 1))?;
        probe(g, y, 1)
    });
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..3u64 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=8);
        let h = rng.random_range(4..=32);
        let w = rng.random_range(4..=32);
        let shape = [n, c, h, w];
        let x = rand_tensor(&mut rng, &shape);
        let x2 = rand_tensor(&mut rng, &shape);
        let cout = rng.random_range(1..=4);
        let k = [1, 3, 4][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let wconv = rand_tensor(&mut rng, &[cout, c, k, k]);
        let bconv = rand_tensor(&mut rng, &[cout]);
        let wt = rand_tensor(&mut rng, &[c, cout, 3, 3]);

        check("conv2d", &[x.clone(), wconv.clone(), bconv.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(stride, 1))?;
            probe(g, y, trial)
        });
        let wwide = rand_tensor(&mut rng, &[6, c, 3, 3]);
        check("conv2d wide stride 1", &[x.clone(), wwide], |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::new(1, 1))?;
            probe(g, y, trial)
        });
        check("conv2d dilated", &[x.clone(), wconv.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::new(1, k).dilated(2))?;
            probe(g, y, trial)
        });
        check("conv_transpose2d", &[x.clone(), wt.clone(), bconv.clone()], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
            probe(g, y, trial)
        });
        check("instance_norm", &[x.clone()], |g, v| {
            let y = g.instance_norm(v[0])?;
            probe(g, y, trial)
        });
        check("leaky_relu", &[x.clone()], |g, v| {
            let y = g.leaky_relu(v[0], 0.2)?;
            probe(g, y, trial)
        });
        check("relu", &[x.clone()], |g, v| {
            let y = g.relu(v[0])?;
            probe(g, y, trial)
        });
        check("tanh", &[x.clone()], |g, v| {
            let y = g.tanh(v[0])?;
            probe(g, y, trial)
        });
        check("softmax", &[x.clone()], |g, v| {
            let y = g.softmax(v[0], 1)?;
            probe(g, y, trial)
        });
        check("dropout", &[x.clone()], |g, v| {
            let y = g.dropout(v[0], 0.3, 99 + trial)?;
            probe(g, y, trial)
        });
        let cc = 4 * rng.random_range(1..=2);
        let xs = rand_tensor(&mut rng, &[n, cc, h.min(16), w.min(16)]);
        check("pixel_shuffle", &[xs], |g, v| {
            let y = g.pixel_shuffle(v[0], 2)?;
            probe(g, y, trial)
        });
        check("add", &[x.clone(), x2.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, trial)
        });
        check("sub", &[x.clone(), x2.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y, trial)
        });
        check("mul", &[x.clone(), x2.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, trial)
        });
        check("mul_scalar", &[x.clone()], |g, v| {
            let y = g.mul_scalar(v[0], -1.7)?;
            probe(g, y, trial)
        });
        check("add_scalar", &[x.clone()], |g, v| {
            let y = g.add_scalar(v[0], 0.3)?;
            probe(g, y, trial)
        });
        check("concat", &[x.clone(), x2.clone()], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            probe(g, y, trial)
        });
        check("mean", &[x.clone()], |g, v| g.mean(v[0]));
        check("sum", &[x.clone()], |g, v| g.sum(v[0]));
        check("abs", &[x.clone()], |g, v| {
            let y = g.abs(v[0])?;
            probe(g, y, trial)
        });
        check("square", &[x.clone()], |g, v| {
            let y = g.square(v[0])?;
            probe(g, y, trial)
        });
        check("pad2d", &[x.clone()], |g, v| {
            let y = g.pad2d(v[0], 1, 2, 0, 3, -1.0)?;
            probe(g, y, trial)
        });
        check("crop2d", &[x.clone()], |g, v| {
            let y = g.crop2d(v[0], 1, 2, h - 2, w - 3)?;
            probe(g, y, trial)
        });
    }
}

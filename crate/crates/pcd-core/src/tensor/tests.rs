use super::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rt(shape: &[usize], rng: &mut StdRng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Six-nested-loop cross-correlation, written independently of the kernel
/// under test (per-output gather instead of per-weight row updates).
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    s: usize,
    p: usize,
) -> Tensor<f64> {
    let (bn, ci, h, wd) = x.dims4().unwrap();
    let (co, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * p - kh) / s + 1;
    let wo = (wd + 2 * p - kw) / s + 1;
    let mut out = Tensor::zeros(&[bn, co, ho, wo]);
    for bi in 0..bn {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map(|t| t.data()[oc]).unwrap_or(0.0);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    let xv = x.data()
                                        [((bi * ci + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_all_ones_sums_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let w = g.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), [1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv_1x1_identity_kernel_preserves_input() {
    let mut rng = StdRng::seed_from_u64(1);
    let xt = rt(&[1, 1, 5, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::filled(&[1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(2);
    for &(s, p) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
        for _ in 0..10 {
            let xt = rt(&[2, 2, 5, 6], &mut rng);
            let wt = rt(&[3, 2, 3, 3], &mut rng);
            let bt = rt(&[3], &mut rng);
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let w = g.constant(wt.clone());
            let b = g.constant(bt.clone());
            let y = g.conv2d(x, w, Some(b), s, p).unwrap();
            let want = conv_oracle(&xt, &wt, Some(&bt), s, p);
            assert!(max_abs_diff(g.value(y), &want) <= 1e-12);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(crate::Error::Config(_))));
}

#[test]
fn tconv_impulse_stamps_kernel_copy() {
    let mut rng = StdRng::seed_from_u64(3);
    let wt = rt(&[1, 1, 2, 2], &mut rng);
    let mut xt = Tensor::zeros(&[1, 1, 3, 3]);
    xt.data_mut()[1 * 3 + 1] = 1.0; // impulse at (1,1)
    let mut g = Graph::new();
    let x = g.constant(xt);
    let w = g.constant(wt.clone());
    let y = g.transposed_conv2d(x, w, None, 2, 0).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), [1, 1, 6, 6]);
    let mut expect = Tensor::zeros(&[1, 1, 6, 6]);
    for ky in 0..2 {
        for kx in 0..2 {
            expect.data_mut()[(2 + ky) * 6 + (2 + kx)] = wt.data()[ky * 2 + kx];
        }
    }
    assert_eq!(out, &expect);
}

#[test]
fn tconv_doubles_spatial_size_with_k2_s2() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
    let y = g.transposed_conv2d(x, w, None, 2, 0).unwrap();
    assert_eq!(g.value(y).shape(), [1, 2, 16, 16]);
}

/// ⟨conv(a; w), b⟩ == ⟨a, tconv(b; w)⟩ for shapes where the conv output size
/// inverts exactly; this is the defining adjoint property.
#[test]
fn tconv_is_adjoint_of_conv() {
    let mut rng = StdRng::seed_from_u64(4);
    for &(h, k, s, p) in &[(5usize, 3usize, 2usize, 0usize), (6, 2, 2, 0), (7, 3, 1, 1)] {
        let ho = (h + 2 * p - k) / s + 1;
        assert_eq!((ho - 1) * s + k, h + 2 * p, "test shape must invert exactly");
        for _ in 0..10 {
            let a = rt(&[1, 2, h, h], &mut rng);
            let w = rt(&[3, 2, k, k], &mut rng);
            let b = rt(&[1, 3, ho, ho], &mut rng);
            // lhs = <conv(a), b>
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let wv = g.constant(w.clone());
            let conv = g.conv2d(av, wv, None, s, p).unwrap();
            let lhs: f64 = g.value(conv).data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            // rhs = <a, tconv(b)> with the tconv weight layout [Ci_t, Co_t, k, k]
            // equal to the conv layout [Co_c, Ci_c, k, k] read as-is.
            let mut g2 = Graph::new();
            let bv = g2.constant(b.clone());
            let wv2 = g2.constant(w.clone());
            let tconv = g2.transposed_conv2d(bv, wv2, None, s, p).unwrap();
            let rhs: f64 =
                g2.value(tconv).data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() <= 1e-12, "adjoint identity violated: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn bn_constant_channel_maps_to_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[2, 1, 3, 3], 7.25));
    let gamma = g.constant(Tensor::filled(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let mut rm = Tensor::zeros(&[1]);
    let mut rv = Tensor::filled(&[1], 1.0);
    let y = g.batch_norm_train(x, gamma, beta, &mut rm, &mut rv, 0.1).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn bn_train_output_is_normalized() {
    let mut rng = StdRng::seed_from_u64(5);
    // Variance well above epsilon so the epsilon bias stays under the 1e-6
    // tolerance on the output variance.
    let mut xt = rt(&[4, 3, 5, 5], &mut rng);
    for v in xt.data_mut() {
        *v *= 10.0;
    }
    let mut g = Graph::new();
    let x = g.constant(xt);
    let gamma = g.constant(Tensor::filled(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let mut rm = Tensor::zeros(&[3]);
    let mut rv = Tensor::filled(&[3], 1.0);
    let y = g.batch_norm_train(x, gamma, beta, &mut rm, &mut rv, 0.1).unwrap();
    let out = g.value(y);
    let (b, c, h, w) = out.dims4().unwrap();
    let m = (b * h * w) as f64;
    for cc in 0..c {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for bi in 0..b {
            for i in 0..h * w {
                let v = out.data()[(bi * c + cc) * h * w + i];
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / m;
        let var = sq / m - mean * mean;
        assert!(mean.abs() <= 1e-10, "channel {cc} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-6, "channel {cc} var {var}");
    }
}

#[test]
fn bn_matches_two_pass_oracle() {
    let mut rng = StdRng::seed_from_u64(6);
    let xt = rt(&[2, 2, 4, 4], &mut rng);
    let gt = rt(&[2], &mut rng);
    let bt = rt(&[2], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let gamma = g.constant(gt.clone());
    let beta = g.constant(bt.clone());
    let mut rm = Tensor::zeros(&[2]);
    let mut rv = Tensor::filled(&[2], 1.0);
    let y = g.batch_norm_train(x, gamma, beta, &mut rm, &mut rv, 0.1).unwrap();

    let (b, c, h, w) = xt.dims4().unwrap();
    let m = (b * h * w) as f64;
    for cc in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|bi| {
                xt.data()[(bi * c + cc) * h * w..(bi * c + cc + 1) * h * w].to_vec()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let mut k = 0;
        for bi in 0..b {
            for i in 0..h * w {
                let want = (vals[k] - mean) / (var + 1e-5).sqrt() * gt.data()[cc] + bt.data()[cc];
                let got = g.value(y).data()[(bi * c + cc) * h * w + i];
                assert!((want - got).abs() <= 1e-10);
                k += 1;
            }
        }
        // EMA update from (0, 1) initial state with momentum 0.1.
        assert!((rm.data()[cc] - 0.1 * mean).abs() <= 1e-12);
        assert!((rv.data()[cc] - (0.9 + 0.1 * var)).abs() <= 1e-12);
    }
}

#[test]
fn bn_single_element_batch_is_degenerate() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::filled(&[1, 3, 1, 1], 2.0));
    let gamma = g.constant(Tensor::filled(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let mut rm = Tensor::zeros(&[3]);
    let mut rv = Tensor::filled(&[3], 1.0);
    let r = g.batch_norm_train(x, gamma, beta, &mut rm, &mut rv, 0.1);
    assert!(matches!(r, Err(crate::Error::Numeric(_))));
}

#[test]
fn bn_eval_uses_running_stats() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1, 1, 1, 2], 3.0));
    let gamma = g.constant(Tensor::filled(&[1], 2.0));
    let beta = g.constant(Tensor::filled(&[1], 0.5));
    let rm = Tensor::filled(&[1], 1.0);
    let rv = Tensor::filled(&[1], 4.0);
    let y = g.batch_norm_eval(x, gamma, beta, &rm, &rv).unwrap();
    let want = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 2.0 + 0.5;
    assert!((g.value(y).data()[0] - want).abs() <= 1e-12);
}

#[test]
fn softmax_uniform_on_zero_logits() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
    let y = g.channel_softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() <= 1e-15));
}

#[test]
fn softmax_survives_extreme_logits() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::from_vec(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
    let y = g.channel_softmax(x).unwrap();
    let out = g.value(y);
    assert!(out.all_finite());
    assert!((out.data()[0] - 1.0).abs() <= 1e-15);
    assert!(out.data()[1].abs() <= 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_and_match_direct_oracle() {
    let mut rng = StdRng::seed_from_u64(7);
    let xt = rt(&[2, 3, 4, 4], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let y = g.channel_softmax(x).unwrap();
    let out = g.value(y);
    let (b, c, h, w) = xt.dims4().unwrap();
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let logits: Vec<f64> =
                (0..c).map(|cc| xt.data()[bi * c * plane + cc * plane + p]).collect();
            let denom: f64 = logits.iter().map(|v| v.exp()).sum();
            let mut sum = 0.0;
            for cc in 0..c {
                let got = out.data()[bi * c * plane + cc * plane + p];
                let want = logits[cc].exp() / denom;
                assert!((got - want).abs() <= 1e-12);
                assert!(got >= 0.0);
                sum += got;
            }
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn multiply_identity_and_annihilator() {
    let mut rng = StdRng::seed_from_u64(8);
    let xt = rt(&[1, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let ones = g.constant(Tensor::filled(&[1, 2, 3, 3], 1.0));
    let zeros = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let id = g.multiply(x, ones).unwrap();
    let nil = g.multiply(x, zeros).unwrap();
    assert_eq!(g.value(id), &xt);
    assert!(g.value(nil).data().iter().all(|v| *v == 0.0));
}

#[test]
fn multiply_requires_exact_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.multiply(a, b), Err(crate::Error::Config(_))));
}

#[test]
fn slice_of_concat_roundtrips() {
    let mut rng = StdRng::seed_from_u64(9);
    let at = rt(&[2, 3, 4, 4], &mut rng);
    let bt = rt(&[2, 2, 4, 4], &mut rng);
    let mut g = Graph::new();
    let a = g.constant(at.clone());
    let b = g.constant(bt.clone());
    let cat = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(cat).shape(), [2, 5, 4, 4]);
    let back_a = g.slice_channels(cat, 0, 3).unwrap();
    let back_b = g.slice_channels(cat, 3, 5).unwrap();
    assert_eq!(g.value(back_a), &at);
    assert_eq!(g.value(back_b), &bt);
}

#[test]
fn maxpool_requires_even_dims_and_selects_maxima() {
    let mut g = Graph::<f64>::new();
    let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(g.max_pool2(odd).is_err());

    let xt = Tensor::from_vec(
        &[1, 1, 2, 4],
        vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0, 7.0, 2.0],
    )
    .unwrap();
    let x = g.constant(xt);
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0]);
}

#[test]
fn global_avg_pool_means_each_plane() {
    let xt = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, -2.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(xt);
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).shape(), [1, 2]);
    assert_eq!(g.value(y).data(), &[2.0, 2.0]);
}

#[test]
fn backward_twice_doubles_leaf_grads() {
    let mut rng = StdRng::seed_from_u64(10);
    let xt = rt(&[1, 2, 4, 4], &mut rng);
    let wt = rt(&[2, 2, 3, 3], &mut rng);
    let red = rt(&[1, 2, 2, 2], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(xt);
    let w = g.leaf(wt);
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    let out = g.weighted_sum(y, red).unwrap();
    g.backward(out).unwrap();
    let first = g.grad(w).unwrap().clone();
    g.backward(out).unwrap();
    let second = g.grad(w).unwrap();
    for (a, b) in first.data().iter().zip(second.data()) {
        assert_eq!(*b, 2.0 * *a);
    }
}

#[test]
fn shared_input_accumulates_both_branches() {
    // y = Σ w ⊙ (2x + x⊙x) has gradient 2w + 2w⊙x.
    let mut rng = StdRng::seed_from_u64(11);
    let xt = rt(&[1, 1, 3, 3], &mut rng);
    let red = rt(&[1, 1, 3, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(xt.clone());
    let two_x = g.scale(x, 2.0);
    let x_sq = g.multiply(x, x).unwrap();
    let sum = g.add(two_x, x_sq).unwrap();
    let out = g.weighted_sum(sum, red.clone()).unwrap();
    g.backward(out).unwrap();
    let grad = g.grad(x).unwrap();
    for i in 0..grad.len() {
        let want = 2.0 * red.data()[i] + 2.0 * red.data()[i] * xt.data()[i];
        assert!((grad.data()[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_roots() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(crate::Error::Config(_))));
}

// ---- gradient checks --------------------------------------------------

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

#[test]
fn gradcheck_add_is_exact() {
    let mut rng = StdRng::seed_from_u64(20);
    let a = rt(&[2, 3], &mut rng);
    let b = rt(&[2, 3], &mut rng);
    let red = rt(&[2, 3], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let s = g.add(vars[0], vars[1])?;
            g.weighted_sum(s, red.clone())
        },
        &[a, b],
        FD_EPS,
        1e-10,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = StdRng::seed_from_u64(21);
    for &(s, p) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = rt(&[2, 2, 5, 5], &mut rng);
        let w = rt(&[3, 2, 3, 3], &mut rng);
        let b = rt(&[3], &mut rng);
        let ho = (5 + 2 * p - 3) / s + 1;
        let red = rt(&[2, 3, ho, ho], &mut rng);
        let report = gradcheck(
            |g, vars| {
                let y = g.conv2d(vars[0], vars[1], Some(vars[2]), s, p)?;
                g.weighted_sum(y, red.clone())
            },
            &[x, w, b],
            FD_EPS,
            FD_TOL,
        )
        .unwrap();
        assert!(report.passed(), "conv s={s} p={p}: {report}");
    }
}

#[test]
fn gradcheck_transposed_conv2d() {
    let mut rng = StdRng::seed_from_u64(22);
    let x = rt(&[1, 2, 3, 3], &mut rng);
    let w = rt(&[2, 3, 2, 2], &mut rng);
    let b = rt(&[3], &mut rng);
    let red = rt(&[1, 3, 6, 6], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let y = g.transposed_conv2d(vars[0], vars[1], Some(vars[2]), 2, 0)?;
            g.weighted_sum(y, red.clone())
        },
        &[x, w, b],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    let mut rng = StdRng::seed_from_u64(23);
    let x = rt(&[2, 2, 3, 3], &mut rng);
    let gamma = rt(&[2], &mut rng);
    let beta = rt(&[2], &mut rng);
    let red = rt(&[2, 2, 3, 3], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let mut rm = Tensor::zeros(&[2]);
            let mut rv = Tensor::filled(&[2], 1.0);
            let y = g.batch_norm_train(vars[0], vars[1], vars[2], &mut rm, &mut rv, 0.1)?;
            g.weighted_sum(y, red.clone())
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "train mode: {report}");

    let rm = rt(&[2], &mut rng);
    let rv = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
    let report = gradcheck(
        |g, vars| {
            let y = g.batch_norm_eval(vars[0], vars[1], vars[2], &rm, &rv)?;
            g.weighted_sum(y, red.clone())
        },
        &[x, gamma, beta],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "eval mode: {report}");
}

#[test]
fn gradcheck_relu_away_from_zero() {
    let mut rng = StdRng::seed_from_u64(24);
    let mut x = rt(&[2, 2, 3, 3], &mut rng);
    for v in x.data_mut() {
        // Keep probes away from the kink; FD across 0 is meaningless.
        if v.abs() <= 1e-2 {
            *v = 0.5 * v.signum().max(0.0) + 0.25;
        }
    }
    let red = rt(&[2, 2, 3, 3], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let y = g.relu(vars[0]);
            g.weighted_sum(y, red.clone())
        },
        &[x],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_channel_softmax() {
    let mut rng = StdRng::seed_from_u64(25);
    let x = rt(&[1, 4, 3, 3], &mut rng);
    let red = rt(&[1, 4, 3, 3], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let y = g.channel_softmax(vars[0])?;
            g.weighted_sum(y, red.clone())
        },
        &[x],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_maxpool_away_from_ties() {
    let mut rng = StdRng::seed_from_u64(26);
    // Resample until every 2x2 window has a clear winner; FD across a tie
    // probes the wrong subgradient.
    let x = loop {
        let cand = rt(&[1, 2, 4, 4], &mut rng);
        let (ok, _) = {
            let mut ok = true;
            for bc in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut vals: Vec<f64> = (0..4)
                            .map(|i| {
                                let (dy, dx) = (i / 2, i % 2);
                                cand.data()[bc * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]
                            })
                            .collect();
                        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        if vals[0] - vals[1] < 1e-3 {
                            ok = false;
                        }
                    }
                }
            }
            (ok, ())
        };
        if ok {
            break cand;
        }
    };
    let red = rt(&[1, 2, 2, 2], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let y = g.max_pool2(vars[0])?;
            g.weighted_sum(y, red.clone())
        },
        &[x],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_linear_and_gap() {
    let mut rng = StdRng::seed_from_u64(27);
    let x = rt(&[2, 3, 4, 4], &mut rng);
    let w = rt(&[3, 3], &mut rng);
    let b = rt(&[3], &mut rng);
    let red = rt(&[2, 3], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let pooled = g.global_avg_pool(vars[0])?;
            let y = g.linear(pooled, vars[1], vars[2])?;
            g.weighted_sum(y, red.clone())
        },
        &[x, w, b],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_concat_slice_mul_scale() {
    let mut rng = StdRng::seed_from_u64(28);
    let a = rt(&[1, 2, 3, 3], &mut rng);
    let b = rt(&[1, 3, 3, 3], &mut rng);
    let red = rt(&[1, 2, 3, 3], &mut rng);
    let report = gradcheck(
        |g, vars| {
            let cat = g.concat_channels(&[vars[0], vars[1]])?;
            let left = g.slice_channels(cat, 1, 3)?;
            let scaled = g.scale(vars[0], -1.5);
            let prod = g.multiply(left, scaled)?;
            g.weighted_sum(prod, red.clone())
        },
        &[a, b],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gradcheck_masked_cross_entropy() {
    let mut rng = StdRng::seed_from_u64(29);
    let x = rt(&[2, 3, 4, 4], &mut rng);
    let entries = vec![
        MaskEntry { b: 0, y: 0, x: 0, class: 1 },
        MaskEntry { b: 0, y: 2, x: 3, class: 0 },
        MaskEntry { b: 1, y: 3, x: 1, class: 2 },
        MaskEntry { b: 1, y: 1, x: 2, class: 2 },
    ];
    let report = gradcheck(
        |g, vars| g.masked_cross_entropy(vars[0], &entries),
        &[x],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn masked_cross_entropy_uniform_logits_hit_log_class_count() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 22, 8, 8]));
    let entries = vec![
        MaskEntry { b: 0, y: 1, x: 1, class: 3 },
        MaskEntry { b: 0, y: 5, x: 2, class: 21 },
    ];
    let loss = g.masked_cross_entropy(x, &entries).unwrap();
    assert!((g.value(loss).item() - (22.0f64).ln()).abs() <= 1e-6);
}

#[test]
fn masked_cross_entropy_perfect_prediction_is_near_zero() {
    let mut x = Tensor::zeros(&[1, 4, 4, 4]);
    let entries = vec![
        MaskEntry { b: 0, y: 0, x: 0, class: 2 },
        MaskEntry { b: 0, y: 3, x: 3, class: 0 },
    ];
    for e in &entries {
        x.data_mut()[e.class * 16 + e.y * 4 + e.x] = 40.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let loss = g.masked_cross_entropy(xv, &entries).unwrap();
    assert!(g.value(loss).item() <= 1e-6);
}

#[test]
fn masked_cross_entropy_grad_is_zero_outside_mask() {
    let mut rng = StdRng::seed_from_u64(30);
    let xt = rt(&[1, 3, 4, 4], &mut rng);
    let entries = vec![MaskEntry { b: 0, y: 1, x: 2, class: 0 }];
    let mut g = Graph::new();
    let x = g.leaf(xt);
    let loss = g.masked_cross_entropy(x, &entries).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for cc in 0..3 {
        for y in 0..4 {
            for xx in 0..4 {
                let v = grad.data()[cc * 16 + y * 4 + xx];
                if y == 1 && xx == 2 {
                    continue;
                }
                assert_eq!(v, 0.0, "nonzero grad off the mask at c={cc} y={y} x={xx}");
            }
        }
    }
}

#[test]
fn masked_cross_entropy_is_shift_invariant() {
    let mut rng = StdRng::seed_from_u64(31);
    let xt = rt(&[1, 5, 3, 3], &mut rng);
    let entries = vec![
        MaskEntry { b: 0, y: 0, x: 1, class: 4 },
        MaskEntry { b: 0, y: 2, x: 2, class: 1 },
    ];
    let mut shifted = xt.clone();
    for y in 0..3 {
        for x in 0..3 {
            for c in 0..5 {
                shifted.data_mut()[c * 9 + y * 3 + x] += 13.5; // same shift per pixel
            }
        }
    }
    let mut g = Graph::new();
    let a = g.constant(xt);
    let b = g.constant(shifted);
    let la = g.masked_cross_entropy(a, &entries).unwrap();
    let lb = g.masked_cross_entropy(b, &entries).unwrap();
    assert!((g.value(la).item() - g.value(lb).item()).abs() <= 1e-6);
}

#[test]
fn masked_cross_entropy_rejects_empty_mask() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(matches!(
        g.masked_cross_entropy(x, &[]),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn gradcheck_half_squared_distance() {
    let mut rng = StdRng::seed_from_u64(32);
    let pred = rt(&[2, 3], &mut rng);
    let target = rt(&[2, 3], &mut rng);
    let report = gradcheck(
        |g, vars| g.half_squared_distance(vars[0], target.clone()),
        &[pred.clone()],
        FD_EPS,
        1e-8,
    )
    .unwrap();
    assert!(report.passed(), "{report}");

    // Single-sample gradient is exactly pred − target.
    let mut g = Graph::new();
    let p1 = Tensor::from_vec(&[1, 3], pred.data()[..3].to_vec()).unwrap();
    let t1 = Tensor::from_vec(&[1, 3], target.data()[..3].to_vec()).unwrap();
    let pv = g.leaf(p1.clone());
    let loss = g.half_squared_distance(pv, t1.clone()).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(pv).unwrap();
    for i in 0..3 {
        assert!((grad.data()[i] - (p1.data()[i] - t1.data()[i])).abs() <= 1e-12);
    }
}

#[test]
fn gradcheck_weighted_sse() {
    let mut rng = StdRng::seed_from_u64(33);
    let pred = rt(&[2, 4], &mut rng);
    let target = rt(&[2, 4], &mut rng);
    let weights = Tensor::from_vec(
        &[2, 4],
        vec![0.23, 0.77, 0.23, 0.77, 0.77, 0.23, 0.77, 0.23],
    )
    .unwrap();
    let report = gradcheck(
        |g, vars| g.weighted_sse(vars[0], target.clone(), weights.clone()),
        &[pred],
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn frozen_params_receive_no_gradient_and_prune_backward() {
    let mut rng = StdRng::seed_from_u64(34);
    let wt = rt(&[2, 2, 3, 3], &mut rng);
    let params = vec![
        Parameter::frozen("stem.w", wt.clone()),
        Parameter::new("head.w", rt(&[2, 2, 1, 1], &mut rng)),
    ];
    let mut store = params;
    let xt = rt(&[1, 2, 5, 5], &mut rng);
    let red = rt(&[1, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(xt);
    let w0 = g.param(0, &store);
    let w1 = g.param(1, &store);
    let mid = g.conv2d(x, w0, None, 1, 0).unwrap();
    let out = g.conv2d(mid, w1, None, 1, 0).unwrap();
    let loss = g.weighted_sum(out, red).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut store);
    assert!(store[0].grad.data().iter().all(|v| *v == 0.0));
    assert!(store[1].grad.data().iter().any(|v| *v != 0.0));
    assert!(g.grad(w0).is_none());
}

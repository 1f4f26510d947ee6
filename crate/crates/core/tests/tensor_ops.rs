use fhseg::tensor::{BnMode, Graph, RunningStats, Tensor, UpsampleMethod};
use fhseg::Error;
use proptest::prelude::*;

/// Direct sliding-window cross-correlation, used as an independent oracle.
fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
    let [b, cin, h, w] = x.dims4("oracle").unwrap();
    let [cout, _, ks, _] = k.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.data()[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((co * cin + ci) * ks + ky) * ks + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new([b, cout, oh, ow], out).unwrap()
}

fn pseudo(n: usize, seed: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([1, 1, 3, 3]));
    let k = g.constant(Tensor::ones([1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &Tensor::ones([1, 1, 3, 3]));
}

#[test]
fn conv_box_filter_counts_neighbours() {
    let mut g = Graph::new();
    let xt = Tensor::ones([1, 1, 3, 3]);
    let kt = Tensor::ones([1, 1, 3, 3]);
    let oracle = naive_conv(&xt, &kt, &[0.0], 1, 1);
    let x = g.constant(xt);
    let k = g.constant(kt);
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    let d = g.data(y);
    assert_eq!(d, oracle.data());
    assert_eq!(d[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(d[corner], 4.0);
    }
    for edge in [1, 3, 5, 7] {
        assert_eq!(d[edge], 6.0);
    }
}

#[test]
fn conv_shape_arithmetic() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, 3, 8, 8]));
    let k = g.constant(Tensor::zeros([16, 3, 3, 3]));
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.shape(y), [2, 16, 8, 8]);
}

#[test]
fn conv_matches_brute_force_with_stride() {
    for (stride, pad, k, h) in [(1, 1, 3, 6), (2, 1, 3, 7), (2, 0, 3, 5), (1, 2, 5, 4), (1, 0, 1, 3)] {
        let xt = Tensor::new([2, 3, h, h + 2], pseudo(2 * 3 * h * (h + 2), 0.7)).unwrap();
        let kt = Tensor::new([4, 3, k, k], pseudo(4 * 3 * k * k, 1.3)).unwrap();
        let bias = pseudo(4, 2.1);
        let oracle = naive_conv(&xt, &kt, &bias, stride, pad);
        let mut g = Graph::new();
        let (x, kv, bv) = (g.constant(xt), g.constant(kt), g.constant(Tensor::new([4], bias).unwrap()));
        let y = g.conv2d(x, kv, Some(bv), stride, pad).unwrap();
        assert_eq!(g.shape(y), oracle.shape());
        for (a, b) in g.data(y).iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let wrong_cin = g.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, wrong_cin, None, 1, 1), Err(Error::Dimension { .. })));
    let k = g.constant(Tensor::zeros([1, 2, 3, 3]));
    // (4 - 3) / 2 is not exact
    assert!(matches!(g.conv2d(x, k, None, 2, 0), Err(Error::Config(_))));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones([2]));
    let beta = g.constant(Tensor::zeros([2]));
    let constant = g.constant(Tensor::full([2, 2, 2, 2], 3.5));
    let (y, _) = g.batch_norm(constant, gamma, beta, 1e-5, BnMode::Train).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
    let gamma1 = g.constant(Tensor::ones([1]));
    let beta1 = g.constant(Tensor::zeros([1]));
    let (y, stats) = g.batch_norm(x, gamma1, beta1, 1e-14, BnMode::Train).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-10);
    assert!((g.data(y)[1] - 1.0).abs() < 1e-10);
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0]);
    // unbiased: ((1-2)^2 + (3-2)^2) / 1
    assert_eq!(stats.var, vec![2.0]);

    let zero_gamma = g.constant(Tensor::zeros([2]));
    let five = g.constant(Tensor::full([2], 5.0));
    let rand = g.constant(Tensor::new([2, 2, 1, 2], pseudo(8, 0.9)).unwrap());
    let (y, _) = g.batch_norm(rand, zero_gamma, five, 1e-5, BnMode::Train).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 5.0));

    assert!(matches!(
        g.batch_norm(rand, zero_gamma, five, 0.0, BnMode::Train),
        Err(Error::Config(_))
    ));
    let single = g.constant(Tensor::ones([1, 1, 1, 1]));
    assert!(g.batch_norm(single, gamma1, beta1, 1e-5, BnMode::Train).is_err());
}

#[test]
fn batch_norm_running_stats_by_momentum() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::ones([1]));
    let beta = g.constant(Tensor::zeros([1]));
    let (_, stats) = g.batch_norm(x, gamma, beta, 1e-5, BnMode::Train).unwrap();
    let mut running = RunningStats::new(1);
    running.absorb(&stats.unwrap(), 0.1);
    assert!((running.mean[0] - 0.2).abs() < 1e-15);
    assert!((running.var[0] - (0.9 + 0.2)).abs() < 1e-15);

    // eval mode normalizes with the running statistics
    let (y, none) = g.batch_norm(x, gamma, beta, 1e-5, running.mode()).unwrap();
    assert!(none.is_none());
    let expect = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
    assert!((g.data(y)[0] - expect).abs() < 1e-12);
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([4], vec![0.0, -2.0, 3.0, 3f64.ln()]).unwrap());
    let s = g.sigmoid(x);
    let r = g.relu(x);
    assert_eq!(g.data(s)[0], 0.5);
    assert!((g.data(s)[3] - 0.75).abs() < 1e-15);
    assert_eq!(&g.data(r)[..3], &[0.0, 0.0, 3.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new([3], vec![-1.0, 0.0, 1.0]).unwrap());
    let r = g.relu(x);
    let l = g.sum(r);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full([1, 2, 3, 3], 7.0));
    let up = g.upsample(c, 2, UpsampleMethod::Bilinear).unwrap();
    assert_eq!(g.shape(up), [1, 2, 6, 6]);
    assert!(g.data(up).iter().all(|&v| (v - 7.0).abs() < 1e-15));

    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let near = g.upsample(x, 2, UpsampleMethod::Nearest).unwrap();
    assert_eq!(
        g.data(near),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    for method in [UpsampleMethod::Bilinear, UpsampleMethod::Nearest] {
        let same = g.upsample(x, 1, method).unwrap();
        assert_eq!(g.data(same), g.data(x));
    }
}

#[test]
fn bilinear_matches_half_pixel_formula() {
    // Oracle: sample position (o + 0.5) / f - 0.5, clamped at the borders.
    let (h, w, f) = (3, 4, 2);
    let src = pseudo(h * w, 0.37);
    let sample = |y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
        let v = |r: usize, c: usize| src[r * w + c];
        (1.0 - ly) * ((1.0 - lx) * v(y0, x0) + lx * v(y0, x1)) + ly * ((1.0 - lx) * v(y1, x0) + lx * v(y1, x1))
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, h, w], src.clone()).unwrap());
    let up = g.upsample(x, f, UpsampleMethod::Bilinear).unwrap();
    for oy in 0..h * f {
        for ox in 0..w * f {
            let want = sample((oy as f64 + 0.5) / f as f64 - 0.5, (ox as f64 + 0.5) / f as f64 - 0.5);
            assert!((g.data(up)[oy * w * f + ox] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn downsample_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.downsample(x, 2).unwrap();
    assert_eq!(g.data(y), &[4.0]);

    let ramp = g.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
    let y = g.downsample(ramp, 2).unwrap();
    assert_eq!(g.data(y), &[5.0, 7.0, 13.0, 15.0]);

    let bad = g.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(matches!(g.downsample(bad, 2), Err(Error::Dimension { .. })));
}

#[test]
fn downsample_ties_route_to_first_maximum() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full([1, 1, 2, 2], 1.0));
    let y = g.downsample(x, 2).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn concat_examples_and_order() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_fn([1, 2, 4, 4], |i| i as f64));
    let b = g.constant(Tensor::from_fn([1, 3, 4, 4], |i| -(i as f64)));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.shape(c), [1, 5, 4, 4]);
    assert_eq!(&g.data(c)[..16], &g.data(a)[..16]);
    let single = g.concat(&[a]).unwrap();
    assert_eq!(g.data(single), g.data(a));
    let wrong = g.constant(Tensor::zeros([1, 1, 2, 2]));
    assert!(matches!(g.concat(&[a, wrong]), Err(Error::Dimension { .. })));
}

#[test]
fn mul_examples() {
    let mut g = Graph::new();
    let a = g.param(Tensor::new([2], vec![2.0, 3.0]).unwrap());
    let b = g.constant(Tensor::new([2], vec![4.0, 5.0]).unwrap());
    let y = g.mul(a, b).unwrap();
    assert_eq!(g.data(y), &[8.0, 15.0]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[4.0, 5.0]);

    let mut g = Graph::new();
    let at = Tensor::new([1, 2, 2, 2], pseudo(8, 0.4)).unwrap();
    let a = g.param(at.clone());
    let ones = g.constant(Tensor::ones([1, 2, 2, 2]));
    let zeros = g.constant(Tensor::zeros([1, 1, 2, 2]));
    let same = g.mul(a, ones).unwrap();
    assert_eq!(g.value(same), &at);
    let annihilated = g.mul(a, zeros).unwrap();
    assert!(g.data(annihilated).iter().all(|&v| v == 0.0));
    let l = g.sum(annihilated);
    g.backward(l).unwrap();
    assert!(g.grad(a).unwrap().iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros([1, 3, 2, 2]));
    assert!(matches!(g.mul(a, bad), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let xt = Tensor::new([3], vec![1.5, -2.0, 0.25]).unwrap();
    let x = g.param(xt.clone());
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0, 0.5]);
    assert!(g.value(x).grad().is_some());

    let not_scalar = g.param(Tensor::ones([2]));
    assert!(matches!(g.backward(not_scalar), Err(Error::Contract(_))));
}

#[test]
fn gated_product_rule_by_hand() {
    // out = beta(y) * f(y) with beta = sigmoid(y), f = relu(y) on two elements
    let y0 = [0.7, -0.3];
    let mut g = Graph::new();
    let y = g.param(Tensor::new([2], y0.to_vec()).unwrap());
    let beta = g.sigmoid(y);
    let f = g.relu(y);
    let out = g.mul(beta, f).unwrap();
    let l = g.sum(out);
    g.backward(l).unwrap();
    for (i, &v) in y0.iter().enumerate() {
        let b = 1.0 / (1.0 + (-v).exp());
        let (fv, df) = if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) };
        let want = b * df + b * (1.0 - b) * fv;
        assert!((g.grad(y).unwrap()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn fan_out_equals_sum_of_paths() {
    let xt = Tensor::new([1, 1, 2, 2], pseudo(4, 1.1)).unwrap();
    // shared: x feeds sigmoid and relu branches
    let mut g = Graph::new();
    let x = g.param(xt.clone());
    let s = g.sigmoid(x);
    let r = g.relu(x);
    let y = g.add(s, r).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let shared = g.grad(x).unwrap().to_vec();
    assert_eq!(g.last_backward_visits(), g.len());

    // duplicated: independent leaves for each path
    let mut g = Graph::new();
    let x1 = g.param(xt.clone());
    let x2 = g.param(xt);
    let s = g.sigmoid(x1);
    let r = g.relu(x2);
    let y = g.add(s, r).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    for i in 0..4 {
        assert_eq!(shared[i], g.grad(x1).unwrap()[i] + g.grad(x2).unwrap()[i]);
    }
}

#[test]
fn forward_backward_is_bit_reproducible() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([1, 2, 4, 4], pseudo(32, 0.3)).unwrap());
        let k = g.param(Tensor::new([3, 2, 3, 3], pseudo(54, 0.8)).unwrap());
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let p = g.downsample(y, 2).unwrap();
        let u = g.upsample(p, 2, UpsampleMethod::Bilinear).unwrap();
        let l = g.cross_entropy(u, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0]).unwrap();
        g.backward(l).unwrap();
        (g.value(u).clone(), g.grad(x).unwrap().to_vec(), g.grad(k).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bit_eq(&b.0));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.2.iter().zip(&b.2).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn cross_entropy_rejects_bad_class() {
    let mut g = Graph::new();
    let z = g.param(Tensor::zeros([1, 3, 1, 2]));
    assert!(matches!(g.cross_entropy(z, &[0, 3]), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn resampling_a_constant_stays_constant(v in -5.0f64..5.0, f in 1usize..4, h in 1usize..4) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 2, h * 2, h * 2], v));
        let up = g.upsample(x, f, UpsampleMethod::Bilinear).unwrap();
        prop_assert!(g.data(up).iter().all(|&u| (u - v).abs() < 1e-12));
        let down = g.downsample(x, 2).unwrap();
        prop_assert!(g.data(down).iter().all(|&u| u == v));
    }

    #[test]
    fn concat_then_slice_is_identity(c1 in 1usize..4, c2 in 1usize..4, seed in 0.1f64..3.0) {
        let mut g = Graph::new();
        let at = Tensor::new([2, c1, 2, 3], pseudo(12 * c1, seed)).unwrap();
        let bt = Tensor::new([2, c2, 2, 3], pseudo(12 * c2, seed + 1.0)).unwrap();
        let a = g.param(at.clone());
        let b = g.param(bt.clone());
        let c = g.concat(&[a, b]).unwrap();
        let w = pseudo(12 * (c1 + c2), 0.77);
        let l = g.weighted_sum(c, &w).unwrap();
        g.backward(l).unwrap();
        let hw = 6;
        for bi in 0..2 {
            let row = &g.data(c)[bi * (c1 + c2) * hw..(bi + 1) * (c1 + c2) * hw];
            prop_assert_eq!(&row[..c1 * hw], &at.data()[bi * c1 * hw..(bi + 1) * c1 * hw]);
            prop_assert_eq!(&row[c1 * hw..], &bt.data()[bi * c2 * hw..(bi + 1) * c2 * hw]);
            let wrow = &w[bi * (c1 + c2) * hw..(bi + 1) * (c1 + c2) * hw];
            prop_assert_eq!(&g.grad(a).unwrap()[bi * c1 * hw..(bi + 1) * c1 * hw], &wrow[..c1 * hw]);
            prop_assert_eq!(&g.grad(b).unwrap()[bi * c2 * hw..(bi + 1) * c2 * hw], &wrow[c1 * hw..]);
        }
    }
}

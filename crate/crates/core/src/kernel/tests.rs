use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut Rng::new(seed))
}

/// Direct sliding-window cross-correlation, independent of im2col.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.get(&[n, ci, iy as usize, ix as usize]) * w.get(&[co, ci, i, j]);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_scaling_identity() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(t64(&[1, 1, 1, 1], &[2.0]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[2.0; 9]);
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let mut g = Graph::new();
    let x = g.constant(rand64(&[2, 3, 5, 5], 1));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(t64(&[1], &[0.75]));
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 5, 5]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));
}

#[test]
fn conv_ramp_matches_hand_values() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    assert_eq!(conv_oracle(&x, &w, 1, 0), vec![45.0, 54.0, 81.0, 90.0]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[45.0, 54.0, 81.0, 90.0]);
}

#[test]
fn conv_matches_oracle_with_stride_and_padding() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2), (3, 2, 3)] {
        let x = rand64(&[2, 3, 7, 6], 10 + stride as u64);
        let w = rand64(&[4, 3, k, k], 20 + pad as u64);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let oracle = conv_oracle(&x, &w, stride, pad);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_errors_name_the_problem() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    match g.conv2d(x, w, None, 1, 0) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("channels")),
        other => panic!("{other:?}"),
    }
    let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 0, 0), Err(Error::Argument { .. })));
    let w = g.constant(Tensor::zeros(&[1, 2, 5, 3]));
    match g.conv2d(x, w, None, 1, 0) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("height")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn conv_pointwise_identity_is_bitwise() {
    let x = Tensor::<f32>::uniform(&[2, 4, 5, 5], 3.0, &mut Rng::new(2));
    let eye = Tensor::from_fn(&[4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(eye));
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn pool_examples() {
    let x = t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mx = g.pool2d(xv, PoolKind::Max, 2, 2).unwrap();
    let av = g.pool2d(xv, PoolKind::Avg, 2, 2).unwrap();
    assert_eq!(g.value(mx).data(), &[4.0]);
    assert_eq!(g.value(av).data(), &[2.5]);
    let gm = g.global_pool(xv, PoolKind::Max).unwrap();
    let ga = g.global_pool(xv, PoolKind::Avg).unwrap();
    assert_eq!(g.value(gm).data(), &[4.0]);
    assert_eq!(g.value(ga).data(), &[2.5]);
    assert_eq!(g.shape(ga), &[1, 1, 1, 1]);

    let c = Tensor::full(&[1, 2, 4, 4], 0.3);
    let cv = g.constant(c);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let p = g.pool2d(cv, kind, 2, 1).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
    assert!(matches!(g.pool2d(xv, PoolKind::Max, 3, 1), Err(Error::Argument { .. })));
}

#[test]
fn max_pool_gradient_goes_to_first_maximum() {
    let x = t64(&[1, 1, 2, 2], &[1.0, 5.0, 5.0, 5.0]);
    for global in [false, true] {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let p = if global { g.global_pool(xv, PoolKind::Max) } else { g.pool2d(xv, PoolKind::Max, 2, 2) }.unwrap();
        let l = g.sum_all(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}

#[test]
fn global_avg_gradient_is_uniform() {
    let mut g = Graph::new();
    let xv = g.param(rand64(&[1, 2, 3, 2], 4));
    let p = g.global_pool(xv, PoolKind::Avg).unwrap();
    let l = g.sum_all(p);
    g.backward(l).unwrap();
    assert!(g.grad(xv).unwrap().iter().all(|&d| (d - 1.0 / 6.0).abs() < 1e-15));
}

/// Tent-weight formulation of half-pixel bilinear sampling.
fn bilinear_oracle(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |d: usize, n: usize, o: usize| -> f64 {
        let s = (d as f64 + 0.5) * n as f64 / o as f64 - 0.5;
        s.clamp(0.0, (n - 1) as f64)
    };
    let mut out = Vec::new();
    for oy in 0..oh {
        let sy = coord(oy, h, oh);
        for ox in 0..ow {
            let sx = coord(ox, w, ow);
            let mut v = 0.0;
            for iy in 0..h {
                for ix in 0..w {
                    let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                    let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                    v += wy * wx * x[iy * w + ix];
                }
            }
            out.push(v);
        }
    }
    out
}

#[test]
fn bilinear_upsample_matches_oracle() {
    let src = [0.0, 1.0, 2.0, 3.0];
    let expected = [0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0];
    let oracle = bilinear_oracle(&src, 2, 2, 4, 4);
    for (a, b) in oracle.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    let mut g = Graph::new();
    let xv = g.constant(t64(&[1, 1, 2, 2], &src));
    let y = g.interpolate_bilinear(xv, 4, 4).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn bilinear_downsample_and_odd_sizes_match_oracle() {
    for &(h, w, oh, ow) in &[(16, 16, 8, 8), (5, 7, 3, 4), (3, 3, 7, 5), (4, 4, 1, 1)] {
        let x = rand64(&[1, 1, h, w], (h * 100 + ow) as u64);
        let oracle = bilinear_oracle(x.data(), h, w, oh, ow);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.interpolate_bilinear(xv, oh, ow).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{h}x{w}->{oh}x{ow}");
        }
    }
}

#[test]
fn bilinear_identity_and_constant() {
    let x = Tensor::<f32>::uniform(&[2, 3, 5, 4], 1.0, &mut Rng::new(8));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.interpolate_bilinear(xv, 5, 4).unwrap();
    assert_eq!(g.value(y), &x);
    let c = g.constant(Tensor::full(&[1, 1, 3, 3], 0.625f32));
    let y = g.interpolate_bilinear(c, 7, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.625));
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[1, 2], &[1.0, 1.0]));
    let w = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t64(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 7.0]);

    let xs = rand64(&[3, 4], 1);
    let xv = g.constant(xs.clone());
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zb = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(xv, eye, Some(zb)).unwrap();
    assert_eq!(g.value(y), &xs);

    let zw = g.constant(Tensor::zeros(&[2, 4]));
    let bb = g.constant(t64(&[2], &[0.5, -1.5]));
    let y = g.linear(xv, zw, Some(bb)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.linear(xv, bad, None), Err(Error::Argument { .. })));
}

#[test]
fn eltwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0f64));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);
    let neg = g.constant(t64(&[2], &[-1.0, -3.0]));
    let r = g.relu(neg);
    assert_eq!(g.value(r).data(), &[0.0, 0.0]);
    let l = g.leaky_relu(neg, 0.01);
    assert!((g.value(l).data()[0] + 0.01).abs() < 1e-15);

    let gate = g.constant(Tensor::full(&[2, 3, 1, 1], 0.5));
    let ones = g.constant(Tensor::ones(&[2, 3, 2, 2]));
    let m = g.mul(ones, gate).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == 0.5));

    let bad = g.constant(Tensor::ones(&[2, 3, 2, 1]));
    assert!(matches!(g.mul(ones, bad), Err(Error::Argument { .. })));
}

#[test]
fn sigmoid_stays_inside_unit_interval() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[4], &[-1000.0, -40.0, 40.0, 1000.0]));
    let s = g.sigmoid(x);
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2], vec![-200.0, 30.0]).unwrap());
    let s = g.sigmoid(x);
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn concat_shapes_and_gradients() {
    let a = rand64(&[2, 3, 2, 2], 1);
    let b = rand64(&[2, 5, 2, 2], 2);
    let mut g = Graph::new();
    let (av, bv) = (g.param(a.clone()), g.param(b.clone()));
    let single = g.concat(&[av], 1).unwrap();
    assert_eq!(g.value(single), &a);
    let c = g.concat(&[av, bv], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 8, 2, 2]);
    let w = g.constant(rand64(&[2, 8, 2, 2], 3));
    let prod = g.mul(c, w).unwrap();
    let l = g.sum_all(prod);
    g.backward(l).unwrap();
    let wv = g.value(w).clone();
    // each input's gradient is its slice of the weight tensor
    for n in 0..2 {
        for ch in 0..8 {
            for p in 0..4 {
                let expected = wv.data()[(n * 8 + ch) * 4 + p];
                let got = if ch < 3 {
                    g.grad(av).unwrap()[(n * 3 + ch) * 4 + p]
                } else {
                    g.grad(bv).unwrap()[(n * 5 + ch - 3) * 4 + p]
                };
                assert_eq!(got, expected);
            }
        }
    }
    let bad = g.constant(Tensor::zeros(&[2, 3, 3, 2]));
    assert!(matches!(g.concat(&[av, bad], 1), Err(Error::Argument { .. })));
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let ones = g.param(Tensor::ones(&[2, 3]));
    let s = g.sum_all(ones);
    assert_eq!(g.value(s).item(), 6.0);
    let v = g.param(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let m = g.mean_all(v);
    assert_eq!(g.value(m).item(), 2.5);
    let rows = g.reduce(ones, ReduceKind::Sum, Some(&[1])).unwrap();
    assert_eq!(g.value(rows).data(), &[3.0, 3.0]);
    assert!(matches!(g.reduce(ones, ReduceKind::Sum, Some(&[2])), Err(Error::Argument { .. })));
    g.backward(m).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[0.25; 4]);
}

#[test]
fn backward_basic_identities() {
    let x = rand64(&[3, 2], 9);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let l = g.sum_all(xv);
    g.backward(l).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let l = g.sum_all(sq);
    g.backward(l).unwrap();
    for (d, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*d, 2.0 * v);
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let xv = g.param(rand64(&[3], 1));
    assert!(matches!(g.backward(xv), Err(Error::Argument { .. })));
    let l = g.sum_all(xv);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::State(_))));
    g.reset_grads();
    g.backward(l).unwrap();
}

#[test]
fn softmax_ce_gradient_is_softmax_minus_onehot() {
    let logits = t64(&[1, 2], &[0.3, -1.1]);
    let mut g = Graph::new();
    let lv = g.param(logits.clone());
    let ce = g.softmax_cross_entropy(lv, &[1]).unwrap();
    let l = g.sum_all(ce);
    g.backward(l).unwrap();
    let (a, b) = (0.3f64.exp(), (-1.1f64).exp());
    let p = [a / (a + b), b / (a + b)];
    let analytic = [p[0], p[1] - 1.0];
    for (d, e) in g.grad(lv).unwrap().iter().zip(&analytic) {
        assert!((d - e).abs() < 1e-15);
    }
    // the analytic identity itself is confirmed by central differences
    let f = |z0: f64, z1: f64| -> f64 { -(z1.exp() / (z0.exp() + z1.exp())).ln() };
    let eps = 1e-6;
    let fd0 = (f(0.3 + eps, -1.1) - f(0.3 - eps, -1.1)) / (2.0 * eps);
    let fd1 = (f(0.3, -1.1 + eps) - f(0.3, -1.1 - eps)) / (2.0 * eps);
    assert!((fd0 - analytic[0]).abs() < 1e-8);
    assert!((fd1 - analytic[1]).abs() < 1e-8);
}

fn check_op(
    params: Vec<Tensor<f64>>,
    build: impl FnMut(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
) -> GradCheckReport {
    let report = grad_check(&params, build, GradCheckOptions::default()).unwrap();
    assert!(report.checked > 0);
    report
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let w = g.constant(rand64(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let tol = 1e-6;
    let r = check_op(vec![rand64(&[2, 3, 5, 5], 1), rand64(&[4, 3, 3, 3], 2), rand64(&[4], 3)], |g, p| {
        let y = g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?;
        weighted_sum(g, y, 4)
    });
    assert!(r.max_relative_error < tol, "conv {r:?}");

    let r = check_op(vec![rand64(&[2, 3, 4, 4], 5), rand64(&[2, 3, 1, 1], 6)], |g, p| {
        let y = g.conv2d(p[0], p[1], None, 1, 0);
        y.and_then(|y| weighted_sum(g, y, 7))
    });
    assert!(r.max_relative_error < tol, "pointwise conv {r:?}");

    for kind in [PoolKind::Max, PoolKind::Avg] {
        let r = check_op(vec![rand64(&[1, 2, 5, 5], 8)], |g, p| {
            let y = g.pool2d(p[0], kind, 2, 2)?;
            weighted_sum(g, y, 9)
        });
        assert!(r.max_relative_error < tol, "pool {kind:?} {r:?}");
        let r = check_op(vec![rand64(&[2, 3, 3, 3], 10)], |g, p| {
            let y = g.global_pool(p[0], kind)?;
            weighted_sum(g, y, 11)
        });
        assert!(r.max_relative_error < tol, "global pool {kind:?} {r:?}");
    }

    let r = check_op(vec![rand64(&[1, 2, 3, 5], 12)], |g, p| {
        let y = g.interpolate_bilinear(p[0], 7, 4)?;
        weighted_sum(g, y, 13)
    });
    assert!(r.max_relative_error < tol, "interp {r:?}");

    let r = check_op(vec![rand64(&[3, 4], 14), rand64(&[2, 4], 15), rand64(&[2], 16)], |g, p| {
        let y = g.linear(p[0], p[1], Some(p[2]))?;
        weighted_sum(g, y, 17)
    });
    assert!(r.max_relative_error < tol, "linear {r:?}");

    for (shape_b, seed) in [(vec![2, 3, 2, 2], 18u64), (vec![2, 3, 1, 1], 19), (vec![2, 1, 2, 2], 20)] {
        let r = check_op(vec![rand64(&[2, 3, 2, 2], seed), rand64(&shape_b, seed + 100)], |g, p| {
            let m = g.mul(p[0], p[1])?;
            let a = g.add(m, p[1])?;
            let s = g.sub(a, p[1])?;
            let s = g.sub(s, p[1])?;
            weighted_sum(g, s, 21)
        });
        assert!(r.max_relative_error < tol, "binary {shape_b:?} {r:?}");
    }

    let r = check_op(vec![rand64(&[3, 4], 22)], |g, p| {
        let a = g.relu(p[0]);
        let b = g.leaky_relu(p[0], 0.01);
        let c = g.sigmoid(p[0]);
        let d = g.abs(p[0]);
        let e = g.scale(p[0], -1.7);
        let ab = g.add(a, b)?;
        let cd = g.mul(c, d)?;
        let s = g.add(ab, cd)?;
        let s = g.add(s, e)?;
        weighted_sum(g, s, 23)
    });
    assert!(r.max_relative_error < tol, "unary {r:?}");

    let r = check_op(vec![rand64(&[2, 3, 2, 2], 24), rand64(&[3], 25), rand64(&[3], 26)], |g, p| {
        let y = g.channel_affine(p[0], p[1], p[2])?;
        weighted_sum(g, y, 27)
    });
    assert!(r.max_relative_error < tol, "channel affine {r:?}");

    let r = check_op(vec![rand64(&[2, 2, 3], 28), rand64(&[2, 1, 3], 29)], |g, p| {
        let c = g.concat(&[p[0], p[1], p[0]], 1)?;
        let d = g.diff(c, 2)?;
        let r = g.reshape(d, &[2, 10])?;
        let m = g.reduce(r, ReduceKind::Mean, Some(&[0]))?;
        weighted_sum(g, m, 30)
    });
    assert!(r.max_relative_error < tol, "concat/diff/reshape/reduce {r:?}");

    let r = check_op(vec![rand64(&[3, 5], 31)], |g, p| {
        let ce = g.softmax_cross_entropy(p[0], &[0, 4, 2])?;
        Ok(g.mean_all(ce))
    });
    assert!(r.max_relative_error < tol, "cross entropy {r:?}");
}

#[test]
fn quadratic_gradcheck_is_exact() {
    let r = check_op(vec![rand64(&[5], 40)], |g, p| {
        let sq = g.mul(p[0], p[0])?;
        let s = g.scale(sq, 3.0);
        Ok(g.sum_all(s))
    });
    assert!(r.max_relative_error < 1e-9, "{r:?}");
}

#[test]
fn gradcheck_flags_relu_kink() {
    let params = vec![t64(&[3], &[0.0, 0.5, -0.5])];
    let r = grad_check(
        &params,
        |g, p| {
            let y = g.relu(p[0]);
            Ok(g.sum_all(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(r.flagged, 1);
    assert_eq!(r.checked, 2);
    assert!(r.max_relative_error < 1e-9);
}

#[test]
fn gradcheck_rejects_f32_and_bad_eps() {
    let params = vec![Tensor::<f32>::ones(&[2])];
    let err = grad_check(&params, |g, p| Ok(g.sum_all(p[0])), GradCheckOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Precision(_)));
    let params = vec![Tensor::<f64>::ones(&[2])];
    let opts = GradCheckOptions { eps: 1e-2, ..Default::default() };
    assert!(matches!(grad_check(&params, |g, p| Ok(g.sum_all(p[0])), opts), Err(Error::Argument { .. })));
}

#[test]
fn gradients_are_bitwise_reproducible() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::uniform(&[2, 3, 6, 6], 1.0, &mut Rng::new(5)));
        let w = g.param(Tensor::uniform(&[4, 3, 3, 3], 0.5, &mut Rng::new(6)));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let r = g.relu(y);
        let p = g.global_pool(r, PoolKind::Avg).unwrap();
        let l = g.sum_all(p);
        g.backward(l).unwrap();
        (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_size_resize_is_identity(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = Tensor::<f64>::uniform(&[1, 2, h, w], 10.0, &mut Rng::new(seed));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.interpolate_bilinear(xv, h, w).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_output_extent_formula(h in 3usize..12, w in 3usize..12, k in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, h, w]));
        let wt = g.constant(Tensor::ones(&[2, 1, k, k]));
        let y = g.conv2d(x, wt, None, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
    }

    #[test]
    fn adamw_zero_gradient_fixed_point(vals in proptest::collection::vec(-10.0f64..10.0, 1..8), lr in 0.0f64..1.0) {
        let mut p = vec![Tensor::new(&[vals.len()], vals.clone()).unwrap()];
        let mut st = AdamWState::new(&p);
        let zeros = vec![0.0; vals.len()];
        let cfg = AdamWConfig { lr, weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &[&zeros], &[true], &mut st, &cfg).unwrap();
        prop_assert_eq!(p[0].data(), &vals[..]);
    }
}

use proptest::prelude::*;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;
use crate::rng::{normal_tensor, seeded};

/// Six-nested-loop reference cross-correlation.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for cl in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + cl;
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[b, ci, ih as usize, iw as usize]) * k.at(&[co, cl, i, j]);
                            }
                        }
                    }
                    let idx = ((b * cout + co) * ho + oh) * wo + ow;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(x: &Tensor<f64>, k: &Tensor<f64>, opts: ConvOpts) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, None, opts).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3]);
    let k = Tensor::<f64>::ones([1, 1, 3, 3]);
    let y = conv_value(&x, &k, ConvOpts::default());
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_identity_pointwise_kernel() {
    let mut rng = seeded(3);
    let x: Tensor<f64> = normal_tensor(&mut rng, &[2, 1, 5, 4], 1.0);
    let y = conv_value(&x, &Tensor::ones([1, 1, 1, 1]), ConvOpts::default());
    assert_eq!(y, x);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = seeded(11);
    let x: Tensor<f64> = normal_tensor(&mut rng, &[1, 2, 4, 4], 1.0);
    let k: Tensor<f64> = normal_tensor(&mut rng, &[3, 2, 3, 3], 1.0);
    let opts = ConvOpts { stride: 1, padding: 1, groups: 1 };
    let fast = conv_value(&x, &k, opts);
    assert!(fast.max_abs_diff(&naive_conv(&x, &k, 1, 1, 1)) < 1e-5);

    for (stride, pad, groups, cin, cout, l) in [(2, 1, 1, 4, 6, 3), (2, 0, 2, 4, 6, 3), (1, 2, 4, 4, 4, 5), (2, 1, 4, 4, 8, 3), (1, 0, 1, 5, 3, 1)] {
        let x: Tensor<f64> = normal_tensor(&mut rng, &[2, cin, 7, 6], 1.0);
        let k: Tensor<f64> = normal_tensor(&mut rng, &[cout, cin / groups, l, l], 1.0);
        let fast = conv_value(&x, &k, ConvOpts { stride, padding: pad, groups });
        let slow = naive_conv(&x, &k, stride, pad, groups);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-10, "stride {stride} pad {pad} groups {groups}");
    }
}

#[test]
fn depthwise_equals_per_channel_convs_exactly() {
    let mut rng = seeded(5);
    let c = 5;
    let x: Tensor<f32> = normal_tensor(&mut rng, &[2, c, 6, 6], 1.0);
    let k: Tensor<f32> = normal_tensor(&mut rng, &[c, 1, 3, 3], 1.0);
    let opts = ConvOpts { stride: 2, padding: 1, groups: c };
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, None, opts).unwrap();
    let full = g.value(y).clone();
    for ch in 0..c {
        let xc = g.narrow(xv, 1, ch, 1).unwrap();
        let kc = g.narrow(kv, 0, ch, 1).unwrap();
        let yc = g.conv2d(xc, kc, None, ConvOpts { groups: 1, ..opts }).unwrap();
        let part = g.narrow(y, 1, ch, 1).unwrap();
        assert_eq!(g.value(yc), g.value(part));
    }
    assert_eq!(full.shape(), &[2, c, 3, 3]);
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
    let k = g.constant(Tensor::zeros([2, 1, 3, 3]));
    assert!(matches!(
        g.conv2d(x, k, None, ConvOpts { groups: 2, ..Default::default() }),
        Err(Error::Config(_))
    ));
    let k2 = g.constant(Tensor::zeros([2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, k2, None, ConvOpts::default()), Err(Error::Dimension(_))));
    let big = g.constant(Tensor::zeros([1, 3, 5, 5]));
    assert!(matches!(g.conv2d(x, big, None, ConvOpts::default()), Err(Error::Dimension(_))));
}

#[test]
fn activation_values() {
    let h = |v: f64| Activation::HSwish.apply(v);
    assert_eq!(h(0.0), 0.0);
    assert_eq!(h(-3.0), 0.0);
    assert_eq!(h(3.0), 3.0);
    assert!((h(1.0) - 0.666667).abs() < 1e-6);
    assert_eq!(Activation::Relu.apply(-2.0f64), 0.0);
    assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
    assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([1, 1, 3, 4], 2.5));
    let s = g.softmax(c, &[2, 3]).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));

    let x = g.constant(Tensor::from_f64([2], &[0.0, 3f64.ln()]).unwrap());
    let s = g.softmax(x, &[0]).unwrap();
    assert!((g.value(s).data()[0] - 0.25).abs() < 1e-12);
    assert!((g.value(s).data()[1] - 0.75).abs() < 1e-12);

    assert!(matches!(g.softmax(x, &[]), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn softmax_sums_to_one(values in proptest::collection::vec(-50.0f32..50.0, 24)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([2, 3, 4], values).unwrap());
        for axes in [vec![2], vec![1, 2], vec![0, 2]] {
            let s = g.softmax(x, &axes).unwrap();
            let sums = g.sum(s, &axes).unwrap();
            for &v in g.value(sums).data() {
                prop_assert!((v - 1.0).abs() <= 1e-6, "sum {v}");
            }
            prop_assert!(g.value(s).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_ops_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = seeded(seed);
            let mut g = Graph::<f32>::new();
            let x = g.constant(normal_tensor(&mut rng, &[2, 4, 6, 6], 1.0));
            let k = g.constant(normal_tensor(&mut rng, &[4, 1, 3, 3], 1.0));
            let y = g.conv2d(x, k, None, ConvOpts { stride: 1, padding: 1, groups: 4 }).unwrap();
            let y = g.h_swish(y).unwrap();
            let s = g.softmax(y, &[2, 3]).unwrap();
            let n = g.layer_norm(s, 3, 1e-5).unwrap();
            g.value(n).clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn reduce_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([4], &[-1.0, 1.0, -1.0, 1.0]).unwrap());
    let m = g.abs_mean(x, &[0]).unwrap();
    assert_eq!(g.item(m), 1.0);

    let ones = g.constant(Tensor::ones([2, 2]));
    let s = g.sum(ones, &[0, 1]).unwrap();
    assert_eq!(g.item(s), 4.0);

    // Channel-wise abs mean of a C×H×W map with channel 1 constant 2.0.
    let mut f = Tensor::<f64>::from_fn([1, 3, 2, 2], |i| i as f64 - 5.0);
    for j in 4..8 {
        f.data_mut()[j] = 2.0;
    }
    let fv = g.constant(f);
    let gc = g.abs_mean(fv, &[2, 3]).unwrap();
    assert_eq!(g.shape(gc), &[1, 3, 1, 1]);
    assert_eq!(g.value(gc).data()[1], 2.0);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([2, 5], 7.0));
    let n = g.layer_norm(c, 1, 1e-5).unwrap();
    assert!(g.value(n).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::from_f64([1, 2], &[1.0, 3.0]).unwrap());
    let n = g.layer_norm(x, 1, 1e-5).unwrap();
    assert!((g.value(n).data()[0] + 1.0).abs() < 1e-4);
    assert!((g.value(n).data()[1] - 1.0).abs() < 1e-4);

    let mut rng = seeded(9);
    let r = g.constant(normal_tensor(&mut rng, &[3, 4, 5], 3.0));
    let n = g.layer_norm(r, 2, 1e-5).unwrap();
    for chunk in g.value(n).data().chunks(20) {
        let mean: f64 = chunk.iter().sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-5);
    }
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::<f64>::new();
    let mut t = Tensor::full([1, 2, 2, 2], 5.0);
    t.data_mut()[4..8].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let x = g.constant(t);
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[5.0, 2.5]);
    // Broadcast back and pool again: unchanged.
    let zeros = g.constant(Tensor::zeros([1, 2, 2, 2]));
    let b = g.add(zeros, p).unwrap();
    let p2 = g.global_avg_pool(b).unwrap();
    assert_eq!(g.value(p2), g.value(p));
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::from_f64([2, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros([2]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);

    let eye = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.linear(x, eye, Some(b)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let zw = g.constant(Tensor::zeros([3, 2]));
    let bias = g.constant(Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap());
    let y = g.linear(x, zw, Some(bias)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);

    let bad = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(g.linear(x, bad, None), Err(Error::Dimension(_))));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
    let z = g.constant(Tensor::zeros([2]));
    let s = g.add(a, z).unwrap();
    assert_eq!(g.value(s), g.value(a));
    let p = g.mul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 8.0]);
    let d = g.sub(a, a).unwrap();
    assert_eq!(g.value(d).data(), &[0.0, 0.0]);
    let c = g.constant(Tensor::zeros([3]));
    assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full([2], f32::MAX));
    assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 1.0]).unwrap());
    let s = g.sum_all(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let other = g.param(Tensor::from_f64([2], &[5.0, 5.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum_all(sq).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    assert!(g.grad(other).is_none());
    g.zero_grads();
    assert!(g.grad(x).is_none());

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let l = g.sum_all(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    assert!(g.grad(d).is_none());
}

/// Draws N(0,1) values, nudging any that fall within `margin` of a kink.
fn smooth_normal(seed: u64, shape: &[usize], kinks: &[f64]) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let mut t: Tensor<f64> = normal_tensor(&mut rng, shape, 1.0);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < 0.05 {
                *v = k + 0.05f64.copysign(*v - k);
            }
        }
    }
    t
}

#[test]
fn gradients_match_finite_differences() {
    let weight = |seed| smooth_normal(seed + 1000, &[2, 3, 4, 4], &[]);
    for seed in 0..3u64 {
        let x = smooth_normal(seed, &[2, 3, 4, 4], &[0.0, -3.0, 3.0]);
        let w = weight(seed);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>>)> = vec![
            ("h_swish", Box::new(|g, v| {
                let x = g.scale(v[0], 2.0)?;
                let y = g.h_swish(x)?;
                let y = g.mul(y, v[1])?;
                g.sum_all(y)
            })),
            ("softmax", Box::new(|g, v| {
                let y = g.softmax(v[0], &[2, 3])?;
                let y = g.mul(y, v[1])?;
                g.sum_all(y)
            })),
            ("softmax_scaled", Box::new(|g, v| {
                let y = g.softmax_scaled(v[0], &[1], 3.0)?;
                let y = g.mul(y, v[1])?;
                g.sum_all(y)
            })),
            ("abs_mean", Box::new(|g, v| {
                let y = g.abs_mean(v[0], &[1])?;
                let y = g.mul(y, v[1])?;
                g.sum_all(y)
            })),
            ("layer_norm", Box::new(|g, v| {
                let y = g.layer_norm(v[0], 3, 1e-5)?;
                let y = g.mul(y, v[1])?;
                g.sum_all(y)
            })),
        ];
        for (name, f) in &cases {
            let r = check_gradients(&[x.clone(), w.clone()], 1e-3, f).unwrap();
            assert!(r.passes(1e-3), "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    // (stride, padding, groups, cin, cout, kernel); the last is the matrix-product path
    for (i, (stride, padding, groups, cin, cout, l)) in [(1, 1, 1, 3, 4, 3), (2, 1, 2, 4, 4, 3), (1, 1, 4, 4, 4, 3), (1, 0, 1, 3, 5, 1)]
        .into_iter()
        .enumerate()
    {
        let seed = 40 + i as u64;
        let x = smooth_normal(seed, &[2, cin, 5, 5], &[]);
        let k = smooth_normal(seed + 100, &[cout, cin / groups, l, l], &[]);
        let b = smooth_normal(seed + 200, &[cout], &[]);
        let opts = ConvOpts { stride, padding, groups };
        let r = check_gradients(&[x, k, b], 1e-4, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), opts)?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        })
        .unwrap();
        assert!(r.passes(1e-6), "{opts:?}: {r:?}");
    }
}

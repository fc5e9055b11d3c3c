//! Convolutions against direct-summation loops.

use gaitforge_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Quintuple-loop reference for `[N, Cin, T, H, W] * [Cout, Cin, kt, kh, kw]`.
fn direct_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, stride: [usize; 3], pad: [usize; 3]) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let to = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let ho = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let wo = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; n * cout * to * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for z in 0..to {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for a in 0..kt {
                                for c in 0..kh {
                                    for d in 0..kw {
                                        let ti = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let hi = (y * stride[1] + c) as isize - pad[1] as isize;
                                        let wi = (xx * stride[2] + d) as isize - pad[2] as isize;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= t || hi >= h || wi >= wd {
                                            continue;
                                        }
                                        acc += x.at(&[b, ci, ti, hi, wi]) * w.at(&[co, ci, a, c, d]);
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * to + z) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, to, ho, wo], out).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn conv2d_constant_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = tape.conv2d(x, w, [1, 1], [1, 1]).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[1, 1, 3, 3]);
    assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
    for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(v.at(&[0, 0, r, c]), 4.0);
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let input = Tensor::randn(vec![2, 1, 4, 5], 1.0, &mut rng());
    let x = tape.constant(input.clone());
    let w = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let y = tape.conv2d(x, w, [1, 1], [0, 0]).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
}

#[test]
fn conv2d_strided_matches_direct_loop() {
    let mut r = rng();
    let x = Tensor::randn(vec![1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, [2, 2], [1, 1]).unwrap();
    let expected = direct_conv3d(
        &x.reshape(vec![1, 2, 1, 5, 5]).unwrap(),
        &w.reshape(vec![3, 2, 1, 3, 3]).unwrap(),
        [1, 2, 2],
        [0, 1, 1],
    );
    assert_eq!(tape.shape(y), &[1, 3, 3, 3]);
    assert!(tape.value(y).max_abs_diff(&expected.reshape(vec![1, 3, 3, 3]).unwrap()) < 1e-6);
}

#[test]
fn conv3d_constant_ones_center() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
    let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
    let y = tape.conv3d(x, w, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3, 3]);
    assert_eq!(tape.value(y).at(&[0, 0, 1, 1, 1]), 27.0);
    assert_eq!(tape.value(y).at(&[0, 0, 0, 0, 0]), 8.0);
}

#[test]
fn conv3d_identity_kernel() {
    let input = Tensor::randn(vec![1, 1, 3, 4, 2], 1.0, &mut rng());
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
    let y = tape.conv3d(x, w, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
}

#[test]
fn conv3d_matches_direct_loop_on_all_small_shapes() {
    let mut r = rng();
    for n in 1..=2 {
        for cin in 1..=3 {
            for t in [1, 3, 5] {
                for (h, w) in [(3, 3), (6, 6), (5, 4)] {
                    for (k, stride, pad) in [
                        ([3, 3, 3], [1, 1, 1], [1, 1, 1]),
                        ([3, 1, 1], [1, 1, 1], [1, 0, 0]),
                        ([1, 3, 3], [1, 2, 2], [0, 1, 1]),
                        ([1, 1, 1], [1, 1, 1], [0, 0, 0]),
                        ([1, 1, 1], [1, 2, 2], [0, 0, 0]),
                    ] {
                        let x = Tensor::randn(vec![n, cin, t, h, w], 1.0, &mut r);
                        let wt = Tensor::randn(vec![2, cin, k[0], k[1], k[2]], 1.0, &mut r);
                        let mut tape = Tape::<f64>::new();
                        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
                        let y = tape.conv3d(xv, wv, stride, pad).unwrap();
                        let expected = direct_conv3d(&x, &wt, stride, pad);
                        assert_eq!(tape.shape(y), expected.shape());
                        assert!(
                            tape.value(y).max_abs_diff(&expected) < 1e-6,
                            "n={n} cin={cin} t={t} h={h} w={w} k={k:?}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn conv3d_same_padding_preserves_extent() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 32, 22]));
    let w = tape.constant(Tensor::zeros(vec![3, 2, 3, 3, 3]));
    let y = tape.conv3d(x, w, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4, 32, 22]);
}

#[test]
fn temporal_identity_and_constant_signal() {
    let input = Tensor::randn(vec![1, 2, 4, 2, 3], 1.0, &mut rng());
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(input.clone());
    let eye = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.conv1d_temporal(x, eye).unwrap();
    assert_eq!(tape.value(y).data(), input.data());

    // Constant in time, normalized kernel.
    let frame = Tensor::randn(vec![6], 1.0, &mut rng());
    let t = 5;
    let constant = Tensor::from_fn(vec![1, 1, t, 2, 3], |i| frame.data()[i % 6]);
    let x = tape.constant(constant.clone());
    let k = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.2, 0.5, 0.3]).unwrap());
    let y = tape.conv1d_temporal(x, k).unwrap();
    let out = tape.value(y);
    for tt in 1..t - 1 {
        for p in 0..6 {
            assert!((out.data()[tt * 6 + p] - constant.data()[tt * 6 + p]).abs() < 1e-12);
        }
    }
}

#[test]
fn temporal_matches_direct_loop() {
    let mut r = rng();
    let x = Tensor::randn(vec![2, 3, 5, 6, 6], 1.0, &mut r);
    let w = Tensor::randn(vec![4, 3, 3], 1.0, &mut r);
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv1d_temporal(xv, wv).unwrap();
    let expected = direct_conv3d(&x, &w.reshape(vec![4, 3, 3, 1, 1]).unwrap(), [1, 1, 1], [1, 0, 0]);
    assert!(tape.value(y).max_abs_diff(&expected) < 1e-6);
}

#[test]
fn float32_path_agrees_with_float64() {
    let mut r = rng();
    let x = Tensor::<f64>::randn(vec![1, 4, 3, 8, 7], 1.0, &mut r);
    let w = Tensor::<f64>::randn(vec![5, 4, 3, 3, 3], 0.2, &mut r);
    let expected = direct_conv3d(&x, &w, [1, 1, 1], [1, 1, 1]);
    let mut tape = Tape::<f32>::new();
    let (xv, wv) = (tape.constant(x.cast()), tape.constant(w.cast()));
    let y = tape.conv3d(xv, wv, [1, 1, 1], [1, 1, 1]).unwrap();
    let got: Tensor<f64> = tape.value(y).cast();
    assert!(got.max_abs_diff(&expected) < 1e-4);
}

//! Kernel results against independent loop implementations.

use dbat_tensor::{Graph, Precision, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn loop_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let g = Graph::new(Precision::Double);
        let c = g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap().value();
        let expected = loop_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn batched_matmul_matches_per_batch_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 5, 4], &mut rng);
    let b = random(&[3, 4, 2], &mut rng);
    let g = Graph::new(Precision::Double);
    let c = g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap().value();
    assert_eq!(c.shape(), &[2, 3, 5, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let ai = Tensor::new([5, 4], a.data()[(i * 3 + j) * 20..(i * 3 + j + 1) * 20].to_vec()).unwrap();
            let bj = Tensor::new([4, 2], b.data()[j * 8..(j + 1) * 8].to_vec()).unwrap();
            let expected = loop_matmul(&ai, &bj);
            let got = &c.data()[(i * 3 + j) * 10..(i * 3 + j + 1) * 10];
            for (x, y) in got.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_matches_extended_precision_values() {
    // e^x / Σe^x for x = [1, 2, 3], evaluated with 40-digit arithmetic.
    let expected = [
        0.090_030_573_170_380_457_998,
        0.244_728_471_054_797_652_47,
        0.665_240_955_774_821_889_53,
    ];
    let g = Graph::new(Precision::Double);
    let y = g
        .constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap())
        .softmax(0)
        .unwrap()
        .value();
    for (a, b) in y.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn conv1x1_matches_per_pixel_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c, k, h, w) = (2, 3, 5, 4, 3);
    let x = random(&[n, c, h, w], &mut rng);
    let wt = random(&[k, c], &mut rng);
    let b = random(&[k], &mut rng);
    let g = Graph::new(Precision::Double);
    let y = g
        .constant(x.clone())
        .conv1x1(&g.constant(wt.clone()), &g.constant(b.clone()))
        .unwrap()
        .value();
    for bi in 0..n {
        for p in 0..h * w {
            let pix = Tensor::new([c, 1], (0..c).map(|ci| x.data()[(bi * c + ci) * h * w + p]).collect()).unwrap();
            let expected = loop_matmul(&wt, &pix);
            for kk in 0..k {
                let got = y.data()[(bi * k + kk) * h * w + p];
                assert!((got - expected[kk] - b.data()[kk]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn conv1x1_equals_linear_over_flattened_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 4, 3, 3], &mut rng);
    let wt = random(&[6, 4], &mut rng);
    let b = random(&[6], &mut rng);
    let g = Graph::new(Precision::Double);
    let xv = g.constant(x);
    let (wv, bv) = (g.constant(wt), g.constant(b));
    let conv = xv.conv1x1(&wv, &bv).unwrap().value();
    let lin = xv
        .nchw_to_nhwc()
        .unwrap()
        .linear(&wv, Some(&bv))
        .unwrap()
        .nhwc_to_nchw()
        .unwrap()
        .value();
    assert!(conv.max_abs_diff(&lin) < 1e-6);
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, k, h, w, kh) = (1, 2, 3, 6, 5, 3);
    let x = random(&[n, c, h, w], &mut rng);
    let wt = random(&[k, c, kh, kh], &mut rng);
    let (pad, dil) = (2usize, 2usize);
    let g = Graph::new(Precision::Double);
    let spec = dbat_tensor::Conv2dSpec {
        stride: 1,
        padding: pad,
        dilation: dil,
    };
    let y = g.constant(x.clone()).conv2d(&g.constant(wt.clone()), None, spec).unwrap().value();
    assert_eq!(y.shape(), &[n, k, h, w]);
    for kk in 0..k {
        for oy in 0..h {
            for ox in 0..w {
                let mut s = 0.0;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kh {
                            let iy = oy as isize + (ky * dil) as isize - pad as isize;
                            let ix = ox as isize + (kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += wt.data()[((kk * c + ci) * kh + ky) * kh + kx]
                                * x.data()[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                assert!((y.data()[(kk * h + oy) * w + ox] - s).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        seed in any::<u64>(),
        rows in 1usize..6,
        cols in 1usize..9,
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([rows, cols], |_| rng.gen_range(-10.0..10.0));
        let g = Graph::new(Precision::Double);
        let y = g.constant(x.clone()).softmax(1).unwrap().value();
        for r in 0..rows {
            let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted = g.constant(x.map(|v| v + shift)).softmax(1).unwrap().value();
        prop_assert!(y.max_abs_diff(&shifted) < 1e-6);
    }

    #[test]
    fn window_partition_then_reverse_is_identity(
        n in 1usize..3,
        hw in 1usize..4,
        ww in 1usize..4,
        window in 1usize..4,
        c in 1usize..4,
    ) {
        let (h, w) = (hw * window, ww * window);
        let x = Tensor::from_fn([n, h, w, c], |i| i as f64 * 0.25 - 3.0);
        let g = Graph::new(Precision::Double);
        let back = g
            .constant(x.clone())
            .window_partition(window)
            .unwrap()
            .window_reverse(window, n, h, w)
            .unwrap()
            .value();
        prop_assert_eq!(&*back, &x);
    }
}

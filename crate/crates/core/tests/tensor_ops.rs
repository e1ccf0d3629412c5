use kernelvis::gradcheck::check_inputs;
use kernelvis::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b[o];
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, oy, ox], s);
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor, k: usize, max: bool) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, h / k, w / k]);
    for ch in 0..c {
        for oy in 0..h / k {
            for ox in 0..w / k {
                let window: Vec<f64> = (0..k * k)
                    .map(|i| x.at(&[ch, oy * k + i / k, ox * k + i % k]))
                    .collect();
                let v = if max {
                    window.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    window.iter().sum::<f64>() / (k * k) as f64
                };
                out.set(&[ch, oy, ox], v);
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_permutation() {
    let tape = Tape::new();
    let mut r = rng(1);
    let a = tape.constant(Tensor::randn(&[3, 3], 1.0, &mut r));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.set(&[i, i], 1.0);
    }
    let i3 = tape.constant(eye);
    assert_eq!(i3.matmul(a).unwrap().value().data(), a.value().data());

    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = tape.constant(t(&[2, 2], &[0., 1., 1., 0.]));
    assert_eq!(m.matmul(p).unwrap().value().data(), &[2., 1., 4., 3.]);
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut r = rng(2);
    let a = Tensor::randn(&[5, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 6], 1.0, &mut r);
    let tape = Tape::new();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    assert_eq!(c.value().data(), matmul_oracle(&a, &b).as_slice());
}

#[test]
fn batched_matmul_broadcasts() {
    let mut r = rng(3);
    let a = Tensor::randn(&[3, 2, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 5], 1.0, &mut r);
    let tape = Tape::new();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    assert_eq!(c.shape(), vec![3, 2, 5]);
    for batch in 0..3 {
        let slice = t(&[2, 4], &a.data()[batch * 8..(batch + 1) * 8]);
        assert_eq!(&c.value().data()[batch * 10..(batch + 1) * 10], matmul_oracle(&slice, &b).as_slice());
    }
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(4);
    let x = Tensor::randn(&[1, 5, 5], 1.0, &mut r);
    let tape = Tape::new();
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.constant(x.clone()).conv2d(w, Some(b), 1, 0).unwrap();
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn conv_impulse_response() {
    let mut x = Tensor::zeros(&[1, 5, 5]);
    x.set(&[0, 2, 2], 1.0);
    let tape = Tape::new();
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.constant(x).conv2d(w, None, 1, 1).unwrap();
    let y = y.value();
    for yy in 0..5 {
        for xx in 0..5 {
            let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
            assert_eq!(y.at(&[0, yy, xx]), if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut r = rng(5);
    for &(stride, pad, h) in &[(1, 1, 7), (2, 1, 8), (1, 0, 6)] {
        let x = Tensor::randn(&[2, h, h], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), stride, pad)
            .unwrap();
        let oracle = conv_oracle(&x, &w, b.data(), stride, pad);
        assert_eq!(y.shape(), oracle.shape());
        assert!(y.value().max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn conv_rejects_skipped_pixels() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 7, 7]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    // (7 - 3) % 3 = 1 > pad 0: the last input column is never read.
    assert!(matches!(x.conv2d(w, None, 3, 0), Err(kernelvis::Error::Shape(_))));
}

#[test]
fn pooling_matches_window_scan() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 64, 64], 1.0, &mut r);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    for k in [4, 8] {
        let mp = xv.max_pool2d(k).unwrap();
        assert_eq!(mp.shape(), vec![2, 64 / k, 64 / k]);
        assert_eq!(mp.value().data(), pool_oracle(&x, k, true).data());
        let ap = xv.avg_pool2d(k).unwrap();
        assert_eq!(ap.value().data(), pool_oracle(&x, k, false).data());
    }
}

#[test]
fn pooling_constant_and_mean() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::full(&[3, 8, 8], 1.75));
    assert!(c.max_pool2d(4).unwrap().value().data().iter().all(|&v| v == 1.75));
    assert!(c.avg_pool2d(8).unwrap().value().data().iter().all(|&v| v == 1.75));
    let w = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    assert_eq!(w.avg_pool2d(2).unwrap().item(), 2.5);
    assert!(tape.constant(Tensor::zeros(&[1, 6, 6])).max_pool2d(4).is_err());
}

#[test]
fn max_pool_tie_routes_to_first() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[1, 2, 2], &[0.5, 2.0, 2.0, 2.0]).with_requires_grad());
    let g = tape.backward(x.max_pool2d(2).unwrap().sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn pooling_is_idempotent_on_nearest_upsampled_maps() {
    let mut r = rng(7);
    let x = Tensor::randn(&[2, 16, 16], 1.0, &mut r);
    let tape = Tape::new();
    let pooled = tape.constant(x).max_pool2d(4).unwrap().value();
    let mut up = Tensor::zeros(&[2, 16, 16]);
    for c in 0..2 {
        for y in 0..16 {
            for xx in 0..16 {
                up.set(&[c, y, xx], pooled.at(&[c, y / 4, xx / 4]));
            }
        }
    }
    let again = tape.constant(up).max_pool2d(4).unwrap().value();
    assert_eq!(again.data(), pooled.data());
}

#[test]
fn upsample_closed_form() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[0., 1., 2., 3.]));
    assert_eq!(x.upsample(1).unwrap().value().data(), x.value().data());
    assert!(matches!(x.upsample(0), Err(kernelvis::Error::Argument(_))));

    // Per-pixel oracle: half-pixel source coordinate clamped to the grid.
    let oracle = |o: usize, len: usize, f: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    let y = x.upsample(2).unwrap().value();
    let src = [[0., 1.], [2., 3.]];
    for oy in 0..4 {
        for ox in 0..4 {
            let (y0, y1, wy) = oracle(oy, 2, 2);
            let (x0, x1, wx) = oracle(ox, 2, 2);
            let v = (1.0 - wy) * ((1.0 - wx) * src[y0][x0] + wx * src[y0][x1])
                + wy * ((1.0 - wx) * src[y1][x0] + wx * src[y1][x1]);
            assert!((y.at(&[0, oy, ox]) - v).abs() < 1e-15);
        }
    }
    assert_eq!(
        y.data(),
        &[0., 0.25, 0.75, 1., 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2., 2.25, 2.75, 3.]
    );

    let c = tape.constant(Tensor::full(&[2, 3, 3], -0.4));
    assert!(c.upsample(4).unwrap().value().data().iter().all(|&v| (v + 0.4).abs() < 1e-15));
}

#[test]
fn softmax_sigmoid_layer_norm_values() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::full(&[5], 3.0)).softmax();
    assert!(s.value().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert_eq!(tape.constant(Tensor::zeros(&[1])).sigmoid().item(), 0.5);

    let x = tape.constant(t(&[4], &[1., 2., 3., 4.]));
    let ln = x
        .layer_norm(tape.constant(Tensor::ones(&[4])), tape.constant(Tensor::zeros(&[4])))
        .unwrap();
    let expect = [-1.3416, -0.4472, 0.4472, 1.3416];
    for (v, e) in ln.value().data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut r = rng(8);
    let tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[6, 16], 3.0, &mut r));
    let y = x
        .layer_norm(tape.constant(Tensor::ones(&[16])), tape.constant(Tensor::zeros(&[16])))
        .unwrap()
        .value();
    for row in y.data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
    }
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut r = rng(9);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 16, 16], 1.0, &mut r));
        let w = tape.constant(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r));
        let y = x.conv2d(w, None, 2, 1).unwrap().max_pool2d(2).unwrap();
        let z = y.reshape(&[4, 16]).unwrap();
        z.matmul(z.t().unwrap()).unwrap().value().data().to_vec()
    };
    assert_eq!(run(), run());
}

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn assert_grad(name: &str, inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[kernelvis::Var<'t>]) -> kernelvis::Result<kernelvis::Var<'t>>) {
    let report = check_inputs(inputs, EPS, f).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// Weighted sum so that every output element gets a distinct adjoint.
fn probe<'t>(tape: &'t Tape, y: kernelvis::Var<'t>, seed: u64) -> kernelvis::Result<kernelvis::Var<'t>> {
    let mut r = rng(seed);
    let w = tape.constant(Tensor::randn(&y.shape(), 1.0, &mut r));
    Ok(y.mul(w)?.sum())
}

#[test]
fn every_op_passes_finite_differences() {
    let mut r = rng(10);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let row = Tensor::randn(&[4], 1.0, &mut r);
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut r);
    let img = Tensor::randn(&[2, 8, 8], 1.0, &mut r);
    let ker = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let bias = Tensor::randn(&[3], 0.5, &mut r);

    assert_grad("matmul", &[a.clone(), b.clone()], |tp, v| probe(tp, v[0].matmul(v[1])?, 1));
    assert_grad("batched matmul", &[Tensor::randn(&[2, 3, 4], 1.0, &mut r), b.clone()], |tp, v| {
        probe(tp, v[0].matmul(v[1])?, 2)
    });
    assert_grad("add broadcast", &[a.clone(), row.clone()], |tp, v| probe(tp, v[0].add(v[1])?, 3));
    assert_grad("sub broadcast", &[a.clone(), row.clone()], |tp, v| probe(tp, v[0].sub(v[1])?, 4));
    assert_grad("mul broadcast", &[a.clone(), row.clone()], |tp, v| probe(tp, v[0].mul(v[1])?, 5));
    assert_grad("div", &[a.clone(), pos.clone()], |tp, v| probe(tp, v[0].div(v[1])?, 6));
    assert_grad("neg/scale/add_scalar", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].neg().scale(1.7).add_scalar(0.3), 7));
    assert_grad("relu", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].relu(), 8));
    assert_grad("gelu", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].gelu(), 9));
    assert_grad("sigmoid", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].sigmoid(), 10));
    assert_grad("exp", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].exp(), 11));
    assert_grad("ln", std::slice::from_ref(&pos), |tp, v| probe(tp, v[0].ln(), 12));
    assert_grad("softplus", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].softplus(), 13));
    assert_grad("powf", std::slice::from_ref(&pos), |tp, v| probe(tp, v[0].powf(0.8), 14));
    assert_grad("sqrt", std::slice::from_ref(&pos), |tp, v| probe(tp, v[0].sqrt(), 15));
    assert_grad("softmax", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].softmax(), 16));
    assert_grad("layer_norm", &[a.clone(), row.clone(), Tensor::randn(&[4], 1.0, &mut r)], |tp, v| {
        probe(tp, v[0].layer_norm(v[1], v[2])?, 17)
    });
    assert_grad("sum_last", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].sum_last(), 18));
    assert_grad("mean", std::slice::from_ref(&a), |_, v| Ok(v[0].mean()));
    assert_grad("permute", &[Tensor::randn(&[2, 3, 4], 1.0, &mut r)], |tp, v| {
        probe(tp, v[0].permute(&[2, 0, 1])?, 19)
    });
    assert_grad("reshape", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].reshape(&[2, 6])?, 20));
    assert_grad("index_rows", std::slice::from_ref(&a), |tp, v| probe(tp, v[0].index_rows(&[2, 0, 2])?, 21));
    assert_grad("conv2d s1", &[img.clone(), ker.clone(), bias.clone()], |tp, v| {
        probe(tp, v[0].conv2d(v[1], Some(v[2]), 1, 1)?, 22)
    });
    assert_grad("conv2d s2", &[img.clone(), ker.clone(), bias.clone()], |tp, v| {
        probe(tp, v[0].conv2d(v[1], Some(v[2]), 2, 1)?, 23)
    });
    assert_grad("max_pool2d", std::slice::from_ref(&img), |tp, v| probe(tp, v[0].max_pool2d(4)?, 24));
    assert_grad("avg_pool2d", std::slice::from_ref(&img), |tp, v| probe(tp, v[0].avg_pool2d(4)?, 25));
    assert_grad("upsample", &[Tensor::randn(&[2, 3, 2], 1.0, &mut r)], |tp, v| probe(tp, v[0].upsample(4)?, 26));
}

proptest! {
    #[test]
    fn softmax_rows_are_simplex_points(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(&[3, 4], vals).unwrap()).softmax().value();
        for row in s.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        let got = c.value().data().to_vec();
        prop_assert_eq!(got, matmul_oracle(&a, &b));
    }
}

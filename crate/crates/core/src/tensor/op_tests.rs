use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    out
}

/// Six nested loops over (y, x, c_out, ky, kx, c_in), zero outside the map.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: (usize, usize), out_hw: (usize, usize)) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let mut out = Vec::new();
    for oy in 0..out_hw.0 {
        for ox in 0..out_hw.1 {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..ks {
                    for kx in 0..ks {
                        for ci in 0..cin {
                            let iy = (oy * stride + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.get(&[0, iy as usize, ix as usize, ci]) * k.get(&[ky, kx, ci, co]);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn linear_identity_and_zero_weight() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
    let out = x.linear(tape.constant(Tensor::eye(2)), tape.constant(Tensor::zeros(&[2]))).unwrap();
    assert_eq!(out.value().data(), &[1.0, 2.0]);

    let x = tape.constant(Tensor::matrix(&[vec![5.0, -7.0], vec![0.25, 9.0]]).unwrap());
    let out = x.linear(tape.constant(Tensor::zeros(&[2, 2])), tape.constant(Tensor::vector(vec![3.0, 4.0]))).unwrap();
    assert_eq!(out.value().data(), &[3.0, 4.0, 3.0, 4.0]);
}

#[test]
fn linear_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, w) = (random(&mut rng, &[3, 2]), random(&mut rng, &[2, 4]));
    let tape = Tape::new();
    let out = tape.constant(x.clone()).linear(tape.constant(w.clone()), tape.constant(Tensor::zeros(&[4]))).unwrap();
    assert!(max_diff(out.value().data(), &naive_matmul(&x, &w)) < 1e-12);
}

#[test]
fn linear_reports_both_shapes() {
    let tape = Tape::new();
    let err = tape
        .constant(Tensor::zeros(&[2, 3]))
        .linear(tape.constant(Tensor::zeros(&[2, 4])), tape.constant(Tensor::zeros(&[4])))
        .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
}

#[test]
fn conv_identity_and_box_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 4, 5, 3]);
    let kern = Tensor::eye(3).reshape(&[1, 1, 3, 3]).unwrap();
    let tape = Tape::new();
    let out = tape.constant(x.clone()).conv2d(tape.constant(kern), 1, Padding::Same).unwrap();
    assert_eq!(out.value(), x);

    let v = 0.37;
    let img = Tensor::full(&[1, 4, 4, 1], v);
    let out = tape.constant(img).conv2d(tape.constant(Tensor::ones(&[2, 2, 1, 1])), 1, Padding::Valid).unwrap().value();
    assert_eq!(out.shape(), &[1, 3, 3, 1]);
    assert!(out.data().iter().all(|&o| (o - 4.0 * v).abs() < 1e-15));
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 5, 5, 2]);
    let k = random(&mut rng, &[3, 3, 2, 2]);
    let cases = [
        (1, Padding::Valid, (0, 0), (3, 3)),
        (1, Padding::Same, (1, 1), (5, 5)),
        (2, Padding::Same, (1, 1), (3, 3)),
        (2, Padding::Valid, (0, 0), (2, 2)),
    ];
    for (stride, padding, pad, hw) in cases {
        let tape = Tape::new();
        let out = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), stride, padding).unwrap();
        let v = out.value();
        assert_eq!(&v.shape()[1..3], &[hw.0, hw.1], "{padding:?} stride {stride}");
        assert!(max_diff(v.data(), &naive_conv(&x, &k, stride, pad, hw)) < 1e-12);
    }
}

#[test]
fn conv_rejects_oversized_kernel_and_stride() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 3, 1]));
    let big = tape.constant(Tensor::zeros(&[4, 4, 1, 1]));
    assert!(matches!(x.conv2d(big, 1, Padding::Valid), Err(Error::Dimension { .. })));
    let k = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(matches!(x.conv2d(k, 4, Padding::Valid), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_cases() {
    let tape = Tape::new();
    let u = tape.constant(Tensor::vector(vec![0.0; 3])).softmax(0).unwrap().value();
    assert!(u.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let s = tape.constant(Tensor::vector(vec![1000.0, 0.0, 0.0])).softmax(0).unwrap().value();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);

    let p = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).softmax(0).unwrap().value();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((p.data()[i] - v.exp() / denom).abs() < 1e-15);
    }
    assert!(tape.constant(Tensor::vector(vec![1.0])).softmax(1).is_err());
}

#[test]
fn elementwise_definitions() {
    let tape = Tape::new();
    let r = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).relu().unwrap();
    assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().unwrap().item(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    let prod = tape.constant(a.clone()).mul(tape.constant(b.clone())).unwrap().value();
    for i in 0..12 {
        assert_eq!(prod.data()[i], a.data()[i] * b.data()[i]);
    }
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.constant(a).add(bad), Err(Error::Dimension { .. })));
}

#[test]
fn broadcasting_leading_ones() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let row = tape.constant(Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap());
    assert_eq!(x.add(row).unwrap().value().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let s = tape.constant(Tensor::scalar(2.0));
    assert_eq!(x.mul(s).unwrap().value().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
}

#[test]
fn reduce_cases() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 3, 2], 1.75)).mean_all().unwrap();
    assert_eq!(c.item(), 1.75);
    assert_eq!(tape.constant(Tensor::ones(&[2, 3])).sum(&[0, 1]).unwrap().item(), 6.0);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[4, 4]);
    let m = tape.constant(x.clone()).mean(&[0]).unwrap().value();
    assert_eq!(m.shape(), &[4]);
    for j in 0..4 {
        let mut s = 0.0;
        for i in 0..4 {
            s += x.get(&[i, j]);
        }
        assert!((m.data()[j] - s / 4.0).abs() < 1e-15);
    }
    let mx = tape.constant(x.clone()).max(&[1]).unwrap().value();
    for i in 0..4 {
        let want = (0..4).map(|j| x.get(&[i, j])).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(mx.data()[i], want);
    }
    assert!(matches!(tape.constant(x.clone()).sum(&[]), Err(Error::Degenerate(_))));
    assert!(tape.constant(x).sum(&[0, 0]).is_err());
}

#[test]
fn concat_cases() {
    let tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.param(Tensor::vector(vec![3.0]));
    assert_eq!(Var::concat(&[a], 0).unwrap().value().data(), &[1.0, 2.0]);
    let cat = Var::concat(&[a, b], 0).unwrap();
    assert_eq!(cat.value().data(), &[1.0, 2.0, 3.0]);
    let grads = tape.backward(cat.sum_all().unwrap()).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[1.0]);

    let m1 = tape.constant(Tensor::zeros(&[2, 3]));
    let m2 = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(Var::concat(&[m1, m2], 1).is_err());
    assert_eq!(Var::concat(&[m1, m2], 0).unwrap().shape(), vec![5, 3]);
}

#[test]
fn bce_cases() {
    let tape = Tape::new();
    let p = tape.constant(Tensor::scalar(1.0 - BCE_EPS));
    assert!(p.bce(&Tensor::scalar(1.0)).unwrap().item() < 1e-6);
    for t in [0.0, 1.0] {
        let l = tape.constant(Tensor::scalar(0.5)).bce(&Tensor::scalar(t)).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probs: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
    let targets: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    let l = tape.constant(Tensor::vector(probs.clone())).bce(&Tensor::vector(targets.clone())).unwrap().item();
    let mut want = 0.0;
    for (p, t) in probs.iter().zip(&targets) {
        want -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    assert!((l - want / 16.0).abs() < 1e-14);
    let err = tape.constant(Tensor::scalar(0.3)).bce(&Tensor::scalar(2.0)).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn backward_basics() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.5, -2.0, 0.25]));
    let g = tape.backward(x.sum_all().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.5, -2.0, 0.25]));
    let g = tape.backward(x.mul(x).unwrap().sum_all().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);

    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn reused_tensor_sums_path_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (x0, w) = (random(&mut rng, &[1, 3]), random(&mut rng, &[3, 3]));
    fn path_a<'t>(tape: &'t Tape, x: Var<'t>, w: &Tensor) -> Var<'t> {
        x.matmul(tape.constant(w.clone())).unwrap().sigmoid().unwrap().sum_all().unwrap()
    }
    fn path_b(x: Var<'_>) -> Var<'_> {
        x.mul(x).unwrap().sum_all().unwrap()
    }

    let single = |use_a: bool| {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let l = if use_a { path_a(&tape, x, &w) } else { path_b(x) };
        tape.backward(l).unwrap().get(x).unwrap()
    };
    let (ga, gb) = (single(true), single(false));

    let tape = Tape::new();
    let x = tape.param(x0.clone());
    let l = path_a(&tape, x, &w).add(path_b(x)).unwrap();
    let both = tape.backward(l).unwrap().get(x).unwrap();
    for i in 0..3 {
        assert!((both.data()[i] - (ga.data()[i] + gb.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn untracked_leaves_get_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
    let g = tape.backward(c.mul(p).unwrap().sum_all().unwrap()).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn grad_check_linear_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 4]);
    let err = grad_check(|_, v| v[0].sum_all(), &[x], 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_bce_sigmoid_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[4, 3]), random(&mut rng, &[3, 1]), random(&mut rng, &[1])];
    let target = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let err = grad_check(|_, v| v[0].linear(v[1], v[2])?.sigmoid()?.bce(&target), &inputs, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_relu_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    fn program<'t>(_: &'t Tape, v: &[Var<'t>]) -> crate::Result<Var<'t>> {
        let h = v[0].matmul(v[1])?.relu()?;
        h.mul(h)?.sum_all()
    }
    let inputs = loop {
        let cand = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5])];
        let tape = Tape::with_kink_tracking();
        let vars: Vec<_> = cand.iter().map(|t| tape.constant(t.clone())).collect();
        program(&tape, &vars).unwrap();
        if tape.kink_stats().min_margin >= 1e-3 {
            break cand;
        }
    };
    let report = grad_check_report(program, &inputs, 1e-5).unwrap();
    assert_eq!(report.kink_crossings, 0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&mut rng, &[1, 6, 6, 3]);
    let k = random(&mut rng, &[3, 3, 3, 4]);
    let run = || {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), 2, Padding::Same).unwrap();
        y.relu().unwrap().softmax(3).unwrap().value().to_le_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_forward_is_an_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1e300));
    assert!(matches!(x.mul(x), Err(Error::NonFinite(_))));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[rows, cols]).map(|v| v * scale);
            let tape = Tape::new();
            let y = tape.constant(x).softmax(1).unwrap().value();
            for r in 0..rows {
                let row = &y.data()[r * cols..(r + 1) * cols];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn narrow_then_concat_restores(len in 2usize..8, cut in 1usize..7, seed in any::<u64>()) {
            let cut = cut.min(len - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[2, len, 3]);
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            let parts = [v.narrow(1, 0, cut).unwrap(), v.narrow(1, cut, len - cut).unwrap()];
            prop_assert_eq!(Var::concat(&parts, 1).unwrap().value(), x);
        }
    }
}

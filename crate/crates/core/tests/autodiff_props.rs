//! Backward passes of the tape primitives against central differences of
//! independent `f64` evaluations.

use hybrid_sds::autodiff::{finite_diff_check_with, FdOptions, GatherSpec};
use hybrid_sds::{Differentiable, Param, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn wide(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// `Σ w ⊙ y` on the tape, with `w` a fixed random weighting.
fn weighted<'a>(tape: &mut Tape<'a>, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone().reshape(tape.shape(y))?)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn dot(y: &[f64], w: &Tensor) -> f64 {
    y.iter().zip(w.data()).map(|(a, &b)| a * f64::from(b)).sum()
}

/// Gradients below `floor` are compared absolutely: terms of order 10 in f32
/// cancel to within about 1e-6, which a smaller floor would count as error.
fn opts(seed: u64) -> FdOptions {
    FdOptions {
        step: 1e-3,
        tolerance: 1e-3,
        floor: 1e-2,
        seed,
        ..FdOptions::default()
    }
}

fn check<F, R>(mut params: Vec<Param>, seed: u64, f: F, reference: R) -> f64
where
    F: for<'t> Fn(&'t Vec<Param>, &mut Tape<'t>) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let report = finite_diff_check_with(&mut params, &opts(seed), f, |m: &Vec<Param>| {
        let values: Vec<Vec<f64>> = m.params().iter().map(|p| wide(&p.value)).collect();
        Ok(reference(&values))
    })
    .unwrap();
    assert_eq!(report.checked(), params.iter().map(|p| p.value.numel()).sum::<usize>());
    report.max_rel_error()
}

fn unary_case(seed: u64, lo: f32, hi: f32) -> (Vec<Param>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=64);
    let x = random(&mut rng, &[n], lo, hi);
    let w = random(&mut rng, &[n], -1.0, 1.0);
    (vec![Param::new("x", x)], w)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_sub_mul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=32);
        let a = random(&mut rng, &[n], -2.0, 2.0);
        let b = random(&mut rng, &[n], -2.0, 2.0);
        let w = random(&mut rng, &[n], -1.0, 1.0);
        let err = check(
            vec![Param::new("a", a), Param::new("b", b)],
            seed,
            |m, tape| {
                let (a, b) = (tape.param(&m[0]), tape.param(&m[1]));
                let s = tape.add(a, b)?;
                let d = tape.sub(a, b)?;
                let y = tape.mul(s, d)?;
                let y = tape.mul(y, a)?;
                weighted(tape, y, &w)
            },
            |v| {
                let y: Vec<f64> = v[0].iter().zip(&v[1]).map(|(a, b)| (a + b) * (a - b) * a).collect();
                dot(&y, &w)
            },
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn scale_and_shift(seed in any::<u64>()) {
        let (params, w) = unary_case(seed, -3.0, 3.0);
        let err = check(
            params,
            seed,
            |m, tape| {
                let x = tape.param(&m[0]);
                let y = tape.scale(x, -1.5)?;
                let y = tape.shift(y, 0.25)?;
                let y = tape.mul(y, x)?;
                weighted(tape, y, &w)
            },
            |v| dot(&v[0].iter().map(|x| (-1.5 * x + 0.25) * x).collect::<Vec<_>>(), &w),
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn exp(seed in any::<u64>()) {
        let (params, w) = unary_case(seed, -3.0, 3.0);
        let err = check(
            params,
            seed,
            |m, tape| {
                let x = tape.param(&m[0]);
                let y = tape.exp(x)?;
                weighted(tape, y, &w)
            },
            |v| dot(&v[0].iter().map(|x| x.exp()).collect::<Vec<_>>(), &w),
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn sigmoid(seed in any::<u64>()) {
        let (params, w) = unary_case(seed, -6.0, 6.0);
        let err = check(
            params,
            seed,
            |m, tape| {
                let x = tape.param(&m[0]);
                let y = tape.sigmoid(x)?;
                weighted(tape, y, &w)
            },
            |v| dot(&v[0].iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect::<Vec<_>>(), &w),
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn softplus_matches(seed in any::<u64>()) {
        let (params, w) = unary_case(seed, -6.0, 6.0);
        let err = check(
            params,
            seed,
            |m, tape| {
                let x = tape.param(&m[0]);
                let y = tape.softplus(x)?;
                weighted(tape, y, &w)
            },
            |v| dot(&v[0].iter().map(|&x| softplus(x)).collect::<Vec<_>>(), &w),
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn relu_away_from_the_kink(seed in any::<u64>()) {
        let (mut params, w) = unary_case(seed, 0.01, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        for v in params[0].value.data_mut() {
            if rng.random::<bool>() {
                *v = -*v;
            }
        }
        let err = check(
            params,
            seed,
            |m, tape| {
                let x = tape.param(&m[0]);
                let y = tape.relu(x)?;
                weighted(tape, y, &w)
            },
            |v| dot(&v[0].iter().map(|x| x.max(0.0)).collect::<Vec<_>>(), &w),
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn matmul_and_add_row(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, n], -1.0, 1.0);
        let r = random(&mut rng, &[n], -1.0, 1.0);
        let w = random(&mut rng, &[m * n], -1.0, 1.0);
        let err = check(
            vec![Param::new("a", a), Param::new("b", b), Param::new("r", r)],
            seed,
            |p, tape| {
                let (a, b, r) = (tape.param(&p[0]), tape.param(&p[1]), tape.param(&p[2]));
                let y = tape.matmul(a, b)?;
                let y = tape.add_row(y, r)?;
                weighted(tape, y, &w)
            },
            |v| {
                let mut y = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        y[i * n + j] = v[2][j] + (0..k).map(|p| v[0][i * k + p] * v[1][p * n + j]).sum::<f64>();
                    }
                }
                dot(&y, &w)
            },
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn concat_columns_reshape(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=5);
        let (ca, cb) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let a = random(&mut rng, &[rows, ca], -1.0, 1.0);
        let b = random(&mut rng, &[rows, cb], -1.0, 1.0);
        let start = rng.random_range(0..ca + cb);
        let len = rng.random_range(1..=ca + cb - start);
        let w = random(&mut rng, &[rows * len], -1.0, 1.0);
        let err = check(
            vec![Param::new("a", a), Param::new("b", b)],
            seed,
            |p, tape| {
                let (a, b) = (tape.param(&p[0]), tape.param(&p[1]));
                let c = tape.concat(&[a, b, a])?;
                let y = tape.columns(c, start, len)?;
                let y = tape.mul(y, y)?;
                let y = tape.reshape(y, &[rows * len])?;
                weighted(tape, y, &w)
            },
            |v| {
                let width = 2 * ca + cb;
                let row = |r: usize| -> Vec<f64> {
                    let mut out = v[0][r * ca..(r + 1) * ca].to_vec();
                    out.extend_from_slice(&v[1][r * cb..(r + 1) * cb]);
                    out.extend_from_slice(&v[0][r * ca..(r + 1) * ca]);
                    assert_eq!(out.len(), width);
                    out
                };
                let y: Vec<f64> = (0..rows)
                    .flat_map(|r| row(r)[start..start + len].iter().map(|x| x * x).collect::<Vec<_>>())
                    .collect();
                dot(&y, &w)
            },
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn gather_rows(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, f) = (rng.random_range(1..=8), rng.random_range(1..=4));
        let (rows, taps) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let src = random(&mut rng, &[n, f], -1.0, 1.0);
        let spec = GatherSpec {
            rows,
            taps,
            indices: (0..rows * taps).map(|_| rng.random_range(0..n as u32)).collect(),
            weights: (0..rows * taps).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let w = random(&mut rng, &[rows * f], -1.0, 1.0);
        let s2 = spec.clone();
        let err = check(
            vec![Param::new("src", src)],
            seed,
            |p, tape| {
                let s = tape.param(&p[0]);
                let y = tape.gather(s, spec.clone())?;
                let y = tape.exp(y)?;
                weighted(tape, y, &w)
            },
            |v| {
                let mut y = vec![0.0; rows * f];
                for r in 0..rows {
                    for k in 0..taps {
                        let j = s2.indices[r * taps + k] as usize;
                        for c in 0..f {
                            y[r * f + c] += f64::from(s2.weights[r * taps + k]) * v[0][j * f + c];
                        }
                    }
                }
                dot(&y.iter().map(|x| x.exp()).collect::<Vec<_>>(), &w)
            },
        );
        prop_assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn tensor_shape_matches_data(shape in prop::collection::vec(1usize..5, 0..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
    }
}

#[test]
fn every_reachable_leaf_gets_a_gradient_and_unreachable_ones_zero() {
    let params = vec![
        Param::new("used", Tensor::vector(vec![1.0, 2.0])),
        Param::new("unused", Tensor::vector(vec![3.0])),
    ];
    let mut tape = Tape::new();
    let a = tape.param(&params[0]);
    let _b = tape.param(&params[1]);
    let y = tape.mul(a, a).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(params[0].key()).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(g.get(params[1].key()).unwrap().data(), &[0.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![100.0])).unwrap();
    assert!(tape.exp(x).is_err());
}

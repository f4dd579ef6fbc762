//! Minimal reverse-mode automatic differentiation over dense matrices.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, ParamReport, REL_FLOOR};
pub use matrix::Matrix;
#[cfg(test)]
pub(crate) use tape::softmax_rows_value;
pub use tape::{CustomBackward, Tape, Var};

/// Guard for `log(0)` in cross-entropies and entropies.
pub const LOG_FLOOR: f64 = 1e-12;

/// Guard for zero rows in L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{PawsError, Result};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.2..1.5))
    }

    /// Random weights to turn a matrix-valued op into a generic scalar loss.
    fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let (r, c) = t.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(random(r, c, &mut rng));
        let prod = t.hadamard(v, w)?;
        Ok(t.sum(prod))
    }

    fn check<F>(f: F, params: Vec<Matrix>)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, &params, H, TOL).unwrap();
        assert!(report.passed(), "max rel err {:e}: {report:?}", report.max_rel_error());
    }

    const SHAPES: [(usize, usize); 3] = [(1, 1), (3, 4), (5, 2)];

    #[test]
    fn matmul_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(3, 4, &mut rng), random(4, 2, &mut rng));
            check(
                |t, p| {
                    let c = t.matmul(p[0], p[1])?;
                    weighted_sum(t, c, 99)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                |t, p| {
                    let c = t.matmul_bt(p[0], p[1])?;
                    weighted_sum(t, c, 98)
                },
                vec![a, b.transpose()],
            );
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3));
        let b = t.param(Matrix::zeros(2, 3));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("2x3") && msg.contains("by 2x3"), "{msg}");
    }

    #[test]
    fn elementwise_gradients() {
        for (seed, &(r, c)) in SHAPES.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 10);
            let (a, b) = (random(r, c, &mut rng), random(r, c, &mut rng));
            let (pa, pb) = (positive(r, c, &mut rng), random(1, c, &mut rng));
            check(
                |t, p| {
                    let v = t.add(p[0], p[1])?;
                    weighted_sum(t, v, 1)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                |t, p| {
                    let v = t.sub(p[0], p[1])?;
                    weighted_sum(t, v, 2)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                |t, p| {
                    let v = t.hadamard(p[0], p[1])?;
                    weighted_sum(t, v, 3)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                |t, p| {
                    let v = t.scale(p[0], -2.5);
                    weighted_sum(t, v, 4)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.add_scalar(p[0], 3.0);
                    weighted_sum(t, v, 5)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.exp(p[0]);
                    weighted_sum(t, v, 6)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.log(p[0], LOG_FLOOR);
                    weighted_sum(t, v, 7)
                },
                vec![pa.clone()],
            );
            check(
                |t, p| {
                    let v = t.pow(p[0], 4.0, LOG_FLOOR)?;
                    weighted_sum(t, v, 8)
                },
                vec![pa.clone()],
            );
            check(
                |t, p| {
                    let v = t.pow(p[0], 0.5, LOG_FLOOR)?;
                    weighted_sum(t, v, 9)
                },
                vec![pa.clone()],
            );
            check(
                |t, p| {
                    let v = t.relu(p[0]);
                    weighted_sum(t, v, 10)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.add_row(p[0], p[1])?;
                    weighted_sum(t, v, 11)
                },
                vec![a.clone(), pb.clone()],
            );
        }
    }

    #[test]
    fn structural_gradients() {
        for (seed, &(r, c)) in SHAPES.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 20);
            let (a, b) = (random(r, c, &mut rng), random(r + 1, c, &mut rng));
            check(
                |t, p| {
                    let v = t.transpose(p[0]);
                    weighted_sum(t, v, 1)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.sum(p[0]);
                    weighted_sum(t, v, 2)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.mean(p[0]);
                    weighted_sum(t, v, 3)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.mean_rows(p[0]);
                    weighted_sum(t, v, 4)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.row_mean(p[0]);
                    weighted_sum(t, v, 5)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.concat_rows(&[p[0], p[1]])?;
                    weighted_sum(t, v, 6)
                },
                vec![a.clone(), b.clone()],
            );
            check(
                |t, p| {
                    let v = t.slice_rows(p[0], 1, r + 1)?;
                    weighted_sum(t, v, 7)
                },
                vec![b.clone()],
            );
        }
    }

    #[test]
    fn normalization_and_softmax_gradients() {
        for (seed, &(r, c)) in SHAPES.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 30);
            let a = random(r, c + 1, &mut rng);
            let pa = positive(r, c, &mut rng);
            check(
                |t, p| {
                    let v = t.row_l2_normalize(p[0], NORM_EPS);
                    weighted_sum(t, v, 1)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.softmax_rows(p[0], 0.1)?;
                    weighted_sum(t, v, 2)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.softmax_rows(p[0], 1.0)?;
                    weighted_sum(t, v, 3)
                },
                vec![a.clone()],
            );
            check(
                |t, p| {
                    let v = t.normalize_row_sum(p[0])?;
                    weighted_sum(t, v, 4)
                },
                vec![pa.clone()],
            );
            let mut trng = ChaCha8Rng::seed_from_u64(seed as u64);
            let target = crate::autodiff::softmax_rows_value(&random(r, c + 1, &mut trng), 0.5);
            check(
                |t, p| {
                    let s = t.softmax_rows(p[0], 0.1)?;
                    t.cross_entropy_rows(&target, s, LOG_FLOOR)
                },
                vec![a.clone()],
            );
        }
    }

    #[test]
    fn softmax_cross_entropy_composite_seed0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(4, 6, &mut rng);
        let target = softmax_rows_value(&random(4, 6, &mut rng), 1.0);
        let report = grad_check(
            |t, p| {
                let s = t.softmax_rows(p[0], 0.5)?;
                t.cross_entropy_rows(&target, s, LOG_FLOOR)
            },
            &[x],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-5, "{report:?}");
    }

    #[test]
    fn row_l2_normalize_examples() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8], vec![0.0, 0.0]]));
        let y = t.row_l2_normalize(x, NORM_EPS);
        let v = t.value(y).clone();
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert!((v.get(1, 0) - 0.6).abs() < 1e-15 && (v.get(1, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(2), &[0.0, 0.0]);
        // a loss that only sees the zero row through the normalized output
        let sel = t.constant(Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]));
        let l = t.hadamard(y, sel).unwrap();
        let l = t.sum(l);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).row(2), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[vec![2.5, 2.5, 2.5], vec![1.0, 0.0, f64::MIN / 4.0]]));
        let y = t.softmax_rows(x, 1.0).unwrap();
        let v = t.value(y);
        for k in 0..3 {
            assert!((v.get(0, k) - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = std::f64::consts::E;
        assert!((v.get(1, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((v.get(1, 0) - 0.73106).abs() < 1e-5);
        assert!((v.get(1, 1) - 0.26894).abs() < 1e-5);
        assert!(matches!(t.softmax_rows(x, 0.0), Err(PawsError::Domain(_))));
        assert!(matches!(t.softmax_rows(x, -1.0), Err(PawsError::Domain(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let onehot = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]);
        let p = t.constant(onehot.clone());
        let l = t.cross_entropy_rows(&onehot, p, LOG_FLOOR).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);

        let k = 5;
        let uni = Matrix::filled(2, k, 1.0 / k as f64);
        let p = t.constant(uni.clone());
        let l = t.cross_entropy_rows(&uni, p, LOG_FLOOR).unwrap();
        assert!((t.value(l).item() - (k as f64).ln()).abs() < 1e-12);

        let p = t.constant(Matrix::from_rows(&[vec![0.5, 0.5]]));
        let l = t.cross_entropy_rows(&Matrix::from_rows(&[vec![1.0, 0.0]]), p, LOG_FLOOR).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let bad = Matrix::from_rows(&[vec![0.7, 0.7]]);
        assert!(matches!(t.cross_entropy_rows(&bad, p, LOG_FLOOR), Err(PawsError::Validation(_))));
        let wrong = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(t.cross_entropy_rows(&wrong, p, LOG_FLOOR), Err(PawsError::Shape(_))));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_fn(2, 3, |i, j| (i + j) as f64));
        let unused = t.param(Matrix::filled(2, 2, 1.0));
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w), Matrix::filled(2, 3, 1.0));
        assert_eq!(t.grad(unused), Matrix::zeros(2, 2));
        // accumulation: a second call doubles the gradient
        t.backward(l).unwrap();
        assert_eq!(t.grad(w), Matrix::filled(2, 3, 2.0));
        t.zero_grad();
        assert_eq!(t.grad(w), Matrix::zeros(2, 3));
        assert!(matches!(t.backward(w), Err(PawsError::Shape(_))));
    }

    #[test]
    fn constants_never_accumulate() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(2, 2, 1.5));
        let w = t.param(Matrix::filled(2, 2, 0.5));
        let prod = t.hadamard(c, w).unwrap();
        let l = t.sum(prod);
        t.backward(l).unwrap();
        assert!(!t.requires_grad(c));
        assert_eq!(t.grad(c), Matrix::zeros(2, 2));
        assert_eq!(t.grad(w), Matrix::filled(2, 2, 1.5));
    }

    #[test]
    fn reverse_replay_handles_long_chains() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(1.0));
        let mut y = x;
        for _ in 0..10_000 {
            y = t.scale(y, 1.0);
        }
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), 1.0);
        assert_eq!(t.len(), 10_001);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(
                vals in proptest::collection::vec(-1e3f64..1e3, 12),
                tau in 1e-3f64..10.0,
            ) {
                let mut t = Tape::new();
                let x = t.constant(Matrix::from_vec(3, 4, vals).unwrap());
                let y = t.softmax_rows(x, tau).unwrap();
                for s in t.value(y).row_sums() {
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
                prop_assert!(t.value(y).is_finite());
            }
        }
    }
}

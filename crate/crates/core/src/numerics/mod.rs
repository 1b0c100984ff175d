//! Dense tensors, the reverse-mode tape, AdamW, and the finite-difference
//! oracle. Everything learnable in the crate is built on this module.

pub mod finitediff;
pub mod optim;
pub mod record;
pub mod tensor;

pub use finitediff::finite_diff_grad;
pub use optim::{AdamWConfig, ParamStore};
pub use record::{ComputationRecord, UnaryFn, ValueId};
pub use tensor::{Precision, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn_tensor(extents: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        use rand::Rng;
        let n: usize = extents.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor::new(extents, data, Precision::P64).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut rec = ComputationRecord::new();
        let eye = rec.constant(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0], Precision::P64).unwrap(),
        );
        let b = rec.constant(
            Tensor::matrix(2, 2, vec![3.0, -1.5, 2.0, 0.25], Precision::P64).unwrap(),
        );
        let c = rec.matmul(eye, b).unwrap();
        assert_eq!(rec.value(c).data(), rec.value(b).data());
    }

    #[test]
    fn matmul_row_sums() {
        let mut rec = ComputationRecord::new();
        let a = rec.constant(
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0], Precision::P64).unwrap(),
        );
        let ones = rec.constant(Tensor::matrix(2, 1, vec![1.0, 1.0], Precision::P64).unwrap());
        let c = rec.matmul(a, ones).unwrap();
        assert_eq!(rec.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_extents() {
        let mut rec = ComputationRecord::new();
        let a = rec.constant(Tensor::matrix(2, 3, vec![0.0; 6], Precision::P64).unwrap());
        let b = rec.constant(Tensor::matrix(2, 2, vec![0.0; 4], Precision::P64).unwrap());
        match rec.matmul(a, b) {
            Err(Error::Shape(msg)) => {
                assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // Gradient of sum(A*B) with respect to A, random 3x3.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = randn_tensor(vec![3, 3], &mut rng);
        let b0 = randn_tensor(vec![3, 3], &mut rng);

        let mut rec = ComputationRecord::new();
        let a = rec.constant(a0.clone());
        let b = rec.constant(b0.clone());
        let c = rec.matmul(a, b).unwrap();
        let loss = rec.sum_all(c).unwrap();
        rec.backward(loss).unwrap();
        let analytic = rec.grad(a).unwrap().to_vec();

        let numeric = finite_diff_grad(
            &mut |x| {
                let mut r = ComputationRecord::new();
                let a = r.constant(x.clone());
                let b = r.constant(b0.clone());
                let c = r.matmul(a, b)?;
                let l = r.sum_all(c)?;
                Ok(r.value(l).scalar_value())
            },
            &a0,
            1e-5,
        )
        .unwrap();
        let worst = finitediff::max_rel_err(&analytic, &numeric, 1e-12);
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn sigmoid_and_exp_fixed_points() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::vector(vec![0.0], Precision::P64).unwrap());
        let s = rec.sigmoid(x).unwrap();
        let e = rec.exp(x).unwrap();
        assert_eq!(rec.value(s).data()[0], 0.5);
        assert_eq!(rec.value(e).data()[0], 1.0);
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let x0 = Tensor::vector(vec![1.3], Precision::P64).unwrap();
        let mut rec = ComputationRecord::new();
        let x = rec.constant(x0.clone());
        let y = rec.sigmoid(x).unwrap();
        let loss = rec.sum_all(y).unwrap();
        rec.backward(loss).unwrap();
        let analytic = rec.grad(x).unwrap()[0];

        let numeric = finite_diff_grad(
            &mut |t| {
                let mut r = ComputationRecord::new();
                let x = r.constant(t.clone());
                let y = r.sigmoid(x)?;
                let l = r.sum_all(y)?;
                Ok(r.value(l).scalar_value())
            },
            &x0,
            1e-5,
        )
        .unwrap()[0];
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::matrix(1, 3, vec![0.0; 3], Precision::P64).unwrap());
        let y = rec.softmax_rows(x, None).unwrap();
        for &v in rec.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_value_is_stable() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::matrix(1, 2, vec![1000.0, 0.0], Precision::P64).unwrap());
        let y = rec.softmax_rows(x, None).unwrap();
        let d = rec.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_reference_values() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0], Precision::P64).unwrap());
        let y = rec.softmax_rows(x, None).unwrap();
        let d = rec.value(y).data();
        let expected = [0.09003, 0.24473, 0.66524];
        for (got, want) in d.iter().zip(expected) {
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::matrix(1, 2, vec![1.0, 2.0], Precision::P64).unwrap());
        assert!(matches!(
            rec.softmax_rows(x, Some(&[false, false])),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(
            Tensor::matrix(2, 3, vec![5.0, 1.0, 2.0, 0.0, 3.0, 1.0], Precision::P64).unwrap(),
        );
        let y = rec
            .softmax_rows(x, Some(&[true, false, true, true, true, false]))
            .unwrap();
        let v = rec.value(y);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(1, 2), 0.0);
        for i in 0..2 {
            let row_sum: f64 = v.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::matrix(1, 4, vec![2.5; 4], Precision::P64).unwrap());
        let gain = rec.constant(Tensor::vector(vec![1.0; 4], Precision::P64).unwrap());
        let bias = rec.constant(Tensor::vector(vec![0.0; 4], Precision::P64).unwrap());
        let y = rec.layer_norm(x, gain, bias).unwrap();
        for &v in rec.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_symmetric_two_point_row() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::matrix(1, 2, vec![1.0, -1.0], Precision::P64).unwrap());
        let gain = rec.constant(Tensor::vector(vec![1.0; 2], Precision::P64).unwrap());
        let bias = rec.constant(Tensor::vector(vec![0.0; 2], Precision::P64).unwrap());
        let y = rec.layer_norm(x, gain, bias).unwrap();
        let d = rec.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-4);
        assert!((d[1] + 1.0).abs() < 1e-4);
        // Unit gain, zero bias: row mean ~0 and variance ~1.
        assert!((d[0] + d[1]).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn_tensor(vec![3, 5], &mut rng);
        let g0 = randn_tensor(vec![5], &mut rng);
        let b0 = randn_tensor(vec![5], &mut rng);

        let run = |x: &Tensor, g: &Tensor, b: &Tensor| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut rec = ComputationRecord::new();
            let xi = rec.constant(x.clone());
            let gi = rec.constant(g.clone());
            let bi = rec.constant(b.clone());
            let y = rec.layer_norm(xi, gi, bi).unwrap();
            // Weighted sum keeps the row structure non-trivial.
            let y2 = rec.mul_elem(y, y).unwrap();
            let loss = rec.sum_all(y2).unwrap();
            rec.backward(loss).unwrap();
            (
                rec.value(loss).scalar_value(),
                rec.grad(xi).unwrap().to_vec(),
                rec.grad(gi).unwrap().to_vec(),
                rec.grad(bi).unwrap().to_vec(),
            )
        };
        let (_, dx, dg, db) = run(&x0, &g0, &b0);

        let fd_x = finite_diff_grad(&mut |t| Ok(run(t, &g0, &b0).0), &x0, 1e-5).unwrap();
        let fd_g = finite_diff_grad(&mut |t| Ok(run(&x0, t, &b0).0), &g0, 1e-5).unwrap();
        let fd_b = finite_diff_grad(&mut |t| Ok(run(&x0, &g0, t).0), &b0, 1e-5).unwrap();
        for (analytic, numeric) in [(&dx, &fd_x), (&dg, &fd_g), (&db, &fd_b)] {
            assert!(
                finitediff::grads_match(analytic, numeric, 1e-5, 1e-8),
                "worst {:?}",
                finitediff::max_mismatch(analytic, numeric, 1e-5, 1e-8)
            );
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::vector(vec![4.0, -2.0, 0.5], Precision::P64).unwrap());
        let loss = rec.sum_all(x).unwrap();
        rec.backward(loss).unwrap();
        assert_eq!(rec.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::vector(vec![3.0], Precision::P64).unwrap());
        let sq = rec.mul_elem(x, x).unwrap();
        let loss = rec.sum_all(sq).unwrap();
        rec.backward(loss).unwrap();
        assert_eq!(rec.grad(x).unwrap()[0], 6.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::vector(vec![1.0, 2.0], Precision::P64).unwrap());
        assert!(matches!(rec.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_into_accumulates() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::vector(vec![2.0], Precision::P64).unwrap())
            .unwrap();
        let mut rec = ComputationRecord::new();
        let w = rec.param(&store, "w").unwrap();
        let sq = rec.mul_elem(w, w).unwrap();
        let loss = rec.sum_all(sq).unwrap();
        rec.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), &[4.0]);
        rec.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), &[8.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a0 = randn_tensor(vec![4, 4], &mut rng);
            let b0 = randn_tensor(vec![4, 4], &mut rng);
            let mut rec = ComputationRecord::new();
            let a = rec.constant(a0);
            let b = rec.constant(b0);
            let c = rec.matmul(a, b).unwrap();
            let s = rec.softmax_rows(c, None).unwrap();
            rec.value(s).data().to_vec()
        };
        let first = build();
        let second = build();
        assert_eq!(first, second);
        for (x, y) in first.iter().zip(&second) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

//! Dense `f64` arrays, a define-by-run tape, and Adam.

mod adam;
mod array;
pub mod gradcheck;
mod kernels;
mod tape;

pub use adam::{adam_step, OptimState, ParamSet};
pub use array::Array;
pub use tape::{Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn softmax_rows(a: &Array) -> Result<Array> {
    if !a.all_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let cols = a.shape().last().copied().unwrap_or(1);
    Ok(Array::from_op(
        "softmax_rows",
        a.shape().to_vec(),
        kernels::softmax_rows(a.data(), cols),
    ))
}

/// Stride×stride average pooling of a `[G, G, D]` grid (or a batch of grids
/// with leading axes).
pub fn avg_pool_grid(x: &Array, stride: usize) -> Result<Array> {
    let (out, shape) = kernels::avg_pool_grid(x.data(), x.shape(), stride)?;
    Ok(Array::from_op("avg_pool_grid", shape, out))
}

/// Per-position mean over the leading (time) axis: `[T, ..]` to `[1, ..]`.
pub fn mean_over_time(x: &Array) -> Result<Array> {
    let out = kernels::mean_over_time(x.data(), x.shape())?;
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Ok(Array::from_op("mean_over_time", shape, out))
}

/// Gradients of the scalar `loss` with respect to every node on `tape`.
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], v: &[f64]) -> Array {
        Array::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn naive_matmul(a: &Array, b: &Array) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
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
    fn matmul_examples() {
        let id = arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let r = matmul(&arr(&[1, 2], &[1.0, 0.0]), &arr(&[2, 1], &[0.0, 1.0])).unwrap();
        assert_eq!(r, arr(&[1, 1], &[0.0]));

        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Array::zeros(&[2, 3]), &Array::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&arr(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&arr(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&arr(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn pooling_examples() {
        let c = Array::full(&[8, 8, 3], 2.5);
        for stride in [1, 2, 4, 8] {
            let p = avg_pool_grid(&c, stride).unwrap();
            assert!(p.data().iter().all(|&v| v == 2.5));
        }
        let big = Array::zeros(&[28, 28, 1]);
        assert_eq!(avg_pool_grid(&big, 2).unwrap().shape(), &[14, 14, 1]);
        assert_eq!(avg_pool_grid(&big, 4).unwrap().shape(), &[7, 7, 1]);
        assert!(matches!(avg_pool_grid(&big, 3), Err(Error::Config(_))));
        assert!(matches!(avg_pool_grid(&big, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_over_time_examples() {
        let x = random(&[1, 4, 3], 5);
        assert_eq!(mean_over_time(&x).unwrap(), x);

        let f = random(&[1, 6], 6);
        let neg = f.scaled(-1.0).unwrap();
        let both = Array::new(vec![2, 6], [f.data(), neg.data()].concat()).unwrap();
        assert!(mean_over_time(&both).unwrap().data().iter().all(|&v| v == 0.0));

        let x = random(&[4, 5, 2], 7);
        let got = mean_over_time(&x).unwrap();
        for p in 0..10 {
            let naive: f64 = (0..4).map(|t| x.data()[t * 10 + p]).sum::<f64>() / 4.0;
            assert!((got.data()[p] - naive).abs() < 1e-15);
        }

        assert!(matches!(
            mean_over_time(&Array::zeros(&[0, 3])),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let p = random(&[3, 2], 9);
        let mut tape = Tape::new();
        let v = tape.leaf(p.clone());
        let loss = tape.sum(v);
        let g = backward(&tape, loss).unwrap();
        assert!(g.wrt(v).data().iter().all(|&x| x == 1.0));

        let mut tape = Tape::new();
        let v = tape.leaf(p.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = backward(&tape, loss).unwrap();
        assert!(g.wrt(v).max_abs_diff(&p).unwrap() < 1e-15);

        // unreached leaves get zero
        let mut tape = Tape::new();
        let a = tape.leaf(p.clone());
        let b = tape.leaf(p.clone());
        let loss = tape.sum(a);
        let g = backward(&tape, loss).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b), Array::zeros(&[3, 2]));

        assert!(matches!(backward(&tape, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tape_records_in_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(random(&[2, 2], 1));
        let b = tape.matmul(a, a).unwrap();
        let c = tape.softmax_rows(b);
        tape.sum(c);
        assert_eq!(
            tape.op_kinds(),
            vec![OpKind::Leaf, OpKind::MatMul, OpKind::SoftmaxRows, OpKind::Sum]
        );
    }

    /// Loss = Σ w ⊙ out with fixed random weights, so every output element
    /// carries a distinct gradient.
    fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
        let w = random(tape.shape(out), seed);
        let w = tape.leaf(w);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }

    fn assert_passes(report: &[gradcheck::InputCheck]) {
        for (i, r) in report.iter().enumerate() {
            assert!(r.max_relative_error < 1e-4, "input {i}: {r:?}");
        }
    }

    fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
        (1usize..=6, 1usize..=6, 1usize..=6, any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grad_matmul_transpose((m, k, n, seed) in dims()) {
            let r = check(|t, v| {
                let bt = t.transpose(v[1])?;
                let y = t.matmul(v[0], bt)?;
                weighted(t, y, seed ^ 1)
            }, &[random(&[m, k], seed), random(&[n, k], seed + 1)], 1e-5).unwrap();
            assert_passes(&r);
        }

        #[test]
        fn grad_elementwise((m, n, _, seed) in dims()) {
            let r = check(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, v[1])?;
                let d = t.scale(c, 0.7);
                let e = t.gelu(d);
                weighted(t, e, seed ^ 2)
            }, &[random(&[m, n], seed), random(&[m, n], seed + 1), random(&[m, n], seed + 2)], 1e-5).unwrap();
            assert_passes(&r);
        }

        #[test]
        fn grad_softmax_layer_norm((m, n, _, seed) in dims()) {
            let n = n + 1;
            let r = check(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let y = t.add_row(y, v[2])?;
                let s = t.softmax_rows(y);
                weighted(t, s, seed ^ 3)
            }, &[random(&[m, n], seed).scaled(3.0).unwrap(), random(&[n], seed + 1), random(&[n], seed + 2)], 1e-5).unwrap();
            assert_passes(&r);
        }

        #[test]
        fn grad_pooling_and_time_mean(t_len in 1usize..=4, side in 1usize..=3, d in 1usize..=4, seed in any::<u64>()) {
            let g = side * 2;
            let r = check(|t, v| {
                let p = t.avg_pool_grid(v[0], 2)?;
                let m = t.mean_over_time(p)?;
                weighted(t, m, seed ^ 4)
            }, &[random(&[t_len, g, g, d], seed)], 1e-5).unwrap();
            assert_passes(&r);
        }

        #[test]
        fn grad_structural((m, n, k, seed) in dims()) {
            let r = check(|t, v| {
                let rows = t.concat_rows(&[v[0], v[1]])?;
                let sl = t.slice_rows(rows, 1, m)?;
                let c = t.cols(sl, 0, 1)?;
                let wide = t.concat_cols(&[sl, c])?;
                let rep = t.repeat_rows(wide, k)?;
                let flat = t.reshape(rep, &[m * k * (n + 1)])?;
                weighted(t, flat, seed ^ 5)
            }, &[random(&[m, n], seed), random(&[m, n], seed + 1)], 1e-5).unwrap();
            assert_passes(&r);
        }

        #[test]
        fn grad_cross_entropy(n in 2usize..=6, seed in any::<u64>()) {
            let label = (seed % n as u64) as usize;
            let r = check(|t, v| {
                let l = t.cross_entropy(v[0], label)?;
                let m = t.mean(v[0]);
                t.add(l, m)
            }, &[random(&[1, n], seed).scaled(4.0).unwrap()], 1e-5).unwrap();
            assert_passes(&r);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(m in 1usize..=6, n in 1usize..=6, shift in -50.0f64..50.0, seed in any::<u64>()) {
            let x = random(&[m, n], seed).scaled(20.0).unwrap();
            let s = softmax_rows(&x).unwrap();
            for row in s.data().chunks(n) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let shifted = softmax_rows(&x.map(|v| v + shift).unwrap()).unwrap();
            prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
        }

        #[test]
        fn pooling_commutes_with_time_mean(t_len in 1usize..=5, side in 1usize..=3, d in 1usize..=4, stride in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
            let g = side * 4;
            let x = random(&[t_len, g, g, d], seed);
            let a = mean_over_time(&avg_pool_grid(&x, stride).unwrap()).unwrap();
            let b = avg_pool_grid(&mean_over_time(&x).unwrap(), stride).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }

        #[test]
        fn ops_are_deterministic(m in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
            let run = || {
                let mut t = Tape::new();
                let a = t.leaf(random(&[m, n], seed));
                let at = t.transpose(a).unwrap();
                let p = t.matmul(a, at).unwrap();
                let s = t.softmax_rows(p);
                let l = t.sum(s);
                let g = t.backward(l).unwrap();
                (t.value(s).clone(), g.wrt(a))
            };
            let (s1, g1) = run();
            let (s2, g2) = run();
            prop_assert!(s1.bit_eq(&s2));
            prop_assert!(g1.bit_eq(&g2));
        }
    }
}

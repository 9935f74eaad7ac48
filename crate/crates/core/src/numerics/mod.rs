//! Dense `f64` arrays, a reverse-mode tape, and a central-difference gradient oracle.

mod store;
mod tape;
mod tensor;

pub use store::{GradientSet, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_sum_exp, softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Builds the computation on a fresh tape, then returns the scalar loss and
/// the gradient of every parameter the computation bound.
///
/// Parameters in the store that the computation never touches get zero gradients.
pub fn forward_backward<F, E>(store: &ParameterStore, computation: F) -> Result<(f64, GradientSet), E>
where
    F: FnOnce(&mut Tape, &ParameterStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    run_backward(store, computation, true)
}

fn run_backward<F, E>(store: &ParameterStore, computation: F, flip: bool) -> Result<(f64, GradientSet), E>
where
    F: FnOnce(&mut Tape, &ParameterStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let root = computation(&mut tape, store)?;
    let loss_shape = tape.value(root).shape().to_vec();
    if tape.value(root).len() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "forward_backward",
            shapes: vec![loss_shape],
        }
        .into());
    }
    let loss = tape.scalar(root);
    let grads = if flip { tape.backward(root)? } else { tape.backward_unreversed(root)? };
    let mut out = GradientSet::zeros_like(store);
    for (name, var) in tape.bound_params() {
        if let Some(g) = grads.get(*var) {
            out.accumulate(name, g);
        }
    }
    Ok((loss, out))
}

/// Forward-only evaluation of a scalar computation.
pub fn evaluate<F, E>(store: &ParameterStore, computation: F) -> Result<f64, E>
where
    F: FnOnce(&mut Tape, &ParameterStore) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let root = computation(&mut tape, store)?;
    Ok(tape.scalar(root))
}

/// Max over parameter entries of `|analytic - central| / max(1, |analytic|)`.
///
/// The analytic side is the true gradient: reversal nodes pass gradients
/// through unchanged, since central differences cannot see them.
pub fn finite_difference_check<F, E>(store: &ParameterStore, step: f64, computation: F) -> Result<f64, E>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidStep(step).into());
    }
    let (_, analytic) = run_backward(store, &computation, false)?;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for name in store.names() {
        let n = store.get(name).map(Tensor::len).unwrap_or(0);
        for i in 0..n {
            let original = store.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + step;
            let plus = evaluate(&probe, &computation)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - step;
            let minus = evaluate(&probe, &computation)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(name).map(|g| g.data()[i]).unwrap_or(0.0);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn square_loss_and_gradient() {
        let s = store_with("w", Tensor::scalar(3.0));
        let (loss, g) = forward_backward(&s, |t, s| {
            let w = t.param(s, "w")?;
            t.mul(w, w)
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(g.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_softmax_of_symmetric_pair() {
        let s = store_with("w", Tensor::scalar(0.0));
        let (loss, g) = forward_backward(&s, |t, s| {
            let w = t.param(s, "w")?;
            let z = t.constant(Tensor::new(vec![1, 1], vec![0.0])?)?;
            let w2 = t.slice_cols(w, 0, 1)?;
            let row = t.concat_cols(&[w2, z])?;
            let ls = t.log_softmax_rows(row)?;
            let first = t.gather(ls, vec![0])?;
            t.sum(first)
        })
        .unwrap();
        assert!((loss - 0.5f64.ln()).abs() < 1e-15);
        assert!((g.get("w").unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn square_passes_fd_check() {
        let s = store_with("w", Tensor::scalar(3.0));
        let err = finite_difference_check(&s, 1e-5, |t, s| {
            let w = t.param(s, "w")?;
            t.mul(w, w)
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let s = store_with("w", Tensor::scalar(1.7));
        let (_, g) = forward_backward(&s, |t, _| t.constant(Tensor::scalar(4.0))).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.0]);
        let err = finite_difference_check(&s, 1e-5, |t, _| t.constant(Tensor::scalar(4.0))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let s = store_with("w", Tensor::scalar(1.0));
        let r = finite_difference_check(&s, 0.0, |t, s| t.param(s, "w"));
        assert_eq!(r, Err(NumericsError::InvalidStep(0.0)));
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        match t.matmul(a, b) {
            Err(NumericsError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_names_operation() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.0)).unwrap();
        assert_eq!(t.log(a), Err(NumericsError::NonFinite { op: "log" }));
    }

    fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            s.insert(name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
        }
        s
    }

    // 3-layer tanh network with exactly 20 parameters: 2->3 (6+3), 3->2 (6+2), 2->1 (2+1).
    #[test]
    fn tanh_network_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_store(
            &mut rng,
            &[
                ("w1", &[2, 3]),
                ("b1", &[3]),
                ("w2", &[3, 2]),
                ("b2", &[2]),
                ("w3", &[2, 1]),
                ("b3", &[1]),
            ],
        );
        assert_eq!(s.total_len(), 20);
        let input = Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let net = |t: &mut Tape, s: &ParameterStore| {
            let x = t.constant(input.clone())?;
            let mut h = x;
            for (w, b) in [("w1", "b1"), ("w2", "b2"), ("w3", "b3")] {
                let wv = t.param(s, w)?;
                let bv = t.param(s, b)?;
                let z = t.matmul(h, wv)?;
                let z = t.add_row_vec(z, bv)?;
                h = t.tanh(z)?;
            }
            t.sum(h)
        };
        let err = finite_difference_check(&s, 1e-5, net).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    // Every primitive, exercised on random inputs in [-2, 2].
    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_store(&mut rng, &[("a", &[3, 4]), ("b", &[3, 4]), ("m", &[4, 2]), ("v", &[4]), ("c", &[3])]);
        let mask = Tensor::matrix(3, 4, (0..12).map(|i| (i % 3) as f64 * 0.5).collect()).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &ParameterStore) -> Result<Var, NumericsError>>)> = vec![
            ("add", Box::new(|t, s| { let a = t.param(s, "a")?; let b = t.param(s, "b")?; let r = t.add(a, b)?; let r = t.tanh(r)?; t.sum(r) })),
            ("sub", Box::new(|t, s| { let a = t.param(s, "a")?; let b = t.param(s, "b")?; let r = t.sub(a, b)?; let r = t.mul(r, r)?; t.sum(r) })),
            ("mul", Box::new(|t, s| { let a = t.param(s, "a")?; let b = t.param(s, "b")?; let r = t.mul(a, b)?; t.sum(r) })),
            ("matmul", Box::new(|t, s| { let a = t.param(s, "a")?; let m = t.param(s, "m")?; let r = t.matmul(a, m)?; let r = t.sigmoid(r)?; t.sum(r) })),
            ("row_vec", Box::new(|t, s| { let a = t.param(s, "a")?; let v = t.param(s, "v")?; let r = t.add_row_vec(a, v)?; let r = t.tanh(r)?; t.sum(r) })),
            ("col_vec", Box::new(|t, s| { let a = t.param(s, "a")?; let c = t.param(s, "c")?; let r = t.add_col_vec(a, c)?; let r = t.tanh(r)?; t.sum(r) })),
            ("concat_slice", Box::new(|t, s| { let a = t.param(s, "a")?; let b = t.param(s, "b")?; let r = t.concat_cols(&[a, b])?; let r = t.slice_cols(r, 2, 7)?; let q = t.concat_rows(&[r, r])?; let q = t.slice_rows(q, 1, 5)?; let q = t.tanh(q)?; t.sum(q) })),
            ("transpose", Box::new(|t, s| { let a = t.param(s, "a")?; let at = t.transpose(a)?; let r = t.matmul(at, a)?; let r = t.tanh(r)?; t.sum(r) })),
            ("exp_log", Box::new(|t, s| { let a = t.param(s, "a")?; let e = t.exp(a)?; let l = t.log(e)?; let r = t.mul(l, e)?; t.sum(r) })),
            ("lse", Box::new(|t, s| { let a = t.param(s, "a")?; let r = t.log_sum_exp_rows(a)?; let r = t.mul(r, r)?; t.sum(r) })),
            ("softmax", Box::new(|t, s| { let a = t.param(s, "a")?; let b = t.param(s, "b")?; let p = t.softmax_rows(a)?; let r = t.mul(p, b)?; t.sum(r) })),
            ("gather", Box::new(|t, s| { let a = t.param(s, "a")?; let r = t.gather(a, vec![0, 5, 5, 11])?; let r = t.tanh(r)?; t.sum(r) })),
            ("gather_rows", Box::new(|t, s| { let m = t.param(s, "m")?; let r = t.gather_rows(m, vec![3, 0, 3])?; let r = t.tanh(r)?; t.sum(r) })),
            ("mask", Box::new(|t, s| { let a = t.param(s, "a")?; let r = t.mask(a, mask.clone())?; let r = t.tanh(r)?; t.sum(r) })),
            ("mask_rows", Box::new(|t, s| { let a = t.param(s, "a")?; let r = t.mask_rows(a, vec![1.0, 0.0, -0.5])?; let r = t.tanh(r)?; t.sum(r) })),
            ("reverse", Box::new(|t, s| { let a = t.param(s, "a")?; let r = t.reverse_gradient(a)?; let r = t.tanh(r)?; t.sum(r) })),
        ];
        for (name, f) in cases {
            let err = finite_difference_check(&s, 1e-5, &f).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn reversal_flips_sign_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, &[("a", &[2, 3]), ("m", &[3, 2])]);
        let run = |reverse: bool| {
            forward_backward(&s, |t, s| {
                let a = t.param(s, "a")?;
                let a = if reverse { t.reverse_gradient(a)? } else { a };
                let m = t.param(s, "m")?;
                let r = t.matmul(a, m)?;
                let r = t.tanh(r)?;
                t.sum(r)
            })
            .unwrap()
            .1
        };
        let (with, without) = (run(true), run(false));
        for (x, y) in with.get("a").unwrap().data().iter().zip(without.get("a").unwrap().data()) {
            assert_eq!(*x, -*y);
        }
        assert_eq!(with.get("m"), without.get("m"));
    }

    #[test]
    fn unreversed_sweep_on_the_same_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_store(&mut rng, &[("a", &[2, 3]), ("m", &[3, 2])]);
        let mut t = Tape::new();
        let a = t.param(&s, "a").unwrap();
        let r = t.reverse_gradient(a).unwrap();
        let m = t.param(&s, "m").unwrap();
        let r = t.matmul(r, m).unwrap();
        let r = t.tanh(r).unwrap();
        let root = t.sum(r).unwrap();
        let flipped = t.backward(root).unwrap();
        let plain = t.backward_unreversed(root).unwrap();
        let (x, y) = (flipped.get(a).unwrap(), plain.get(a).unwrap());
        assert!(x.max_abs() > 0.0);
        for (p, q) in x.data().iter().zip(y.data()) {
            assert_eq!(*p, -*q);
        }
        assert_eq!(flipped.get(m), plain.get(m));
    }

    #[test]
    fn deterministic_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_store(&mut rng, &[("a", &[3, 4]), ("m", &[4, 2])]);
        let f = |t: &mut Tape, s: &ParameterStore| {
            let a = t.param(s, "a")?;
            let m = t.param(s, "m")?;
            let r = t.matmul(a, m)?;
            let r = t.log_softmax_rows(r)?;
            t.sum(r)
        };
        let first = forward_backward(&s, f).unwrap();
        let second = forward_backward(&s, f).unwrap();
        assert_eq!(first.0.to_bits(), second.0.to_bits());
        assert_eq!(first.1, second.1);
    }
}

use super::crf::{CrfParameters, NUM_TAGS};
use super::{Latent, ModelError};
use crate::corpus::IGNORE_LABEL;
use crate::numerics::{ParameterStore, Tape, Tensor, Var};

/// How gradients leave the discriminator toward the latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientFlow {
    Reverse,
    /// Only for checks against the reversal layer.
    Identity,
}

fn affine(tape: &mut Tape, store: &ParameterStore, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
    let w = tape.param(store, w)?;
    let b = tape.param(store, b)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row_vec(y, b)?)
}

/// KI emission scores, time-major `[T*B, 3]`.
pub fn emissions(tape: &mut Tape, store: &ParameterStore, latent: &Latent) -> Result<Var, ModelError> {
    affine(tape, store, latent.var, "ki.w", "ki.b")
}

/// KC logits, time-major `[T*B, n_types + 1]`.
pub fn kc_logits(tape: &mut Tape, store: &ParameterStore, latent: &Latent) -> Result<Var, ModelError> {
    affine(tape, store, latent.var, "kc.w", "kc.b")
}

/// Mean token cross-entropy of the KC head; `labels` is batch-major.
pub fn kc_loss(tape: &mut Tape, store: &ParameterStore, latent: &Latent, labels: &[usize]) -> Result<Var, ModelError> {
    let logits = kc_logits(tape, store, latent)?;
    let classes = tape.value(logits).shape()[1];
    let mut idx = Vec::new();
    for b in 0..latent.batch {
        for t in 0..latent.max_len {
            if latent.mask[b * latent.max_len + t] == 0 {
                continue;
            }
            let y = labels[b * latent.max_len + t];
            if y == IGNORE_LABEL || y >= classes {
                return Err(ModelError::InvalidLabel(y));
            }
            idx.push(latent.row(b, t) * classes + y);
        }
    }
    if idx.is_empty() {
        return Err(ModelError::NoTokens);
    }
    let n = idx.len();
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.gather(logp, idx)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Mask-weighted mean pooling as a constant `[B, T*B]` matrix product.
fn pool(tape: &mut Tape, latent: &Latent) -> Result<Var, ModelError> {
    let rows = latent.batch * latent.max_len;
    let mut p = vec![0.0; latent.batch * rows];
    for b in 0..latent.batch {
        let n = (0..latent.max_len).filter(|&t| latent.mask[b * latent.max_len + t] == 1).count();
        if n == 0 {
            return Err(ModelError::EmptySequence(b));
        }
        for t in 0..latent.max_len {
            if latent.mask[b * latent.max_len + t] == 1 {
                p[b * rows + latent.row(b, t)] = 1.0 / n as f64;
            }
        }
    }
    let p = tape.constant(Tensor::new(vec![latent.batch, rows], p)?)?;
    Ok(tape.matmul(p, latent.var)?)
}

/// Discriminator logits `[B, K]` over pooled document vectors.
pub fn domain_logits(tape: &mut Tape, store: &ParameterStore, latent: &Latent, flow: GradientFlow) -> Result<Var, ModelError> {
    let pooled = pool(tape, latent)?;
    let x = match flow {
        GradientFlow::Reverse => tape.reverse_gradient(pooled)?,
        GradientFlow::Identity => pooled,
    };
    let h = affine(tape, store, x, "disc.w1", "disc.b1")?;
    let h = tape.tanh(h)?;
    affine(tape, store, h, "disc.w2", "disc.b2")
}

/// Mean document cross-entropy of the domain discriminator. The lambda
/// weight is applied by the caller when composing the total loss.
pub fn domain_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    latent: &Latent,
    domains: &[usize],
    flow: GradientFlow,
) -> Result<Var, ModelError> {
    let logits = domain_logits(tape, store, latent, flow)?;
    let k = tape.value(logits).shape()[1];
    if k < 2 {
        return Err(ModelError::TooFewDomains(k));
    }
    if domains.len() != latent.batch {
        return Err(ModelError::Shape(format!("{} domain labels for batch {}", domains.len(), latent.batch)));
    }
    if let Some(&bad) = domains.iter().find(|&&d| d >= k) {
        return Err(ModelError::InvalidLabel(bad));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let idx = domains.iter().enumerate().map(|(b, &d)| b * k + d).collect();
    let picked = tape.gather(logp, idx)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / latent.batch as f64)?)
}

/// Per-document predictions over real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// BIO tag ids from Viterbi decoding.
    pub ki: Vec<usize>,
    /// Argmax KC class ids (0 = O).
    pub kc: Vec<usize>,
}

/// Decodes KI by Viterbi and KC by argmax from an already encoded latent.
pub fn predict(
    tape: &mut Tape,
    store: &ParameterStore,
    latent: &Latent,
    constrained: bool,
) -> Result<Vec<Prediction>, ModelError> {
    let crf = CrfParameters::from_store(store, constrained)?;
    let em = emissions(tape, store, latent)?;
    let kc = kc_logits(tape, store, latent)?;
    let em = tape.value(em).clone();
    let kc = tape.value(kc).clone();
    let classes = kc.shape()[1];
    let mut out = Vec::with_capacity(latent.batch);
    for b in 0..latent.batch {
        let n = latent.lengths[b];
        if n == 0 {
            return Err(ModelError::EmptySequence(b));
        }
        let rows: Vec<[f64; NUM_TAGS]> = (0..n)
            .map(|t| {
                let o = latent.row(b, t) * NUM_TAGS;
                [em.data()[o], em.data()[o + 1], em.data()[o + 2]]
            })
            .collect();
        let ki = crf.viterbi(&rows);
        let kc = (0..n)
            .map(|t| {
                let row = &kc.data()[latent.row(b, t) * classes..(latent.row(b, t) + 1) * classes];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        out.push(Prediction { ki, kc });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, forward_backward};

    /// A constant latent with the given batch-major rows.
    fn latent(tape: &mut Tape, rows: &[&[f64]], batch: usize, len: usize, mask: Vec<u8>) -> Latent {
        let width = rows[0].len();
        let mut data = vec![0.0; batch * len * width];
        for b in 0..batch {
            for t in 0..len {
                data[(t * batch + b) * width..(t * batch + b + 1) * width].copy_from_slice(rows[b * len + t]);
            }
        }
        let lengths = (0..batch)
            .map(|b| mask[b * len..(b + 1) * len].iter().filter(|&&m| m == 1).count())
            .collect();
        Latent {
            var: tape.input(Tensor::new(vec![batch * len, width], data).unwrap()).unwrap(),
            batch,
            max_len: len,
            width,
            mask,
            lengths,
        }
    }

    fn store(width: usize, classes: usize, hidden: usize, k: usize, seed: u64) -> ParameterStore {
        let mut s = ParameterStore::new();
        let mut x = seed as f64 + 0.37;
        let mut next = || {
            x = (x * 7.31 + 0.123).fract();
            x - 0.5
        };
        for (name, shape) in [
            ("kc.w", vec![width, classes]),
            ("kc.b", vec![classes]),
            ("disc.w1", vec![width, hidden]),
            ("disc.b1", vec![hidden]),
            ("disc.w2", vec![hidden, k]),
            ("disc.b2", vec![k]),
        ] {
            let n = shape.iter().product();
            s.insert(name, Tensor::new(shape, (0..n).map(|_| next()).collect()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn kc_loss_uniform_logits_is_log2() {
        let mut s = store(2, 2, 2, 2, 0);
        *s.get_mut("kc.w").unwrap() = Tensor::zeros(&[2, 2]);
        *s.get_mut("kc.b").unwrap() = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let l = latent(&mut tape, &[&[1.0, 2.0]], 1, 1, vec![1]);
        let loss = kc_loss(&mut tape, &s, &l, &[0]).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kc_loss_vanishes_with_margin() {
        let mut s = store(1, 2, 2, 2, 0);
        *s.get_mut("kc.w").unwrap() = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        *s.get_mut("kc.b").unwrap() = Tensor::vector(vec![0.0, 60.0]);
        let mut tape = Tape::new();
        let l = latent(&mut tape, &[&[1.0]], 1, 1, vec![1]);
        let loss = kc_loss(&mut tape, &s, &l, &[1]).unwrap();
        assert!(tape.scalar(loss) < 1e-20);
    }

    #[test]
    fn kc_loss_matches_hand_rolled_cross_entropy() {
        let s = store(2, 3, 2, 2, 4);
        let rows: [&[f64]; 4] = [&[0.3, -1.2], &[2.0, 0.5], &[-0.7, 0.1], &[9.0, 9.0]];
        let labels = [2, 0, 1, IGNORE_LABEL];
        let mut tape = Tape::new();
        let l = latent(&mut tape, &rows, 2, 2, vec![1, 1, 1, 0]);
        let loss = kc_loss(&mut tape, &s, &l, &labels).unwrap();
        let got = tape.scalar(loss);

        let w = s.get("kc.w").unwrap().data();
        let bias = s.get("kc.b").unwrap().data();
        let mut expected = 0.0;
        for (x, &y) in rows.iter().zip(&labels).take(3) {
            let z: Vec<f64> = (0..3).map(|j| bias[j] + x[0] * w[j] + x[1] * w[3 + j]).collect();
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            expected -= (z[y].exp() / norm).ln();
        }
        expected /= 3.0;
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn kc_loss_rejects_all_masked() {
        let s = store(1, 2, 2, 2, 0);
        let mut tape = Tape::new();
        let l = latent(&mut tape, &[&[1.0]], 1, 1, vec![0]);
        assert!(matches!(kc_loss(&mut tape, &s, &l, &[0]), Err(ModelError::NoTokens)));
    }

    #[test]
    fn domain_loss_needs_two_domains() {
        let s = store(1, 2, 2, 1, 0);
        let mut tape = Tape::new();
        let l = latent(&mut tape, &[&[1.0]], 1, 1, vec![1]);
        assert!(matches!(
            domain_loss(&mut tape, &s, &l, &[0], GradientFlow::Reverse),
            Err(ModelError::TooFewDomains(1))
        ));
    }

    #[test]
    fn reversal_negates_latent_gradient_exactly() {
        let s = store(2, 2, 3, 2, 1);
        let rows: [&[f64]; 4] = [&[0.3, -1.2], &[2.0, 0.5], &[-0.7, 0.1], &[0.0, 0.0]];
        let grad = |flow| {
            let mut tape = Tape::new();
            let l = latent(&mut tape, &rows, 2, 2, vec![1, 1, 1, 0]);
            let loss = domain_loss(&mut tape, &s, &l, &[1, 0], flow).unwrap();
            let g = tape.backward(loss).unwrap();
            let disc = g.get_or_zeros(&tape, tape.bound_params()[0].1);
            (g.get_or_zeros(&tape, l.var), disc)
        };
        let (rev, rev_disc) = grad(GradientFlow::Reverse);
        let (id, id_disc) = grad(GradientFlow::Identity);
        assert!(id.max_abs() > 0.0);
        for (a, b) in rev.data().iter().zip(id.data()) {
            assert_eq!(*a, -*b);
        }
        assert_eq!(rev_disc, id_disc);
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        let s = store(2, 3, 3, 2, 7);
        let rows: [&[f64]; 4] = [&[0.3, -1.2], &[2.0, 0.5], &[-0.7, 0.1], &[0.0, 0.0]];
        let err = finite_difference_check(&s, 1e-5, |tape, s| -> Result<Var, ModelError> {
            let l = latent(tape, &rows, 2, 2, vec![1, 1, 1, 0]);
            let a = kc_loss(tape, s, &l, &[2, 0, 1, IGNORE_LABEL])?;
            let b = domain_loss(tape, s, &l, &[1, 0], GradientFlow::Identity)?;
            Ok(tape.add(a, b)?)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn discriminator_learns_separable_latents() {
        // frozen encoder: the latents are fixed, only the discriminator trains
        let n = 40;
        let mut docs = Vec::new();
        let mut labels = Vec::new();
        let mut x = 0.4567f64;
        for i in 0..n {
            let d = i % 2;
            let mut row = Vec::new();
            for _ in 0..4 {
                x = (x * 9.17 + 0.31).fract();
                row.push(x - 0.5);
            }
            row[0] += if d == 0 { 1.0 } else { -1.0 };
            docs.push(row);
            labels.push(d);
        }
        let mut s = store(4, 2, 6, 2, 3);
        let refs: Vec<&[f64]> = docs.iter().map(|r| r.as_slice()).collect();
        for _ in 0..300 {
            let (_, g) = forward_backward(&s, |tape, s| -> Result<Var, ModelError> {
                let l = latent(tape, &refs, n, 1, vec![1; n]);
                domain_loss(tape, s, &l, &labels, GradientFlow::Reverse)
            })
            .unwrap();
            for (name, gt) in g.iter() {
                let p = s.get_mut(name).unwrap();
                for (v, d) in p.data_mut().iter_mut().zip(gt.data()) {
                    *v -= 0.5 * d;
                }
            }
        }
        let mut tape = Tape::new();
        let l = latent(&mut tape, &refs, n, 1, vec![1; n]);
        let logits = domain_logits(&mut tape, &s, &l, GradientFlow::Reverse).unwrap();
        let v = tape.value(logits).data();
        let correct = (0..n).filter(|&i| (v[2 * i + 1] > v[2 * i]) as usize == labels[i]).count();
        assert!(correct as f64 / n as f64 >= 0.9, "{correct}/{n}");
    }
}

//! Multiplicative-update NMF under the squared Frobenius loss.

use std::collections::BTreeMap;

use rand::Rng;

use super::{seeded, BowMatrix, TopicError, TopicKind, TopicModelFit};
use crate::numerics::Tensor;

/// Objective value after initialization and after every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct NmfTrace {
    pub objective: Vec<f64>,
    /// Whether both factors stayed entrywise non-negative at every iteration.
    pub nonnegative: bool,
}

/// `||V - W H||_F^2` for `V: [n, m]`, `W: [n, k]`, `H: [k, m]`.
pub fn frobenius_objective(v: &[f64], w: &[f64], h: &[f64], n: usize, m: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let approx: f64 = (0..k).map(|t| w[i * k + t] * h[t * m + j]).sum();
            total += (v[i * m + j] - approx).powi(2);
        }
    }
    total
}

fn update_h(v: &[f64], w: &[f64], h: &mut [f64], n: usize, m: usize, k: usize) {
    // H <- H * (W^T V) / (W^T W H)
    let mut wtw = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            wtw[a * k + b] = (0..n).map(|i| w[i * k + a] * w[i * k + b]).sum();
        }
    }
    let mut next = h.to_vec();
    for t in 0..k {
        for j in 0..m {
            let num: f64 = (0..n).map(|i| w[i * k + t] * v[i * m + j]).sum();
            let den: f64 = (0..k).map(|s| wtw[t * k + s] * h[s * m + j]).sum();
            if den > 0.0 {
                next[t * m + j] = h[t * m + j] * num / den;
            }
        }
    }
    h.copy_from_slice(&next);
}

fn update_w(v: &[f64], w: &mut [f64], h: &[f64], n: usize, m: usize, k: usize) {
    // W <- W * (V H^T) / (W H H^T)
    let mut hht = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            hht[a * k + b] = (0..m).map(|j| h[a * m + j] * h[b * m + j]).sum();
        }
    }
    let mut next = w.to_vec();
    for i in 0..n {
        for t in 0..k {
            let num: f64 = (0..m).map(|j| v[i * m + j] * h[t * m + j]).sum();
            let den: f64 = (0..k).map(|s| w[i * k + s] * hht[s * k + t]).sum();
            if den > 0.0 {
                next[i * k + t] = w[i * k + t] * num / den;
            }
        }
    }
    w.copy_from_slice(&next);
}

/// Factorizes raw counts: theta = W `[docs, K]`, phi = H `[K, terms]`.
pub fn fit_nmf(bow: &BowMatrix, k: usize, iterations: usize, seed: u64) -> Result<(TopicModelFit, NmfTrace), TopicError> {
    let (n, m) = (bow.docs, bow.vocab_size());
    let (w, h, trace) = factorize(&bow.counts, n, m, k, iterations, seed)?;
    let mut hyper = BTreeMap::new();
    hyper.insert("iterations".to_string(), iterations as f64);
    hyper.insert("objective".to_string(), *trace.objective.last().unwrap_or(&0.0));
    Ok((
        TopicModelFit {
            kind: TopicKind::Nmf,
            k,
            theta: Tensor::new(vec![n, k], w).expect("shape"),
            phi: Tensor::new(vec![k, m], h).expect("shape"),
            seed,
            hyperparameters: hyper,
            terms: bow.terms.clone(),
            idf: None,
        },
        trace,
    ))
}

/// Dense entry point used by [`fit_nmf`]; returns `(W, H, trace)`.
pub fn factorize(
    v: &[f64],
    n: usize,
    m: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, NmfTrace), TopicError> {
    if k == 0 {
        return Err(TopicError::InvalidTopicCount(k));
    }
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(TopicError::InvalidHyperparameter("entries must be finite and non-negative".into()));
    }
    if !v.iter().any(|&x| x > 0.0) {
        return Err(TopicError::AllZero);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let scale = (mean / k as f64).sqrt();
    let mut rng = seeded(seed);
    let mut w: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..1.0) * scale + 1e-6).collect();
    let mut h: Vec<f64> = (0..k * m).map(|_| rng.gen_range(0.0..1.0) * scale + 1e-6).collect();
    let mut objective = vec![frobenius_objective(v, &w, &h, n, m, k)];
    let mut nonnegative = true;
    for _ in 0..iterations {
        update_h(v, &w, &mut h, n, m, k);
        update_w(v, &mut w, &h, n, m, k);
        nonnegative &= w.iter().chain(&h).all(|&x| x >= 0.0);
        objective.push(frobenius_objective(v, &w, &h, n, m, k));
    }
    Ok((w, h, NmfTrace { objective, nonnegative }))
}

/// Non-negative loadings of one row against a fixed basis.
pub(crate) fn fold_in(phi: &[f64], k: usize, m: usize, counts: &[f64], iterations: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut hht = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            hht[a * k + b] = (0..m).map(|j| phi[a * m + j] * phi[b * m + j]).sum();
        }
    }
    let num: Vec<f64> = (0..k).map(|t| (0..m).map(|j| counts[j] * phi[t * m + j]).sum()).collect();
    for _ in 0..iterations {
        let next: Vec<f64> = (0..k)
            .map(|t| {
                let den: f64 = (0..k).map(|s| w[s] * hht[s * k + t]).sum();
                if den > 0.0 {
                    w[t] * num[t] / den
                } else {
                    w[t]
                }
            })
            .collect();
        w = next;
    }
    w
}

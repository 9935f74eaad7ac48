//! Collapsed Gibbs sampling for LDA.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{sample_discrete, seeded, BowMatrix, TopicError, TopicKind, TopicModelFit};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdaParams {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// Sampler state: token-topic assignments and the three count tables.
pub struct GibbsState {
    k: usize,
    v: usize,
    alpha: f64,
    beta: f64,
    words: Vec<Vec<usize>>,
    z: Vec<Vec<usize>>,
    n_dk: Vec<u32>,
    n_kw: Vec<u32>,
    n_k: Vec<u32>,
    rng: ChaCha8Rng,
}

impl GibbsState {
    fn new(bow: &BowMatrix, p: &LdaParams) -> Self {
        let v = bow.vocab_size();
        let k = p.k;
        let mut rng = seeded(p.seed);
        let words: Vec<Vec<usize>> = (0..bow.docs)
            .map(|d| {
                bow.row(d)
                    .iter()
                    .enumerate()
                    .flat_map(|(w, &c)| std::iter::repeat(w).take(c.round() as usize))
                    .collect()
            })
            .collect();
        let mut n_dk = vec![0u32; bow.docs * k];
        let mut n_kw = vec![0u32; k * v];
        let mut n_k = vec![0u32; k];
        let uniform = vec![1.0; k];
        let z = words
            .iter()
            .enumerate()
            .map(|(d, ws)| {
                ws.iter()
                    .map(|&w| {
                        let t = sample_discrete(&mut rng, &uniform);
                        n_dk[d * k + t] += 1;
                        n_kw[t * v + w] += 1;
                        n_k[t] += 1;
                        t
                    })
                    .collect()
            })
            .collect();
        GibbsState {
            k,
            v,
            alpha: p.alpha,
            beta: p.beta,
            words,
            z,
            n_dk,
            n_kw,
            n_k,
            rng,
        }
    }

    /// One full sweep over every token.
    pub fn sweep(&mut self) {
        let (k, v) = (self.k, self.v);
        let vbeta = v as f64 * self.beta;
        let mut p = vec![0.0; k];
        for d in 0..self.words.len() {
            for i in 0..self.words[d].len() {
                let w = self.words[d][i];
                let old = self.z[d][i];
                self.n_dk[d * k + old] -= 1;
                self.n_kw[old * v + w] -= 1;
                self.n_k[old] -= 1;
                for (t, pt) in p.iter_mut().enumerate() {
                    *pt = (self.n_dk[d * k + t] as f64 + self.alpha) * (self.n_kw[t * v + w] as f64 + self.beta)
                        / (self.n_k[t] as f64 + vbeta);
                }
                let new = sample_discrete(&mut self.rng, &p);
                self.z[d][i] = new;
                self.n_dk[d * k + new] += 1;
                self.n_kw[new * v + w] += 1;
                self.n_k[new] += 1;
            }
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.words.iter().map(Vec::len).sum()
    }

    /// Totals of each count table; all three equal the token count when consistent.
    pub fn assignment_totals(&self) -> (u64, u64, u64) {
        let s = |xs: &[u32]| xs.iter().map(|&x| x as u64).sum::<u64>();
        (s(&self.n_dk), s(&self.n_kw), s(&self.n_k))
    }

    pub fn theta(&self) -> Tensor {
        let k = self.k;
        let docs = self.words.len();
        let mut out = vec![0.0; docs * k];
        for d in 0..docs {
            let nd = self.words[d].len() as f64;
            for t in 0..k {
                out[d * k + t] = (self.n_dk[d * k + t] as f64 + self.alpha) / (nd + k as f64 * self.alpha);
            }
        }
        Tensor::new(vec![docs, k], out).expect("docs, k > 0")
    }

    pub fn phi(&self) -> Tensor {
        let (k, v) = (self.k, self.v);
        let mut out = vec![0.0; k * v];
        for t in 0..k {
            let denom = self.n_k[t] as f64 + v as f64 * self.beta;
            for w in 0..v {
                out[t * v + w] = (self.n_kw[t * v + w] as f64 + self.beta) / denom;
            }
        }
        Tensor::new(vec![k, v], out).expect("k, v > 0")
    }
}

/// LDA by collapsed Gibbs sampling; estimates come from the final sample.
pub fn fit_lda(
    bow: &BowMatrix,
    k: usize,
    alpha: f64,
    beta: f64,
    iterations: usize,
    seed: u64,
) -> Result<TopicModelFit, TopicError> {
    fit_lda_observed(bow, LdaParams { k, alpha, beta, iterations, seed }, |_, _| {})
}

/// As [`fit_lda`], calling `observer(iteration, state)` after each sweep.
pub fn fit_lda_observed(
    bow: &BowMatrix,
    p: LdaParams,
    mut observer: impl FnMut(usize, &GibbsState),
) -> Result<TopicModelFit, TopicError> {
    if p.k < 2 {
        return Err(TopicError::InvalidTopicCount(p.k));
    }
    if !(p.alpha > 0.0) || !(p.beta > 0.0) {
        return Err(TopicError::InvalidHyperparameter("alpha and beta must be positive".into()));
    }
    if p.iterations == 0 {
        return Err(TopicError::InvalidHyperparameter("iterations must be at least 1".into()));
    }
    if p.k > bow.docs {
        log::warn!("K = {} exceeds the number of documents ({})", p.k, bow.docs);
    }
    let mut state = GibbsState::new(bow, &p);
    for it in 0..p.iterations {
        state.sweep();
        observer(it, &state);
    }
    let mut hyper = BTreeMap::new();
    hyper.insert("alpha".to_string(), p.alpha);
    hyper.insert("beta".to_string(), p.beta);
    hyper.insert("iterations".to_string(), p.iterations as f64);
    Ok(TopicModelFit {
        kind: TopicKind::Lda,
        k: p.k,
        theta: state.theta(),
        phi: state.phi(),
        seed: p.seed,
        hyperparameters: hyper,
        terms: bow.terms.clone(),
        idf: None,
    })
}

/// Gibbs sampling over one unseen document with phi held fixed.
pub(crate) fn fold_in(phi: &[f64], k: usize, v: usize, counts: &[f64], alpha: f64, sweeps: usize, seed: u64) -> Vec<f64> {
    let words: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(w, &c)| std::iter::repeat(w).take(c.round() as usize))
        .collect();
    if words.is_empty() {
        return vec![1.0 / k as f64; k];
    }
    let mut rng = seeded(seed);
    let mut n_k = vec![0usize; k];
    let uniform = vec![1.0; k];
    let mut z: Vec<usize> = words
        .iter()
        .map(|_| {
            let t = sample_discrete(&mut rng, &uniform);
            n_k[t] += 1;
            t
        })
        .collect();
    let mut p = vec![0.0; k];
    for _ in 0..sweeps {
        for (i, &w) in words.iter().enumerate() {
            n_k[z[i]] -= 1;
            for (t, pt) in p.iter_mut().enumerate() {
                *pt = (n_k[t] as f64 + alpha) * phi[t * v + w];
            }
            z[i] = sample_discrete(&mut rng, &p);
            n_k[z[i]] += 1;
        }
    }
    let n = words.len() as f64;
    n_k.iter().map(|&c| (c as f64 + alpha) / (n + k as f64 * alpha)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topics::assign_domains;

    fn planted() -> BowMatrix {
        // two documents over disjoint three-word vocabularies
        let terms = ["a", "b", "c", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let counts = vec![4.0, 3.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 4.0, 3.0];
        BowMatrix::from_dense(terms, 2, counts).unwrap()
    }

    #[test]
    fn planted_documents_separate() {
        let fit = fit_lda(&planted(), 2, 0.1, 0.01, 200, 1).unwrap();
        let labels = assign_domains(&fit);
        assert_ne!(labels[0], labels[1]);
    }

    #[test]
    fn rows_are_distributions() {
        let fit = fit_lda(&planted(), 2, 25.0, 0.01, 10, 9).unwrap();
        for r in 0..2 {
            let s: f64 = fit.theta.data()[r * 2..r * 2 + 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let s: f64 = fit.phi.data()[r * 6..r * 6 + 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_fit() {
        let a = fit_lda(&planted(), 2, 0.5, 0.01, 30, 42).unwrap();
        let b = fit_lda(&planted(), 2, 0.5, 0.01, 30, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_conserved_every_sweep() {
        let bow = planted();
        let p = LdaParams { k: 3, alpha: 1.0, beta: 0.1, iterations: 25, seed: 4 };
        fit_lda_observed(&bow, p, |_, s| {
            let n = s.total_tokens() as u64;
            assert_eq!(s.assignment_totals(), (n, n, n));
        })
        .unwrap();
    }

    #[test]
    fn invalid_arguments() {
        let bow = planted();
        assert!(fit_lda(&bow, 1, 1.0, 0.1, 10, 0).is_err());
        assert!(fit_lda(&bow, 2, 0.0, 0.1, 10, 0).is_err());
        assert!(fit_lda(&bow, 2, 1.0, 0.1, 0, 0).is_err());
        // K above document count is allowed
        assert!(fit_lda(&bow, 3, 1.0, 0.1, 5, 0).is_ok());
    }

    #[test]
    fn fold_in_prefers_matching_topic() {
        let fit = fit_lda(&planted(), 2, 0.1, 0.01, 200, 1).unwrap();
        let labels = assign_domains(&fit);
        let unseen = fit.assign_unseen(&crate::corpus::parse_conll("x\tO\tO\ny\tO\tO\nz\tO\tO\n").unwrap());
        assert_eq!(unseen[0], labels[1]);
    }
}

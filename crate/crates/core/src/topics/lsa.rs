//! Truncated SVD by orthogonal iteration on the Gram matrix.

use std::collections::BTreeMap;

use rand::Rng;

use super::{seeded, BowMatrix, TopicError, TopicKind, TopicModelFit};
use crate::numerics::Tensor;

const TOLERANCE: f64 = 1e-10;
const MAX_ITERS: usize = 200_000;
// relative to the top Gram eigenvalue; Gram round-off sits near 1e-16
const RANK_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSvd {
    /// Non-increasing.
    pub singular_values: Vec<f64>,
    /// `[rows, K]`, column-major by component: `u[i * k + j]`.
    pub u: Vec<f64>,
    /// `[cols, K]`, same layout.
    pub v: Vec<f64>,
    pub iterations: usize,
}

fn gram(a: &[f64], rows: usize, cols: usize, transpose_first: bool) -> (Vec<f64>, usize) {
    if transpose_first {
        // A^T A : cols x cols
        let mut g = vec![0.0; cols * cols];
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            for i in 0..cols {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..cols {
                    g[i * cols + j] += row[i] * row[j];
                }
            }
        }
        (g, cols)
    } else {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|c| a[i * cols + c] * a[j * cols + c]).sum();
            }
        }
        (g, rows)
    }
}

/// Modified Gram-Schmidt on the `k` columns of `q` (`[n, k]` row-major).
fn orthonormalize(q: &mut [f64], n: usize, k: usize) {
    for j in 0..k {
        let before = (0..n).map(|i| q[i * k + j].powi(2)).sum::<f64>().sqrt();
        for p in 0..j {
            let dot: f64 = (0..n).map(|i| q[i * k + j] * q[i * k + p]).sum();
            for i in 0..n {
                q[i * k + j] -= dot * q[i * k + p];
            }
        }
        let norm = (0..n).map(|i| q[i * k + j].powi(2)).sum::<f64>().sqrt();
        if norm <= 1e-12 * before {
            // column lies in the span of earlier ones: the matrix is rank-deficient here
            for i in 0..n {
                q[i * k + j] = 0.0;
            }
        } else {
            for i in 0..n {
                q[i * k + j] /= norm;
            }
        }
    }
}

fn sym_mul(g: &[f64], q: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..n {
            let gv = g[i * n + p];
            if gv == 0.0 {
                continue;
            }
            for j in 0..k {
                out[i * k + j] += gv * q[p * k + j];
            }
        }
    }
    out
}

/// Top-`k` singular triplets of a dense `[rows, cols]` matrix.
pub fn truncated_svd(a: &[f64], rows: usize, cols: usize, k: usize) -> Result<TruncatedSvd, TopicError> {
    assert_eq!(a.len(), rows * cols);
    if k == 0 {
        return Err(TopicError::InvalidTopicCount(k));
    }
    let full = rows.min(cols);
    if k > full {
        return Err(TopicError::RankExceeded { k, rank: full });
    }
    let right = cols <= rows;
    let (g, n) = gram(a, rows, cols, right);

    let mut rng = seeded(0x5eed);
    let mut q: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthonormalize(&mut q, n, k);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);

    let mut iterations = 0;
    let mut eig = vec![0.0; k];
    while iterations < MAX_ITERS {
        iterations += 1;
        let gq = sym_mul(&g, &q, n, k);
        // residual of the current basis as eigenvectors
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let lambda: f64 = (0..n).map(|i| q[i * k + j] * gq[i * k + j]).sum();
            eig[j] = lambda;
            let r = (0..n)
                .map(|i| (gq[i * k + j] - lambda * q[i * k + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(r);
        }
        if worst <= TOLERANCE * scale {
            break;
        }
        q = gq;
        orthonormalize(&mut q, n, k);
    }

    // order by eigenvalue, then fix signs so the largest-magnitude entry is positive
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| eig[y].partial_cmp(&eig[x]).unwrap_or(std::cmp::Ordering::Equal));
    let mut basis = vec![0.0; n * k];
    let mut sv = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| q[i * k + src]).collect();
        let pivot = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            basis[i * k + dst] = sign * col[i];
        }
        sv.push(eig[src].max(0.0).sqrt());
    }
    let top = sv[0] * sv[0];
    if let Some(pos) = sv.iter().position(|&s| s * s <= RANK_EPS * top.max(1e-300)) {
        return Err(TopicError::RankExceeded { k, rank: pos });
    }

    // the other side: A v / sigma or A^T u / sigma
    let (other_n, mut other) = if right { (rows, vec![0.0; rows * k]) } else { (cols, vec![0.0; cols * k]) };
    for j in 0..k {
        for o in 0..other_n {
            let s: f64 = if right {
                (0..cols).map(|c| a[o * cols + c] * basis[c * k + j]).sum()
            } else {
                (0..rows).map(|r| a[r * cols + o] * basis[r * k + j]).sum()
            };
            other[o * k + j] = s / sv[j];
        }
    }
    let (u, v) = if right { (other, basis) } else { (basis, other) };
    Ok(TruncatedSvd {
        singular_values: sv,
        u,
        v,
        iterations,
    })
}

/// LSA on the tf-idf matrix: theta = U Sigma, phi = V^T.
pub fn fit_lsa(bow: &BowMatrix, k: usize) -> Result<TopicModelFit, TopicError> {
    let tfidf = bow.tfidf();
    let (rows, cols) = (bow.docs, bow.vocab_size());
    let svd = truncated_svd(&tfidf, rows, cols, k)?;
    let mut theta = vec![0.0; rows * k];
    for d in 0..rows {
        for j in 0..k {
            theta[d * k + j] = svd.u[d * k + j] * svd.singular_values[j];
        }
    }
    let mut phi = vec![0.0; k * cols];
    for j in 0..k {
        for w in 0..cols {
            phi[j * cols + w] = svd.v[w * k + j];
        }
    }
    let mut hyper = BTreeMap::new();
    for (j, s) in svd.singular_values.iter().enumerate() {
        hyper.insert(format!("sigma{j}"), *s);
    }
    Ok(TopicModelFit {
        kind: TopicKind::Lsa,
        k,
        theta: Tensor::new(vec![rows, k], theta).expect("shape"),
        phi: Tensor::new(vec![k, cols], phi).expect("shape"),
        seed: 0,
        hyperparameters: hyper,
        terms: bow.terms.clone(),
        idf: Some(bow.idf()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let svd = truncated_svd(&a, 3, 3, 2).unwrap();
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-9);
        assert!((svd.singular_values[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rank_one_reconstruction() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 1.0, -1.5];
        let a: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
        let svd = truncated_svd(&a, 4, 3, 1).unwrap();
        let s = svd.singular_values[0];
        let err: f64 = (0..4)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (a[i * 3 + j] - s * svd.u[i] * svd.v[j]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn k_above_rank_is_rejected() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(truncated_svd(&a, 2, 2, 2), Err(TopicError::RankExceeded { .. })));
        assert!(matches!(truncated_svd(&a, 2, 2, 3), Err(TopicError::RankExceeded { .. })));
    }

    #[test]
    fn wide_and_tall_agree() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) - 1.5).collect();
        let tall = truncated_svd(&a, 4, 3, 2).unwrap();
        let mut at = vec![0.0; 12];
        for r in 0..4 {
            for c in 0..3 {
                at[c * 4 + r] = a[r * 3 + c];
            }
        }
        let wide = truncated_svd(&at, 3, 4, 2).unwrap();
        for (x, y) in tall.singular_values.iter().zip(&wide.singular_values) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

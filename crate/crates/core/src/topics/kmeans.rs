//! k-means++ seeding followed by Lloyd iterations.

use std::collections::BTreeMap;

use rand::Rng;

use super::{sample_discrete, seeded, TopicError, TopicKind, TopicModelFit};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansTrace {
    /// Inertia after each Lloyd iteration.
    pub inertia: Vec<f64>,
    pub assignments: Vec<usize>,
    pub converged: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (ties toward the smaller index) and its squared distance.
pub(crate) fn nearest(point: &[f64], centroids: &[f64], k: usize, dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let d = dist2(point, &centroids[c * dim..(c + 1) * dim]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia(points: &[f64], centroids: &[f64], assign: &[usize], dim: usize) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| dist2(&points[i * dim..(i + 1) * dim], &centroids[c * dim..(c + 1) * dim]))
        .sum()
}

/// Clusters `n` points of width `dim` (row-major); theta is the one-hot assignment.
pub fn fit_kmeans(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(TopicModelFit, KMeansTrace), TopicError> {
    if k == 0 || k > n {
        return Err(TopicError::InvalidTopicCount(k));
    }
    assert_eq!(points.len(), n * dim);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = seeded(seed);

    // k-means++
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            sample_discrete(&mut rng, &d2)
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(dist2(row(i), &centroids[c * dim..(c + 1) * dim]));
        }
    }

    let mut assign: Vec<usize> = (0..n).map(|i| nearest(row(i), &centroids, k, dim).0).collect();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        // update
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .map(|i| (i, dist2(row(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim])))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b })
                    .0;
                taken[far] = true;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
        history.push(inertia(points, &centroids, &assign, dim));
        // assignment
        let next: Vec<usize> = (0..n).map(|i| nearest(row(i), &centroids, k, dim).0).collect();
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    if !converged {
        history.push(inertia(points, &centroids, &assign, dim));
    }

    let mut theta = vec![0.0; n * k];
    for (i, &c) in assign.iter().enumerate() {
        theta[i * k + c] = 1.0;
    }
    let mut hyper = BTreeMap::new();
    hyper.insert("inertia".to_string(), *history.last().unwrap_or(&0.0));
    let fit = TopicModelFit {
        kind: TopicKind::KMeans,
        k,
        theta: Tensor::new(vec![n, k], theta).expect("shape"),
        phi: Tensor::new(vec![k, dim], centroids).expect("shape"),
        seed,
        hyperparameters: hyper,
        terms: Vec::new(),
        idf: None,
    };
    Ok((
        fit,
        KMeansTrace {
            inertia: history,
            assignments: assign,
            converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topics::assign_domains;

    #[test]
    fn separated_pairs_cluster_together() {
        let pts = [0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0];
        let (fit, _) = fit_kmeans(&pts, 4, 2, 2, 100, 3).unwrap();
        let l = assign_domains(&fit);
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }

    #[test]
    fn k_equal_distinct_points_gives_zero_inertia() {
        let pts = [0.0, 1.0, 0.0, 1.0, 5.0, 5.0, 2.0, 2.0];
        let (_, trace) = fit_kmeans(&pts, 4, 2, 3, 100, 1).unwrap();
        assert_eq!(*trace.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn duplicate_points_still_produce_k_clusters() {
        let pts = [1.0, 1.0, 1.0, 1.0, 2.0];
        let (fit, trace) = fit_kmeans(&pts, 5, 1, 3, 50, 0).unwrap();
        assert_eq!(fit.theta.shape(), &[5, 3]);
        assert!(trace.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn assignments_are_nearest_centroids_after_convergence() {
        let mut rng = seeded(9);
        let pts: Vec<f64> = (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (fit, trace) = fit_kmeans(&pts, 20, 3, 4, 200, 2).unwrap();
        assert!(trace.converged);
        for i in 0..20 {
            assert_eq!(nearest(&pts[i * 3..i * 3 + 3], fit.phi.data(), 4, 3).0, trace.assignments[i]);
        }
    }

    #[test]
    fn k_one_labels_all_zero() {
        let pts = [0.0, 3.0, 9.0];
        let (fit, _) = fit_kmeans(&pts, 3, 1, 1, 10, 0).unwrap();
        assert_eq!(assign_domains(&fit), vec![0, 0, 0]);
    }
}

//! Lloyd's k-means with k-means++ seeding.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::tensor::{sq_dist, Matrix};

pub const MAX_ITERS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

/// Number of bitwise-distinct rows.
pub fn distinct_rows(points: &Matrix) -> usize {
    (0..points.rows)
        .map(|i| {
            points
                .row(i)
                .iter()
                .map(|x| (x + 0.0).to_bits())
                .collect::<Vec<_>>()
        })
        .collect::<HashSet<_>>()
        .len()
}

/// Index of the nearest row of `centroids`; ties go to the smallest index.
pub fn nearest(centroids: &Matrix, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows {
        let d = sq_dist(centroids.row(k), v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++: first centre uniform, each further centre drawn with
/// probability proportional to squared distance to the nearest chosen centre.
/// With `anchor`, centre 0 is the origin and seeding continues from there.
pub fn init_plus_plus(points: &Matrix, k: usize, anchor: bool, rng: &mut impl Rng) -> Matrix {
    let n = points.rows;
    let mut centroids = Matrix::zeros(k, points.cols);
    let mut d2: Vec<f64> = if anchor {
        (0..n).map(|i| points.row(i).iter().map(|x| x * x).sum()).collect()
    } else {
        let first = rng.random_range(0..n);
        centroids.row_mut(0).copy_from_slice(points.row(first));
        (0..n)
            .map(|i| sq_dist(points.row(i), points.row(first)))
            .collect()
    };
    for c in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // all remaining mass is zero: fall back to the farthest point (index order)
            Err(_) => farthest(&d2, &HashSet::new()),
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn farthest(d2: &[f64], exclude: &HashSet<usize>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &d) in d2.iter().enumerate() {
        if !exclude.contains(&i) && d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// Lloyd iterations from k-means++ seeds. An empty cluster is re-seeded with
/// the point farthest from its current centroid. Stops when the summed centroid
/// movement falls to `TOLERANCE` or after `MAX_ITERS` iterations.
///
/// Callers must ensure at least `k` distinct points.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut impl Rng) -> KMeansResult {
    kmeans_with(points, k, false, rng)
}

/// k-means with centroid 0 pinned at the origin. Nearest-codeword residuals
/// then never grow: `‖r − c*‖ ≤ ‖r − 0‖`.
pub fn kmeans_anchored(points: &Matrix, k: usize, rng: &mut impl Rng) -> KMeansResult {
    kmeans_with(points, k, true, rng)
}

fn kmeans_with(points: &Matrix, k: usize, anchor: bool, rng: &mut impl Rng) -> KMeansResult {
    let n = points.rows;
    let dim = points.cols;
    let mut centroids = init_plus_plus(points, k, anchor, rng);
    let mut assignments = vec![0; n];
    let mut d2 = vec![0.0; n];
    let mut iterations = 0;

    while iterations < MAX_ITERS {
        iterations += 1;
        for i in 0..n {
            let (c, d) = nearest(&centroids, points.row(i));
            assignments[i] = c;
            d2[i] = d;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut reseeded = HashSet::new();
        let mut shift = 0.0;
        for c in usize::from(anchor)..k {
            let new_row: Vec<f64> = if counts[c] == 0 {
                let p = farthest(&d2, &reseeded);
                reseeded.insert(p);
                d2[p] = 0.0;
                assignments[p] = c;
                points.row(p).to_vec()
            } else {
                sums.row(c).iter().map(|s| s / counts[c] as f64).collect()
            };
            shift += sq_dist(centroids.row(c), &new_row).sqrt();
            centroids.row_mut(c).copy_from_slice(&new_row);
        }
        if shift <= TOLERANCE {
            break;
        }
    }
    for i in 0..n {
        assignments[i] = nearest(&centroids, points.row(i)).0;
    }
    KMeansResult {
        centroids,
        assignments,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Best 2-partition of a tiny set by exhaustive enumeration.
    fn exhaustive_two_means(points: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let n = points.rows;
        let mean = |idx: &[usize]| {
            let mut m = vec![0.0; points.cols];
            for &i in idx {
                for (a, x) in m.iter_mut().zip(points.row(i)) {
                    *a += x / idx.len() as f64;
                }
            }
            m
        };
        let mut best = (f64::INFINITY, vec![], vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let a: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let b: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 0).collect();
            let (ma, mb) = (mean(&a), mean(&b));
            let cost: f64 = a.iter().map(|&i| sq_dist(points.row(i), &ma)).sum::<f64>()
                + b.iter().map(|&i| sq_dist(points.row(i), &mb)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma, mb);
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn two_tight_clusters_recover_means() {
        let pts = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.02, 0.0],
            vec![5.0, 5.0],
            vec![5.0, 5.04],
        ]);
        let (ma, mb) = exhaustive_two_means(&pts);
        let res = kmeans(&pts, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let mut got: Vec<Vec<f64>> = (0..2).map(|i| res.centroids.row(i).to_vec()).collect();
        got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (g, e) in got.iter().zip([ma, mb]) {
            for (x, y) in g.iter().zip(&e) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert_eq!(res.assignments[0], res.assignments[1]);
        assert_ne!(res.assignments[1], res.assignments[2]);
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(nearest(&c, &[0.0, 3.0]).0, 0);
    }

    #[test]
    fn distinct_counts_duplicates_once() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, -0.0], vec![0.0, 0.0]]);
        assert_eq!(distinct_rows(&p), 2);
    }

    #[test]
    fn duplicates_do_not_leave_empty_clusters() {
        let mut rows = vec![vec![0.0, 0.0]; 20];
        rows.push(vec![1.0, 0.0]);
        rows.push(vec![0.0, 1.0]);
        let pts = Matrix::from_rows(&rows);
        let res = kmeans(&pts, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut used: Vec<usize> = res.assignments.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 3);
    }
}

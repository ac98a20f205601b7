//! Deterministic Lloyd's k-means with k-means++ seeding.
//!
//! Empty clusters are re-seeded from the point farthest from its centroid,
//! so every returned codebook has full usage on its training set.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

const MAX_ITERS: usize = 50;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &Array2<f64>) -> usize {
    let mut seen = std::collections::HashSet::new();
    for row in points.rows() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        seen.insert(key);
    }
    seen.len()
}

/// Squared distance from every point to every centroid, `(n, k)`.
fn distance_matrix(points: &Array2<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    // ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2, batched through one matmul.
    let x_sq: Array1<f64> = points.map_axis(Axis(1), |r| r.dot(&r));
    let c_sq: Array1<f64> = centroids.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = points.dot(&centroids.t());
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (x_sq[i] - 2.0 * *v + c_sq[j]).max(0.0);
        }
    }
    d
}

/// Index of the nearest centroid for one point.
pub fn nearest(centroids: &Array2<f64>, point: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn kmeans_pp_init(points: &Array2<f64>, k: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut centroids = Array2::zeros((k, d));
    let first = r.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            r.gen_range(0..n)
        } else {
            let mut t = r.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            let d2 = sq_dist(points.row(i), centroids.row(c));
            if d2 < min_d[i] {
                min_d[i] = d2;
            }
        }
    }
    centroids
}

/// Fit `k` centroids; deterministic in (points, k, seed).
pub fn fit(points: &Array2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::Codec("k-means on empty point set".into()));
    }
    if k == 0 {
        return Err(Error::Codec("k-means with k = 0".into()));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::Codec(format!(
            "codebook size {k} exceeds {distinct} distinct training points"
        )));
    }
    let mut r = rng::stream(seed, "kmeans", k as u64);
    let mut centroids = kmeans_pp_init(points, k, &mut r);
    let mut assignment = vec![usize::MAX; n];

    for _ in 0..MAX_ITERS {
        let d = distance_matrix(points, &centroids);
        let mut changed = false;
        for i in 0..n {
            let row = d.row(i);
            let mut best = 0;
            let mut best_d = row[0];
            for j in 1..k {
                if row[j] < best_d {
                    best_d = row[j];
                    best = j;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Recompute centroids.
        let mut sums = Array2::<f64>::zeros((k, points.ncols()));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            counts[j] += 1;
            let mut row = sums.row_mut(j);
            row += &points.row(i);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mut row = sums.row_mut(j);
                row /= counts[j] as f64;
            }
        }
        // Re-seed empty clusters from the farthest point.
        for j in 0..k {
            if counts[j] == 0 {
                let mut far_i = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let di = sq_dist(points.row(i), centroids.row(assignment[i]));
                    if di > far_d {
                        far_d = di;
                        far_i = i;
                    }
                }
                sums.row_mut(j).assign(&points.row(far_i));
                assignment[far_i] = j;
            }
        }
        centroids = sums;
    }

    // Final assignment pass to guarantee full usage.
    let mut used = vec![false; k];
    let d = distance_matrix(points, &centroids);
    for i in 0..n {
        let row = d.row(i);
        let mut best = 0;
        let mut best_d = row[0];
        for j in 1..k {
            if row[j] < best_d {
                best_d = row[j];
                best = j;
            }
        }
        used[best] = true;
    }
    if used.iter().any(|u| !u) {
        // Rare: a re-seeded centroid lost its point again. Snap each unused
        // centroid onto a distinct training point.
        let mut claimed: Vec<usize> = Vec::new();
        for j in 0..k {
            if !used[j] {
                for i in 0..n {
                    if !claimed.contains(&i) {
                        let nearest_j = nearest(&centroids, points.row(i));
                        if !used[nearest_j] || centroids.row(nearest_j) != points.row(i) {
                            centroids.row_mut(j).assign(&points.row(i));
                            claimed.push(i);
                            used[j] = true;
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(centroids)
}

/// Mean squared quantization error of `points` against `centroids`.
pub fn quantization_error(points: &Array2<f64>, centroids: &Array2<f64>) -> f64 {
    let d = distance_matrix(points, centroids);
    let mut total = 0.0;
    for i in 0..points.nrows() {
        let row = d.row(i);
        total += row.iter().copied().fold(f64::INFINITY, f64::min);
    }
    total / points.nrows() as f64
}

//! Lloyd's k-means with k-means++ seeding, used to initialize codebooks.

use rand::Rng as _;

use crate::rng::Rng;

/// Clusters `n = points.len() / dim` row-major points into `k` centroids.
/// With fewer distinct points than `k`, surplus centroids are copies of
/// sampled points.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut Rng) -> Vec<f64> {
    let n = points.len() / dim;
    assert!(n > 0 && k > 0, "kmeans needs points and k > 0");
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..start + dim]));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = nearest(row(i), &centroids, dim);
            changed |= best != *a;
            *a = best;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `codes` (row-major, width `dim`); ties go to
/// the lowest index.
pub(crate) fn nearest(x: &[f64], codes: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, code) in codes.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, code);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

//! Seeded Lloyd's k-means with k-means++ seeding.
//!
//! Deterministic for a fixed stream: sampling, assignment ties (lowest
//! centroid index), and empty-cluster reseeding (farthest point, lowest index
//! on ties) are all order-pinned.

use rand::Rng;

use crate::rng::Stream;
use crate::tensor::{sqdist, Tensor};
use crate::{Error, Result};

const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-6;

pub fn kmeans_init(points: &Tensor, m: usize, rng: &mut Stream) -> Result<Tensor> {
    let n = points.rows();
    let d = points.cols();
    if m == 0 || m > n {
        return Err(Error::Invalid(format!("k-means needs 1 <= M <= {n}, got {m}")));
    }

    let mut centroids = plus_plus_seeding(points, m, rng);
    let mut assignment = vec![0usize; n];

    for _ in 0..MAX_ITERS {
        for i in 0..n {
            assignment[i] = nearest(points.row(i), &centroids).0;
        }

        let mut sums = Tensor::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            let row = points.row(i);
            let dst = sums.row_mut(c);
            for k in 0..d {
                dst[k] += row[k];
            }
        }

        let mut new_centroids = Tensor::zeros(m, d);
        for c in 0..m {
            if counts[c] == 0 {
                // reseed to the point farthest from its current centroid
                let mut best = 0usize;
                let mut best_dist = -1.0;
                for i in 0..n {
                    let dist = sqdist(points.row(i), centroids.row(assignment[i]));
                    if dist > best_dist {
                        best_dist = dist;
                        best = i;
                    }
                }
                new_centroids.row_mut(c).copy_from_slice(points.row(best));
                assignment[best] = c;
            } else {
                let inv = 1.0 / counts[c] as f64;
                let src = sums.row(c);
                let dst = new_centroids.row_mut(c);
                for k in 0..d {
                    dst[k] = src[k] * inv;
                }
            }
        }

        let mut max_shift = 0.0f64;
        for c in 0..m {
            max_shift = max_shift.max(sqdist(centroids.row(c), new_centroids.row(c)).sqrt());
        }
        centroids = new_centroids;
        if max_shift < SHIFT_TOL {
            break;
        }
    }
    Ok(centroids)
}

/// Nearest centroid index (lowest index on distance ties) and its distance.
fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_dist = sqdist(point, centroids.row(0));
    for c in 1..centroids.rows() {
        let dist = sqdist(point, centroids.row(c));
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    (best, best_dist)
}

fn plus_plus_seeding(points: &Tensor, m: usize, rng: &mut Stream) -> Tensor {
    let n = points.rows();
    let d = points.cols();
    let mut centroids = Tensor::zeros(m, d);
    let mut chosen = vec![false; n];

    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    chosen[first] = true;

    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sqdist(points.row(i), centroids.row(0)))
        .collect();

    for c in 1..m {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = None;
            for i in 0..n {
                if dist2[i] <= 0.0 {
                    continue;
                }
                cum += dist2[i];
                if cum >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| {
                (0..n).rev().find(|&i| dist2[i] > 0.0).expect("positive mass exists")
            })
        } else {
            // all remaining points coincide with chosen centroids
            (0..n).find(|&i| !chosen[i]).expect("m <= n leaves an unchosen point")
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            dist2[i] = dist2[i].min(sqdist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

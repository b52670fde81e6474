//! Cross-graph feature unification.
//!
//! Heterogeneous attribute spaces are mapped to a common dimension `d`:
//! wide inputs are mean-centered and projected onto their top-`d` right
//! singular vectors (computed from the Gram matrix), narrow inputs are
//! zero-padded, and rows are L2-normalized either way.

use crate::rng::{uniform_symmetric, SeedTree};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct UnifyOutcome {
    pub features: Tensor,
    /// The eigensolver failed to converge and a seeded random orthonormal
    /// projection was used instead.
    pub svd_fallback: bool,
}

pub fn unify_features(x: &Tensor, target_dim: usize, seed: u64) -> Result<UnifyOutcome> {
    if target_dim == 0 {
        return Err(Error::Invalid("unify target dimension must be positive".into()));
    }
    let (n, d0) = x.shape();

    if d0 < target_dim {
        let mut padded = Tensor::zeros(n, target_dim);
        for i in 0..n {
            padded.row_mut(i)[..d0].copy_from_slice(x.row(i));
        }
        return Ok(UnifyOutcome { features: padded.row_normalize(), svd_fallback: false });
    }

    let mean = x.col_mean();
    let mut centered = x.clone();
    for i in 0..n {
        let row = centered.row_mut(i);
        for j in 0..d0 {
            row[j] -= mean.data()[j];
        }
    }

    let gram = centered.transpose().matmul(&centered);
    let (basis, fallback) = match jacobi_eigh(&gram, 100) {
        Some((eigvals, eigvecs)) => {
            let mut order: Vec<usize> = (0..d0).collect();
            order.sort_by(|&a, &b| {
                eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b))
            });
            let mut basis = Tensor::zeros(d0, target_dim);
            for (col, &k) in order.iter().take(target_dim).enumerate() {
                let mut vec: Vec<f64> = (0..d0).map(|r| eigvecs.at(r, k)).collect();
                canonicalize_sign(&mut vec);
                for r in 0..d0 {
                    basis.set(r, col, vec[r]);
                }
            }
            (basis, false)
        }
        None => (random_orthonormal(d0, target_dim, seed), true),
    };

    let projected = centered.matmul(&basis);
    Ok(UnifyOutcome { features: projected.row_normalize(), svd_fallback: fallback })
}

/// Flip a vector so its largest-magnitude entry (lowest index on ties) is
/// positive. Pins the sign ambiguity of eigenvectors.
fn canonicalize_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and the orthogonal matrix whose columns are eigenvectors, or
/// `None` if the off-diagonal mass fails to vanish within `max_sweeps`.
fn jacobi_eigh(a: &Tensor, max_sweeps: usize) -> Option<(Vec<f64>, Tensor)> {
    let d = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::eye(d);
    if d <= 1 {
        return Some(((0..d).map(|i| m.at(i, i)).collect(), v));
    }

    let frob: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * (1.0 + frob);

    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m.at(p, q) * m.at(p, q);
            }
        }
        if off.sqrt() <= tol {
            return Some(((0..d).map(|i| m.at(i, i)).collect(), v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m.at(p, q);
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..d {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..d {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    // converged well enough?
    let mut off = 0.0;
    for p in 0..d {
        for q in (p + 1)..d {
            off += m.at(p, q) * m.at(p, q);
        }
    }
    if off.sqrt() <= tol * 1e3 {
        Some(((0..d).map(|i| m.at(i, i)).collect(), v))
    } else {
        None
    }
}

fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeedTree::new(seed).stream("unify-fallback");
    let mut basis = Tensor::zeros(rows, cols);
    for c in 0..cols {
        let mut col: Vec<f64> = (0..rows).map(|_| uniform_symmetric(&mut rng, 1.0)).collect();
        // Gram-Schmidt against previous columns
        for prev in 0..c {
            let mut proj = 0.0;
            for r in 0..rows {
                proj += col[r] * basis.at(r, prev);
            }
            for r in 0..rows {
                col[r] -= proj * basis.at(r, prev);
            }
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for r in 0..rows {
            basis.set(r, c, col[r] / norm);
        }
    }
    basis
}

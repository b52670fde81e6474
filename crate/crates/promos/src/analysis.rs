//! Oracle for the mixture variance-reduction identity.
//!
//! For students with a common conditional variance `v`, pairwise correlation
//! `rho`, and simplex mixing weights `g`, the mixture's conditional variance
//! is `v (rho + (1 - rho) ||g||^2)` and its expected-squared-error gap to any
//! single student is `-v (1 - rho) (1 - ||g||^2) <= 0`, with equality exactly
//! at one-hot weights. A Monte-Carlo estimate cross-checks the closed form.

use rand_distr::{Distribution, StandardNormal};

use crate::rng::SeedTree;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EquicorrelatedEnsemble {
    /// Common conditional variance `v` of each student.
    pub variance: f64,
    /// Common pairwise correlation `rho`, in `[-1/(N-1), 1]`.
    pub correlation: f64,
    /// Mixing weights on the simplex.
    pub weights: Vec<f64>,
    /// Common conditional mean of every student.
    pub mean: f64,
    /// True signal; `mean == signal` means unbiased students.
    pub signal: f64,
    /// Label noise variance.
    pub noise_var: f64,
}

impl EquicorrelatedEnsemble {
    pub fn n_students(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n < 2 {
            return Err(Error::Invalid("ensemble needs at least 2 students".into()));
        }
        if self.variance < 0.0 {
            return Err(Error::Invalid(format!("variance must be >= 0, got {}", self.variance)));
        }
        if self.noise_var < 0.0 {
            return Err(Error::Invalid(format!("noise variance must be >= 0, got {}", self.noise_var)));
        }
        let lower = -1.0 / (n as f64 - 1.0);
        if self.correlation < lower - 1e-12 || self.correlation > 1.0 + 1e-12 {
            return Err(Error::Invalid(format!(
                "correlation {} outside [{lower:.6}, 1] for N = {n} (covariance must stay PSD)",
                self.correlation
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Invalid("weights must lie on the simplex".into()));
        }
        Ok(())
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Mixture conditional variance `v (rho + (1 - rho) ||g||^2)`.
pub fn closed_form_variance(e: &EquicorrelatedEnsemble) -> Result<f64> {
    e.validate()?;
    let g2 = e.weight_norm_sq();
    Ok(e.variance * (e.correlation + (1.0 - e.correlation) * g2))
}

/// Expected-error gap between the mixture and a single student:
/// `-v (1 - rho) (1 - ||g||^2)`. Never positive; exactly zero at one-hot
/// weights.
pub fn error_gap(e: &EquicorrelatedEnsemble) -> Result<f64> {
    e.validate()?;
    let g2 = e.weight_norm_sq();
    Ok(-e.variance * (1.0 - e.correlation) * (1.0 - g2))
}

#[derive(Debug, Clone, Copy)]
pub struct McGap {
    pub mixture_mse: f64,
    pub single_mse: f64,
    /// `mixture_mse - single_mse`, estimated on common random draws.
    pub gap: f64,
    /// Standard error of the gap estimate.
    pub gap_se: f64,
}

/// Monte-Carlo estimate of both MSEs and their gap. Student outputs are
/// sampled as `mean + sqrt(v(1-rho)) (xi - xi_bar) + sqrt(v(1-rho+N rho)) xi_bar`
/// with i.i.d. standard normal `xi`, which realizes the equicorrelated
/// covariance exactly (including the PSD boundary) without a Cholesky factor.
pub fn monte_carlo_gap(e: &EquicorrelatedEnsemble, trials: usize, seed: u64) -> Result<McGap> {
    e.validate()?;
    if trials == 0 {
        return Err(Error::Invalid("trials must be >= 1".into()));
    }
    let n = e.n_students();
    let a = (e.variance * (1.0 - e.correlation)).max(0.0).sqrt();
    let spike = e.variance * (1.0 - e.correlation + n as f64 * e.correlation);
    let b = spike.max(0.0).sqrt();
    let sigma = e.noise_var.sqrt();

    let mut rng = SeedTree::new(seed).stream("mc");
    let mut sum_mix = 0.0;
    let mut sum_single = 0.0;
    let mut sum_gap = 0.0;
    let mut sum_gap_sq = 0.0;
    let mut xi = vec![0.0f64; n];

    for _ in 0..trials {
        let mut mean_xi = 0.0;
        for x in xi.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
            mean_xi += *x;
        }
        mean_xi /= n as f64;

        let mut mixture = 0.0;
        let mut first = 0.0;
        for (k, &x) in xi.iter().enumerate() {
            let f_k = e.mean + a * (x - mean_xi) + b * mean_xi;
            mixture += e.weights[k] * f_k;
            if k == 0 {
                first = f_k;
            }
        }
        let noise: f64 = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        } else {
            0.0
        };
        let y = e.signal + noise;

        let err_mix = (y - mixture) * (y - mixture);
        let err_single = (y - first) * (y - first);
        sum_mix += err_mix;
        sum_single += err_single;
        let gap = err_mix - err_single;
        sum_gap += gap;
        sum_gap_sq += gap * gap;
    }

    let t = trials as f64;
    let gap_mean = sum_gap / t;
    let gap_var = (sum_gap_sq / t - gap_mean * gap_mean).max(0.0);
    Ok(McGap {
        mixture_mse: sum_mix / t,
        single_mse: sum_single / t,
        gap: gap_mean,
        gap_se: (gap_var / t).sqrt(),
    })
}

//! One-dimensional linear-Gaussian DDPM used to check value-guided reverse
//! steps analytically.
//!
//! Forward process `x_i = √α_i·x_{i−1} + √β_i·ε` with Gaussian data, exact
//! noise prediction `E[ε | x_i]`, reverse means
//! `μ_i(x) = (x − β_i/√(1−ᾱ_i)·ε̂(x)) / √α_i` and variances `β_i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Reverse-transition parameters with value guidance: the mean moves by
/// `−σ²·∇log Q`, the variance is unchanged.
pub fn ddpm_guided_step(mu: &[f64], var: f64, grad_log_q: &[f64]) -> (Vec<f64>, f64) {
    assert_eq!(
        mu.len(),
        grad_log_q.len(),
        "mean and gradient dimensions differ"
    );
    (
        mu.iter()
            .zip(grad_log_q)
            .map(|(m, g)| m - var * g)
            .collect(),
        var,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianToyConfig {
    pub betas: Vec<f64>,
    pub data_mean: f64,
    pub data_var: f64,
    /// Slope `c` of `log Q(x) = c·x`.
    pub q_slope: f64,
}

impl GaussianToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() || self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every β must lie in (0, 1)".into()));
        }
        if !(self.data_var > 0.0) {
            return Err(Error::Config("data variance must be positive".into()));
        }
        Ok(())
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ_i for `i` in 1..=T.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.betas[..i].iter().map(|b| 1.0 - b).product()
    }

    /// E[ε | x_i] under Gaussian data.
    pub fn eps_hat(&self, i: usize, x: f64) -> f64 {
        let ab = self.alpha_bar(i);
        let var = ab * self.data_var + 1.0 - ab;
        (1.0 - ab).sqrt() / var * (x - ab.sqrt() * self.data_mean)
    }

    pub fn reverse_mean(&self, i: usize, x: f64) -> f64 {
        let b = self.betas[i - 1];
        let ab = self.alpha_bar(i);
        (x - b / (1.0 - ab).sqrt() * self.eps_hat(i, x)) / (1.0 - b).sqrt()
    }

    pub fn reverse_var(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    /// Runs `n` reverse chains from `x_T ~ N(0, 1)`. With `guidance = Some(c)`
    /// every step goes through [`ddpm_guided_step`] with gradient `c`; with
    /// `None` the plain reverse step is used. No noise is added at i = 1.
    pub fn sample_chain(&self, n: usize, seed: u64, guidance: Option<f64>) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut x: f64 = StandardNormal.sample(&mut rng);
                for i in (1..=self.steps()).rev() {
                    let mu = self.reverse_mean(i, x);
                    let var = self.reverse_var(i);
                    let (mean, var) = match guidance {
                        Some(c) => {
                            let (m, v) = ddpm_guided_step(&[mu], var, &[c]);
                            (m[0], v)
                        }
                        None => (mu, var),
                    };
                    x = if i > 1 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean + var.sqrt() * z
                    } else {
                        mean
                    };
                }
                x
            })
            .collect()
    }
}

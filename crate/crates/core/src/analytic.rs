//! Closed forms for a Gaussian mixture pushed through the noising process.
//!
//! With `Y_t = α_t X + σ_t ε` and `X ~ Σᵢ πᵢ N(μᵢ, σᵢ² I)`, everything stays
//! a Gaussian mixture:
//!
//! ```text
//! marginal   p_t(y)     = Σᵢ πᵢ N(y; α_t μᵢ, (α_t²σᵢ² + σ_t²) I)
//! posterior  p(x | y)   = Σᵢ rᵢ(y) N(x; νᵢ, γᵢ² I)
//!     rᵢ(y) ∝ πᵢ N(y; α_t μᵢ, (α_t²σᵢ² + σ_t²) I)
//!     νᵢ    = μᵢ + (α_t σᵢ² / (α_t²σᵢ² + σ_t²)) (y − α_t μᵢ)
//!     γᵢ²   = σᵢ² σ_t² / (α_t²σᵢ² + σ_t²)
//! ```
//!
//! The true score ∇log p_t is the mixture score of the marginal. Every
//! formula here is cross-validated against the quadrature oracle in
//! [`crate::oracle`], which integrates the defining integrals directly.

use crate::dist::MixtureSpec;
use crate::schedule::Schedule;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A target distribution together with the noising schedule.
#[derive(Debug, Clone)]
pub struct DiffusedMixture {
    target: MixtureSpec,
    schedule: Schedule,
}

impl DiffusedMixture {
    pub fn new(target: MixtureSpec, schedule: Schedule) -> Self {
        DiffusedMixture { target, schedule }
    }

    pub fn target(&self) -> &MixtureSpec {
        &self.target
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// The marginal of `Y_t` as a mixture in its own right.
    pub fn marginal_at(&self, t: f64) -> Result<MixtureSpec> {
        let (a, sg) = self.schedule.alpha_sigma(t)?;
        let means = self
            .target
            .means()
            .iter()
            .map(|m| m.iter().map(|v| a * v).collect())
            .collect();
        let scales = self
            .target
            .scales()
            .iter()
            .map(|s| (a * a * s * s + sg * sg).sqrt())
            .collect();
        MixtureSpec::new(
            self.target.dim(),
            self.target.weights().to_vec(),
            means,
            scales,
        )
    }

    /// log p_t(y).
    pub fn log_marginal(&self, t: f64, y: &[f64]) -> Result<f64> {
        self.marginal_at(t)?.log_density(y)
    }

    /// ∇log p_t(y), the exact score of the diffused marginal.
    pub fn true_score(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.marginal_at(t)?.score(y)
    }

    /// Posterior over the clean point `X` given `Y_t = y`.
    pub fn posterior(&self, t: f64, y: &[f64]) -> Result<Posterior> {
        let d = self.target.dim();
        if y.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: y.len(),
            });
        }
        let (a, sg) = self.schedule.alpha_sigma(t)?;
        let n = self.target.n_components();
        let marginal = self.marginal_at(t)?;

        // Responsibilities under the marginal mixture, log-sum-exp normalised.
        let mut lw = vec![0.0; n];
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            let ms = marginal.scales()[i];
            let mut q = 0.0;
            for (yk, mk) in y.iter().zip(marginal.means()[i].iter()) {
                let dv = yk - mk;
                q += dv * dv;
            }
            lw[i] = marginal.weights()[i].ln() - (d as f64) * ms.ln() - 0.5 * q / (ms * ms);
            max = max.max(lw[i]);
        }
        let mut norm = 0.0;
        for v in lw.iter_mut() {
            *v = (*v - max).exp();
            norm += *v;
        }

        let mut weights = vec![0.0; n];
        let mut means = vec![0.0; n * d];
        let mut scales = vec![0.0; n];
        for i in 0..n {
            weights[i] = lw[i] / norm;
            let s2 = self.target.scales()[i] * self.target.scales()[i];
            let denom = a * a * s2 + sg * sg;
            let gain = a * s2 / denom;
            for k in 0..d {
                let mu = self.target.means()[i][k];
                means[i * d + k] = mu + gain * (y[k] - a * mu);
            }
            scales[i] = (s2 * sg * sg / denom).sqrt();
        }
        Ok(Posterior {
            dim: d,
            weights,
            means,
            scales,
        })
    }

    /// One joint draw `(x, y)` with `x ~ p`, `y = α_t x + σ_t ε`.
    pub fn forward_sample(&self, t: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, sg) = self.schedule.alpha_sigma(t)?;
        let d = self.target.dim();
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        self.forward_sample_into(a, sg, rng, &mut x, &mut y);
        Ok((x, y))
    }

    /// Buffer variant of [`Self::forward_sample`] for hot loops; takes the
    /// already-evaluated schedule coefficients.
    #[inline]
    pub(crate) fn forward_sample_into(
        &self,
        alpha: f64,
        sigma: f64,
        rng: &mut ChaCha8Rng,
        x: &mut [f64],
        y: &mut [f64],
    ) {
        self.target.sample_into(rng, x);
        for (yk, xk) in y.iter_mut().zip(x.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *yk = alpha * xk + sigma * z;
        }
    }
}

/// Mixture-of-Gaussians posterior `p(x | y_t)` with isotropic components.
#[derive(Debug, Clone)]
pub struct Posterior {
    dim: usize,
    weights: Vec<f64>,
    /// Row-major `n_components × dim`.
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Posterior {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn component_scale(&self, i: usize) -> f64 {
        self.scales[i]
    }

    /// Posterior mean E[X | y], written into `out`.
    pub fn mean_into(&self, out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.weights.len() {
            let w = self.weights[i];
            let m = self.component_mean(i);
            for k in 0..self.dim {
                out[k] += w * m[k];
            }
        }
    }

    /// Per-coordinate second moment E[X_k² | y], written into `out`.
    pub fn second_moment_into(&self, out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.weights.len() {
            let w = self.weights[i];
            let g2 = self.scales[i] * self.scales[i];
            let m = self.component_mean(i);
            for k in 0..self.dim {
                out[k] += w * (m[k] * m[k] + g2);
            }
        }
    }

    /// One posterior draw, written into `out`.
    #[inline]
    pub fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let m = self.component_mean(idx);
        let s = self.scales[idx];
        for k in 0..self.dim {
            let z: f64 = rng.sample(StandardNormal);
            out[k] = m[k] + s * z;
        }
    }
}

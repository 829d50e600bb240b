//! Gaussian-mixture target distributions.
//!
//! A target is `p(x) = Σᵢ πᵢ N(x; μᵢ, σᵢ² I)` with isotropic per-component
//! covariance. The module provides the log-density, its analytic score
//! `∇log p(x) = Σᵢ rᵢ(x) (μᵢ − x)/σᵢ²` (with log-sum-exp responsibilities
//! `rᵢ`), exact sampling, variance moments, and the four named benchmark
//! targets used throughout the experiment suites, each rescaled so the total
//! variance is exactly 1.
//!
//! The two variance moments drive the κ/κ̄ mixture weights in [`crate::targets`]:
//!
//! ```text
//! total_variance = Σ πᵢ(σᵢ² + μᵢ²) − (Σ πᵢ μᵢ)²   (per-coordinate average for d > 1)
//! mode_variance  = Σ πᵢ σᵢ²
//! ```

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

/// An isotropic Gaussian mixture in `d` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpecRaw")]
pub struct MixtureSpec {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

#[derive(Deserialize)]
struct MixtureSpecRaw {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

impl TryFrom<MixtureSpecRaw> for MixtureSpec {
    type Error = Error;
    fn try_from(raw: MixtureSpecRaw) -> Result<Self> {
        MixtureSpec::new(raw.dim, raw.weights, raw.means, raw.scales)
    }
}

impl MixtureSpec {
    /// Validates and builds a mixture. All violations are reported together.
    pub fn new(
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        let mut reasons = Vec::new();
        if dim == 0 {
            reasons.push("dim must be >= 1".to_string());
        }
        let n = weights.len();
        if n == 0 {
            reasons.push("weights: at least one component required".to_string());
        }
        if means.len() != n {
            reasons.push(format!("means: {} entries for {} weights", means.len(), n));
        }
        if scales.len() != n {
            reasons.push(format!(
                "scales: {} entries for {} weights",
                scales.len(),
                n
            ));
        }
        for (i, m) in means.iter().enumerate() {
            if m.len() != dim {
                reasons.push(format!("means[{i}]: length {} != dim {dim}", m.len()));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) {
                reasons.push(format!("weights[{i}] = {w} must be > 0"));
            }
        }
        for (i, &s) in scales.iter().enumerate() {
            if !(s > 0.0) {
                reasons.push(format!("scales[{i}] = {s} must be > 0"));
            }
        }
        let total: f64 = weights.iter().sum();
        if n > 0 && (total - 1.0).abs() > 1e-12 {
            reasons.push(format!("weights sum to {total}, must be 1 within 1e-12"));
        }
        if !reasons.is_empty() {
            return Err(Error::Invalid {
                what: "mixture",
                reasons,
            });
        }
        Ok(MixtureSpec {
            dim,
            weights,
            means,
            scales,
        })
    }

    /// A single standard Gaussian in `d` dimensions.
    pub fn standard(dim: usize) -> Self {
        MixtureSpec::new(dim, vec![1.0], vec![vec![0.0; dim]], vec![1.0])
            .expect("standard normal is a valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-component log joint `ln πᵢ + ln N(x; μᵢ, σᵢ² I)`.
    #[inline]
    fn component_log_joint(&self, i: usize, x: &[f64]) -> f64 {
        let s = self.scales[i];
        let mu = &self.means[i];
        let mut q = 0.0;
        for (xk, mk) in x.iter().zip(mu.iter()) {
            let d = xk - mk;
            q += d * d;
        }
        self.weights[i].ln()
            - 0.5 * (self.dim as f64) * LN_2PI
            - (self.dim as f64) * s.ln()
            - 0.5 * q / (s * s)
    }

    /// `log p(x)` via a log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.log_density_unchecked(x))
    }

    #[inline]
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut lps = [0.0f64; 8];
        let n = self.weights.len();
        let mut heap;
        let lp: &mut [f64] = if n <= 8 {
            &mut lps[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        for i in 0..n {
            lp[i] = self.component_log_joint(i, x);
            if lp[i] > max {
                max = lp[i];
            }
        }
        let sum: f64 = lp.iter().map(|&v| (v - max).exp()).sum();
        max + sum.ln()
    }

    /// Analytic score `∇log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        Ok(out)
    }

    /// Score written into a caller-provided buffer (hot-loop variant).
    #[inline]
    pub(crate) fn score_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let n = self.weights.len();
        if n == 1 {
            // Single Gaussian: score = (μ − x)/σ², no responsibilities needed.
            let inv_s2 = 1.0 / (self.scales[0] * self.scales[0]);
            for k in 0..self.dim {
                out[k] = (self.means[0][k] - x[k]) * inv_s2;
            }
            return;
        }
        let mut lps = [0.0f64; 8];
        let mut heap;
        let lp: &mut [f64] = if n <= 8 {
            &mut lps[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            lp[i] = self.component_log_joint(i, x);
            if lp[i] > max {
                max = lp[i];
            }
        }
        let mut norm = 0.0;
        for v in lp.iter_mut() {
            *v = (*v - max).exp();
            norm += *v;
        }
        out.fill(0.0);
        for i in 0..n {
            let r = lp[i] / norm;
            let inv_s2 = 1.0 / (self.scales[i] * self.scales[i]);
            for k in 0..self.dim {
                out[k] += r * (self.means[i][k] - x[k]) * inv_s2;
            }
        }
    }

    /// Draws `n` i.i.d. samples; returns a row-major `n × d` matrix.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.dim];
        for row in out.chunks_exact_mut(self.dim) {
            self.sample_into(rng, row);
        }
        out
    }

    /// One draw written into `row` (categorical over π, then Gaussian).
    #[inline]
    pub(crate) fn sample_into(&self, rng: &mut ChaCha8Rng, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.dim);
        let i = self.sample_component(rng);
        let s = self.scales[i];
        for (k, v) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = self.means[i][k] + s * z;
        }
    }

    #[inline]
    pub(crate) fn sample_component(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// `(total_variance, mode_variance)`; per-coordinate averages for d > 1.
    pub fn moments(&self) -> Moments {
        let d = self.dim as f64;
        let mode_variance: f64 = self
            .weights
            .iter()
            .zip(&self.scales)
            .map(|(w, s)| w * s * s)
            .sum();
        let mut total = 0.0;
        for k in 0..self.dim {
            let mean_k: f64 = self
                .weights
                .iter()
                .zip(&self.means)
                .map(|(w, m)| w * m[k])
                .sum();
            let second_k: f64 = self
                .weights
                .iter()
                .zip(self.means.iter().zip(&self.scales))
                .map(|(w, (m, s))| w * (s * s + m[k] * m[k]))
                .sum();
            total += second_k - mean_k * mean_k;
        }
        Moments {
            total_variance: total / d,
            mode_variance,
        }
    }

    /// Rescales means and scales by a common factor so total_variance = 1.
    pub fn rescaled_to_unit_variance(mut self) -> Self {
        let c = 1.0 / self.moments().total_variance.sqrt();
        for m in &mut self.means {
            for v in m.iter_mut() {
                *v *= c;
            }
        }
        for s in &mut self.scales {
            *s *= c;
        }
        self
    }
}

/// Variance summary of a mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    /// Variance of the mixture itself (per-coordinate average for d > 1).
    pub total_variance: f64,
    /// Mixture-weighted average of the within-component variances.
    pub mode_variance: f64,
}

/// The four named 1-d benchmark targets.
///
/// The mixture parameters below are this project's stand-ins — the benchmark
/// names describe qualitative shapes (a gentle bimodal target vs. hard,
/// far-separated modes with equal or unequal widths) without fixing numbers.
/// Every target is rescaled at construction so total_variance = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkTarget {
    UnitGaussian,
    GentleMixture,
    HardMixtureSameVar,
    HardMixtureDiffVar,
}

impl BenchmarkTarget {
    pub const ALL: [BenchmarkTarget; 4] = [
        BenchmarkTarget::UnitGaussian,
        BenchmarkTarget::GentleMixture,
        BenchmarkTarget::HardMixtureSameVar,
        BenchmarkTarget::HardMixtureDiffVar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkTarget::UnitGaussian => "unit_gaussian",
            BenchmarkTarget::GentleMixture => "gentle_mixture",
            BenchmarkTarget::HardMixtureSameVar => "hard_mixture_same_var",
            BenchmarkTarget::HardMixtureDiffVar => "hard_mixture_diff_var",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Invalid {
                what: "benchmark target",
                reasons: vec![format!(
                    "unknown name {name:?}; expected one of unit_gaussian, gentle_mixture, \
                     hard_mixture_same_var, hard_mixture_diff_var"
                )],
            })
    }

    /// Builds the named target (already unit-total-variance).
    pub fn spec(&self) -> MixtureSpec {
        let raw = match self {
            BenchmarkTarget::UnitGaussian => return MixtureSpec::standard(1),
            BenchmarkTarget::GentleMixture => MixtureSpec::new(
                1,
                vec![0.4, 0.6],
                vec![vec![-1.2], vec![0.8]],
                vec![0.7, 0.7],
            ),
            BenchmarkTarget::HardMixtureSameVar => MixtureSpec::new(
                1,
                vec![0.5, 0.5],
                vec![vec![-4.0], vec![4.0]],
                vec![0.5, 0.5],
            ),
            BenchmarkTarget::HardMixtureDiffVar => MixtureSpec::new(
                1,
                vec![0.5, 0.5],
                vec![vec![-4.0], vec![4.0]],
                vec![0.25, 1.0],
            ),
        };
        raw.expect("benchmark parameters are valid").rescaled_to_unit_variance()
    }
}

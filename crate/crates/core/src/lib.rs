//! Score identities and score-matching losses on Gaussian-mixture targets.
//!
//! The library implements and cross-validates the two classical regression
//! targets for learning the score of a noised distribution — the denoising
//! target `(α_t x₀ − x_t)/σ_t²` and the clean-target score `α_t⁻¹ ∇log p₀(x₀)`
//! — together with their variance-minimizing convex mixtures, the associated
//! weighted losses, and three extensions of the target-score construction
//! (general diffeomorphic noise, the SO(2) rotation group, and two-endpoint
//! bridges). Everything is verified against independent brute-force oracles:
//! Gauss–Legendre quadrature of the noised marginal and finite differences.
//!
//! Module map:
//! - [`schedule`]: cosine noising schedule α_t, σ_t and the SDE coefficients.
//! - [`dist`]: Gaussian-mixture targets (density, score, sampling, moments).
//! - [`analytic`]: closed-form diffused marginals, posteriors, true scores.
//! - [`targets`]: score-identity regression targets, κ/κ̄ mixture weights,
//!   Monte Carlo score estimators, and the estimator-variance study.
//! - [`losses`]: weighted score-matching losses, the TSM–DSM decomposition,
//!   x₀-prediction rescaling, and unit-variance preconditioning.
//! - [`ext`]: general noise models, wrapped (circular) mixtures, bridges.
//! - [`nn`]: a small MLP score network with hand-derived gradients and Adam.
//! - [`sampler`]: reverse-SDE sampling and MMD² evaluation.
//! - [`oracle`]: quadrature and finite-difference verification tools.
//! - [`checks`]: the runnable identity-verification suite used by the CLI.

pub mod analytic;
pub mod checks;
pub mod dist;
pub mod error;
pub mod ext;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod targets;

pub use error::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

//! Score identities beyond additive Euclidean noise.
//!
//! Three settings, each expressing the observation score as a posterior
//! expectation of a transported clean-data score:
//!
//! * [`general`] — scalar diffeomorphic noise models `Z = Φ(Y, X)`,
//!   covering nonlinear corruptions with a change-of-variables correction;
//! * [`so2`] — the rotation group SO(2) with wrapped-normal noise, where the
//!   group structure makes the transport trivial on the scalar tangent
//!   coordinate;
//! * [`bridge`] — two-ended Gaussian bridges `Y = αX₀ + (1−α)X₁ + W` with
//!   three interchangeable estimators of the same marginal score.

pub mod bridge;
pub mod general;
pub mod so2;

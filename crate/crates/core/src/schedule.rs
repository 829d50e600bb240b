//! The cosine variance-preserving noising schedule.
//!
//! A clean draw `x₀` is noised to `x_t = α_t x₀ + σ_t ε` with
//!
//! ```text
//! α_t = cos((π/2) t),   σ_t = sin((π/2) t),   α_t² + σ_t² = 1,
//! ```
//!
//! so unit-variance data keeps unit total variance at every `t`. The same
//! marginals arise from the linear SDE `dX = f_t X dt + g_t dB` with
//!
//! ```text
//! f_t = d/dt log α_t = −(π/2) tan((π/2) t),
//! g_t² = dσ_t²/dt − 2 f_t σ_t²  =  π tan((π/2) t)   (cosine schedule).
//! ```
//!
//! Both coefficients diverge at `t = 1` (and the score targets divide by σ_t
//! near `t = 0`), so computations clamp `t` to `[t_min, t_max]`.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Schedule family. Only the cosine schedule is built in; the enumeration
/// leaves room for alternatives without changing the API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// A noising schedule with its working interval `[t_min, t_max]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRaw")]
pub struct Schedule {
    kind: ScheduleKind,
    t_min: f64,
    t_max: f64,
}

#[derive(Deserialize, Serialize)]
struct ScheduleRaw {
    #[serde(default = "default_kind")]
    kind: ScheduleKind,
    #[serde(default = "default_t_min")]
    t_min: f64,
    #[serde(default = "default_t_max")]
    t_max: f64,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn default_t_min() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    1.0 - 1e-3
}

impl TryFrom<ScheduleRaw> for Schedule {
    type Error = Error;
    fn try_from(raw: ScheduleRaw) -> Result<Self> {
        Schedule::new(raw.kind, raw.t_min, raw.t_max)
    }
}

impl Default for Schedule {
    /// Cosine schedule clamped to `[1e-3, 1 − 1e-3]`, which keeps σ_t and α_t
    /// away from zero wherever the score targets divide by them.
    fn default() -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            t_min: default_t_min(),
            t_max: default_t_max(),
        }
    }
}

impl Schedule {
    /// Builds a schedule, validating `t_min ∈ (0, 0.5)` and `t_max ∈ (0.5, 1)`.
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let mut reasons = Vec::new();
        if !(t_min > 0.0 && t_min < 0.5) {
            reasons.push(format!("t_min = {t_min} must lie in (0, 0.5)"));
        }
        if !(t_max > 0.5 && t_max < 1.0) {
            reasons.push(format!("t_max = {t_max} must lie in (0.5, 1)"));
        }
        if reasons.is_empty() {
            Ok(Schedule { kind, t_min, t_max })
        } else {
            Err(Error::Invalid {
                what: "schedule",
                reasons,
            })
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// `(α_t, σ_t)` for `t ∈ [0, 1]`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange {
                name: "t",
                value: t,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(self.alpha_sigma_unchecked(t))
    }

    /// As [`alpha_sigma`](Self::alpha_sigma) without the domain check; used in
    /// hot loops that draw `t` from the clamped interval.
    #[inline]
    pub fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::Cosine => ((FRAC_PI_2 * t).cos(), (FRAC_PI_2 * t).sin()),
        }
    }

    /// SDE coefficients `(f_t, g_t²)` for `t ∈ [t_min, t_max]`, evaluated
    /// analytically (f diverges at `t = 1`, hence the clamp).
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        if !(self.t_min..=self.t_max).contains(&t) {
            return Err(Error::OutOfRange {
                name: "t",
                value: t,
                lo: self.t_min,
                hi: self.t_max,
            });
        }
        match self.kind {
            ScheduleKind::Cosine => {
                // f = −(π/2) tan((π/2) t); g² = dσ²/dt − 2 f σ² collapses to
                // π tan((π/2) t) because α² + σ² = 1.
                let tan = (FRAC_PI_2 * t).tan();
                Ok((-FRAC_PI_2 * tan, std::f64::consts::PI * tan))
            }
        }
    }
}

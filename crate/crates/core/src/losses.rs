//! Score-matching losses, time weightings, and their structural identities.
//!
//! The generic weighted loss is
//!
//! ```text
//! ℓ(s) = ∫ λ̃_t · E‖L(X₀, X_t, t) − s(X_t, t)‖² dt,   t ~ U[t_min, t_max]
//! ```
//!
//! with L one of the regression targets from [`crate::targets`] and λ̃ a
//! normalized weighting. Four named weightings are provided (plus the
//! reciprocal variant of the denoising-optimal one); each is normalized to
//! integrate to 1 over the clamped time window.
//!
//! Two exact relations are exposed as checkable operations: the
//! target-score ↔ denoising decomposition
//! `ℓ_TSM = ℓ_DSM + E‖∇log p_X‖²/α² − E‖∇log p_{Y|X}‖²` at a fixed noise
//! level, and the clean-data rescaling `ℓ_x0 = σ⁴ ℓ_DSM` under the Tweedie
//! parameterization `s(y) = (x_pred(y) − y)/σ²`. The module also houses the
//! unit-variance preconditioning coefficients (λ, c_i, c_o, c_s) and the
//! preconditioned score wrapper built from them.

use crate::analytic::DiffusedMixture;
use crate::dist::MixtureSpec;
use crate::rng::{self, substream};
use crate::schedule::Schedule;
use crate::targets::{target_value, ScoreTargetKind};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Time-weighting λ_t of the regression loss (pre-normalization forms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingKind {
    /// 1/σ_t².
    Song,
    /// (σ_t²/σ_data²)(σ_t² + σ_data²).
    DsmOptimal { sigma_data2: f64 },
    /// (σ_t² + σ_data²)/(σ_t² σ_data²) — the reciprocal-style variant of
    /// `DsmOptimal`, provided because both conventions circulate; selectable,
    /// never the default.
    DsmOptimalRecip { sigma_data2: f64 },
    /// (α_t²σ_data²/σ_t²)(σ_t² + α_t²σ_data²).
    TsmOptimal { sigma_data2: f64 },
    /// 1.
    Uniform,
}

impl WeightingKind {
    pub fn name(&self) -> &'static str {
        match self {
            WeightingKind::Song => "song",
            WeightingKind::DsmOptimal { .. } => "dsm_optimal",
            WeightingKind::DsmOptimalRecip { .. } => "dsm_optimal_recip",
            WeightingKind::TsmOptimal { .. } => "tsm_optimal",
            WeightingKind::Uniform => "uniform",
        }
    }

    /// Parses a weighting name; `sigma_data2` feeds the optimal variants.
    pub fn from_name(s: &str, sigma_data2: f64) -> Result<Self> {
        match s {
            "song" => Ok(WeightingKind::Song),
            "dsm_optimal" => Ok(WeightingKind::DsmOptimal { sigma_data2 }),
            "dsm_optimal_recip" => Ok(WeightingKind::DsmOptimalRecip { sigma_data2 }),
            "tsm_optimal" => Ok(WeightingKind::TsmOptimal { sigma_data2 }),
            "uniform" => Ok(WeightingKind::Uniform),
            other => Err(Error::Invalid {
                what: "weighting",
                reasons: vec![format!(
                    "unknown weighting {other:?}; expected song, dsm_optimal, \
                     dsm_optimal_recip, tsm_optimal, or uniform"
                )],
            }),
        }
    }

    fn sigma_data2(&self) -> Option<f64> {
        match *self {
            WeightingKind::DsmOptimal { sigma_data2 }
            | WeightingKind::DsmOptimalRecip { sigma_data2 }
            | WeightingKind::TsmOptimal { sigma_data2 } => Some(sigma_data2),
            _ => None,
        }
    }
}

/// Evaluates the raw (un-normalized) weighting λ_t.
pub fn weighting(kind: &WeightingKind, sched: &Schedule, t: f64) -> Result<f64> {
    if let Some(v) = kind.sigma_data2() {
        if !(v > 0.0) {
            return Err(Error::OutOfRange {
                name: "sigma_data2",
                value: v,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
    }
    let (a, s) = sched.alpha_sigma(t)?;
    let (a2, s2) = (a * a, s * s);
    Ok(match *kind {
        WeightingKind::Song => 1.0 / s2,
        WeightingKind::DsmOptimal { sigma_data2 } => (s2 / sigma_data2) * (s2 + sigma_data2),
        WeightingKind::DsmOptimalRecip { sigma_data2 } => (s2 + sigma_data2) / (s2 * sigma_data2),
        WeightingKind::TsmOptimal { sigma_data2 } => {
            (a2 * sigma_data2 / s2) * (s2 + a2 * sigma_data2)
        }
        WeightingKind::Uniform => 1.0,
    })
}

/// λ̃_t = λ_t / Z with Z a composite-trapezoid integral over the clamp window.
#[derive(Debug, Clone)]
pub struct NormalizedWeighting {
    kind: WeightingKind,
    sched: Schedule,
    z: f64,
}

impl NormalizedWeighting {
    pub fn kind(&self) -> &WeightingKind {
        &self.kind
    }

    /// The normalization constant Z = ∫ λ_t dt.
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        Ok(weighting(&self.kind, &self.sched, t)? / self.z)
    }
}

/// Quadrature grid for the weighting normalization: ~10⁴ points, graded
/// geometrically toward both clamp boundaries where 1/σ² (at t_min) and the
/// matching α-side factors blow up, uniform in between.
fn normalization_grid(sched: &Schedule) -> Vec<f64> {
    const N_EDGE: usize = 1500;
    const N_MID: usize = 7001;
    let (t_min, t_max) = (sched.t_min(), sched.t_max());
    let lo = t_min.max(0.01);
    let hi = t_max.min(0.99);
    let mut ts = Vec::with_capacity(2 * N_EDGE + N_MID);
    if t_min < lo {
        let ratio = lo / t_min;
        for i in 0..N_EDGE {
            ts.push(t_min * ratio.powf(i as f64 / N_EDGE as f64));
        }
    }
    for i in 0..N_MID {
        ts.push(lo + (hi - lo) * i as f64 / (N_MID - 1) as f64);
    }
    if t_max > hi {
        // Mirror of the left grading in u = 1 − t.
        let (u_hi, u_lo) = (1.0 - hi, 1.0 - t_max);
        let ratio = u_lo / u_hi;
        for i in 1..=N_EDGE {
            ts.push(1.0 - u_hi * ratio.powf(i as f64 / N_EDGE as f64));
        }
        *ts.last_mut().unwrap() = t_max;
    }
    ts
}

/// Builds a normalized weighting. Z uses a composite trapezoid rule on the
/// graded ~10⁴-point grid of [`normalization_grid`].
pub fn normalize_weighting(kind: &WeightingKind, sched: &Schedule) -> Result<NormalizedWeighting> {
    let ts = normalization_grid(sched);
    let mut z = 0.0;
    let mut prev_t = ts[0];
    let mut prev_f = weighting(kind, sched, prev_t)?;
    for &t in &ts[1..] {
        let f = weighting(kind, sched, t)?;
        z += 0.5 * (t - prev_t) * (f + prev_f);
        prev_t = t;
        prev_f = f;
    }
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::NonFinite("weighting normalization integral"));
    }
    Ok(NormalizedWeighting {
        kind: *kind,
        sched: sched.clone(),
        z,
    })
}

/// Monte Carlo estimate of the weighted regression loss
/// `∫ λ̃_t E‖L(X₀, X_t, t) − s(X_t, t)‖² dt` over the clamp window.
///
/// Time is sampled uniformly (the weighting enters multiplicatively, not by
/// importance sampling), so each draw is scaled by the window length to make
/// the average an estimate of the integral. `s` writes its score prediction
/// for `(x_t, t)` into the provided buffer.
pub fn empirical_loss<S>(
    kind: &ScoreTargetKind,
    w: &NormalizedWeighting,
    mut s: S,
    p0: &MixtureSpec,
    sched: &Schedule,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    S: FnMut(&[f64], f64, &mut [f64]),
{
    if n == 0 {
        return Err(Error::Invalid {
            what: "empirical_loss",
            reasons: vec!["n must be >= 1".to_string()],
        });
    }
    let d = p0.dim();
    let dm = DiffusedMixture::new(p0.clone(), sched.clone());
    let (mut x0, mut xt, mut sv) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for _ in 0..n {
        let t = rng.random_range(sched.t_min()..sched.t_max());
        let (a, sg) = sched.alpha_sigma(t)?;
        dm.forward_sample_into(a, sg, rng, &mut x0, &mut xt);
        let l = target_value(kind, p0, sched, &x0, &xt, t)?;
        s(&xt, t, &mut sv);
        let sq: f64 = l
            .iter()
            .zip(&sv)
            .map(|(lv, svv)| (lv - svv) * (lv - svv))
            .sum();
        total += w.eval(t)? * sq;
    }
    Ok((sched.t_max() - sched.t_min()) * total / n as f64)
}

/// Outcome of the fixed-noise target-score/denoising decomposition check.
#[derive(Debug, Clone, Copy)]
pub struct RelationCheck {
    /// Target-score loss ℓ_TSM(s).
    pub lhs: f64,
    /// ℓ_DSM(s) + Ê‖∇log p_X‖²/α² − Ê‖∇log p_{Y|X}‖².
    pub rhs: f64,
    /// Shared-sample standard error of lhs − rhs.
    pub stderr: f64,
}

/// Checks the decomposition `ℓ_TSM = ℓ_DSM + E‖∇log p_X‖²/α² − E‖∇log p_{Y|X}‖²`
/// for the fixed-level model `Y = αX + W`, `W ~ N(0, σ² I)`, on shared draws.
///
/// The target-score regression target for α ≠ 1 is the scaled-model form
/// α⁻¹∇log p_X(x). All three expectations share the same (X, W) draws, so the
/// per-sample difference `lhsᵢ − rhsᵢ = −2⟨s(yᵢ), aᵢ − bᵢ⟩` has mean zero and
/// its standard error is the meaningful tolerance.
pub fn tsm_dsm_relation_check<S>(
    mut s: S,
    p0: &MixtureSpec,
    sigma: f64,
    alpha: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RelationCheck>
where
    S: FnMut(&[f64], &mut [f64]),
{
    let mut reasons = Vec::new();
    if !(sigma > 0.0) {
        reasons.push(format!("sigma = {sigma} must be > 0"));
    }
    if !(alpha > 0.0) {
        reasons.push(format!("alpha = {alpha} must be > 0"));
    }
    if n < 2 {
        reasons.push(format!("n = {n} must be >= 2"));
    }
    if !reasons.is_empty() {
        return Err(Error::Invalid {
            what: "tsm_dsm_relation_check",
            reasons,
        });
    }
    let d = p0.dim();
    let (mut x, mut y, mut sv, mut score) =
        (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut lhs_sum, mut rhs_sum) = (0.0, 0.0);
    let (mut diff_mean, mut diff_m2) = (0.0, 0.0);
    for i in 0..n {
        p0.sample_into(rng, &mut x);
        for k in 0..d {
            let w: f64 = rng.sample(StandardNormal);
            y[k] = alpha * x[k] + sigma * w;
        }
        p0.score_into(&x, &mut score);
        s(&y, &mut sv);
        let (mut lhs_i, mut dsm_i, mut a2, mut b2) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..d {
            let a = score[k] / alpha;
            let b = -(y[k] - alpha * x[k]) / (sigma * sigma);
            lhs_i += (a - sv[k]) * (a - sv[k]);
            dsm_i += (b - sv[k]) * (b - sv[k]);
            a2 += a * a;
            b2 += b * b;
        }
        let rhs_i = dsm_i + a2 - b2;
        lhs_sum += lhs_i;
        rhs_sum += rhs_i;
        let diff = lhs_i - rhs_i;
        let delta = diff - diff_mean;
        diff_mean += delta / (i as f64 + 1.0);
        diff_m2 += delta * (diff - diff_mean);
    }
    let nf = n as f64;
    let diff_var = diff_m2 / (nf - 1.0);
    Ok(RelationCheck {
        lhs: lhs_sum / nf,
        rhs: rhs_sum / nf,
        stderr: (diff_var / nf).sqrt(),
    })
}

/// Clean-data rescaling at one noise level (`Y = X + σ ε`): returns
/// `(ℓ_x0, σ⁴ ℓ_DSM)` for the score `s(y) = (x_pred(y) − y)/σ²` on shared
/// draws. The two agree per sample by algebra.
pub fn x0_rescaling_check<P>(
    mut x_pred: P,
    p0: &MixtureSpec,
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)>
where
    P: FnMut(&[f64], &mut [f64]),
{
    if !(sigma > 0.0) || n == 0 {
        return Err(Error::Invalid {
            what: "x0_rescaling_check",
            reasons: vec![format!("sigma = {sigma} must be > 0 and n = {n} >= 1")],
        });
    }
    let d = p0.dim();
    let s2 = sigma * sigma;
    let (mut x, mut y, mut xp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut l_x0, mut l_dsm) = (0.0, 0.0);
    for _ in 0..n {
        p0.sample_into(rng, &mut x);
        for k in 0..d {
            let w: f64 = rng.sample(StandardNormal);
            y[k] = x[k] + sigma * w;
        }
        x_pred(&y, &mut xp);
        for k in 0..d {
            let dx = xp[k] - x[k];
            l_x0 += dx * dx;
            // DSM target −(y−x)/σ² vs score (x_pred−y)/σ².
            let r = (x[k] - y[k]) / s2 - (xp[k] - y[k]) / s2;
            l_dsm += r * r;
        }
    }
    let nf = n as f64;
    Ok((l_x0 / nf, s2 * s2 * l_dsm / nf))
}

/// Unit-variance preconditioning coefficients for a Gaussian design target
/// with standard deviation `sigma_tar`.
#[derive(Debug, Clone, Copy)]
pub struct PreconditionCoeffs {
    pub lambda: f64,
    pub c_i: f64,
    pub c_o: f64,
    pub c_s: f64,
}

impl PreconditionCoeffs {
    /// Coefficients of the identified (unscaled-form) loss:
    /// `(λ', c_o', c_s') = (λ/(ασ_tar)⁴, −(ασ_tar)²c_o, −(ασ_tar)²c_s)`.
    /// The effective regression target `(αX − c_s'Y)/c_o'` has unit variance.
    pub fn identified(&self, alpha: f64, sigma_tar: f64) -> (f64, f64, f64) {
        let m = (alpha * sigma_tar) * (alpha * sigma_tar);
        (self.lambda / (m * m), -m * self.c_o, -m * self.c_s)
    }
}

/// λ, c_i, c_o, c_s as functions of (α, σ, σ_tar):
///
/// ```text
/// D   = σ² + α²σ_tar²
/// λ   = α²σ_tar² D / σ²      c_o = −σ / (α σ_tar √D)
/// c_s = −1/D                 c_i = 1/√D
/// ```
pub fn precondition_coeffs(alpha: f64, sigma: f64, sigma_tar: f64) -> Result<PreconditionCoeffs> {
    let mut reasons = Vec::new();
    for (name, v) in [("alpha", alpha), ("sigma", sigma), ("sigma_tar", sigma_tar)] {
        if !(v > 0.0) {
            reasons.push(format!("{name} = {v} must be > 0"));
        }
    }
    if !reasons.is_empty() {
        return Err(Error::Invalid {
            what: "precondition_coeffs",
            reasons,
        });
    }
    let d = sigma * sigma + alpha * alpha * sigma_tar * sigma_tar;
    Ok(PreconditionCoeffs {
        lambda: alpha * alpha * sigma_tar * sigma_tar * d / (sigma * sigma),
        c_i: 1.0 / d.sqrt(),
        c_o: -sigma / (alpha * sigma_tar * d.sqrt()),
        c_s: -1.0 / d,
    })
}

/// Assembles the score from a raw network `F` under the preconditioned
/// parameterization:
///
/// ```text
/// s(y) = −(1/α) [ σ·F(σ, y/√D) / (σ_tar √D) + α² y / D ],   D = σ² + α²σ_tar²
/// ```
///
/// With `F ≡ 0` the skip connection alone is the exact score of the Gaussian
/// design marginal N(0, (α²σ_tar² + σ²) I).
pub fn preconditioned_score<F>(
    f: F,
    alpha: f64,
    sigma: f64,
    sigma_tar: f64,
    y: &[f64],
) -> Result<Vec<f64>>
where
    F: FnOnce(f64, &[f64]) -> Vec<f64>,
{
    let coeffs = precondition_coeffs(alpha, sigma, sigma_tar)?;
    let d = sigma * sigma + alpha * alpha * sigma_tar * sigma_tar;
    let scaled: Vec<f64> = y.iter().map(|v| coeffs.c_i * v).collect();
    let raw = f(sigma, &scaled);
    if raw.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: y.len(),
            got: raw.len(),
        });
    }
    Ok(y
        .iter()
        .zip(&raw)
        .map(|(yk, fk)| -(sigma * fk / (sigma_tar * d.sqrt()) + alpha * alpha * yk / d) / alpha)
        .collect())
}

/// One row of the loss-distribution study.
#[derive(Debug, Clone)]
pub struct LossDistRow {
    pub target: String,
    pub kind: &'static str,
    pub weighting: &'static str,
    pub rep: u32,
    pub loss_value: f64,
}

/// Distribution of the empirical loss at the true score: for every
/// (target, kind, weighting) triple, draws `reps` independent loss estimates
/// of `n_per_rep` samples each and emits every per-rep value.
///
/// Draws are shared across kinds and weightings within a rep (same t, X₀,
/// X_t), making the distribution comparisons paired; reps parallelize with
/// one substream per (target, rep) so results are worker-count independent.
pub fn loss_distribution_study(
    targets: &[(String, MixtureSpec)],
    kinds: &[ScoreTargetKind],
    weightings: &[WeightingKind],
    sched: &Schedule,
    reps: usize,
    n_per_rep: usize,
    seed: u64,
) -> Result<Vec<LossDistRow>> {
    let mut reasons = Vec::new();
    if targets.is_empty() || kinds.is_empty() || weightings.is_empty() {
        reasons.push("targets, kinds, and weightings must each be non-empty".to_string());
    }
    if reps < 2 {
        reasons.push(format!("reps = {reps} must be >= 2"));
    }
    if n_per_rep == 0 {
        reasons.push("n_per_rep must be >= 1".to_string());
    }
    if !reasons.is_empty() {
        return Err(Error::Invalid {
            what: "loss_distribution_study",
            reasons,
        });
    }

    let normalized: Vec<NormalizedWeighting> = weightings
        .iter()
        .map(|w| normalize_weighting(w, sched))
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..targets.len())
        .flat_map(|ti| (0..reps).map(move |r| (ti, r)))
        .collect();

    let per_task: Vec<Result<Vec<f64>>> = tasks
        .par_iter()
        .map(|&(ti, rep)| {
            let p0 = &targets[ti].1;
            let d = p0.dim();
            let dm = DiffusedMixture::new(p0.clone(), sched.clone());
            let mut rng = substream(seed, &[rng::lane::LOSS_DIST, ti as u64, rep as u64]);
            let (mut x0, mut xt) = (vec![0.0; d], vec![0.0; d]);
            let mut acc = vec![0.0; kinds.len() * weightings.len()];
            for _ in 0..n_per_rep {
                let t = rng.random_range(sched.t_min()..sched.t_max());
                let (a, sg) = sched.alpha_sigma(t)?;
                dm.forward_sample_into(a, sg, &mut rng, &mut x0, &mut xt);
                let truth = dm.true_score(t, &xt)?;
                let lambdas: Vec<f64> = normalized
                    .iter()
                    .map(|w| w.eval(t))
                    .collect::<Result<_>>()?;
                for (ki, kind) in kinds.iter().enumerate() {
                    let l = target_value(kind, p0, sched, &x0, &xt, t)?;
                    let sq: f64 = l
                        .iter()
                        .zip(&truth)
                        .map(|(lv, sv)| (lv - sv) * (lv - sv))
                        .sum();
                    for (wi, lam) in lambdas.iter().enumerate() {
                        acc[ki * weightings.len() + wi] += lam * sq;
                    }
                }
            }
            // Same integral convention as empirical_loss.
            for v in acc.iter_mut() {
                *v *= (sched.t_max() - sched.t_min()) / n_per_rep as f64;
            }
            Ok(acc)
        })
        .collect();

    // Reassemble rows in deterministic (target, kind, weighting, rep) order.
    let mut values = vec![0.0; targets.len() * kinds.len() * weightings.len() * reps];
    let (n_k, n_w) = (kinds.len(), weightings.len());
    for (task_idx, res) in per_task.into_iter().enumerate() {
        let acc = res?;
        let (ti, rep) = tasks[task_idx];
        for ki in 0..n_k {
            for wi in 0..n_w {
                values[((ti * n_k + ki) * n_w + wi) * reps + rep] = acc[ki * n_w + wi];
            }
        }
    }
    let mut rows = Vec::with_capacity(values.len());
    for (ti, (tname, _)) in targets.iter().enumerate() {
        for (ki, kind) in kinds.iter().enumerate() {
            for (wi, w) in weightings.iter().enumerate() {
                for rep in 0..reps {
                    rows.push(LossDistRow {
                        target: tname.clone(),
                        kind: kind.name(),
                        weighting: w.name(),
                        rep: rep as u32,
                        loss_value: values[((ti * n_k + ki) * n_w + wi) * reps + rep],
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::BenchmarkTarget;
    use std::f64::consts::FRAC_PI_2;

    fn sched() -> Schedule {
        Schedule::default()
    }

    #[test]
    fn weighting_known_values() {
        let s = sched();
        assert_eq!(weighting(&WeightingKind::Uniform, &s, 0.37).unwrap(), 1.0);
        // σ_1 = 1 ⇒ song at t=1 equals 1.
        assert!((weighting(&WeightingKind::Song, &s, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // tsm_optimal with unit data variance at the symmetric point.
        let w = weighting(&WeightingKind::TsmOptimal { sigma_data2: 1.0 }, &s, 0.5).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        // dsm_optimal at t=0.5, σ_data²=1: (0.5/1)(0.5+1) = 0.75.
        let w = weighting(&WeightingKind::DsmOptimal { sigma_data2: 1.0 }, &s, 0.5).unwrap();
        assert!((w - 0.75).abs() < 1e-12);
        // Reciprocal variant: (0.5+1)/(0.5·1) = 3.
        let w =
            weighting(&WeightingKind::DsmOptimalRecip { sigma_data2: 1.0 }, &s, 0.5).unwrap();
        assert!((w - 3.0).abs() < 1e-12);
        assert!(weighting(&WeightingKind::DsmOptimal { sigma_data2: 0.0 }, &s, 0.5).is_err());
    }

    #[test]
    fn weightings_positive_on_window() {
        let s = sched();
        for kind in all_kinds() {
            for i in 0..=200 {
                let t = s.t_min() + (s.t_max() - s.t_min()) * i as f64 / 200.0;
                assert!(weighting(&kind, &s, t).unwrap() > 0.0, "{} at {t}", kind.name());
            }
        }
    }

    fn all_kinds() -> [WeightingKind; 5] {
        [
            WeightingKind::Song,
            WeightingKind::DsmOptimal { sigma_data2: 1.0 },
            WeightingKind::DsmOptimalRecip { sigma_data2: 1.0 },
            WeightingKind::TsmOptimal { sigma_data2: 1.0 },
            WeightingKind::Uniform,
        ]
    }

    #[test]
    fn uniform_normalization_is_window_length() {
        let s = sched();
        let nw = normalize_weighting(&WeightingKind::Uniform, &s).unwrap();
        let expect = 1.0 / (s.t_max() - s.t_min());
        for &t in &[0.01, 0.5, 0.95] {
            assert!((nw.eval(t).unwrap() - expect).abs() < 1e-9);
        }
        // Recovering the raw value from the normalized one.
        let song = normalize_weighting(&WeightingKind::Song, &s).unwrap();
        let t = 1.0 - 1e-3;
        let raw = weighting(&WeightingKind::Song, &s, t).unwrap();
        assert!((song.eval(t).unwrap() * song.z() - raw).abs() < 1e-9 * raw);
    }

    /// Z against an analytic antiderivative: ∫ 1/sin²((π/2)t) dt
    /// = (2/π)[cot((π/2)t_min) − cot((π/2)t_max)].
    #[test]
    fn song_normalization_matches_closed_form() {
        let s = sched();
        let nw = normalize_weighting(&WeightingKind::Song, &s).unwrap();
        let cot = |t: f64| {
            let u = FRAC_PI_2 * t;
            u.cos() / u.sin()
        };
        let exact = (2.0 / std::f64::consts::PI) * (cot(s.t_min()) - cot(s.t_max()));
        // The graded 10⁴-point trapezoid carries ~5e-6 relative error against
        // the antiderivative — far inside the 1e-4 the normalization needs.
        assert!(
            (nw.z() - exact).abs() < 1e-5 * exact,
            "Z = {} vs {exact}",
            nw.z()
        );
    }

    /// Refinement oracle: Z for dsm_optimal vs a 10⁶-point Riemann sum.
    #[test]
    fn dsm_optimal_normalization_matches_riemann_refinement() {
        let s = sched();
        let kind = WeightingKind::DsmOptimal { sigma_data2: 1.0 };
        let nw = normalize_weighting(&kind, &s).unwrap();
        let n = 1_000_000usize;
        let h = (s.t_max() - s.t_min()) / n as f64;
        let mut z = 0.0;
        for i in 0..n {
            let t = s.t_min() + (i as f64 + 0.5) * h;
            z += h * weighting(&kind, &s, t).unwrap();
        }
        assert!((nw.z() - z).abs() < 1e-6 * z, "{} vs {z}", nw.z());
    }

    /// All normalized weightings integrate to 1 within 1e-4, measured by an
    /// independent 10×-refined graded trapezoid.
    #[test]
    fn normalized_weightings_integrate_to_one() {
        let s = sched();
        for kind in all_kinds() {
            let nw = normalize_weighting(&kind, &s).unwrap();
            // Independent refinement: geometric grading with 10× the points.
            let mut ts = Vec::new();
            let n = 100_000usize;
            for i in 0..=n {
                // Map a uniform grid through a tanh-like grading that
                // clusters at both ends.
                let u = i as f64 / n as f64;
                let g = 0.5 * (1.0 + ((u - 0.5) * 6.0).tanh() / (3.0f64).tanh());
                ts.push(s.t_min() + (s.t_max() - s.t_min()) * g);
            }
            *ts.last_mut().unwrap() = s.t_max();
            ts[0] = s.t_min();
            let mut integral = 0.0;
            for w in ts.windows(2) {
                let f0 = nw.eval(w[0]).unwrap();
                let f1 = nw.eval(w[1]).unwrap();
                integral += 0.5 * (w[1] - w[0]) * (f0 + f1);
            }
            assert!(
                (integral - 1.0).abs() < 1e-4,
                "{}: ∫λ̃ = {integral}",
                kind.name()
            );
        }
    }

    #[test]
    fn empirical_loss_zero_variance_mixture() {
        // True score + the zero-variance mixture target: pointwise-zero
        // integrand for the standard normal.
        let p = MixtureSpec::standard(1);
        let s = sched();
        let dm = DiffusedMixture::new(p.clone(), s.clone());
        let nw = normalize_weighting(&WeightingKind::Uniform, &s).unwrap();
        let mut rng = substream(41, &[0]);
        let loss = empirical_loss(
            &ScoreTargetKind::Kappa,
            &nw,
            |xt, t, out| out.copy_from_slice(&dm.true_score(t, xt).unwrap()),
            &p,
            &s,
            20_000,
            &mut rng,
        )
        .unwrap();
        assert!(loss <= 1e-12, "loss {loss}");
    }

    /// At the true score the expected loss is ∫ λ̃_t E_y Var(L | y) dt. For
    /// the standard normal the conditional variances are exactly
    /// cot²((π/2)t) (denoising) and tan²((π/2)t) (target identity); compare
    /// the Monte Carlo loss against Simpson quadrature of those curves on a
    /// narrowed window that keeps both integrable tails mild.
    #[test]
    fn empirical_loss_matches_conditional_variance_quadrature() {
        let p = MixtureSpec::standard(1);
        let s = Schedule::new(crate::schedule::ScheduleKind::Cosine, 0.1, 0.9).unwrap();
        let dm = DiffusedMixture::new(p.clone(), s.clone());
        let nw = normalize_weighting(&WeightingKind::Uniform, &s).unwrap();
        for (kind, var_fn) in [
            (ScoreTargetKind::Dsi, (|u: f64| (u.cos() / u.sin()).powi(2)) as fn(f64) -> f64),
            (ScoreTargetKind::Tsi, (|u: f64| (u.sin() / u.cos()).powi(2)) as fn(f64) -> f64),
        ] {
            // Simpson rule on 20k intervals.
            let n = 20_000usize;
            let h = (s.t_max() - s.t_min()) / n as f64;
            let f = |t: f64| nw.eval(t).unwrap() * var_fn(FRAC_PI_2 * t);
            let mut quad = f(s.t_min()) + f(s.t_max());
            for i in 1..n {
                let t = s.t_min() + i as f64 * h;
                quad += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
            }
            quad *= h / 3.0;

            let n_mc = 400_000usize;
            let mut rng = substream(42, &[kind.name().len() as u64]);
            let loss = empirical_loss(
                &kind,
                &nw,
                |xt, t, out| out.copy_from_slice(&dm.true_score(t, xt).unwrap()),
                &p,
                &s,
                n_mc,
                &mut rng,
            )
            .unwrap();
            assert!(
                (loss - quad).abs() < 0.03 * quad,
                "{}: MC {loss} vs quadrature {quad}",
                kind.name()
            );
        }
    }

    #[test]
    fn empirical_loss_zero_score_is_positive() {
        let p = BenchmarkTarget::GentleMixture.spec();
        let s = sched();
        let nw = normalize_weighting(&WeightingKind::DsmOptimal { sigma_data2: 1.0 }, &s).unwrap();
        let mut rng = substream(43, &[0]);
        let loss = empirical_loss(
            &ScoreTargetKind::Dsi,
            &nw,
            |_, _, out| out.fill(0.0),
            &p,
            &s,
            5_000,
            &mut rng,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn tsm_dsm_decomposition_holds() {
        let configs: [(MixtureSpec, f64, f64); 3] = [
            (MixtureSpec::standard(1), 0.8, 0.6),
            (MixtureSpec::standard(1), 1.0, 0.3),
            (BenchmarkTarget::GentleMixture.spec(), 0.7, 0.5),
        ];
        for (i, (p, alpha, sigma)) in configs.iter().enumerate() {
            // s(y) = −y and s ≡ 0.
            for (j, scale) in [(-1.0f64), 0.0].into_iter().enumerate() {
                let mut rng = substream(48, &[i as u64, j as u64]);
                let r = tsm_dsm_relation_check(
                    |y: &[f64], out: &mut [f64]| {
                        for (o, v) in out.iter_mut().zip(y) {
                            *o = scale * v;
                        }
                    },
                    p,
                    *sigma,
                    *alpha,
                    100_000,
                    &mut rng,
                )
                .unwrap();
                assert!(r.lhs >= 0.0);
                assert!(
                    (r.lhs - r.rhs).abs() <= 3.0 * r.stderr + 1e-12,
                    "cfg {i}/{j}: lhs {} rhs {} se {}",
                    r.lhs,
                    r.rhs,
                    r.stderr
                );
            }
        }
    }

    #[test]
    fn x0_rescaling_identity() {
        let p = BenchmarkTarget::GentleMixture.spec();
        let sigma = 0.4;
        // Arbitrary nonlinear predictor.
        let mut rng = substream(45, &[0]);
        let (a, b) = x0_rescaling_check(
            |y: &[f64], out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = 0.7 * v + 0.1 * v * v;
                }
            },
            &p,
            sigma,
            20_000,
            &mut rng,
        )
        .unwrap();
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");

        // x_pred = identity: loss is the noise second moment d·σ².
        let mut rng = substream(45, &[1]);
        let (a, _) = x0_rescaling_check(
            |y: &[f64], out: &mut [f64]| out.copy_from_slice(y),
            &p,
            sigma,
            200_000,
            &mut rng,
        )
        .unwrap();
        assert!((a - sigma * sigma).abs() < 0.005, "{a}");

        // Bayes-optimal predictor beats perturbed variants (unit Gaussian:
        // posterior mean is y/(1+σ²)).
        let p = MixtureSpec::standard(1);
        let shrink = 1.0 / (1.0 + sigma * sigma);
        let mut best = f64::INFINITY;
        let mut losses = Vec::new();
        for (j, c) in [shrink, shrink * 0.8, shrink * 1.2].into_iter().enumerate() {
            let mut rng = substream(45, &[2]); // shared draws across predictors
            let _ = j;
            let (l, _) = x0_rescaling_check(
                |y: &[f64], out: &mut [f64]| {
                    for (o, v) in out.iter_mut().zip(y) {
                        *o = c * v;
                    }
                },
                &p,
                sigma,
                100_000,
                &mut rng,
            )
            .unwrap();
            losses.push(l);
            best = best.min(l);
        }
        assert_eq!(best, losses[0], "posterior mean not optimal: {losses:?}");
    }

    #[test]
    fn precondition_coefficients() {
        let c = precondition_coeffs(1.0, 1.0, 1.0).unwrap();
        assert!((c.lambda - 2.0).abs() < 1e-12);
        assert!((c.c_o + 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((c.c_s + 0.5).abs() < 1e-12);
        assert!((c.c_i - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        // Effective weight one across a grid.
        for ai in 1..=5 {
            for si in 1..=5 {
                let (alpha, sigma) = (0.2 * ai as f64, 0.4 * si as f64);
                let c = precondition_coeffs(alpha, sigma, 1.3).unwrap();
                assert!((c.lambda * c.c_o * c.c_o - 1.0).abs() < 1e-12);
            }
        }
        // σ → 0: the skip connection dominates.
        let c = precondition_coeffs(1.0, 1e-8, 1.0).unwrap();
        assert!(c.c_o.abs() < 1e-7);
        assert!((c.c_s + 1.0).abs() < 1e-12);
        assert!(precondition_coeffs(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn preconditioned_score_skip_connection() {
        // F ≡ 0, σ_tar = 1: the exact score of N(0, α² + σ²).
        let (alpha, sigma) = (0.9, 0.5);
        for &y in &[-1.7, 0.0, 2.4] {
            let s = preconditioned_score(|_, _| vec![0.0], alpha, sigma, 1.0, &[y]).unwrap();
            let exact = -alpha * y / (alpha * alpha + sigma * sigma);
            assert!((s[0] - exact).abs() < 1e-14, "{} vs {exact}", s[0]);
        }
        let s = preconditioned_score(|_, _| vec![0.0], 1.0, 1.0, 1.0, &[1.0]).unwrap();
        assert!((s[0] + 0.5).abs() < 1e-14);
        // The network input is the c_i-scaled observation.
        let seen = std::cell::Cell::new(0.0);
        let _ = preconditioned_score(
            |_, x| {
                seen.set(x[0]);
                vec![0.0]
            },
            1.0,
            1.0,
            1.0,
            &[2.0],
        )
        .unwrap();
        assert!((seen.get() - 2.0 / 2.0f64.sqrt()).abs() < 1e-14);
    }

    /// Unit-variance structure of the preconditioned parameterization for a
    /// Gaussian design target: algebra on a grid, Monte Carlo spot checks.
    #[test]
    fn precondition_unit_variance_invariants() {
        let sigma_tar = 1.0;
        for ai in 1..=5 {
            for si in 1..=5 {
                let (alpha, sigma) = (0.2 * ai as f64, 0.4 * si as f64);
                let c = precondition_coeffs(alpha, sigma, sigma_tar).unwrap();
                let var_y = alpha * alpha * sigma_tar * sigma_tar + sigma * sigma;
                // Var(c_i Y) = 1.
                assert!((c.c_i * c.c_i * var_y - 1.0).abs() < 1e-12);
                // Var((αX − c_s'Y)/c_o') = 1.
                let (_, c_o_p, c_s_p) = c.identified(alpha, sigma_tar);
                let var_num = alpha * alpha * (1.0 - c_s_p) * (1.0 - c_s_p) * sigma_tar * sigma_tar
                    + c_s_p * c_s_p * sigma * sigma;
                assert!(
                    (var_num / (c_o_p * c_o_p) - 1.0).abs() < 1e-12,
                    "alpha={alpha} sigma={sigma}"
                );
            }
        }
        // Monte Carlo confirmation at three grid corners.
        use rand_distr::StandardNormal;
        for (gi, &(alpha, sigma)) in [(0.2, 0.4), (1.0, 2.0), (0.6, 1.2)].iter().enumerate() {
            let c = precondition_coeffs(alpha, sigma, sigma_tar).unwrap();
            let (_, c_o_p, c_s_p) = c.identified(alpha, sigma_tar);
            let mut rng = substream(46, &[gi as u64]);
            let n = 1_000_000usize;
            let (mut s_ci, mut s_tar) = (0.0, 0.0);
            for _ in 0..n {
                let x: f64 = rng.sample::<f64, _>(StandardNormal) * sigma_tar;
                let w: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                let y = alpha * x + w;
                s_ci += (c.c_i * y) * (c.c_i * y);
                let tv = (alpha * x - c_s_p * y) / c_o_p;
                s_tar += tv * tv;
            }
            assert!((s_ci / n as f64 - 1.0).abs() < 0.01);
            assert!((s_tar / n as f64 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn loss_distribution_orderings() {
        let unit = MixtureSpec::standard(1);
        let s = sched();
        let kinds = [ScoreTargetKind::Dsi, ScoreTargetKind::Tsi, ScoreTargetKind::Kappa];
        let ws = [
            WeightingKind::Uniform,
            WeightingKind::DsmOptimal { sigma_data2: 1.0 },
            WeightingKind::TsmOptimal { sigma_data2: 1.0 },
        ];
        let rows = loss_distribution_study(
            &[("unit_gaussian".to_string(), unit)],
            &kinds,
            &ws,
            &s,
            600,
            100,
            77,
        )
        .unwrap();
        assert_eq!(rows.len(), 3 * 3 * 600);
        let var_of = |kind: &str, w: &str| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.kind == kind && r.weighting == w)
                .map(|r| r.loss_value)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() as f64 - 1.0)
        };
        // The zero-variance mixture target: every rep is (numerically) zero.
        assert!(rows
            .iter()
            .filter(|r| r.kind == "kappa")
            .all(|r| r.loss_value <= 1e-12));
        // Weighting the blow-up region down shrinks the rep variance.
        assert!(
            var_of("dsi", "dsm_optimal") < var_of("dsi", "uniform"),
            "dsi: {} vs {}",
            var_of("dsi", "dsm_optimal"),
            var_of("dsi", "uniform")
        );
        assert!(
            var_of("tsi", "tsm_optimal") < var_of("tsi", "uniform"),
            "tsi: {} vs {}",
            var_of("tsi", "tsm_optimal"),
            var_of("tsi", "uniform")
        );
    }

    #[test]
    fn loss_distribution_is_deterministic() {
        let p = BenchmarkTarget::GentleMixture.spec();
        let s = sched();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                loss_distribution_study(
                    &[("g".to_string(), p.clone())],
                    &[ScoreTargetKind::Dsi],
                    &[WeightingKind::Uniform],
                    &s,
                    20,
                    30,
                    5,
                )
                .unwrap()
            })
        };
        let (a, b) = (run(1), run(2));
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.loss_value.to_bits(), rb.loss_value.to_bits());
        }
    }
}

//! Score-identity regression targets and their Monte Carlo estimators.
//!
//! All estimators express the marginal score as a posterior expectation
//! `∇log p_t(y) = E[L(X, y, t) | Y_t = y]` for different integrands L:
//!
//! ```text
//! dsi       L = (α_t x₀ − y) / σ_t²                     (denoising identity)
//! tsi       L = α_t⁻¹ ∇log p₀(x₀)                        (target identity)
//! mix(w)    L = w(t)·dsi + (1 − w(t))·tsi
//! kappa     mix with w(t) = κ_t  = σ_t²/(σ_t² + α_t² σ_data²)
//! kappa_bar mix with w(t) = κ̄_t (σ_data² → mode variance Σπᵢσᵢ²)
//! phillips  L = α_t (x₀ + ∇log p₀(x₀)) − y
//! ```
//!
//! All integrands share the same posterior expectation, so they differ only
//! in variance; [`variance_study`] measures exactly that, reporting the
//! summed per-coordinate sample variance of the integrand under the
//! posterior, averaged over marginal draws of `Y_t`.

use crate::analytic::DiffusedMixture;
use crate::dist::MixtureSpec;
use crate::rng::{self, substream};
use crate::schedule::Schedule;
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;

/// Which regression target to evaluate.
#[derive(Clone)]
pub enum ScoreTargetKind {
    Dsi,
    Tsi,
    /// Convex combination with a time-dependent weight `w: [0,1] → [0,1]`.
    Mix(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    Kappa,
    KappaBar,
    Phillips,
}

impl fmt::Debug for ScoreTargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ScoreTargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreTargetKind::Dsi => "dsi",
            ScoreTargetKind::Tsi => "tsi",
            ScoreTargetKind::Mix(_) => "mix",
            ScoreTargetKind::Kappa => "kappa",
            ScoreTargetKind::KappaBar => "kappa_bar",
            ScoreTargetKind::Phillips => "phillips",
        }
    }

    /// Mixture with a constant weight.
    pub fn mix_const(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::OutOfRange {
                name: "mix weight",
                value: w,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(ScoreTargetKind::Mix(Arc::new(move |_| w)))
    }

    /// Parses `dsi | tsi | kappa | kappa_bar | phillips | mix:<w>`.
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "dsi" => Ok(ScoreTargetKind::Dsi),
            "tsi" => Ok(ScoreTargetKind::Tsi),
            "kappa" => Ok(ScoreTargetKind::Kappa),
            "kappa_bar" => Ok(ScoreTargetKind::KappaBar),
            "phillips" => Ok(ScoreTargetKind::Phillips),
            other => {
                if let Some(w) = other.strip_prefix("mix:") {
                    let w: f64 = w.parse().map_err(|_| Error::Invalid {
                        what: "target kind",
                        reasons: vec![format!("mix weight {w:?} is not a number")],
                    })?;
                    ScoreTargetKind::mix_const(w)
                } else {
                    Err(Error::Invalid {
                        what: "target kind",
                        reasons: vec![format!(
                            "unknown kind {other:?}; expected dsi, tsi, kappa, kappa_bar, \
                             phillips, or mix:<w>"
                        )],
                    })
                }
            }
        }
    }
}

/// Optimal mixture weight from the total data variance:
/// `κ_t = σ_t² / (σ_t² + α_t² σ_data²)`.
pub fn kappa(t: f64, sigma_data2: f64, sched: &Schedule) -> Result<f64> {
    if !(sigma_data2 > 0.0) {
        return Err(Error::OutOfRange {
            name: "sigma_data2",
            value: sigma_data2,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let (a, s) = sched.alpha_sigma(t)?;
    Ok(s * s / (s * s + a * a * sigma_data2))
}

/// As [`kappa`] with the data variance replaced by the mixture-weighted
/// within-mode variance `Σ πᵢ σᵢ²`.
pub fn kappa_bar(t: f64, p0: &MixtureSpec, sched: &Schedule) -> Result<f64> {
    kappa(t, p0.moments().mode_variance, sched)
}

/// Internal, time-resolved form of a target kind.
enum ResolvedKind {
    Dsi,
    Tsi,
    Blend(f64),
    Phillips,
}

/// Per-(kind, t) evaluator with scratch space for hot loops.
pub(crate) struct TargetEval<'a> {
    p0: &'a MixtureSpec,
    alpha: f64,
    sigma2: f64,
    resolved: ResolvedKind,
    score_buf: Vec<f64>,
}

impl<'a> TargetEval<'a> {
    pub(crate) fn new(
        kind: &ScoreTargetKind,
        p0: &'a MixtureSpec,
        sched: &Schedule,
        t: f64,
    ) -> Result<Self> {
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let resolved = match kind {
            ScoreTargetKind::Dsi => ResolvedKind::Dsi,
            ScoreTargetKind::Tsi => ResolvedKind::Tsi,
            ScoreTargetKind::Mix(w) => {
                let wt = w(t);
                if !(0.0..=1.0).contains(&wt) {
                    return Err(Error::OutOfRange {
                        name: "mix weight",
                        value: wt,
                        lo: 0.0,
                        hi: 1.0,
                    });
                }
                ResolvedKind::Blend(wt)
            }
            ScoreTargetKind::Kappa => {
                ResolvedKind::Blend(kappa(t, p0.moments().total_variance, sched)?)
            }
            ScoreTargetKind::KappaBar => ResolvedKind::Blend(kappa_bar(t, p0, sched)?),
            ScoreTargetKind::Phillips => ResolvedKind::Phillips,
        };
        Ok(TargetEval {
            p0,
            alpha,
            sigma2: sigma * sigma,
            resolved,
            score_buf: vec![0.0; p0.dim()],
        })
    }

    #[inline]
    pub(crate) fn eval_into(&mut self, x0: &[f64], x_t: &[f64], out: &mut [f64]) {
        let a = self.alpha;
        match self.resolved {
            ResolvedKind::Dsi => {
                for k in 0..out.len() {
                    out[k] = (a * x0[k] - x_t[k]) / self.sigma2;
                }
            }
            ResolvedKind::Tsi => {
                self.p0.score_into(x0, &mut self.score_buf);
                for k in 0..out.len() {
                    out[k] = self.score_buf[k] / a;
                }
            }
            ResolvedKind::Blend(w) => {
                self.p0.score_into(x0, &mut self.score_buf);
                for k in 0..out.len() {
                    let dsi = (a * x0[k] - x_t[k]) / self.sigma2;
                    let tsi = self.score_buf[k] / a;
                    out[k] = w * dsi + (1.0 - w) * tsi;
                }
            }
            ResolvedKind::Phillips => {
                self.p0.score_into(x0, &mut self.score_buf);
                for k in 0..out.len() {
                    out[k] = a * (x0[k] + self.score_buf[k]) - x_t[k];
                }
            }
        }
    }
}

/// Evaluates one regression target `L(x₀, x_t, t)`.
pub fn target_value(
    kind: &ScoreTargetKind,
    p0: &MixtureSpec,
    sched: &Schedule,
    x0: &[f64],
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let d = p0.dim();
    if x0.len() != d {
        return Err(Error::DimMismatch { expected: d, got: x0.len() });
    }
    if x_t.len() != d {
        return Err(Error::DimMismatch { expected: d, got: x_t.len() });
    }
    let mut eval = TargetEval::new(kind, p0, sched, t)?;
    let mut out = vec![0.0; d];
    eval.eval_into(x0, x_t, &mut out);
    Ok(out)
}

/// Monte Carlo score estimate at `(x_t, t)`: averages the integrand over
/// `n_inner` posterior draws. Returns the estimate and the summed
/// per-coordinate sample variance of the integrand (Welford).
pub fn mc_score(
    kind: &ScoreTargetKind,
    p0: &MixtureSpec,
    sched: &Schedule,
    x_t: &[f64],
    t: f64,
    n_inner: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    if n_inner < 2 {
        return Err(Error::Invalid {
            what: "mc_score",
            reasons: vec![format!("n_inner = {n_inner} must be >= 2")],
        });
    }
    let dm = DiffusedMixture::new(p0.clone(), sched.clone());
    let post = dm.posterior(t, x_t)?;
    let d = p0.dim();
    let mut eval = TargetEval::new(kind, p0, sched, t)?;
    let mut x0 = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for j in 0..n_inner {
        post.sample_into(rng, &mut x0);
        eval.eval_into(&x0, x_t, &mut v);
        let inv = 1.0 / (j as f64 + 1.0);
        for k in 0..d {
            let delta = v[k] - mean[k];
            mean[k] += delta * inv;
            m2[k] += delta * (v[k] - mean[k]);
        }
    }
    let var_sum: f64 = m2.iter().map(|&m| m / (n_inner as f64 - 1.0)).sum();
    Ok((mean, var_sum))
}

/// Result of the self-normalised importance-sampling score estimator.
#[derive(Debug, Clone)]
pub struct SnisResult {
    pub estimate: Vec<f64>,
    /// Effective sample size `1 / Σ w̃ⱼ²` (equals n for uniform weights).
    pub ess: f64,
    /// Per-coordinate delta-method standard error `√(Σ w̃ⱼ² (sⱼ − ŝ)²)`.
    pub stderr: Vec<f64>,
}

/// Self-normalised IS estimate of the score for the pure-additive model
/// `Y = X + W`, `W ~ N(0, σ² I)`, with proposal `q = N(x_t, σ² I)`.
///
/// The noise kernel cancels the proposal, so the weights reduce to
/// `wⱼ ∝ p₀(xⱼ)` and the estimate is `Σ w̃ⱼ ∇log p₀(xⱼ)`.
pub fn snis_score(
    p0: &MixtureSpec,
    x_t: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SnisResult> {
    let mut reasons = Vec::new();
    if !(sigma > 0.0) {
        reasons.push(format!("sigma = {sigma} must be > 0"));
    }
    if n < 2 {
        reasons.push(format!("n = {n} must be >= 2"));
    }
    if !reasons.is_empty() {
        return Err(Error::Invalid { what: "snis_score", reasons });
    }
    let d = p0.dim();
    if x_t.len() != d {
        return Err(Error::DimMismatch { expected: d, got: x_t.len() });
    }

    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut xs = vec![0.0; n * d];
    let mut logw = vec![0.0; n];
    let mut max_lw = f64::NEG_INFINITY;
    for j in 0..n {
        let row = &mut xs[j * d..(j + 1) * d];
        for (rk, xk) in row.iter_mut().zip(x_t.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *rk = xk + sigma * z;
        }
        logw[j] = p0.log_density_unchecked(row);
        max_lw = max_lw.max(logw[j]);
    }
    if !max_lw.is_finite() {
        return Err(Error::Degenerate(
            "importance weights are all zero: every proposal draw fell in a \
             region of vanishing target density"
                .to_string(),
        ));
    }
    let mut norm = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max_lw).exp();
        norm += *w;
    }
    let mut estimate = vec![0.0; d];
    let mut scores = vec![0.0; n * d];
    let mut buf = vec![0.0; d];
    let mut w2_sum = 0.0;
    for j in 0..n {
        let w = logw[j] / norm;
        logw[j] = w;
        w2_sum += w * w;
        p0.score_into(&xs[j * d..(j + 1) * d], &mut buf);
        scores[j * d..(j + 1) * d].copy_from_slice(&buf);
        for k in 0..d {
            estimate[k] += w * buf[k];
        }
    }
    let mut stderr = vec![0.0; d];
    for j in 0..n {
        let w = logw[j];
        for k in 0..d {
            let dv = scores[j * d + k] - estimate[k];
            stderr[k] += w * w * dv * dv;
        }
    }
    for s in stderr.iter_mut() {
        *s = s.sqrt();
    }
    Ok(SnisResult {
        estimate,
        ess: 1.0 / w2_sum,
        stderr,
    })
}

/// Configuration of the estimator-variance study.
#[derive(Debug, Clone)]
pub struct VarianceStudyConfig {
    /// Draws of `Y_t` from the marginal, per grid point.
    pub n_outer: usize,
    /// Posterior samples per draw.
    pub n_inner: usize,
    pub t_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        VarianceStudyConfig {
            n_outer: 10_000,
            n_inner: 100,
            t_grid: uniform_grid(0.01, 0.99, 50),
            seed: 0,
        }
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// One output row of [`variance_study`].
#[derive(Debug, Clone)]
pub struct VarianceRow {
    pub t: f64,
    pub kind: &'static str,
    pub mean_variance: f64,
}

/// Estimator-variance study: for each grid time, draws `n_outer` marginal
/// points, estimates the integrand variance at each from `n_inner` shared
/// posterior samples, and averages per target kind.
///
/// Work parallelises over (t, outer draw); each task owns the substream
/// `(seed, [lane, t index, draw])`, so output is independent of the worker
/// count. The posterior draws are shared across kinds within a task, making
/// per-kind comparisons paired.
pub fn variance_study(
    p0: &MixtureSpec,
    sched: &Schedule,
    kinds: &[ScoreTargetKind],
    cfg: &VarianceStudyConfig,
) -> Result<Vec<VarianceRow>> {
    let mut reasons = Vec::new();
    if cfg.n_outer < 2 {
        reasons.push(format!("n_outer = {} must be >= 2", cfg.n_outer));
    }
    if cfg.n_inner < 2 {
        reasons.push(format!("n_inner = {} must be >= 2", cfg.n_inner));
    }
    if cfg.t_grid.is_empty() {
        reasons.push("t_grid must be non-empty".to_string());
    }
    for &t in &cfg.t_grid {
        if t < sched.t_min() || t > sched.t_max() {
            reasons.push(format!(
                "t_grid value {t} outside [{}, {}]",
                sched.t_min(),
                sched.t_max()
            ));
            break;
        }
    }
    if kinds.is_empty() {
        reasons.push("kinds must be non-empty".to_string());
    }
    if !reasons.is_empty() {
        return Err(Error::Invalid {
            what: "variance_study",
            reasons,
        });
    }

    let dm = DiffusedMixture::new(p0.clone(), sched.clone());
    let d = p0.dim();
    let n_k = kinds.len();

    // (t index, marginal mixture) pairs; evaluators are rebuilt per task
    // because TargetEval carries scratch state.
    let marginals: Vec<MixtureSpec> = cfg
        .t_grid
        .iter()
        .map(|&t| dm.marginal_at(t))
        .collect::<Result<_>>()?;

    let tasks: Vec<(usize, usize)> = (0..cfg.t_grid.len())
        .flat_map(|ti| (0..cfg.n_outer).map(move |dr| (ti, dr)))
        .collect();

    // Ordered collect keeps the reduction below deterministic for any
    // thread count.
    let per_task: Vec<Result<Vec<f64>>> = tasks
        .par_iter()
        .map(|&(ti, draw)| {
            let t = cfg.t_grid[ti];
            let mut rng = substream(
                cfg.seed,
                &[rng::lane::VARIANCE_STUDY, ti as u64, draw as u64],
            );
            let mut y = vec![0.0; d];
            marginals[ti].sample_into(&mut rng, &mut y);
            let post = dm.posterior(t, &y)?;

            let mut evals: Vec<TargetEval> = kinds
                .iter()
                .map(|k| TargetEval::new(k, p0, sched, t))
                .collect::<Result<_>>()?;
            let mut x0 = vec![0.0; d];
            let mut v = vec![0.0; d];
            let mut mean = vec![0.0; n_k * d];
            let mut m2 = vec![0.0; n_k * d];
            for j in 0..cfg.n_inner {
                post.sample_into(&mut rng, &mut x0);
                let inv = 1.0 / (j as f64 + 1.0);
                for (ki, eval) in evals.iter_mut().enumerate() {
                    eval.eval_into(&x0, &y, &mut v);
                    for k in 0..d {
                        let idx = ki * d + k;
                        let delta = v[k] - mean[idx];
                        mean[idx] += delta * inv;
                        m2[idx] += delta * (v[k] - mean[idx]);
                    }
                }
            }
            let denom = cfg.n_inner as f64 - 1.0;
            Ok((0..n_k)
                .map(|ki| (0..d).map(|k| m2[ki * d + k] / denom).sum())
                .collect())
        })
        .collect();

    let mut acc = vec![0.0; cfg.t_grid.len() * n_k];
    for (task_idx, res) in per_task.into_iter().enumerate() {
        let vars = res?;
        let ti = tasks[task_idx].0;
        for ki in 0..n_k {
            acc[ti * n_k + ki] += vars[ki];
        }
    }
    let mut rows = Vec::with_capacity(cfg.t_grid.len() * n_k);
    for (ti, &t) in cfg.t_grid.iter().enumerate() {
        for (ki, kind) in kinds.iter().enumerate() {
            rows.push(VarianceRow {
                t,
                kind: kind.name(),
                mean_variance: acc[ti * n_k + ki] / cfg.n_outer as f64,
            });
        }
    }
    Ok(rows)
}

//! Score identities for two-ended Gaussian bridges.
//!
//! The observation interpolates two independent Gaussian endpoints plus
//! noise, Y = αX₀ + (1−α)X₁ + W, so (X₀, X₁, Y) is jointly Gaussian and
//! everything is exactly computable.  Three distinct posterior expectations
//! all equal the marginal score ∇ln p_Y(y):
//!
//! ```text
//! via_x0:    E[ α⁻¹ ∇ln p_X₀(X₀) | Y = y ]
//! via_x1:    E[ (1−α)⁻¹ ∇ln p_X₁(X₁) | Y = y ]
//! symmetric: E[ ∇ln p_X₀(X₀) + ∇ln p_X₁(X₁) | Y = y ]
//! ```
//!
//! The symmetric form needs no α⁻¹ amplification and has the smallest
//! conditional variance of the three, which is the practical reason to
//! prefer it as a regression target.  The module is deliberately scalar
//! with Gaussian ends: the posterior stays a closed-form bivariate
//! Gaussian, so Monte Carlo estimators can be checked against exact
//! analytic values rather than against other Monte Carlo runs.

use crate::error::Error;
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;

/// A scalar Gaussian bridge: X₀ ~ N(m0, s0²), X₁ ~ N(m1, s1²) independent,
/// W ~ N(0, σ_w²), and Y = αX₀ + (1−α)X₁ + W with α ∈ (0, 1).
#[derive(Debug, Clone, Copy)]
pub struct BridgeSpec {
    m0: f64,
    s0: f64,
    m1: f64,
    s1: f64,
    sigma_w: f64,
    alpha: f64,
}

impl BridgeSpec {
    /// Scales are standard deviations, not variances.  All validation
    /// failures are reported together.
    pub fn new(m0: f64, s0: f64, m1: f64, s1: f64, sigma_w: f64, alpha: f64) -> Result<Self> {
        let mut reasons = Vec::new();
        for (name, v) in [("m0", m0), ("m1", m1)] {
            if !v.is_finite() {
                reasons.push(format!("{name} must be finite, got {v}"));
            }
        }
        for (name, v) in [("s0", s0), ("s1", s1), ("sigma_w", sigma_w)] {
            if !(v.is_finite() && v > 0.0) {
                reasons.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
            reasons.push(format!("alpha must lie strictly in (0, 1), got {alpha}"));
        }
        if !reasons.is_empty() {
            return Err(Error::Invalid {
                what: "bridge spec",
                reasons,
            });
        }
        Ok(Self {
            m0,
            s0,
            m1,
            s1,
            sigma_w,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    pub fn ends(&self) -> ((f64, f64), (f64, f64)) {
        ((self.m0, self.s0), (self.m1, self.s1))
    }

    /// E[Y] = αm0 + (1−α)m1.
    pub fn mean_y(&self) -> f64 {
        self.alpha * self.m0 + (1.0 - self.alpha) * self.m1
    }

    /// Var(Y) = α²s0² + (1−α)²s1² + σ_w².
    pub fn var_y(&self) -> f64 {
        let a = self.alpha;
        a * a * self.s0 * self.s0
            + (1.0 - a) * (1.0 - a) * self.s1 * self.s1
            + self.sigma_w * self.sigma_w
    }

    /// Exact marginal score ∇ln p_Y(y) = −(y − E[Y]) / Var(Y).
    pub fn analytic_score(&self, y: f64) -> f64 {
        -(y - self.mean_y()) / self.var_y()
    }

    /// ∇ln p_X₀ at x0.
    pub fn score_x0(&self, x0: f64) -> f64 {
        -(x0 - self.m0) / (self.s0 * self.s0)
    }

    /// ∇ln p_X₁ at x1.
    pub fn score_x1(&self, x1: f64) -> f64 {
        -(x1 - self.m1) / (self.s1 * self.s1)
    }

    /// Irreducible value of the symmetric regression loss: the posterior
    /// variance of the two-sided target, 1/s0² + 1/s1² − 1/Var(Y).
    pub fn tsm_loss_floor(&self) -> f64 {
        1.0 / (self.s0 * self.s0) + 1.0 / (self.s1 * self.s1) - 1.0 / self.var_y()
    }

    /// One joint draw (x0, x1, y) from the forward model.
    pub fn sample_joint(&self, rng: &mut impl Rng) -> (f64, f64, f64) {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let zw: f64 = rng.sample(StandardNormal);
        let x0 = self.m0 + self.s0 * z0;
        let x1 = self.m1 + self.s1 * z1;
        let y = self.alpha * x0 + (1.0 - self.alpha) * x1 + self.sigma_w * zw;
        (x0, x1, y)
    }
}

/// The exact bivariate Gaussian posterior of (X₀, X₁) given Y = y.
#[derive(Debug, Clone, Copy)]
pub struct BridgePosterior {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    chol: [f64; 3], // lower-triangular factor (l00, l10, l11)
}

impl BridgePosterior {
    /// One draw (x0, x1) via the Cholesky factor of the covariance.
    pub fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let [l00, l10, l11] = self.chol;
        (
            self.mean[0] + l00 * z0,
            self.mean[1] + l10 * z0 + l11 * z1,
        )
    }
}

/// Gaussian conditioning of (X₀, X₁) on Y = y.
///
/// With c0 = Cov(X₀, Y) = αs0² and c1 = Cov(X₁, Y) = (1−α)s1²:
/// mean_i = m_i + c_i (y − E[Y]) / Var(Y), cov_ij = Σ_ij − c_i c_j / Var(Y)
/// (prior Σ diagonal).  The conditional covariance is positive definite
/// whenever σ_w > 0, so the Cholesky factor always exists.
pub fn bridge_posterior(b: &BridgeSpec, y: f64) -> BridgePosterior {
    let a = b.alpha;
    let v = b.var_y();
    let c0 = a * b.s0 * b.s0;
    let c1 = (1.0 - a) * b.s1 * b.s1;
    let shift = (y - b.mean_y()) / v;
    let mean = [b.m0 + c0 * shift, b.m1 + c1 * shift];
    let v00 = b.s0 * b.s0 - c0 * c0 / v;
    let v11 = b.s1 * b.s1 - c1 * c1 / v;
    let v01 = -c0 * c1 / v;
    let l00 = v00.sqrt();
    let l10 = v01 / l00;
    let l11 = (v11 - l10 * l10).sqrt();
    BridgePosterior {
        mean,
        cov: [[v00, v01], [v01, v11]],
        chol: [l00, l10, l11],
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// The three posterior-expectation estimates of ∇ln p_Y(y), plus the exact
/// value.  All three are computed from the *same* posterior draws, so their
/// spreads are directly comparable.
#[derive(Debug, Clone, Copy)]
pub struct BridgeScoreEstimates {
    pub via_x0: Estimate,
    pub via_x1: Estimate,
    pub symmetric: Estimate,
    pub analytic: f64,
}

struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn new() -> Self {
        Self {
            n: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean,
            stderr: (self.m2 / ((self.n - 1) as f64 * self.n as f64)).sqrt(),
        }
    }
}

/// Monte Carlo posterior averages of the three transported targets at a
/// fixed observation y, over `n` shared posterior draws.
pub fn bridge_score_estimates(
    b: &BridgeSpec,
    y: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<BridgeScoreEstimates> {
    if n < 2 {
        return Err(Error::OutOfRange {
            name: "n",
            value: n as f64,
            lo: 2.0,
            hi: f64::INFINITY,
        });
    }
    let post = bridge_posterior(b, y);
    let mut w0 = Welford::new();
    let mut w1 = Welford::new();
    let mut ws = Welford::new();
    for _ in 0..n {
        let (x0, x1) = post.sample(rng);
        let s0 = b.score_x0(x0);
        let s1 = b.score_x1(x1);
        w0.push(s0 / b.alpha);
        w1.push(s1 / (1.0 - b.alpha));
        ws.push(s0 + s1);
    }
    Ok(BridgeScoreEstimates {
        via_x0: w0.estimate(),
        via_x1: w1.estimate(),
        symmetric: ws.estimate(),
        analytic: b.analytic_score(y),
    })
}

/// Empirical symmetric regression loss Ê‖s(Y) − (∇ln p_X₀(X₀) +
/// ∇ln p_X₁(X₁))‖² over `n` joint draws of (X₀, X₁, Y).
///
/// At the analytic marginal score this converges to
/// [`BridgeSpec::tsm_loss_floor`], the posterior variance of the target.
pub fn bridge_tsm_loss(
    mut s: impl FnMut(f64) -> f64,
    b: &BridgeSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::OutOfRange {
            name: "n",
            value: 0.0,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    let mut total = 0.0;
    for _ in 0..n {
        let (x0, x1, y) = b.sample_joint(rng);
        let r = s(y) - (b.score_x0(x0) + b.score_x1(x1));
        total += r * r;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn symmetric_spec() -> BridgeSpec {
        BridgeSpec::new(0.0, 1.0, 0.0, 1.0, 1.0, 0.5).unwrap()
    }

    fn skewed_spec() -> BridgeSpec {
        BridgeSpec::new(2.0, 0.8, -1.0, 1.2, 0.6, 0.4).unwrap()
    }

    #[test]
    fn symmetric_posterior_matches_hand_conditioning() {
        let b = symmetric_spec();
        assert!((b.var_y() - 1.5).abs() <= 1e-15);
        let p0 = bridge_posterior(&b, 0.0);
        assert!(p0.mean[0].abs() <= 1e-15 && p0.mean[1].abs() <= 1e-15);
        let p = bridge_posterior(&b, 1.5);
        assert!((p.mean[0] - 0.5).abs() <= 1e-15, "{:?}", p.mean);
        assert!((p.mean[1] - 0.5).abs() <= 1e-15, "{:?}", p.mean);
        // Var(X_i | y) = 1 − 0.25/1.5, Cov = −0.25/1.5.
        assert!((p.cov[0][0] - (1.0 - 0.25 / 1.5)).abs() <= 1e-15);
        assert!((p.cov[0][1] - (-0.25 / 1.5)).abs() <= 1e-15);
    }

    #[test]
    fn posterior_covariance_is_symmetric_positive_definite() {
        let mut rng = substream(13, &[70]);
        for _ in 0..50 {
            let b = BridgeSpec::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(0.2..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.2..2.0),
                rng.random_range(0.1..1.5),
                rng.random_range(0.05..0.95),
            )
            .unwrap();
            let p = bridge_posterior(&b, rng.random_range(-3.0..3.0));
            let c = p.cov;
            assert_eq!(c[0][1], c[1][0]);
            assert!(c[0][0] > 0.0);
            let det = c[0][0] * c[1][1] - c[0][1] * c[0][1];
            assert!(det > 0.0, "det = {det}");
            // Determinant has the closed form s0²s1²σ_w²/Var(Y).
            let ((_, s0), (_, s1)) = b.ends();
            let expect = s0 * s0 * s1 * s1 * b.sigma_w() * b.sigma_w() / b.var_y();
            assert!((det - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn posterior_samples_match_exact_moments() {
        let b = skewed_spec();
        let post = bridge_posterior(&b, 1.2);
        let mut rng = substream(13, &[71]);
        let n = 40_000;
        let (mut m0, mut m1, mut v0, mut v1, mut c01) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x0, x1) = post.sample(&mut rng);
            m0 += x0;
            m1 += x1;
            v0 += x0 * x0;
            v1 += x1 * x1;
            c01 += x0 * x1;
        }
        let nf = n as f64;
        let (m0, m1) = (m0 / nf, m1 / nf);
        let v0 = v0 / nf - m0 * m0;
        let v1 = v1 / nf - m1 * m1;
        let c01 = c01 / nf - m0 * m1;
        let se0 = (post.cov[0][0] / nf).sqrt();
        let se1 = (post.cov[1][1] / nf).sqrt();
        assert!((m0 - post.mean[0]).abs() <= 4.0 * se0);
        assert!((m1 - post.mean[1]).abs() <= 4.0 * se1);
        assert!((v0 - post.cov[0][0]).abs() <= 0.05 * post.cov[0][0]);
        assert!((v1 - post.cov[1][1]).abs() <= 0.05 * post.cov[1][1]);
        assert!((c01 - post.cov[0][1]).abs() <= 0.05 * post.cov[0][1].abs());
    }

    #[test]
    fn estimates_agree_with_analytic_score_at_known_points() {
        let b = symmetric_spec();
        let mut rng = substream(13, &[72]);
        let est = bridge_score_estimates(&b, 1.5, 4000, &mut rng).unwrap();
        assert!((est.analytic - (-1.0)).abs() <= 1e-15);
        for e in [est.via_x0, est.via_x1, est.symmetric] {
            assert!(e.stderr > 0.0);
            assert!(
                (e.value - est.analytic).abs() <= 3.0 * e.stderr,
                "value={} analytic={} se={}",
                e.value,
                est.analytic,
                e.stderr
            );
        }
        let at_zero = bridge_score_estimates(&b, 0.0, 4000, &mut rng).unwrap();
        assert_eq!(at_zero.analytic, 0.0);
        for e in [at_zero.via_x0, at_zero.via_x1, at_zero.symmetric] {
            assert!(e.value.abs() <= 3.0 * e.stderr);
        }
    }

    #[test]
    fn symmetric_estimator_has_smallest_spread() {
        // Equal-variance spec, shared posterior draws: the symmetric target
        // avoids the α⁻¹ amplification and must not spread wider than the
        // single-ended routes.
        let b = symmetric_spec();
        let mut rng = substream(13, &[73]);
        let est = bridge_score_estimates(&b, 0.8, 20_000, &mut rng).unwrap();
        let worst = est.via_x0.stderr.max(est.via_x1.stderr);
        assert!(
            est.symmetric.stderr <= worst,
            "symmetric={} max(single)={}",
            est.symmetric.stderr,
            worst
        );
        // Exact conditional variances: 4/3 for symmetric vs 10/3 for the
        // single-ended routes (n·se² estimates these).
        let n = 20_000.0;
        assert!((est.symmetric.stderr.powi(2) * n - 4.0 / 3.0).abs() <= 0.1);
        assert!((est.via_x0.stderr.powi(2) * n - 10.0 / 3.0).abs() <= 0.25);
    }

    #[test]
    fn estimates_are_mutually_consistent_across_observations() {
        for (lane, b) in [(74u64, symmetric_spec()), (75u64, skewed_spec())] {
            let mut rng = substream(13, &[lane]);
            for &y in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
                let est = bridge_score_estimates(&b, y, 4000, &mut rng).unwrap();
                let routes = [est.via_x0, est.via_x1, est.symmetric];
                for (i, a) in routes.iter().enumerate() {
                    assert!(
                        (a.value - est.analytic).abs() <= 3.0 * a.stderr,
                        "y={y} route {i}: {} vs {} (se {})",
                        a.value,
                        est.analytic,
                        a.stderr
                    );
                    for c in routes.iter().skip(i + 1) {
                        let combined = (a.stderr.powi(2) + c.stderr.powi(2)).sqrt();
                        assert!(
                            (a.value - c.value).abs() <= 3.0 * combined,
                            "y={y}: {} vs {} (combined se {combined})",
                            a.value,
                            c.value
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn loss_at_analytic_score_matches_reference_and_floor() {
        let b = symmetric_spec();
        assert!((b.tsm_loss_floor() - 4.0 / 3.0).abs() <= 1e-15);
        let mut rng = substream(13, &[76]);
        let loss = bridge_tsm_loss(|y| b.analytic_score(y), &b, 50_000, &mut rng).unwrap();
        let mut rng_ref = substream(13, &[77]);
        let reference =
            bridge_tsm_loss(|y| b.analytic_score(y), &b, 1_000_000, &mut rng_ref).unwrap();
        assert!(
            (loss - reference).abs() <= 0.05 * reference,
            "loss={loss} reference={reference}"
        );
        assert!((loss - 4.0 / 3.0).abs() <= 0.02 * (4.0 / 3.0), "loss={loss}");
        assert!((reference - 4.0 / 3.0).abs() <= 0.01 * (4.0 / 3.0));
    }

    #[test]
    fn analytic_score_beats_zero_score() {
        let b = skewed_spec();
        let mut rng = substream(13, &[78]);
        let at_zero = bridge_tsm_loss(|_| 0.0, &b, 50_000, &mut rng).unwrap();
        let mut rng2 = substream(13, &[78]);
        let at_true = bridge_tsm_loss(|y| b.analytic_score(y), &b, 50_000, &mut rng2).unwrap();
        assert!(at_true < at_zero, "true={at_true} zero={at_zero}");
    }

    #[test]
    fn least_squares_affine_fit_recovers_the_analytic_score() {
        // argmin over s(y) = ay + b of the regression loss is the affine
        // representation of E[target | y] = −(y − E[Y])/Var(Y).
        let b = skewed_spec();
        let v = b.var_y();
        let mut rng = substream(13, &[79]);
        let n = 1_000_000;
        let (mut sy, mut st, mut syy, mut syt) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x0, x1, y) = b.sample_joint(&mut rng);
            let t = b.score_x0(x0) + b.score_x1(x1);
            sy += y;
            st += t;
            syy += y * y;
            syt += y * t;
        }
        let nf = n as f64;
        let (my, mt) = (sy / nf, st / nf);
        let a_hat = (syt / nf - my * mt) / (syy / nf - my * my);
        let b_hat = mt - a_hat * my;
        let a_true = -1.0 / v;
        let b_true = b.mean_y() / v;
        assert!(
            (a_hat - a_true).abs() <= 0.02 * a_true.abs(),
            "a_hat={a_hat} a_true={a_true}"
        );
        assert!(
            (b_hat - b_true).abs() <= 0.02 * b_true.abs(),
            "b_hat={b_hat} b_true={b_true}"
        );
    }

    #[test]
    fn invalid_specs_are_rejected_with_reasons() {
        let err = BridgeSpec::new(f64::NAN, -1.0, 0.0, 1.0, 0.0, 1.5).unwrap_err();
        let Error::Invalid { what, reasons } = &err else {
            panic!("expected Invalid, got {err}");
        };
        assert_eq!(*what, "bridge spec");
        let text = reasons.join("; ");
        assert!(text.contains("m0"), "{text}");
        assert!(text.contains("s0"), "{text}");
        assert!(text.contains("sigma_w"), "{text}");
        assert!(text.contains("alpha"), "{text}");
        assert!(bridge_score_estimates(
            &symmetric_spec(),
            0.0,
            1,
            &mut substream(0, &[0])
        )
        .is_err());
    }
}

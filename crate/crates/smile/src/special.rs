//! Scalar special functions and analytic divergences for the Beta/Gaussian
//! variational machinery: log-gamma, digamma/trigamma, the regularized
//! incomplete beta function with parameter derivatives, and closed-form
//! KL divergences.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! any number of threads.

use crate::error::{Result, SmileError};

/// Parameters of a Beta distribution; both shapes must be strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return Err(SmileError::domain(
                "BetaParams",
                format!("shapes must be positive, got alpha={alpha}, beta={beta}"),
            ));
        }
        Ok(BetaParams { alpha, beta })
    }

    /// Mean of the distribution, alpha / (alpha + beta).
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

/// ln(pi)
const LN_PI: f64 = 1.144_729_885_849_400_2;
/// ln(2 * sqrt(e / pi))
const LN_2_SQRT_E_OVER_PI: f64 = 0.620_782_237_635_245_2;

/// Polynomial coefficients for the Lanczos approximation of ln-gamma
/// ("An Analysis of the Lanczos Gamma Approximation", Pugh 2004, p. 116).
const GAMMA_DK: &[f64] = &[
    2.485_740_891_387_535_5e-5,
    1.051_423_785_817_219_7,
    -3.456_870_972_220_162_5,
    4.512_277_094_668_948,
    -2.982_852_253_235_766_4,
    1.056_397_115_771_267,
    -1.954_287_731_916_458_7e-1,
    1.709_705_434_044_412e-2,
    -5.719_261_174_043_057e-4,
    4.633_994_733_599_057e-6,
    -2.719_949_084_886_077_2e-9,
];

/// Auxiliary shift for the Lanczos approximation.
const GAMMA_R: f64 = 10.900511;

/// Natural logarithm of the gamma function for x > 0.
///
/// Lanczos approximation with reflection below 0.5; relative accuracy is
/// close to machine precision over the whole positive axis.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(SmileError::domain(
            "log_gamma",
            format!("argument must be positive, got {x}"),
        ));
    }
    Ok(log_gamma_unchecked(x))
}

fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        let s = GAMMA_DK
            .iter()
            .enumerate()
            .skip(1)
            .fold(GAMMA_DK[0], |s, t| s + t.1 / (t.0 as f64 - x));
        LN_PI
            - (std::f64::consts::PI * x).sin().ln()
            - s.ln()
            - LN_2_SQRT_E_OVER_PI
            - (0.5 - x) * ((0.5 - x + GAMMA_R) / std::f64::consts::E).ln()
    } else {
        let s = GAMMA_DK
            .iter()
            .enumerate()
            .skip(1)
            .fold(GAMMA_DK[0], |s, t| s + t.1 / (x + t.0 as f64 - 1.0));
        s.ln() + LN_2_SQRT_E_OVER_PI + (x - 0.5) * ((x - 0.5 + GAMMA_R) / std::f64::consts::E).ln()
    }
}

/// ln B(a, b) = ln Γ(a) + ln Γ(b) − ln Γ(a+b).
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    Ok(log_gamma(a)? + log_gamma(b)? - log_gamma_unchecked(a + b))
}

/// Digamma function ψ(x) = d/dx ln Γ(x) for x > 0.
///
/// Upward recurrence into the asymptotic regime, then the standard
/// Bernoulli-number series.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(SmileError::domain(
            "digamma",
            format!("argument must be positive, got {x}"),
        ));
    }
    let mut result = 0.0;
    let mut x = x;
    while x < 10.0 {
        result -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ψ(x) ~ ln x − 1/(2x) − Σ B_{2n} / (2n x^{2n})
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    Ok(result + x.ln() - 0.5 * inv - series)
}

/// Trigamma function ψ₁(x) = d/dx ψ(x) for x > 0. Backs the derivative of
/// digamma nodes in the autodiff tape.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(SmileError::domain(
            "trigamma",
            format!("argument must be positive, got {x}"),
        ));
    }
    let mut result = 0.0;
    let mut x = x;
    while x < 10.0 {
        result += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ψ₁(x) ~ 1/x + 1/(2x²) + Σ B_{2n} / x^{2n+1}
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))));
    Ok(result + inv + 0.5 * inv2 + series)
}

/// Regularized incomplete beta function I_x(α, β), i.e. the Beta CDF.
///
/// Continued-fraction evaluation (modified Lentz) with the symmetry switch
/// at x > (α+1)/(α+β+2) so both tails are stable.
pub fn reg_inc_beta(x: f64, p: BetaParams) -> Result<f64> {
    if !(p.alpha > 0.0) || !(p.beta > 0.0) {
        return Err(SmileError::domain(
            "reg_inc_beta",
            format!("shapes must be positive, got {p:?}"),
        ));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(SmileError::domain(
            "reg_inc_beta",
            format!("x must lie in [0, 1], got {x}"),
        ));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let (a, b) = (p.alpha, p.beta);
    let ln_pre = a * x.ln() + b * (1.0 - x).ln() - log_beta(a, b)?;
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        ln_pre.exp() * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - ln_pre.exp() * beta_cont_frac(b, a, 1.0 - x) / b
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Continued fraction for the incomplete beta function (Lentz's algorithm).
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;

    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;

        // Even step
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        // Odd step
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;

        if (del - 1.0).abs() < EPS {
            break;
        }
    }

    h
}

/// Natural logarithm of the Beta(α, β) density at d ∈ (0, 1).
pub fn beta_log_pdf(d: f64, p: BetaParams) -> Result<f64> {
    if !(0.0 < d && d < 1.0) {
        return Err(SmileError::domain(
            "beta_log_pdf",
            format!("support is (0, 1), got {d}"),
        ));
    }
    Ok((p.alpha - 1.0) * d.ln() + (p.beta - 1.0) * (1.0 - d).ln() - log_beta(p.alpha, p.beta)?)
}

/// Inverse Beta CDF by bisection on `reg_inc_beta` (30 iterations).
pub fn beta_inv_cdf(u: f64, p: BetaParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(SmileError::domain(
            "beta_inv_cdf",
            format!("u must lie in [0, 1], got {u}"),
        ));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if reg_inc_beta(mid, p)? < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Partial derivatives (∂I_x/∂α, ∂I_x/∂β) of the regularized incomplete
/// beta function with respect to its shape parameters.
///
/// Adaptive central finite differences with one Richardson extrapolation
/// step; relative accuracy is well inside the 1e-5 target for shapes away
/// from zero. At x ∈ {0, 1} the CDF is flat in the parameters, so zeros
/// are returned (samples are clamped away from the boundary upstream).
pub fn beta_cdf_param_grads(x: f64, p: BetaParams) -> Result<(f64, f64)> {
    if !(p.alpha > 0.0) || !(p.beta > 0.0) {
        return Err(SmileError::domain(
            "beta_cdf_param_grads",
            format!("shapes must be positive, got {p:?}"),
        ));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(SmileError::domain(
            "beta_cdf_param_grads",
            format!("x must lie in [0, 1], got {x}"),
        ));
    }
    if x == 0.0 || x == 1.0 {
        return Ok((0.0, 0.0));
    }
    let da = richardson_diff(|a| reg_inc_beta(x, BetaParams { alpha: a, ..p }), p.alpha)?;
    let db = richardson_diff(|b| reg_inc_beta(x, BetaParams { beta: b, ..p }), p.beta)?;
    Ok((da, db))
}

/// Richardson-extrapolated central difference of `f` at `t` with a step
/// scaled to the argument (and kept clear of the positivity boundary).
fn richardson_diff<F>(f: F, t: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let h = (1e-3 * t.max(0.1)).min(0.49 * t);
    let d1 = (f(t + h)? - f(t - h)?) / (2.0 * h);
    let h2 = 0.5 * h;
    let d2 = (f(t + h2)? - f(t - h2)?) / (2.0 * h2);
    Ok((4.0 * d2 - d1) / 3.0)
}

/// Analytic KL(Beta(q) ‖ Beta(prior)):
///
/// log[Γ(α+β)Γ(α̂)Γ(β̂) / (Γ(α̂+β̂)Γ(α)Γ(β))]
///   + (α−α̂)ψ(α) − (α−α̂+β−β̂)ψ(α+β) + (β−β̂)ψ(β)
pub fn beta_kl(q: BetaParams, prior: BetaParams) -> Result<f64> {
    let (a, b) = (q.alpha, q.beta);
    let (ah, bh) = (prior.alpha, prior.beta);
    if !(a > 0.0 && b > 0.0 && ah > 0.0 && bh > 0.0) {
        return Err(SmileError::domain(
            "beta_kl",
            format!("shapes must be positive, got q={q:?}, prior={prior:?}"),
        ));
    }
    let log_ratio = log_gamma(a + b)? + log_gamma(ah)? + log_gamma(bh)?
        - log_gamma(ah + bh)?
        - log_gamma(a)?
        - log_gamma(b)?;
    Ok(log_ratio + (a - ah) * digamma(a)? - (a - ah + b - bh) * digamma(a + b)?
        + (b - bh) * digamma(b)?)
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ_j (μ_j² + σ_j² − 1 − ln σ_j²).
pub fn gauss_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(SmileError::ShapeMismatch {
            op: "gauss_kl",
            left: (1, mu.len()),
            right: (1, sigma.len()),
        });
    }
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(SmileError::domain(
                "gauss_kl",
                format!("sigma must be positive, got {s}"),
            ));
        }
        total += m * m + s * s - 1.0 - (s * s).ln();
    }
    Ok(0.5 * total)
}

//! Confidence-ellipsoid uncertainty scores for <home, appliance> pairs.
//!
//! The precision matrix of a home row, `A_x`, defines an ellipsoid around
//! the fitted home factor. The width of that ellipsoid along the direction
//! `a_y ∘ s` is `‖a_y ∘ s‖_{A_x⁻¹}`, and symmetrically for the appliance row.
//! A pair's instantaneous score is the α-weighted sum of the two widths;
//! the integrated score sums instantaneous scores over a horizon of months,
//! weighted by a triangle kernel centred on the current month.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::als::SufficientStats;
use crate::error::{Error, Result};
use crate::tensor::{hadamard_into, FactorMatrix, LatentFactors, ModelConfig, NormCaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Use `alpha_home` and `alpha_app` verbatim.
    Fixed,
    /// Derive the radii from the high-probability factor error bound.
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub alpha_mode: AlphaMode,
    pub alpha_home: f64,
    pub alpha_app: f64,
    pub delta: f64,
    pub q_rates: [f64; 3],
    pub epsilons: [f64; 3],
    pub noise_sigma: f64,
    pub caps: NormCaps,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self {
            alpha_mode: AlphaMode::Fixed,
            alpha_home: 0.1,
            alpha_app: 0.1,
            delta: 0.05,
            q_rates: [0.5; 3],
            epsilons: [0.1; 3],
            noise_sigma: 1.0,
            caps: NormCaps::uniform(1.0),
        }
    }
}

/// Ellipsoid radii (α_x, α_y) used for one round of scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub home: f64,
    pub app: f64,
}

impl ConfidenceParams {
    /// The radii in effect when |Ω| cells have been observed.
    pub fn alphas(&self, omega_size: usize, config: &ModelConfig) -> Result<Alphas> {
        match self.alpha_mode {
            AlphaMode::Fixed => Ok(Alphas {
                home: self.alpha_home,
                app: self.alpha_app,
            }),
            AlphaMode::Derived => derived_alphas(omega_size, self, config),
        }
    }

    fn geometric_rates(&self) -> Result<[f64; 3]> {
        let mut f = [0.0; 3];
        for (m, rate) in f.iter_mut().enumerate() {
            *rate = self.q_rates[m] + self.epsilons[m];
            if !(self.q_rates[m] > 0.0 && self.q_rates[m] < 1.0) || self.epsilons[m] <= 0.0 {
                return Err(Error::invalid(format!(
                    "q_{} must lie in (0, 1) and ε_{} must be positive",
                    m + 1,
                    m + 1
                )));
            }
            if *rate >= 1.0 {
                return Err(Error::invalid(format!(
                    "q_{0} + ε_{0} = {1} ≥ 1 makes the geometric bound diverge",
                    m + 1,
                    rate
                )));
            }
        }
        Ok(f)
    }
}

/// Partial geometric sum f(1 − fⁿ)/(1 − f).
fn geometric_sum(f: f64, n: usize) -> f64 {
    f * (1.0 - f.powf(n as f64)) / (1.0 - f)
}

/// High-probability bounds on ‖ĥ − h*‖_A and ‖â − a*‖_C after |Ω| observations.
pub fn derived_alphas(omega_size: usize, cp: &ConfidenceParams, config: &ModelConfig) -> Result<Alphas> {
    if !(cp.delta > 0.0 && cp.delta < 1.0) {
        return Err(Error::invalid(format!("δ must lie in (0, 1), got {}", cp.delta)));
    }
    let (l1, l2) = (config.lambda_home, config.lambda_appliance);
    if l1 <= 0.0 || l2 <= 0.0 {
        return Err(Error::invalid("bound requires positive λ₁ and λ₂"));
    }
    let f = cp.geometric_rates()?;
    let g: Vec<f64> = f.iter().map(|&fm| geometric_sum(fm, omega_size)).collect();
    let r = config.rank as f64;
    let n = omega_size as f64;
    let NormCaps {
        home: p,
        appliance: q,
        season: rr,
    } = cp.caps;

    let log_term = |lambda: f64, scale: f64| {
        (r * ((lambda * r + n * scale) / (lambda * r * cp.delta)).ln()).sqrt()
    };
    let home = log_term(l1, q * q * rr * rr)
        + l1.sqrt() * p
        + 2.0 * p * q * q * rr * rr / l1.sqrt() * (g[1] + g[2]);
    let app = log_term(l2, p * p * rr * rr)
        + l2.sqrt() * q
        + 2.0 * p * p * q * rr * rr / l2.sqrt() * (g[0] + g[2]);
    Ok(Alphas { home, app })
}

/// Cached inverses of the home and appliance precision matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionInverses {
    pub home: Vec<DMatrix<f64>>,
    pub app: Vec<DMatrix<f64>>,
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("precision matrix is not positive definite".into()))
}

impl PrecisionInverses {
    pub fn from_stats(stats: &SufficientStats) -> Result<Self> {
        Ok(Self {
            home: stats.home_precision.iter().map(spd_inverse).collect::<Result<_>>()?,
            app: stats.app_precision.iter().map(spd_inverse).collect::<Result<_>>()?,
        })
    }
}

/// ‖v‖_M = √(vᵀ M v).
pub fn weighted_norm(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let r = v.len();
    let mut q = 0.0;
    for a in 0..r {
        let mut row = 0.0;
        for b in 0..r {
            row += m[(a, b)] * v[b];
        }
        q += v[a] * row;
    }
    q.max(0.0).sqrt()
}

/// Instantaneous uncertainty of pair (x, y) along season vector `s_tilde`.
pub fn instant_score(
    x: usize,
    y: usize,
    s_tilde: &[f64],
    inverses: &PrecisionInverses,
    factors: &LatentFactors,
    alphas: Alphas,
) -> Result<f64> {
    let rank = factors.rank();
    if s_tilde.len() != rank {
        return Err(Error::invalid("season vector has the wrong rank"));
    }
    if x >= inverses.home.len() || y >= inverses.app.len() {
        return Err(Error::invalid(format!("pair ({x}, {y}) out of range")));
    }
    let mut v = vec![0.0; rank];
    hadamard_into(factors.appliance.row(y), s_tilde, &mut v);
    let home_width = weighted_norm(&inverses.home[x], &v);
    hadamard_into(factors.home.row(x), s_tilde, &mut v);
    let app_width = weighted_norm(&inverses.app[y], &v);
    Ok(alphas.home * home_width + alphas.app * app_width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Half-width σ of the triangle kernel, in months.
    pub sigma_window: usize,
    /// Number of months T_h scored by the integrated uncertainty.
    pub horizon: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma_window: 3,
            horizon: 12,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_window == 0 || self.horizon == 0 {
            return Err(Error::invalid("kernel window and horizon must be at least 1"));
        }
        Ok(())
    }
}

/// Which months contribute to the integrated score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// The current month only.
    Current,
    /// The current month and the months ahead of it.
    CurrentFuture,
    /// Past, current and future months.
    #[default]
    Full,
}

impl std::str::FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(Self::Current),
            "current-future" => Ok(Self::CurrentFuture),
            "full" => Ok(Self::Full),
            other => Err(Error::invalid(format!("unknown uncertainty mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Current => "current",
            Self::CurrentFuture => "current-future",
            Self::Full => "full",
        })
    }
}

/// Triangle kernel: 1 − |t′ − t|/σ inside the window, 0 outside.
pub fn triangle_weight(t_prime: usize, t: usize, kc: &KernelConfig) -> f64 {
    let lag = t_prime.abs_diff(t);
    let sigma = kc.sigma_window.max(1);
    if lag <= sigma {
        1.0 - lag as f64 / sigma as f64
    } else {
        0.0
    }
}

/// Everything needed to score pairs after a fit.
#[derive(Debug, Clone, Copy)]
pub struct ScoringContext<'a> {
    pub factors: &'a LatentFactors,
    pub inverses: &'a PrecisionInverses,
    /// Season factors for months not yet observed. When absent, the current
    /// month's fitted season row stands in for every future month.
    pub season_prior: Option<&'a FactorMatrix>,
    pub alphas: Alphas,
    pub kernel: KernelConfig,
    pub mode: UncertaintyMode,
}

/// Kernel-weighted sum of instantaneous scores over months 1..=horizon.
///
/// `t` is the current month, 1-based. Months up to `t` use the fitted season
/// rows; later months use the prior.
pub fn integrated_uncertainty(x: usize, y: usize, t: usize, ctx: &ScoringContext<'_>) -> Result<f64> {
    ctx.kernel.validate()?;
    let fitted = &ctx.factors.season;
    if t == 0 || t > fitted.rows() {
        return Err(Error::invalid(format!(
            "current month {t} outside the fitted range 1..={}",
            fitted.rows()
        )));
    }
    let mut total = 0.0;
    for t_prime in 1..=ctx.kernel.horizon {
        let in_scope = match ctx.mode {
            UncertaintyMode::Current => t_prime == t,
            UncertaintyMode::CurrentFuture => t_prime >= t,
            UncertaintyMode::Full => true,
        };
        let w = triangle_weight(t_prime, t, &ctx.kernel);
        if !in_scope || w == 0.0 {
            continue;
        }
        let s_tilde = if t_prime <= t {
            fitted.row(t_prime - 1)
        } else {
            match ctx.season_prior {
                Some(prior) if t_prime <= prior.rows() => prior.row(t_prime - 1),
                Some(prior) => {
                    return Err(Error::invalid(format!(
                        "season prior has {} rows, month {t_prime} needed",
                        prior.rows()
                    )))
                }
                None => fitted.row(t - 1),
            }
        };
        total += w * instant_score(x, y, s_tilde, ctx.inverses, ctx.factors, ctx.alphas)?;
    }
    Ok(total)
}

/// Upper bound on |ê_ijk − e*_ijk| at month `t`: the two ellipsoid widths
/// plus the geometric convergence tails 4PQR f₂^{t+1} + 2PQR f₃^{t+1}.
#[allow(clippy::too_many_arguments)]
pub fn error_bound(
    i: usize,
    j: usize,
    k: usize,
    factors: &LatentFactors,
    inverses: &PrecisionInverses,
    alphas: Alphas,
    cp: &ConfidenceParams,
    t: usize,
) -> Result<f64> {
    if k >= factors.season.rows() {
        return Err(Error::invalid(format!("month {k} out of range")));
    }
    let width = instant_score(i, j, factors.season.row(k), inverses, factors, alphas)?;
    let f = cp.geometric_rates()?;
    let pqr = cp.caps.home * cp.caps.appliance * cp.caps.season;
    let exponent = (t + 1) as i32;
    Ok(width + 4.0 * pqr * f[1].powi(exponent) + 2.0 * pqr * f[2].powi(exponent))
}

/// (A + v vᵀ)⁻¹ from A⁻¹ by the Sherman–Morrison formula.
pub fn sherman_morrison_update(inverse: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let v = DVector::from_column_slice(v);
    let u = inverse * &v;
    let denom = 1.0 + v.dot(&u);
    inverse - (&u * u.transpose()) / denom
}

/// Post-selection error bound for a selected pair with widths (m, n) and any
/// other pair with widths (g, h): observing the selected pair shrinks its
/// widths to w/√(1+w²) while the other pair keeps its widths.
///
/// Selecting the pair with the larger widths never yields a larger bound:
/// `post_selection_bound(α, (m, n), (g, h)) <= post_selection_bound(α, (g, h), (m, n))`
/// whenever m ≥ g and n ≥ h.
pub fn post_selection_bound(alphas: Alphas, selected: (f64, f64), other: (f64, f64)) -> f64 {
    let shrink = |w: f64| w / (1.0 + w * w).sqrt();
    alphas.home * shrink(selected.0)
        + alphas.app * shrink(selected.1)
        + alphas.home * other.0
        + alphas.app * other.1
}

//! Alternating ridge updates for the nonnegative CP model.
//!
//! Each row of each factor matrix has a closed-form minimizer once the other
//! two factor matrices are frozen: the ridge normal equations
//! `(λI + Σ v vᵀ) x = Σ e v` where `v` is the Hadamard product of the two
//! frozen rows touching the observed cell. [`SufficientStats`] holds those
//! precision matrices and right-hand sides for every row; [`fit`] sweeps
//! homes, appliances and seasons in turn until the objective settles.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    check_prior, check_shapes, hadamard_into, norm, objective_from, Cell, EnergyTensor,
    FactorMatrix, LatentFactors, ModelConfig, NormCaps, ObservationSet,
};

/// Largest condition-number estimate tolerated by [`solve_block`].
pub const MAX_CONDITION: f64 = 1e12;

const MAX_REVIVALS: usize = 3;

/// Per-row ridge normal equations for all three factor families.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub home_precision: Vec<DMatrix<f64>>,
    pub home_rhs: Vec<DVector<f64>>,
    pub app_precision: Vec<DMatrix<f64>>,
    pub app_rhs: Vec<DVector<f64>>,
    pub season_precision: Vec<DMatrix<f64>>,
    pub season_rhs: Vec<DVector<f64>>,
}

/// Which factor matrix a block of rows belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Home,
    Appliance,
    Season,
}

#[derive(Debug, Clone)]
struct Family {
    precision: Vec<DMatrix<f64>>,
    rhs: Vec<DVector<f64>>,
}

impl Family {
    fn seeded(rows: usize, rank: usize, lambda: f64) -> Self {
        Self {
            precision: vec![DMatrix::identity(rank, rank) * lambda; rows],
            rhs: vec![DVector::zeros(rank); rows],
        }
    }

    fn add(&mut self, row: usize, v: &[f64], e: f64) {
        let p = &mut self.precision[row];
        let r = v.len();
        for b in 0..r {
            for a in 0..r {
                p[(a, b)] += v[a] * v[b];
            }
        }
        for (x, vi) in self.rhs[row].iter_mut().zip(v) {
            *x += e * vi;
        }
    }
}

fn build_family(
    mode: Mode,
    observations: &[(Cell, f64)],
    factors: &LatentFactors,
    rows: usize,
    lambda: f64,
) -> Family {
    let rank = factors.rank();
    let mut family = Family::seeded(rows, rank, lambda);
    let mut v = vec![0.0; rank];
    for &(c, e) in observations {
        let (row, x, y) = match mode {
            Mode::Home => (c.home, factors.appliance.row(c.appliance), factors.season.row(c.month)),
            Mode::Appliance => (c.appliance, factors.home.row(c.home), factors.season.row(c.month)),
            Mode::Season => (c.month, factors.home.row(c.home), factors.appliance.row(c.appliance)),
        };
        hadamard_into(x, y, &mut v);
        family.add(row, &v, e);
    }
    family
}

impl SufficientStats {
    /// Regularizer-only statistics: λI precisions and zero right-hand sides.
    pub fn seeded(
        homes: usize,
        appliances: usize,
        months: usize,
        rank: usize,
        config: &ModelConfig,
    ) -> Self {
        let h = Family::seeded(homes, rank, config.lambda_home);
        let a = Family::seeded(appliances, rank, config.lambda_appliance);
        let s = Family::seeded(months, rank, config.lambda_season);
        Self::from_families(h, a, s)
    }

    fn from_families(h: Family, a: Family, s: Family) -> Self {
        Self {
            home_precision: h.precision,
            home_rhs: h.rhs,
            app_precision: a.precision,
            app_rhs: a.rhs,
            season_precision: s.precision,
            season_rhs: s.rhs,
        }
    }

    /// Folds one observed reading into all three families.
    pub fn add_observation(&mut self, cell: Cell, reading: f64, factors: &LatentFactors) {
        let rank = factors.rank();
        let (h, a, s) = (
            factors.home.row(cell.home),
            factors.appliance.row(cell.appliance),
            factors.season.row(cell.month),
        );
        let mut v = vec![0.0; rank];
        let add = |p: &mut DMatrix<f64>, b: &mut DVector<f64>, v: &[f64]| {
            p.ger(1.0, &DVector::from_column_slice(v), &DVector::from_column_slice(v), 1.0);
            for (x, vi) in b.iter_mut().zip(v) {
                *x += reading * vi;
            }
        };
        hadamard_into(a, s, &mut v);
        add(&mut self.home_precision[cell.home], &mut self.home_rhs[cell.home], &v);
        hadamard_into(h, s, &mut v);
        add(
            &mut self.app_precision[cell.appliance],
            &mut self.app_rhs[cell.appliance],
            &v,
        );
        hadamard_into(h, a, &mut v);
        add(&mut self.season_precision[cell.month], &mut self.season_rhs[cell.month], &v);
    }

    pub fn rank(&self) -> usize {
        self.home_rhs.first().map_or(0, |v| v.len())
    }

    /// Entry-wise sum of the precision matrices and right-hand sides.
    pub fn combine(&self, other: &SufficientStats) -> SufficientStats {
        let zip_m = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        let zip_v = |a: &[DVector<f64>], b: &[DVector<f64>]| -> Vec<DVector<f64>> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        SufficientStats {
            home_precision: zip_m(&self.home_precision, &other.home_precision),
            home_rhs: zip_v(&self.home_rhs, &other.home_rhs),
            app_precision: zip_m(&self.app_precision, &other.app_precision),
            app_rhs: zip_v(&self.app_rhs, &other.app_rhs),
            season_precision: zip_m(&self.season_precision, &other.season_precision),
            season_rhs: zip_v(&self.season_rhs, &other.season_rhs),
        }
    }
}

/// Builds every row's normal equations from the current factors and Ω.
pub fn accumulate_stats(
    tensor: &EnergyTensor,
    omega: &ObservationSet,
    factors: &LatentFactors,
    config: &ModelConfig,
) -> Result<SufficientStats> {
    check_shapes(tensor, factors, config.rank)?;
    let observations = omega.readings(tensor)?;
    Ok(stats_from(&observations, factors, config))
}

fn stats_from(
    observations: &[(Cell, f64)],
    factors: &LatentFactors,
    config: &ModelConfig,
) -> SufficientStats {
    let (m, n, t) = factors.shape();
    SufficientStats::from_families(
        build_family(Mode::Home, observations, factors, m, config.lambda_home),
        build_family(Mode::Appliance, observations, factors, n, config.lambda_appliance),
        build_family(Mode::Season, observations, factors, t, config.lambda_season),
    )
}

/// Solves `precision · x = rhs + λ·prior` for one row.
///
/// `precision` must be symmetric positive definite. The condition number is
/// estimated from the Cholesky pivots and the solve is rejected above
/// [`MAX_CONDITION`].
pub fn solve_block(
    precision: &DMatrix<f64>,
    rhs: &DVector<f64>,
    prior: Option<&[f64]>,
    lambda_for_prior: f64,
) -> Result<DVector<f64>> {
    let r = precision.nrows();
    if precision.ncols() != r || rhs.len() != r || prior.is_some_and(|p| p.len() != r) {
        return Err(Error::invalid("solve_block dimension mismatch"));
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("precision matrix is not positive definite".into()))?;
    let pivots = chol.l_dirty().diagonal();
    let (lo, hi) = pivots
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let condition = (hi / lo).powi(2);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Numerical(format!(
            "precision matrix condition estimate {condition:e} exceeds {MAX_CONDITION:e}"
        )));
    }
    let mut b = rhs.clone();
    if let Some(p) = prior {
        for (x, pi) in b.iter_mut().zip(p) {
            *x += lambda_for_prior * pi;
        }
    }
    Ok(chol.solve(&b))
}

/// Clamps negative entries to zero, then rescales onto the ball of radius `cap`.
pub fn project(v: &[f64], cap: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let n = norm(&out);
    if n > cap {
        let scale = cap / n;
        out.iter_mut().for_each(|x| *x *= scale);
    }
    out
}

/// Outcome of one [`fit`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sweeps_run: usize,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub factors: LatentFactors,
    pub stats: SufficientStats,
    pub report: FitReport,
    /// The caps actually enforced (explicit or derived from the data).
    pub caps: NormCaps,
}

/// Caps from the config, or derived from the largest observed reading.
pub fn resolve_caps(config: &ModelConfig, observations: &[(Cell, f64)]) -> NormCaps {
    config.norm_caps.unwrap_or_else(|| {
        let max = observations.iter().map(|&(_, e)| e).fold(0.0, f64::max);
        NormCaps::from_max_reading(max)
    })
}

/// Draws a factor row with i.i.d. uniform (0, 1] entries, scaled to norm `cap / 2`.
/// Norms of freshly initialized rows: the cube root of the largest reading,
/// so initial products sit on the data scale, but never above half a cap.
pub(crate) fn init_norms(caps: NormCaps, observations: &[(Cell, f64)]) -> NormCaps {
    let max = observations.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    let natural = max.max(1.0).cbrt();
    NormCaps {
        home: natural.min(0.5 * caps.home),
        appliance: natural.min(0.5 * caps.appliance),
        season: natural.min(0.5 * caps.season),
    }
}

pub(crate) fn random_row(rng: &mut impl Rng, rank: usize, row_norm: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..rank).map(|_| 1.0 - rng.random::<f64>()).collect();
    let scale = row_norm / norm(&raw);
    raw.into_iter().map(|x| x * scale).collect()
}

pub(crate) fn random_factors(
    shape: (usize, usize, usize),
    rank: usize,
    norms: NormCaps,
    rng: &mut impl Rng,
) -> LatentFactors {
    let mut fill = |rows: usize, row_norm: f64| {
        let rows: Vec<Vec<f64>> = (0..rows).map(|_| random_row(rng, rank, row_norm)).collect();
        let mut m = FactorMatrix::zeros(rows.len(), rank);
        for (i, r) in rows.iter().enumerate() {
            m.set_row(i, r);
        }
        m
    };
    LatentFactors {
        home: fill(shape.0, norms.home),
        appliance: fill(shape.1, norms.appliance),
        season: fill(shape.2, norms.season),
    }
}

pub(crate) fn update_mode(
    mode: Mode,
    observations: &[(Cell, f64)],
    factors: &mut LatentFactors,
    config: &ModelConfig,
    caps: NormCaps,
    season_prior: Option<&FactorMatrix>,
) -> Result<()> {
    let (m, n, t) = factors.shape();
    let (rows, lambda, cap) = match mode {
        Mode::Home => (m, config.lambda_home, caps.home),
        Mode::Appliance => (n, config.lambda_appliance, caps.appliance),
        Mode::Season => (t, config.lambda_season, caps.season),
    };
    let family = build_family(mode, observations, factors, rows, lambda);
    for row in 0..rows {
        let prior = match mode {
            Mode::Season => season_prior.map(|p| p.row(row)),
            _ => None,
        };
        let x = solve_block(&family.precision[row], &family.rhs[row], prior, lambda)?;
        let x = if config.project {
            project(x.as_slice(), cap)
        } else {
            x.as_slice().to_vec()
        };
        let target = match mode {
            Mode::Home => &mut factors.home,
            Mode::Appliance => &mut factors.appliance,
            Mode::Season => &mut factors.season,
        };
        target.set_row(row, &x);
    }
    Ok(())
}

/// Fits the CP model to the cells in Ω by alternating closed-form row updates.
///
/// Without a warm start, factors are drawn from `config.seed`. Sweeps stop
/// when the relative change in the objective drops below `config.tol` or
/// after `config.max_sweeps`.
/// Reseeds components whose column has been clamped to zero in a whole
/// factor matrix. Such a column is a fixed point of the row updates, so the
/// model would otherwise lose that rank for good. Returns how many columns
/// were reseeded, at most `limit`.
fn revive_dead_components(
    factors: &mut LatentFactors,
    norms: NormCaps,
    rng: &mut impl Rng,
    limit: usize,
) -> usize {
    let rank = factors.rank();
    let scale = 1.0 / (rank as f64).sqrt();
    let mut revived = 0;
    for (matrix, row_norm) in [
        (&mut factors.home, norms.home),
        (&mut factors.appliance, norms.appliance),
        (&mut factors.season, norms.season),
    ] {
        for d in 0..rank {
            if revived == limit {
                return revived;
            }
            if matrix.rows() > 0 && matrix.iter_rows().all(|row| row[d] == 0.0) {
                for i in 0..matrix.rows() {
                    matrix.row_mut(i)[d] = row_norm * scale * (1.0 - rng.random::<f64>());
                }
                revived += 1;
            }
        }
    }
    revived
}

pub fn fit(
    tensor: &EnergyTensor,
    omega: &ObservationSet,
    config: &ModelConfig,
    season_prior: Option<&FactorMatrix>,
    warm_start: Option<&LatentFactors>,
) -> Result<Fit> {
    config.validate()?;
    check_prior(season_prior, tensor.num_months(), config.rank)?;
    let observations = omega.readings(tensor)?;
    let caps = resolve_caps(config, &observations);
    let norms = init_norms(caps, &observations);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut factors = match warm_start {
        Some(f) => {
            check_shapes(tensor, f, config.rank)?;
            f.clone()
        }
        None => {
            let shape = (tensor.num_homes(), tensor.num_appliances(), tensor.num_months());
            random_factors(shape, config.rank, norms, &mut rng)
        }
    };
    let has_signal = observations.iter().any(|&(_, e)| e > 0.0);
    let mut revivals_left = if config.project && has_signal { MAX_REVIVALS } else { 0 };

    let mut previous = objective_from(&observations, &factors, config, season_prior);
    let mut trace = Vec::new();
    let mut converged = false;
    for sweep in 0..config.max_sweeps {
        for mode in [Mode::Home, Mode::Appliance, Mode::Season] {
            update_mode(mode, &observations, &mut factors, config, caps, season_prior)?;
        }
        let current = objective_from(&observations, &factors, config, season_prior);
        trace.push(current);
        let change = (previous - current).abs();
        previous = current;
        if revivals_left > 0 && sweep < config.max_sweeps / 2 {
            let revived = revive_dead_components(&mut factors, norms, &mut rng, revivals_left);
            if revived > 0 {
                log::debug!("sweep {}: reseeded {revived} collapsed components", sweep + 1);
                revivals_left -= revived;
                previous = objective_from(&observations, &factors, config, season_prior);
                continue;
            }
        }
        if change <= config.tol * current.abs() || current == 0.0 {
            converged = true;
            break;
        }
    }

    let stats = stats_from(&observations, &factors, config);
    Ok(Fit {
        factors,
        stats,
        report: FitReport {
            sweeps_run: trace.len(),
            objective_trace: trace,
            converged,
        },
        caps,
    })
}

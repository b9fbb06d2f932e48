//! The homes × appliances × months energy tensor and the CP algebra on top of it.
//!
//! Readings are stored densely. A parallel availability mask records which
//! cells exist in the ground truth; the [`ObservationSet`] is the subset of
//! those cells a model is allowed to see at a given point in time.
//!
//! The aggregate (whole-home bill) is stored as an extra appliance slice,
//! conventionally at index 0, and is always available.

use std::collections::BTreeSet;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label reserved for the aggregate pseudo-appliance.
pub const AGGREGATE_LABEL: &str = "aggregate";

/// Index of the aggregate slice in tensors built by this crate.
pub const AGGREGATE_INDEX: usize = 0;

/// Dense monthly energy readings with an availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTensor {
    readings: Array3<f64>,
    mask: Array3<bool>,
    appliance_names: Vec<String>,
    aggregate_index: usize,
    home_ids: Vec<String>,
    months: Vec<String>,
}

impl EnergyTensor {
    /// Wraps a fully specified tensor, aggregate slice included.
    pub fn new(
        readings: Array3<f64>,
        mask: Array3<bool>,
        appliance_names: Vec<String>,
        aggregate_index: usize,
    ) -> Result<Self> {
        let (m, n, t) = readings.dim();
        if mask.dim() != (m, n, t) {
            return Err(Error::invalid(format!(
                "mask shape {:?} does not match readings shape {:?}",
                mask.dim(),
                (m, n, t)
            )));
        }
        if appliance_names.len() != n {
            return Err(Error::invalid(format!(
                "{} appliance names for {} appliance slices",
                appliance_names.len(),
                n
            )));
        }
        if aggregate_index >= n {
            return Err(Error::invalid(format!(
                "aggregate index {aggregate_index} out of range for {n} appliances"
            )));
        }
        if let Some(bad) = readings.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "readings must be finite and nonnegative, found {bad}"
            )));
        }
        for i in 0..m {
            for k in 0..t {
                if !mask[[i, aggregate_index, k]] {
                    return Err(Error::invalid(format!(
                        "aggregate reading missing for home {i}, month {k}"
                    )));
                }
            }
        }
        Ok(Self {
            readings,
            mask,
            appliance_names,
            aggregate_index,
            home_ids: (0..m).map(|i| i.to_string()).collect(),
            months: (0..t).map(|k| format!("month-{:02}", k + 1)).collect(),
        })
    }

    /// Builds a tensor from per-appliance readings, prepending an aggregate
    /// slice at [`AGGREGATE_INDEX`] equal to the sum of the available
    /// appliance readings for each home and month.
    pub fn from_appliances(
        readings: Array3<f64>,
        mask: Array3<bool>,
        appliance_names: Vec<String>,
    ) -> Result<Self> {
        let (m, n, t) = readings.dim();
        if mask.dim() != (m, n, t) {
            return Err(Error::invalid("mask and readings shapes differ"));
        }
        if appliance_names.iter().any(|name| name == AGGREGATE_LABEL) {
            return Err(Error::invalid(format!(
                "appliance label {AGGREGATE_LABEL:?} is reserved"
            )));
        }
        let mut full = Array3::<f64>::zeros((m, n + 1, t));
        let mut full_mask = Array3::<bool>::from_elem((m, n + 1, t), false);
        for i in 0..m {
            for k in 0..t {
                let mut total = 0.0;
                for j in 0..n {
                    if mask[[i, j, k]] {
                        full[[i, j + 1, k]] = readings[[i, j, k]];
                        full_mask[[i, j + 1, k]] = true;
                        total += readings[[i, j, k]];
                    }
                }
                full[[i, AGGREGATE_INDEX, k]] = total;
                full_mask[[i, AGGREGATE_INDEX, k]] = true;
            }
        }
        let mut names = Vec::with_capacity(n + 1);
        names.push(AGGREGATE_LABEL.to_string());
        names.extend(appliance_names);
        Self::new(full, full_mask, names, AGGREGATE_INDEX)
    }

    /// Attaches external home identifiers and month labels.
    pub fn with_labels(mut self, home_ids: Vec<String>, months: Vec<String>) -> Result<Self> {
        if home_ids.len() != self.num_homes() || months.len() != self.num_months() {
            return Err(Error::invalid("label counts do not match tensor shape"));
        }
        self.home_ids = home_ids;
        self.months = months;
        Ok(self)
    }

    pub fn num_homes(&self) -> usize {
        self.readings.dim().0
    }

    /// Number of appliance slices, aggregate included.
    pub fn num_appliances(&self) -> usize {
        self.readings.dim().1
    }

    pub fn num_months(&self) -> usize {
        self.readings.dim().2
    }

    pub fn aggregate_index(&self) -> usize {
        self.aggregate_index
    }

    pub fn appliance_names(&self) -> &[String] {
        &self.appliance_names
    }

    pub fn home_ids(&self) -> &[String] {
        &self.home_ids
    }

    pub fn months(&self) -> &[String] {
        &self.months
    }

    pub fn readings(&self) -> &Array3<f64> {
        &self.readings
    }

    pub fn mask(&self) -> &Array3<bool> {
        &self.mask
    }

    /// Indices of the breakdown appliances, i.e. everything but the aggregate.
    pub fn breakdown_appliances(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_appliances()).filter(move |&j| j != self.aggregate_index)
    }

    pub fn in_range(&self, cell: Cell) -> bool {
        cell.home < self.num_homes()
            && cell.appliance < self.num_appliances()
            && cell.month < self.num_months()
    }

    /// Whether the cell exists in the ground truth.
    pub fn is_available(&self, cell: Cell) -> bool {
        self.in_range(cell) && self.mask[[cell.home, cell.appliance, cell.month]]
    }

    /// The reading at `cell`, or `None` when the cell is out of range or
    /// unavailable.
    pub fn get(&self, cell: Cell) -> Option<f64> {
        self.is_available(cell)
            .then(|| self.readings[[cell.home, cell.appliance, cell.month]])
    }

    /// Largest absolute deviation between the aggregate slice and the sum of
    /// the available breakdown appliances.
    pub fn aggregate_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.num_homes() {
            for k in 0..self.num_months() {
                let sum: f64 = self
                    .breakdown_appliances()
                    .filter(|&j| self.mask[[i, j, k]])
                    .map(|j| self.readings[[i, j, k]])
                    .sum();
                worst = worst.max((sum - self.readings[[i, self.aggregate_index, k]]).abs());
            }
        }
        worst
    }
}

/// One (home, appliance, month) index triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub home: usize,
    pub appliance: usize,
    pub month: usize,
}

impl Cell {
    pub fn new(home: usize, appliance: usize, month: usize) -> Self {
        Self {
            home,
            appliance,
            month,
        }
    }
}

/// The cells visible to a model, Ω.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSet {
    entries: BTreeSet<Cell>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if the cell was not present before.
    pub fn insert(&mut self, cell: Cell) -> bool {
        self.entries.insert(cell)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.entries.contains(&cell)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Cell> + '_ {
        self.entries.iter().copied()
    }

    pub fn is_subset(&self, other: &ObservationSet) -> bool {
        self.entries.is_subset(&other.entries)
    }

    pub fn union(&self, other: &ObservationSet) -> ObservationSet {
        ObservationSet {
            entries: self.entries.union(&other.entries).copied().collect(),
        }
    }

    /// Every cell in the tensor that is available in the ground truth.
    pub fn all_available(tensor: &EnergyTensor) -> ObservationSet {
        let mut set = ObservationSet::new();
        for ((i, j, k), &ok) in tensor.mask().indexed_iter() {
            if ok {
                set.insert(Cell::new(i, j, k));
            }
        }
        set
    }

    /// Pairs each observed cell with its reading. Fails if a cell is out of
    /// range or unavailable in the ground truth.
    pub(crate) fn readings(&self, tensor: &EnergyTensor) -> Result<Vec<(Cell, f64)>> {
        self.entries
            .iter()
            .map(|&cell| {
                if !tensor.in_range(cell) {
                    return Err(Error::invalid(format!("observation {cell:?} out of range")));
                }
                tensor.get(cell).map(|e| (cell, e)).ok_or_else(|| {
                    Error::ContractViolation(format!(
                        "observation {cell:?} refers to an unavailable cell"
                    ))
                })
            })
            .collect()
    }
}

impl FromIterator<Cell> for ObservationSet {
    fn from_iter<I: IntoIterator<Item = Cell>>(iter: I) -> Self {
        ObservationSet {
            entries: iter.into_iter().collect(),
        }
    }
}

impl Extend<Cell> for ObservationSet {
    fn extend<I: IntoIterator<Item = Cell>>(&mut self, iter: I) {
        self.entries.extend(iter)
    }
}

/// Row-major `rows × rank` matrix of latent factor vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrix {
    rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, rank: usize) -> Self {
        Self {
            rows,
            rank,
            data: vec![0.0; rows * rank],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rank = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != rank) {
            return Err(Error::invalid("factor rows have differing lengths"));
        }
        Ok(Self {
            rows: rows.len(),
            rank,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.rank..(i + 1) * self.rank]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.rank..(i + 1) * self.rank]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        self.row_mut(i).copy_from_slice(values);
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.rank.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Sum of squared entries.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.iter_rows().map(norm).fold(0.0, f64::max)
    }
}

/// Home, appliance and season factors of a CP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub home: FactorMatrix,
    pub appliance: FactorMatrix,
    pub season: FactorMatrix,
}

impl LatentFactors {
    pub fn new(home: FactorMatrix, appliance: FactorMatrix, season: FactorMatrix) -> Result<Self> {
        if home.rank() != appliance.rank() || home.rank() != season.rank() {
            return Err(Error::invalid("factor matrices disagree on rank"));
        }
        Ok(Self {
            home,
            appliance,
            season,
        })
    }

    pub fn zeros(homes: usize, appliances: usize, months: usize, rank: usize) -> Self {
        Self {
            home: FactorMatrix::zeros(homes, rank),
            appliance: FactorMatrix::zeros(appliances, rank),
            season: FactorMatrix::zeros(months, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.home.rank()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.home.rows(), self.appliance.rows(), self.season.rows())
    }

    /// Whether every entry is nonnegative and every row is within its cap
    /// (with a small relative slack for rounding).
    pub fn is_feasible(&self, caps: NormCaps) -> bool {
        let within = |m: &FactorMatrix, cap: f64| {
            m.as_slice().iter().all(|&v| v >= 0.0)
                && m.iter_rows().all(|r| norm(r) <= cap * (1.0 + 1e-12))
        };
        within(&self.home, caps.home)
            && within(&self.appliance, caps.appliance)
            && within(&self.season, caps.season)
    }
}

/// Row-norm caps (P, Q, R) for home, appliance and season factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormCaps {
    pub home: f64,
    pub appliance: f64,
    pub season: f64,
}

impl NormCaps {
    pub fn uniform(cap: f64) -> Self {
        Self {
            home: cap,
            appliance: cap,
            season: cap,
        }
    }

    /// Ten times the cube root of the largest reading, so that a product of
    /// three capped rows can always reach the data range.
    pub fn from_max_reading(max_reading: f64) -> Self {
        Self::uniform(10.0 * max_reading.max(1.0).cbrt())
    }

    fn validate(&self) -> Result<()> {
        for cap in [self.home, self.appliance, self.season] {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(Error::invalid(format!("norm caps must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of the regularized CP fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rank: usize,
    pub lambda_home: f64,
    pub lambda_appliance: f64,
    pub lambda_season: f64,
    /// Explicit caps; derived from the observed readings when `None`.
    pub norm_caps: Option<NormCaps>,
    pub max_sweeps: usize,
    pub tol: f64,
    pub seed: u64,
    /// Clamp to the nonnegative, norm-capped set after each row update.
    pub project: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            lambda_home: 1.0,
            lambda_appliance: 1.0,
            lambda_season: 1.0,
            norm_caps: None,
            max_sweeps: 100,
            tol: 1e-6,
            seed: 0,
            project: true,
        }
    }
}

impl ModelConfig {
    /// Sets λ₁ = λ₂ = λ₃.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_home = lambda;
        self.lambda_appliance = lambda;
        self.lambda_season = lambda;
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        for (name, lambda) in [
            ("lambda_home", self.lambda_home),
            ("lambda_appliance", self.lambda_appliance),
            ("lambda_season", self.lambda_season),
        ] {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {lambda}")));
            }
        }
        if let Some(caps) = self.norm_caps {
            caps.validate()?;
        }
        if self.max_sweeps == 0 {
            return Err(Error::invalid("max_sweeps must be positive"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )))
    }
}

/// ⟨h, a, s⟩ = Σ_d h_d a_d s_d.
pub fn triple_product(h: &[f64], a: &[f64], s: &[f64]) -> Result<f64> {
    check_len(h, a)?;
    check_len(h, s)?;
    Ok(triple_unchecked(h, a, s))
}

#[inline]
pub(crate) fn triple_unchecked(h: &[f64], a: &[f64], s: &[f64]) -> f64 {
    h.iter().zip(a).zip(s).map(|((x, y), z)| x * y * z).sum()
}

/// Element-wise product u ∘ v.
pub fn hadamard(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len(u, v)?;
    Ok(u.iter().zip(v).map(|(x, y)| x * y).collect())
}

#[inline]
pub(crate) fn hadamard_into(u: &[f64], v: &[f64], out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(u).zip(v) {
        *o = x * y;
    }
}

/// Predicted reading for cell (i, j, k).
pub fn predict(factors: &LatentFactors, i: usize, j: usize, k: usize) -> Result<f64> {
    let (m, n, t) = factors.shape();
    if i >= m || j >= n || k >= t {
        return Err(Error::invalid(format!(
            "cell ({i}, {j}, {k}) out of range for factors of shape ({m}, {n}, {t})"
        )));
    }
    Ok(triple_unchecked(
        factors.home.row(i),
        factors.appliance.row(j),
        factors.season.row(k),
    ))
}

pub(crate) fn check_shapes(
    tensor: &EnergyTensor,
    factors: &LatentFactors,
    rank: usize,
) -> Result<()> {
    let want = (tensor.num_homes(), tensor.num_appliances(), tensor.num_months());
    if factors.shape() != want || factors.rank() != rank {
        return Err(Error::invalid(format!(
            "factors of shape {:?} and rank {} do not match tensor {:?} at rank {}",
            factors.shape(),
            factors.rank(),
            want,
            rank
        )));
    }
    Ok(())
}

pub(crate) fn check_prior(prior: Option<&FactorMatrix>, months: usize, rank: usize) -> Result<()> {
    match prior {
        Some(p) if p.rank() != rank || p.rows() < months => Err(Error::invalid(format!(
            "season prior is {}×{}, need at least {}×{}",
            p.rows(),
            p.rank(),
            months,
            rank
        ))),
        _ => Ok(()),
    }
}

/// Squared loss over Ω plus squared-L2 ridge penalties. With a season prior
/// the season penalty is taken around the prior rows instead of zero.
pub fn masked_objective(
    tensor: &EnergyTensor,
    omega: &ObservationSet,
    factors: &LatentFactors,
    config: &ModelConfig,
    season_prior: Option<&FactorMatrix>,
) -> Result<f64> {
    check_shapes(tensor, factors, factors.rank())?;
    check_prior(season_prior, tensor.num_months(), factors.rank())?;
    let observations = omega.readings(tensor)?;
    Ok(objective_from(&observations, factors, config, season_prior))
}

pub(crate) fn objective_from(
    observations: &[(Cell, f64)],
    factors: &LatentFactors,
    config: &ModelConfig,
    season_prior: Option<&FactorMatrix>,
) -> f64 {
    let loss: f64 = observations
        .iter()
        .map(|&(c, e)| {
            let r = triple_unchecked(
                factors.home.row(c.home),
                factors.appliance.row(c.appliance),
                factors.season.row(c.month),
            ) - e;
            r * r
        })
        .sum();
    let season_penalty = match season_prior {
        None => factors.season.squared_norm(),
        Some(prior) => factors
            .season
            .iter_rows()
            .enumerate()
            .map(|(k, s)| {
                s.iter()
                    .zip(prior.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum(),
    };
    loss + config.lambda_home * factors.home.squared_norm()
        + config.lambda_appliance * factors.appliance.squared_norm()
        + config.lambda_season * season_penalty
}

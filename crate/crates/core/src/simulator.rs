//! Month-by-month deployment loop.
//!
//! Each month: reveal the new aggregate bills and the readings of every
//! sensor installed in an earlier month, refit the model (warm-started from
//! last month), score the held-out homes, and let the strategy choose the
//! next `L` pairs. Sensors installed at the end of month `m` report from
//! month `m + 1` onwards.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::als::{self, init_norms, random_row, resolve_caps, FitReport, SufficientStats};
use crate::data_io::tensor_checksum;
use crate::error::{Error, Result};
use crate::evaluation::{mean_rmse, rmse_appliance_month, FoldSplit};
use crate::strategy::{
    select_actsense, select_actsense_sequential, select_qbc, select_random, CandidatePool, Pair,
    SelectionResult, StrategyKind,
};
use crate::tensor::{Cell, EnergyTensor, FactorMatrix, LatentFactors, ModelConfig, ObservationSet};
use crate::uncertainty::{
    ConfidenceParams, KernelConfig, PrecisionInverses, ScoringContext, UncertaintyMode,
};

/// Full configuration of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub confidence: ConfidenceParams,
    pub kernel: KernelConfig,
    pub mode: UncertaintyMode,
    pub strategy: StrategyKind,
    /// Pairs installed per month, L.
    pub budget: usize,
    /// Months simulated, T.
    pub months: usize,
    pub committee_ranks: Vec<usize>,
    /// Re-rank after each pick with rank-one inverse updates (ActSense only).
    pub sequential: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            confidence: ConfidenceParams::default(),
            kernel: KernelConfig::default(),
            mode: UncertaintyMode::Full,
            strategy: StrategyKind::ActSense,
            budget: 5,
            months: 12,
            committee_ranks: vec![1, 2, 3, 4],
            sequential: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, tensor: &EnergyTensor) -> Result<()> {
        self.model.validate()?;
        self.kernel.validate()?;
        if self.months == 0 || self.months > tensor.num_months() {
            return Err(Error::invalid(format!(
                "cannot simulate {} months of a {}-month tensor",
                self.months,
                tensor.num_months()
            )));
        }
        if self.strategy == StrategyKind::Qbc && self.committee_ranks.len() < 2 {
            return Err(Error::invalid("query-by-committee needs at least two ranks"));
        }
        if self.committee_ranks.contains(&0) {
            return Err(Error::invalid("committee ranks must be positive"));
        }
        Ok(())
    }
}

/// Mutable state carried between months.
#[derive(Debug, Clone)]
pub struct SimState {
    /// Last completed month, 1-based; 0 before the first step.
    pub month: usize,
    pub omega: ObservationSet,
    /// Installed pairs and the month they were installed in.
    pub installed: BTreeMap<Pair, usize>,
    pub factors: Option<LatentFactors>,
    pub stats: Option<SufficientStats>,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn new(seed: u64) -> Self {
        Self {
            month: 0,
            omega: ObservationSet::new(),
            installed: BTreeMap::new(),
            factors: None,
            stats: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Adds month `t`'s aggregate bills for every home in the split and the
    /// month-`t` readings of sensors installed before `t`. Returns the number
    /// of new cells.
    pub fn reveal(&mut self, tensor: &EnergyTensor, split: &FoldSplit, t: usize) -> Result<usize> {
        if t != self.month + 1 {
            return Err(Error::ContractViolation(format!(
                "reveal for month {t} after month {}",
                self.month
            )));
        }
        let k = t - 1;
        let agg = tensor.aggregate_index();
        let before = self.omega.len();
        for &i in split.all_homes() {
            self.omega.insert(Cell::new(i, agg, k));
        }
        for (pair, &installed_at) in &self.installed {
            if installed_at >= t {
                continue;
            }
            let cell = Cell::new(pair.home, pair.appliance, k);
            if tensor.is_available(cell) {
                self.omega.insert(cell);
            } else {
                log::debug!("no reading for {pair:?} in month {t}; skipped");
            }
        }
        Ok(self.omega.len() - before)
    }
}

/// What happened in one simulated month.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthLog {
    pub month: usize,
    pub revealed: usize,
    pub omega_size: usize,
    pub fit: FitReport,
    /// Test RMSE per breakdown appliance; `None` where no test home has a reading.
    pub rmse: Vec<Option<f64>>,
    pub mean_rmse: f64,
    pub validation_mean_rmse: Option<f64>,
    pub pool_size: usize,
    pub selection: SelectionResult,
}

fn month_seed(seed: u64, month: usize) -> u64 {
    seed ^ (month as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Per-appliance RMSE over `homes` at month index `k`, plus their mean.
fn evaluate(
    tensor: &EnergyTensor,
    factors: &LatentFactors,
    homes: &[usize],
    k: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    let per_app: Vec<Option<f64>> = tensor
        .breakdown_appliances()
        .map(|j| {
            let available: Vec<usize> = homes
                .iter()
                .copied()
                .filter(|&i| tensor.is_available(Cell::new(i, j, k)))
                .collect();
            if available.is_empty() {
                Ok(None)
            } else {
                rmse_appliance_month(tensor, factors, j, k, &available).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let present: Vec<f64> = per_app.iter().flatten().copied().collect();
    let mean = mean_rmse(&present).map_err(|_| {
        Error::invalid(format!("no appliance readings for evaluated homes in month {}", k + 1))
    })?;
    Ok((per_app, mean))
}

/// Advances the simulation by one month.
pub fn step_month(
    state: &mut SimState,
    tensor: &EnergyTensor,
    split: &FoldSplit,
    cfg: &SimConfig,
    season_prior: Option<&FactorMatrix>,
) -> Result<MonthLog> {
    if state.month >= cfg.months {
        return Err(Error::ContractViolation(format!(
            "simulation already finished {} months",
            cfg.months
        )));
    }
    let t = state.month + 1;
    let k = t - 1;
    let revealed = state.reveal(tensor, split, t)?;

    let observations = state.omega.readings(tensor)?;
    let norms = init_norms(resolve_caps(&cfg.model, &observations), &observations);
    let warm = state.factors.take().map(|mut f| {
        let row = random_row(&mut state.rng, cfg.model.rank, norms.season);
        f.season.set_row(k, &row);
        f
    });
    let model = ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    let fit = als::fit(tensor, &state.omega, &model, season_prior, warm.as_ref())?;
    let inverses = PrecisionInverses::from_stats(&fit.stats)?;

    let (rmse, mean_rmse) = evaluate(tensor, &fit.factors, &split.test, k)?;
    let validation_mean_rmse = if split.validation.is_empty() {
        None
    } else {
        Some(evaluate(tensor, &fit.factors, &split.validation, k)?.1)
    };

    let pool = CandidatePool::build(
        &split.train,
        tensor.num_appliances(),
        tensor.aggregate_index(),
        &state.installed,
    );
    let selection = if cfg.budget == 0 {
        SelectionResult::default()
    } else {
        match cfg.strategy {
            StrategyKind::ActSense => {
                let cp = ConfidenceParams {
                    caps: fit.caps,
                    ..cfg.confidence.clone()
                };
                let ctx = ScoringContext {
                    factors: &fit.factors,
                    inverses: &inverses,
                    season_prior,
                    alphas: cp.alphas(state.omega.len(), &cfg.model)?,
                    kernel: cfg.kernel,
                    mode: cfg.mode,
                };
                if cfg.sequential {
                    select_actsense_sequential(&pool, cfg.budget, t, &ctx)?
                } else {
                    select_actsense(&pool, cfg.budget, t, &ctx)?
                }
            }
            StrategyKind::Random => select_random(&pool, cfg.budget, month_seed(cfg.seed, t)),
            StrategyKind::Qbc => select_qbc(
                &pool,
                cfg.budget,
                t,
                tensor,
                &state.omega,
                &cfg.committee_ranks,
                &model,
                month_seed(cfg.seed, t),
            )?,
        }
    };
    if selection.chosen.len() < cfg.budget {
        log::info!(
            "month {t}: pool exhausted, installing {} of {} sensors",
            selection.chosen.len(),
            cfg.budget
        );
    }
    for &pair in &selection.chosen {
        state.installed.insert(pair, t);
    }

    state.factors = Some(fit.factors);
    state.stats = Some(fit.stats);
    state.month = t;
    Ok(MonthLog {
        month: t,
        revealed,
        omega_size: state.omega.len(),
        fit: fit.report,
        rmse,
        mean_rmse,
        validation_mean_rmse,
        pool_size: pool.len(),
        selection,
    })
}

/// Pairs chosen at the end of one month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthSelection {
    pub month: usize,
    pub pairs: Vec<Pair>,
    pub scores: Vec<f64>,
}

/// The configuration a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub split: FoldSplit,
    pub dataset_checksum: String,
    pub season_prior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: ReportConfig,
    pub selections: Vec<MonthSelection>,
    /// Test RMSE per breakdown appliance and month.
    pub rmse: IndexMap<String, Vec<Option<f64>>>,
    pub mean_rmse: Vec<f64>,
    /// Average of `mean_rmse` over the simulated months.
    pub year_rmse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_mean_rmse: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_year_rmse: Option<f64>,
    pub omega_sizes: Vec<usize>,
}

impl SimReport {
    pub fn installed_count(&self) -> usize {
        self.selections.iter().map(|s| s.pairs.len()).sum()
    }
}

/// Runs a full simulation and collects the per-month logs.
pub fn run_with_logs(
    tensor: &EnergyTensor,
    split: &FoldSplit,
    cfg: &SimConfig,
    season_prior: Option<&FactorMatrix>,
) -> Result<(SimReport, Vec<MonthLog>)> {
    cfg.validate(tensor)?;
    split.validate(tensor.num_homes())?;
    if split.test.is_empty() {
        return Err(Error::invalid("the split has no test homes"));
    }
    let mut state = SimState::new(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.months);
    for _ in 0..cfg.months {
        let log = step_month(&mut state, tensor, split, cfg, season_prior).map_err(|e| {
            log::error!("month {} of fold {} failed: {e}", state.month + 1, split.fold);
            e
        })?;
        logs.push(log);
    }

    let names: Vec<String> = tensor
        .breakdown_appliances()
        .map(|j| tensor.appliance_names()[j].clone())
        .collect();
    let mut rmse: IndexMap<String, Vec<Option<f64>>> =
        names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for log in &logs {
        for (name, value) in names.iter().zip(&log.rmse) {
            rmse[name].push(*value);
        }
    }
    let mean_rmse: Vec<f64> = logs.iter().map(|l| l.mean_rmse).collect();
    let validation_mean_rmse: Option<Vec<f64>> =
        logs.iter().map(|l| l.validation_mean_rmse).collect();
    let average = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = SimReport {
        config: ReportConfig {
            sim: cfg.clone(),
            split: split.clone(),
            dataset_checksum: tensor_checksum(tensor),
            season_prior: season_prior.is_some(),
        },
        selections: logs
            .iter()
            .map(|l| MonthSelection {
                month: l.month,
                pairs: l.selection.chosen.clone(),
                scores: l.selection.scores.clone(),
            })
            .collect(),
        rmse,
        year_rmse: average(&mean_rmse),
        validation_year_rmse: validation_mean_rmse.as_deref().map(average),
        validation_mean_rmse,
        mean_rmse,
        omega_sizes: logs.iter().map(|l| l.omega_size).collect(),
    };
    Ok((report, logs))
}

/// Runs a full simulation.
pub fn run(
    tensor: &EnergyTensor,
    split: &FoldSplit,
    cfg: &SimConfig,
    season_prior: Option<&FactorMatrix>,
) -> Result<SimReport> {
    run_with_logs(tensor, split, cfg, season_prior).map(|(report, _)| report)
}

/// Learns season factors from a previous year's aggregate bills alone, for
/// use as the season prior of the following year.
pub fn learn_season_prior(previous_year: &EnergyTensor, config: &ModelConfig) -> Result<FactorMatrix> {
    let agg = previous_year.aggregate_index();
    let omega: ObservationSet = (0..previous_year.num_homes())
        .flat_map(|i| (0..previous_year.num_months()).map(move |k| Cell::new(i, agg, k)))
        .collect();
    Ok(als::fit(previous_year, &omega, config, None, None)?.factors.season)
}

//! Error metrics, cross-validation splits, grid search, budget sweeps and
//! strategy comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{run, SimConfig, SimReport};
use crate::strategy::StrategyKind;
use crate::tensor::{predict, Cell, EnergyTensor, FactorMatrix, LatentFactors};

/// Root-mean-square error between two equal-length series.
pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth values",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("RMSE of an empty set"));
    }
    let sse: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// RMSE of appliance `j` in month index `k` over `homes`, all of which must
/// have a reading.
pub fn rmse_appliance_month(
    tensor: &EnergyTensor,
    factors: &LatentFactors,
    j: usize,
    k: usize,
    homes: &[usize],
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(homes.len());
    let mut truth = Vec::with_capacity(homes.len());
    for &i in homes {
        let cell = Cell::new(i, j, k);
        let e = tensor.get(cell).ok_or_else(|| {
            Error::ContractViolation(format!("no ground truth for {cell:?}"))
        })?;
        truth.push(e);
        predictions.push(predict(factors, i, j, k)?);
    }
    rmse(&predictions, &truth)
}

/// Unweighted mean of per-appliance RMSEs (aggregate already excluded).
pub fn mean_rmse(per_appliance: &[f64]) -> Result<f64> {
    if per_appliance.is_empty() {
        return Err(Error::invalid("mean RMSE over no appliances"));
    }
    Ok(per_appliance.iter().sum::<f64>() / per_appliance.len() as f64)
}

/// Average monthly mean RMSE over one year of twelve months.
pub fn year_rmse(monthly: &[f64]) -> Result<f64> {
    if monthly.len() != 12 {
        return Err(Error::invalid(format!(
            "a year has 12 monthly values, got {}",
            monthly.len()
        )));
    }
    Ok(monthly.iter().sum::<f64>() / 12.0)
}

/// Percentage by which `method` improves on `baseline`.
pub fn relative_improvement(baseline: f64, method: f64) -> Result<f64> {
    if !(baseline.is_finite() && baseline > 0.0) {
        return Err(Error::invalid(format!(
            "baseline RMSE must be positive, got {baseline}"
        )));
    }
    Ok(100.0 * (baseline - method) / baseline)
}

/// Home indices for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn new(train: Vec<usize>, validation: Vec<usize>, test: Vec<usize>) -> Self {
        Self {
            fold: 0,
            train,
            validation,
            test,
        }
    }

    /// Every home in the split, train first.
    pub fn all_homes(&self) -> impl Iterator<Item = &usize> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Checks that the three groups are disjoint and in range.
    pub fn validate(&self, num_homes: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.all_homes() {
            if i >= num_homes {
                return Err(Error::invalid(format!(
                    "home {i} out of range for {num_homes} homes"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::invalid(format!("home {i} appears twice in the split")));
            }
        }
        Ok(())
    }
}

/// K-fold split of `homes` under a seeded shuffle. Each fold tests on one
/// chunk; the last `round(validation_fraction · |train|)` homes of the
/// remainder are held out for validation.
pub fn kfold_split(
    homes: &[usize],
    k: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if homes.len() < k {
        return Err(Error::invalid(format!(
            "{} homes cannot be split into {k} folds",
            homes.len()
        )));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::invalid(format!(
            "validation fraction must be in [0, 1), got {validation_fraction}"
        )));
    }
    let distinct: BTreeSet<_> = homes.iter().collect();
    if distinct.len() != homes.len() {
        return Err(Error::invalid("duplicate home in k-fold input"));
    }

    let mut order = homes.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test = order[start..start + size].to_vec();
        let mut rest: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        let n_val = (validation_fraction * rest.len() as f64).round() as usize;
        let validation = rest.split_off(rest.len() - n_val);
        folds.push(FoldSplit {
            fold,
            train: rest,
            validation,
            test,
        });
        start += size;
    }
    Ok(folds)
}

/// Runs every `(config, split)` job on a pool of `jobs` threads, preserving
/// input order in the output.
pub fn run_batch(
    tensor: &EnergyTensor,
    batch: &[(SimConfig, FoldSplit)],
    season_prior: Option<&FactorMatrix>,
    jobs: usize,
) -> Result<Vec<Result<SimReport>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start thread pool: {e}")))?;
    Ok(pool.install(|| {
        batch
            .par_iter()
            .map(|(cfg, split)| run(tensor, split, cfg, season_prior))
            .collect()
    }))
}

/// Hyperparameter grid, enumerated rank-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ranks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<usize>,
    pub budgets: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 3, 4],
            lambdas: vec![5000.0, 8000.0, 10000.0],
            sigmas: vec![1, 3, 6, 12],
            budgets: vec![5],
        }
    }
}

/// One point of a [`GridSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub rank: usize,
    pub lambda: f64,
    pub sigma: usize,
    pub budget: usize,
}

impl GridPoint {
    pub fn apply(&self, base: &SimConfig) -> SimConfig {
        let mut cfg = base.clone();
        cfg.model = cfg.model.with_rank(self.rank).with_lambda(self.lambda);
        cfg.kernel.sigma_window = self.sigma;
        cfg.budget = self.budget;
        cfg
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        for &rank in &self.ranks {
            for &lambda in &self.lambdas {
                for &sigma in &self.sigmas {
                    for &budget in &self.budgets {
                        points.push(GridPoint {
                            rank,
                            lambda,
                            sigma,
                            budget,
                        });
                    }
                }
            }
        }
        points
    }
}

/// One grid-search evaluation. Errors are kept as text so a failed point
/// does not abort the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub strategy: StrategyKind,
    pub point: GridPoint,
    pub fold: usize,
    pub validation_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best: GridPoint,
    pub best_validation_rmse: f64,
}

/// Evaluates every grid point on every split and picks the point with the
/// lowest mean validation error; earlier points win ties.
pub fn grid_search(
    tensor: &EnergyTensor,
    splits: &[FoldSplit],
    grid: &GridSpec,
    base: &SimConfig,
    season_prior: Option<&FactorMatrix>,
    jobs: usize,
) -> Result<GridOutcome> {
    if splits.iter().any(|s| s.validation.is_empty()) {
        return Err(Error::invalid("grid search needs validation homes in every split"));
    }
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    let batch: Vec<(SimConfig, FoldSplit)> = points
        .iter()
        .flat_map(|p| splits.iter().map(move |s| (p.apply(base), s.clone())))
        .collect();
    let results = run_batch(tensor, &batch, season_prior, jobs)?;

    let rows: Vec<GridRow> = batch
        .iter()
        .zip(points.iter().flat_map(|p| std::iter::repeat_n(*p, splits.len())))
        .zip(results)
        .map(|(((cfg, split), point), result)| match result {
            Ok(report) => GridRow {
                strategy: cfg.strategy,
                point,
                fold: split.fold,
                validation_rmse: report.validation_year_rmse,
                test_rmse: Some(report.year_rmse),
                error: None,
            },
            Err(e) => {
                log::warn!("grid point {point:?} fold {} failed: {e}", split.fold);
                GridRow {
                    strategy: cfg.strategy,
                    point,
                    fold: split.fold,
                    validation_rmse: None,
                    test_rmse: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();

    let mut best: Option<(GridPoint, f64)> = None;
    for (p, chunk) in points.iter().zip(rows.chunks(splits.len())) {
        let scores: Option<Vec<f64>> = chunk.iter().map(|r| r.validation_rmse).collect();
        let Some(scores) = scores else { continue };
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if best.is_none_or(|(_, b)| mean < b) {
            best = Some((*p, mean));
        }
    }
    let (best, best_validation_rmse) =
        best.ok_or_else(|| Error::Numerical("every grid point failed".into()))?;
    Ok(GridOutcome {
        rows,
        best,
        best_validation_rmse,
    })
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "strategy",
        "rank",
        "lambda",
        "sigma",
        "L",
        "fold",
        "year_rmse_val",
        "year_rmse_test",
        "error",
    ])
    .map_err(|e| csv_error(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.strategy.to_string(),
            r.point.rank.to_string(),
            r.point.lambda.to_string(),
            r.point.sigma.to_string(),
            r.point.budget.to_string(),
            r.fold.to_string(),
            opt(r.validation_rmse),
            opt(r.test_rmse),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Year RMSE of one (strategy, budget, fold, seed) simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub budget: usize,
    pub fold: usize,
    pub seed: u64,
    pub year_rmse: f64,
}

/// Mean year RMSE per (strategy, budget).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub strategy: StrategyKind,
    pub budget: usize,
    pub mean_year_rmse: f64,
    pub runs: usize,
}

/// Runs every strategy at every budget on every split and seed.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    tensor: &EnergyTensor,
    splits: &[FoldSplit],
    strategies: &[StrategyKind],
    budgets: &[usize],
    seeds: &[u64],
    base: &SimConfig,
    season_prior: Option<&FactorMatrix>,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut batch = Vec::new();
    for &strategy in strategies {
        for &budget in budgets {
            for split in splits {
                for &seed in seeds {
                    let mut cfg = base.clone();
                    cfg.strategy = strategy;
                    cfg.budget = budget;
                    cfg.seed = seed;
                    batch.push((cfg, split.clone()));
                }
            }
        }
    }
    run_batch(tensor, &batch, season_prior, jobs)?
        .into_iter()
        .zip(&batch)
        .map(|(result, (cfg, split))| {
            result.map(|report| SweepRow {
                strategy: cfg.strategy,
                budget: cfg.budget,
                fold: split.fold,
                seed: cfg.seed,
                year_rmse: report.year_rmse,
            })
        })
        .collect()
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(String, usize), (StrategyKind, f64, usize)> = BTreeMap::new();
    for r in rows {
        let entry = groups
            .entry((r.strategy.to_string(), r.budget))
            .or_insert((r.strategy, 0.0, 0));
        entry.1 += r.year_rmse;
        entry.2 += 1;
    }
    groups
        .into_iter()
        .map(|((_, budget), (strategy, sum, runs))| SweepSummary {
            strategy,
            budget,
            mean_year_rmse: sum / runs as f64,
            runs,
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, summary: &[SweepSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["strategy", "L", "mean_year_rmse", "runs"])
        .map_err(|e| csv_error(path, e))?;
    for s in summary {
        w.write_record([
            s.strategy.to_string(),
            s.budget.to_string(),
            s.mean_year_rmse.to_string(),
            s.runs.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-method summary of a comparison against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    /// Mean RMSE per month, averaged over runs.
    pub monthly_mean_rmse: Vec<f64>,
    pub year_rmse: f64,
    /// Relative improvement over the baseline per month; empty for the baseline.
    pub monthly_improvement: Vec<f64>,
    pub max_improvement: Option<f64>,
    pub mean_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub methods: Vec<MethodSummary>,
}

type RunKey = (usize, u64);

fn index_runs<'a>(name: &str, reports: &'a [SimReport]) -> Result<BTreeMap<RunKey, &'a SimReport>> {
    let mut map = BTreeMap::new();
    for r in reports {
        let key = (r.config.split.fold, r.config.sim.seed);
        if map.insert(key, r).is_some() {
            return Err(Error::ContractViolation(format!(
                "{name}: two reports for fold {} seed {}",
                key.0, key.1
            )));
        }
    }
    if map.is_empty() {
        return Err(Error::invalid(format!("{name}: no reports")));
    }
    Ok(map)
}

fn monthly_average(name: &str, runs: &BTreeMap<RunKey, &SimReport>) -> Result<Vec<f64>> {
    let months = runs.values().next().map_or(0, |r| r.mean_rmse.len());
    let mut sum = vec![0.0; months];
    for r in runs.values() {
        if r.mean_rmse.len() != months {
            return Err(Error::ContractViolation(format!(
                "{name}: reports cover different numbers of months"
            )));
        }
        for (s, v) in sum.iter_mut().zip(&r.mean_rmse) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / runs.len() as f64).collect())
}

/// Compares methods against a baseline. Every method must cover exactly the
/// baseline's (fold, seed) runs on the same data and splits.
pub fn compare_reports(
    baseline: (&str, &[SimReport]),
    methods: &[(&str, &[SimReport])],
) -> Result<Comparison> {
    let base_runs = index_runs(baseline.0, baseline.1)?;
    let base_monthly = monthly_average(baseline.0, &base_runs)?;
    let summarize = |name: &str, monthly: Vec<f64>, improvement: Vec<f64>| MethodSummary {
        name: name.to_string(),
        year_rmse: monthly.iter().sum::<f64>() / monthly.len() as f64,
        monthly_mean_rmse: monthly,
        max_improvement: improvement.iter().copied().reduce(f64::max),
        mean_improvement: (!improvement.is_empty())
            .then(|| improvement.iter().sum::<f64>() / improvement.len() as f64),
        monthly_improvement: improvement,
    };

    let mut out = vec![summarize(baseline.0, base_monthly.clone(), Vec::new())];
    for &(name, reports) in methods {
        let runs = index_runs(name, reports)?;
        if runs.keys().ne(base_runs.keys()) {
            return Err(Error::ContractViolation(format!(
                "{name} and {} were run with different folds or seeds",
                baseline.0
            )));
        }
        for (key, r) in &runs {
            let b = base_runs[key];
            if r.config.dataset_checksum != b.config.dataset_checksum {
                return Err(Error::ContractViolation(format!(
                    "{name} and {} were run on different datasets",
                    baseline.0
                )));
            }
            if r.config.split != b.config.split {
                return Err(Error::ContractViolation(format!(
                    "{name} and {} use different splits for fold {}",
                    baseline.0, key.0
                )));
            }
        }
        let monthly = monthly_average(name, &runs)?;
        if monthly.len() != base_monthly.len() {
            return Err(Error::ContractViolation(format!(
                "{name} and {} cover different numbers of months",
                baseline.0
            )));
        }
        let improvement = base_monthly
            .iter()
            .zip(&monthly)
            .map(|(&b, &m)| relative_improvement(b, m))
            .collect::<Result<Vec<_>>>()?;
        out.push(summarize(name, monthly, improvement));
    }
    Ok(Comparison {
        baseline: baseline.0.to_string(),
        methods: out,
    })
}

/// Writes the per-month table (`strategy,month,mean_rmse,improvement`) and
/// the per-method summary (`strategy,year_rmse,max_improvement,mean_improvement`).
pub fn write_comparison(monthly_path: &Path, summary_path: &Path, cmp: &Comparison) -> Result<()> {
    let mut monthly = String::from("strategy,month,mean_rmse,improvement\n");
    let mut summary = String::from("strategy,year_rmse,max_improvement,mean_improvement\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in &cmp.methods {
        for (t, rmse) in m.monthly_mean_rmse.iter().enumerate() {
            monthly.push_str(&format!(
                "{},{},{},{}\n",
                m.name,
                t + 1,
                rmse,
                opt(m.monthly_improvement.get(t).copied())
            ));
        }
        summary.push_str(&format!(
            "{},{},{},{}\n",
            m.name,
            m.year_rmse,
            opt(m.max_improvement),
            opt(m.mean_improvement)
        ));
    }
    for (path, body) in [(monthly_path, monthly), (summary_path, summary)] {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rmse_examples() {
        assert_relative_eq!(rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 2f64.sqrt());
        assert_eq!(rmse(&[3.0], &[3.0]).unwrap(), 0.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_and_year() {
        assert_relative_eq!(mean_rmse(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert!(mean_rmse(&[]).is_err());
        assert_relative_eq!(year_rmse(&[2.0; 12]).unwrap(), 2.0);
        assert!(year_rmse(&[2.0; 11]).is_err());
    }

    #[test]
    fn improvement_examples() {
        assert_relative_eq!(relative_improvement(10.0, 8.0).unwrap(), 20.0);
        assert_relative_eq!(relative_improvement(10.0, 12.0).unwrap(), -20.0);
        assert!(relative_improvement(0.0, 1.0).is_err());
    }

    #[test]
    fn kfold_partitions_homes() {
        let homes: Vec<usize> = (0..93).collect();
        let folds = kfold_split(&homes, 5, 0.2, 7).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![19, 19, 19, 18, 18]);
        let mut all_test: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all_test.sort();
        assert_eq!(all_test, homes);
        for f in &folds {
            f.validate(93).unwrap();
            assert_eq!(f.train.len() + f.validation.len() + f.test.len(), 93);
            let rest = f.train.len() + f.validation.len();
            assert_eq!(f.validation.len(), (0.2 * rest as f64).round() as usize);
        }
        assert_eq!(folds, kfold_split(&homes, 5, 0.2, 7).unwrap());
        assert_ne!(folds, kfold_split(&homes, 5, 0.2, 8).unwrap());
    }

    #[test]
    fn kfold_rejects_too_few_homes() {
        assert!(kfold_split(&[0, 1, 2], 5, 0.2, 0).is_err());
        assert!(kfold_split(&[0, 0, 1], 2, 0.2, 0).is_err());
    }

    #[test]
    fn split_validation() {
        assert!(FoldSplit::new(vec![0, 1], vec![], vec![1]).validate(3).is_err());
        assert!(FoldSplit::new(vec![0], vec![], vec![5]).validate(3).is_err());
        assert!(FoldSplit::new(vec![0], vec![2], vec![1]).validate(3).is_ok());
    }

    #[test]
    fn default_grid_has_48_points() {
        let pts = GridSpec::default().points();
        assert_eq!(pts.len(), 48);
        assert_eq!(pts[0].rank, 1);
        assert_eq!(pts[0].sigma, 1);
        assert_eq!(pts[1].sigma, 3);
    }

    #[test]
    fn sweep_summary_averages() {
        let row = |strategy, budget, y| SweepRow {
            strategy,
            budget,
            fold: 0,
            seed: 0,
            year_rmse: y,
        };
        let s = summarize_sweep(&[
            row(StrategyKind::Random, 1, 4.0),
            row(StrategyKind::Random, 1, 6.0),
            row(StrategyKind::ActSense, 1, 3.0),
        ]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].strategy, StrategyKind::ActSense);
        assert_relative_eq!(s[1].mean_year_rmse, 5.0);
        assert_eq!(s[1].runs, 2);
    }

    fn fake_report(seed: u64, fold: usize, monthly: &[f64]) -> SimReport {
        use crate::simulator::ReportConfig;
        SimReport {
            config: ReportConfig {
                sim: SimConfig {
                    seed,
                    ..Default::default()
                },
                split: FoldSplit {
                    fold,
                    ..FoldSplit::new(vec![0], vec![], vec![1])
                },
                dataset_checksum: "abc".into(),
                season_prior: false,
            },
            selections: vec![],
            rmse: Default::default(),
            mean_rmse: monthly.to_vec(),
            year_rmse: monthly.iter().sum::<f64>() / monthly.len() as f64,
            validation_mean_rmse: None,
            validation_year_rmse: None,
            omega_sizes: vec![],
        }
    }

    #[test]
    fn comparing_with_itself_is_zero() {
        let reports = vec![fake_report(1, 0, &[3.0, 2.0]), fake_report(2, 0, &[4.0, 1.0])];
        let cmp = compare_reports(("random", &reports), &[("random-again", &reports)]).unwrap();
        assert_eq!(cmp.methods.len(), 2);
        assert!(cmp.methods[1].monthly_improvement.iter().all(|&v| v == 0.0));
        assert_eq!(cmp.methods[1].max_improvement, Some(0.0));
        assert_eq!(cmp.methods[0].max_improvement, None);
    }

    #[test]
    fn max_improvement_example() {
        let base = vec![fake_report(1, 0, &[100.0, 100.0])];
        let method = vec![fake_report(1, 0, &[65.0, 90.0])];
        let cmp = compare_reports(("random", &base), &[("actsense", &method)]).unwrap();
        let m = &cmp.methods[1];
        assert_relative_eq!(m.max_improvement.unwrap(), 35.0);
        assert_relative_eq!(m.mean_improvement.unwrap(), 22.5);
    }

    #[test]
    fn mismatched_runs_are_refused() {
        let base = vec![fake_report(1, 0, &[1.0])];
        let other_seed = vec![fake_report(2, 0, &[1.0])];
        assert!(matches!(
            compare_reports(("a", &base), &[("b", &other_seed)]),
            Err(Error::ContractViolation(_))
        ));
        let mut other_data = base.clone();
        other_data[0].config.dataset_checksum = "xyz".into();
        assert!(compare_reports(("a", &base), &[("b", &other_data)]).is_err());
        let mut other_split = base.clone();
        other_split[0].config.split.test = vec![0];
        assert!(compare_reports(("a", &base), &[("b", &other_split)]).is_err());
        let duplicated = vec![fake_report(1, 0, &[1.0]), fake_report(1, 0, &[2.0])];
        assert!(compare_reports(("a", &duplicated), &[]).is_err());
    }

    #[test]
    fn comparison_files() {
        let base = vec![fake_report(1, 0, &[100.0])];
        let method = vec![fake_report(1, 0, &[80.0])];
        let cmp = compare_reports(("random", &base), &[("actsense", &method)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (monthly, summary) = (dir.path().join("m.csv"), dir.path().join("s.csv"));
        write_comparison(&monthly, &summary, &cmp).unwrap();
        let text = std::fs::read_to_string(&monthly).unwrap();
        assert_eq!(
            text,
            "strategy,month,mean_rmse,improvement\nrandom,1,100,\nactsense,1,80,20\n"
        );
        let text = std::fs::read_to_string(&summary).unwrap();
        assert!(text.ends_with("actsense,80,20,20\n"));
    }

    #[test]
    fn grid_search_picks_a_point_and_records_rows() {
        let (tensor, _) = crate::data_io::generate_synthetic(&crate::data_io::SyntheticConfig {
            num_homes: 10,
            num_appliances: 2,
            ..Default::default()
        })
        .unwrap();
        let splits = kfold_split(&(0..10).collect::<Vec<_>>(), 2, 0.2, 0).unwrap();
        let grid = GridSpec {
            ranks: vec![1, 2],
            lambdas: vec![1.0],
            sigmas: vec![3],
            budgets: vec![1],
        };
        let outcome = grid_search(&tensor, &splits, &grid, &SimConfig::default(), None, 2).unwrap();
        assert_eq!(outcome.rows.len(), 4);
        let mean = |rank: usize| {
            let v: Vec<f64> = outcome
                .rows
                .iter()
                .filter(|r| r.point.rank == rank)
                .map(|r| r.validation_rmse.unwrap())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let expected = if mean(2) < mean(1) { 2 } else { 1 };
        assert_eq!(outcome.best.rank, expected);
        assert_eq!(outcome.best_validation_rmse, mean(expected));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_grid_csv(&path, &outcome.rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("strategy,rank,lambda,sigma,L,fold,year_rmse_val,year_rmse_test"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn failed_grid_points_are_recorded() {
        let (tensor, _) = crate::data_io::generate_synthetic(&crate::data_io::SyntheticConfig {
            num_homes: 10,
            num_appliances: 2,
            ..Default::default()
        })
        .unwrap();
        let splits = kfold_split(&(0..10).collect::<Vec<_>>(), 2, 0.2, 0).unwrap();
        let grid = GridSpec {
            ranks: vec![0, 1],
            lambdas: vec![1.0],
            sigmas: vec![3],
            budgets: vec![1],
        };
        let outcome = grid_search(&tensor, &splits, &grid, &SimConfig::default(), None, 1).unwrap();
        assert!(outcome.rows[0].error.is_some());
        assert_eq!(outcome.best.rank, 1);
    }
}

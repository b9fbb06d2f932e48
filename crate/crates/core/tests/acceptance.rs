//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criterion 10 needs real data: point `ACTSENSE_DATAPORT_DIR` at a directory
//! holding `2014.csv` .. `2017.csv` in the monthly long format.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use actsense::als::{accumulate_stats, solve_block};
use actsense::evaluation::{budget_sweep, kfold_split, relative_improvement, run_batch, FoldSplit};
use actsense::simulator::{learn_season_prior, run, SimConfig, SimReport};
use actsense::tensor::{masked_objective, predict, ObservationSet};
use actsense::uncertainty::{
    post_selection_bound, sherman_morrison_update, triangle_weight, Alphas, KernelConfig,
    UncertaintyMode,
};
use actsense::{
    generate_synthetic, load_csv, EnergyTensor, FactorMatrix, LatentFactors, LoadOptions,
    ModelConfig, NormCaps, StrategyKind, SyntheticConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed: Some(passed),
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self {
            passed: None,
            detail: detail.into(),
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn closed_form_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let r = rng.random_range(1..=3);
        let rows = rng.random_range(0..12);
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let v = random_matrix(&mut rng, rows, r);
        let y = random_vector(&mut rng, rows);
        let prior = rng.random_bool(0.5).then(|| random_vector(&mut rng, r));

        let precision = DMatrix::identity(r, r) * lambda + v.transpose() * &v;
        let rhs = v.transpose() * &y;
        let x = solve_block(&precision, &rhs, prior.as_ref().map(|p| p.as_slice()), lambda)
            .expect("well-posed instance");

        // min ‖Vx − y‖² + λ‖x − p‖² as one stacked least-squares problem.
        let mut stacked = DMatrix::zeros(rows + r, r);
        stacked.rows_mut(0, rows).copy_from(&v);
        stacked
            .rows_mut(rows, r)
            .copy_from(&(DMatrix::identity(r, r) * lambda.sqrt()));
        let mut target = DVector::zeros(rows + r);
        target.rows_mut(0, rows).copy_from(&y);
        if let Some(p) = &prior {
            target.rows_mut(rows, r).copy_from(&(p * lambda.sqrt()));
        }
        let oracle = stacked.svd(true, true).solve(&target, 1e-300).unwrap();
        let rel = (&x - &oracle).norm() / oracle.norm().max(1e-300);
        worst = worst.max(if oracle.norm() < 1e-14 { x.norm() } else { rel });
    }
    let elapsed = start.elapsed();
    Outcome::check(
        worst <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("worst relative deviation {worst:.2e} over 1000 instances in {elapsed:.2?}"),
    )
}

fn relative_reconstruction_error(tensor: &EnergyTensor, factors: &LatentFactors) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((i, j, k), &e) in tensor.readings().indexed_iter() {
        let d = predict(factors, i, j, k).unwrap() - e;
        num += d * d;
        den += e * e;
    }
    (num / den).sqrt()
}

fn als_recovery() -> Outcome {
    let start = Instant::now();
    let mut errors = Vec::new();
    let mut sweeps = Vec::new();
    for seed in 0..20 {
        let (tensor, _) = generate_synthetic(&SyntheticConfig {
            num_homes: 10,
            num_appliances: 4,
            num_months: 12,
            true_rank: 2,
            noise_sigma: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap();
        let config = ModelConfig {
            rank: 2,
            norm_caps: Some(NormCaps::uniform(1e6)),
            max_sweeps: 200,
            tol: 1e-15,
            seed: seed + 100,
            ..ModelConfig::default().with_lambda(1e-6)
        };
        let omega = ObservationSet::all_available(&tensor);
        let fit = actsense::fit(&tensor, &omega, &config, None, None).unwrap();
        errors.push(relative_reconstruction_error(&tensor, &fit.factors));
        sweeps.push(fit.report.sweeps_run);
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Outcome::check(
        worst <= 1e-3 && elapsed < Duration::from_secs(30),
        format!(
            "worst relative error {worst:.2e} over 20 seeds, at most {} sweeps, {elapsed:.2?}",
            sweeps.iter().max().unwrap()
        ),
    )
}

/// Central-difference gradient of the objective with respect to one row.
fn row_gradient(
    tensor: &EnergyTensor,
    omega: &ObservationSet,
    factors: &LatentFactors,
    config: &ModelConfig,
    prior: Option<&FactorMatrix>,
    which: usize,
    row: usize,
) -> Vec<f64> {
    let rank = factors.rank();
    let h = 1e-5;
    (0..rank)
        .map(|d| {
            let shifted = |delta: f64| {
                let mut f = factors.clone();
                let m = match which {
                    0 => &mut f.home,
                    1 => &mut f.appliance,
                    _ => &mut f.season,
                };
                m.row_mut(row)[d] += delta;
                masked_objective(tensor, omega, &f, config, prior).unwrap()
            };
            (shifted(h) - shifted(-h)) / (2.0 * h)
        })
        .collect()
}

fn block_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let rank = rng.random_range(1..=3);
        let (tensor, _) = generate_synthetic(&SyntheticConfig {
            num_homes: 4,
            num_appliances: 3,
            num_months: 5,
            true_rank: rank,
            noise_sigma: 0.05,
            seed: instance,
            ..Default::default()
        })
        .unwrap();
        let omega: ObservationSet = ObservationSet::all_available(&tensor)
            .iter()
            .filter(|_| rng.random_bool(0.6))
            .collect();
        let config = ModelConfig {
            rank,
            project: false,
            ..ModelConfig::default().with_lambda(rng.random_range(0.1..10.0))
        };
        let mut factors = LatentFactors::zeros(4, 4, 5, rank);
        for m in [&mut factors.home, &mut factors.appliance, &mut factors.season] {
            for i in 0..m.rows() {
                let row: Vec<f64> = (0..rank).map(|_| rng.random_range(0.5..2.0)).collect();
                m.set_row(i, &row);
            }
        }
        let prior = rng.random_bool(0.5).then(|| {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..rank).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect();
            FactorMatrix::from_rows(&rows).unwrap()
        });

        let which = instance as usize % 3;
        let rows = [4, 4, 5][which];
        let row = rng.random_range(0..rows);
        let before = row_gradient(&tensor, &omega, &factors, &config, prior.as_ref(), which, row);

        let stats = accumulate_stats(&tensor, &omega, &factors, &config).unwrap();
        let (p, b, lambda) = match which {
            0 => (&stats.home_precision, &stats.home_rhs, config.lambda_home),
            1 => (&stats.app_precision, &stats.app_rhs, config.lambda_appliance),
            _ => (&stats.season_precision, &stats.season_rhs, config.lambda_season),
        };
        let prior_row = if which == 2 {
            prior.as_ref().map(|p| p.row(row))
        } else {
            None
        };
        let x = solve_block(&p[row], &b[row], prior_row, lambda).unwrap();
        match which {
            0 => factors.home.set_row(row, x.as_slice()),
            1 => factors.appliance.set_row(row, x.as_slice()),
            _ => factors.season.set_row(row, x.as_slice()),
        }
        let after = row_gradient(&tensor, &omega, &factors, &config, prior.as_ref(), which, row);
        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(norm(&after) / norm(&before).max(1e-12));
    }
    Outcome::check(
        worst <= 1e-4,
        format!("worst ‖∇ after‖/‖∇ before‖ = {worst:.2e} over 100 row updates"),
    )
}

fn sherman_morrison() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_inv, mut worst_id): (f64, f64) = (0.0, 0.0);
    let mut shrink_failures = 0;
    for _ in 0..10_000 {
        let r = rng.random_range(1..=4);
        let b = random_matrix(&mut rng, r + 2, r);
        let a = b.transpose() * &b + DMatrix::identity(r, r) * rng.random_range(0.1..2.0);
        let inv = a.clone().try_inverse().unwrap();
        let v = random_vector(&mut rng, r);

        let updated = sherman_morrison_update(&inv, v.as_slice());
        let direct = (&a + &v * v.transpose()).try_inverse().unwrap();
        worst_inv = worst_inv.max((&updated - &direct).norm() / direct.norm());
        let identity = (&a + &v * v.transpose()) * &updated;
        worst_id = worst_id.max((identity - DMatrix::identity(r, r)).norm());

        let before = v.dot(&(&inv * &v));
        let after = v.dot(&(&updated * &v));
        let w = before.sqrt();
        let expected = w / (1.0 + w * w).sqrt();
        if after >= before || after.is_nan() || (after.sqrt() - expected).abs() > 1e-8 * w.max(1.0) {
            shrink_failures += 1;
        }
    }
    Outcome::check(
        worst_inv <= 1e-8 && worst_id <= 1e-8 && shrink_failures == 0,
        format!(
            "inverse deviation {worst_inv:.2e}, identity residual {worst_id:.2e}, {shrink_failures} shrink failures in 10⁴"
        ),
    )
}

fn selection_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut tested = 0;
    while tested < 100_000 {
        let alphas = Alphas {
            home: rng.random_range(1e-3..10.0),
            app: rng.random_range(1e-3..10.0),
        };
        let m: f64 = rng.random_range(0.0..20.0);
        let n: f64 = rng.random_range(0.0..20.0);
        let g = rng.random_range(0.0..=m);
        let h = rng.random_range(0.0..=n);
        if alphas.home * m + alphas.app * n < alphas.home * g + alphas.app * h {
            continue;
        }
        tested += 1;
        let chosen = post_selection_bound(alphas, (m, n), (g, h));
        let other = post_selection_bound(alphas, (g, h), (m, n));
        if chosen > other + 1e-12 * other.abs().max(1.0) {
            violations += 1;
        }
    }
    Outcome::check(
        violations == 0,
        format!("{violations} violations in {tested} tuples"),
    )
}

fn kernel_exactness() -> Outcome {
    let mut mismatches = 0;
    for sigma in [1usize, 3, 6, 12] {
        let kc = KernelConfig {
            sigma_window: sigma,
            horizon: 24,
        };
        for t in 1..=24usize {
            for tp in 1..=24usize {
                let lag = (tp as f64 - t as f64).abs();
                let expected = if lag <= sigma as f64 {
                    1.0 - lag / sigma as f64
                } else {
                    0.0
                };
                if triangle_weight(tp, t, &kc) != expected {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome::check(
        mismatches == 0,
        format!("{mismatches} mismatches over σ ∈ {{1, 3, 6, 12}}, lags up to 23"),
    )
}

fn synthetic_instance(seed: u64) -> (EnergyTensor, Vec<FoldSplit>) {
    let (tensor, _) = generate_synthetic(&SyntheticConfig {
        num_homes: 30,
        num_appliances: 6,
        num_months: 12,
        true_rank: 2,
        noise_sigma: 0.05,
        seed,
        ..Default::default()
    })
    .unwrap();
    let homes: Vec<usize> = (0..30).collect();
    let splits = kfold_split(&homes, 5, 0.2, seed).unwrap();
    (tensor, splits)
}

fn experiment_config(strategy: StrategyKind, budget: usize, seed: u64) -> SimConfig {
    SimConfig {
        strategy,
        budget,
        seed,
        ..SimConfig::default()
    }
}

/// Year RMSE per (fold, seed) for one strategy variant.
type Runs = BTreeMap<(usize, u64), f64>;

fn directional_runs(
    strategy: StrategyKind,
    mode: UncertaintyMode,
    seeds: &[u64],
) -> Runs {
    let mut out = Runs::new();
    for &seed in seeds {
        let (tensor, splits) = synthetic_instance(seed);
        for split in &splits {
            let cfg = SimConfig {
                mode,
                ..experiment_config(strategy, 3, seed)
            };
            let report = run(&tensor, split, &cfg, None).unwrap();
            out.insert((split.fold, seed), report.year_rmse);
        }
    }
    out
}

fn mean_improvement(baseline: &Runs, method: &Runs) -> f64 {
    let total: f64 = baseline
        .iter()
        .map(|(key, &b)| relative_improvement(b, method[key]).unwrap())
        .sum();
    total / baseline.len() as f64
}

struct Directional {
    random: Runs,
    actsense: Runs,
}

fn directional_result(shared: &mut Option<Directional>) -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let start = Instant::now();
    let random = directional_runs(StrategyKind::Random, UncertaintyMode::Full, &seeds);
    let actsense = directional_runs(StrategyKind::ActSense, UncertaintyMode::Full, &seeds);
    let qbc = directional_runs(StrategyKind::Qbc, UncertaintyMode::Full, &seeds);
    let elapsed = start.elapsed();
    let act = mean_improvement(&random, &actsense);
    let q = mean_improvement(&random, &qbc);
    *shared = Some(Directional {
        random,
        actsense,
    });
    Outcome::check(
        act > 0.0 && act >= q && elapsed < Duration::from_secs(600),
        format!(
            "mean improvement over random: actsense {act:.2}%, qbc {q:.2}% (50 runs each, {elapsed:.1?} single-threaded)"
        ),
    )
}

fn budget_sweep_shape() -> Outcome {
    let budgets: Vec<usize> = (1..=10).collect();
    let strategies = [StrategyKind::ActSense, StrategyKind::Random, StrategyKind::Qbc];
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut curves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 0..10u64 {
        let (tensor, splits) = synthetic_instance(seed);
        let base = experiment_config(StrategyKind::Random, 1, seed);
        let rows = budget_sweep(
            &tensor,
            &splits[..1],
            &strategies,
            &budgets,
            &[seed],
            &base,
            None,
            jobs,
        )
        .unwrap();
        for row in rows {
            let curve = curves
                .entry(row.strategy.to_string())
                .or_insert_with(|| vec![0.0; budgets.len()]);
            curve[row.budget - 1] += row.year_rmse / 10.0;
        }
    }
    let prefix_min = |c: &[f64]| {
        c.iter()
            .scan(f64::INFINITY, |m, &v| {
                *m = v.min(*m);
                Some(*m)
            })
            .collect::<Vec<f64>>()
    };
    let monotone: Vec<String> = curves
        .iter()
        .filter(|(_, c)| c[9] > c[0])
        .map(|(s, _)| s.clone())
        .collect();
    let act = prefix_min(&curves["actsense"]);
    let rnd = prefix_min(&curves["random"]);
    let crossing_ok = act.iter().zip(&rnd).all(|(a, r)| a <= r);
    let summary: Vec<String> = curves
        .iter()
        .map(|(s, c)| format!("{s} L=1 {:.2} L=10 {:.2}", c[0], c[9]))
        .collect();
    Outcome::check(
        monotone.is_empty() && crossing_ok,
        format!(
            "{}; actsense reaches every target no later than random: {crossing_ok}",
            summary.join(", ")
        ),
    )
}

fn ablation_ordering(shared: &Option<Directional>) -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let shared = shared.as_ref().expect("directional runs available");
    let current = directional_runs(StrategyKind::ActSense, UncertaintyMode::Current, &seeds);
    let full = mean_improvement(&shared.random, &shared.actsense);
    let cur = mean_improvement(&shared.random, &current);
    Outcome::check(
        full >= cur - 1.0,
        format!("mean improvement over random: full {full:.2}%, current-only {cur:.2}%"),
    )
}

fn dataset_reproduction() -> Outcome {
    let Ok(dir) = std::env::var("ACTSENSE_DATAPORT_DIR") else {
        return Outcome::skip("set ACTSENSE_DATAPORT_DIR to a directory with 2014.csv .. 2017.csv");
    };
    let dir = Path::new(&dir);
    let targets = [(2014, 29.71), (2015, 35.06), (2016, 29.84), (2017, 28.76)];
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut lines = Vec::new();
    let mut ok = true;
    let mut previous: Option<EnergyTensor> = None;
    for (year, target) in targets {
        let path = dir.join(format!("{year}.csv"));
        let Ok((tensor, _)) = load_csv(&path, &LoadOptions::default()) else {
            lines.push(format!("{year}: cannot load {}", path.display()));
            ok = false;
            previous = None;
            continue;
        };
        let mut base = SimConfig::default();
        base.model = base.model.with_rank(3).with_lambda(8000.0);
        base.budget = 5;
        let prior = previous
            .as_ref()
            .filter(|p| p.num_months() == tensor.num_months())
            .map(|p| learn_season_prior(p, &base.model).unwrap());
        let homes: Vec<usize> = (0..tensor.num_homes()).collect();
        let splits = kfold_split(&homes, 5, 0.2, 0).unwrap();
        let mut monthly: BTreeMap<StrategyKind, Vec<f64>> = BTreeMap::new();
        for strategy in [StrategyKind::Random, StrategyKind::Qbc, StrategyKind::ActSense] {
            let batch: Vec<(SimConfig, FoldSplit)> = splits
                .iter()
                .map(|s| {
                    let mut cfg = base.clone();
                    cfg.strategy = strategy;
                    (cfg, s.clone())
                })
                .collect();
            let reports: Vec<SimReport> = run_batch(&tensor, &batch, prior.as_ref(), jobs)
                .unwrap()
                .into_iter()
                .map(|r| r.unwrap())
                .collect();
            let months = reports[0].mean_rmse.len();
            let avg = (0..months)
                .map(|t| reports.iter().map(|r| r.mean_rmse[t]).sum::<f64>() / reports.len() as f64)
                .collect();
            monthly.insert(strategy, avg);
        }
        let improvements = |s: StrategyKind| -> Vec<f64> {
            monthly[&StrategyKind::Random]
                .iter()
                .zip(&monthly[&s])
                .map(|(&b, &m)| relative_improvement(b, m).unwrap())
                .collect()
        };
        let act = improvements(StrategyKind::ActSense);
        let qbc = improvements(StrategyKind::Qbc);
        let max_act = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let year_ok = mean(&act) > mean(&qbc) && mean(&qbc) > 0.0 && (max_act - target).abs() <= 10.0;
        ok &= year_ok;
        lines.push(format!(
            "{year}: max improvement {max_act:.2}% (target {target}%), mean actsense {:.2}% qbc {:.2}%",
            mean(&act),
            mean(&qbc)
        ));
        previous = Some(tensor);
    }
    Outcome::check(ok, lines.join("; "))
}

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn main() {
    let mut shared = None;
    let criteria: Vec<Criterion<'_>> = vec![
        ("1 closed-form exactness", Box::new(closed_form_exactness)),
        ("2 ALS recovery", Box::new(als_recovery)),
        ("3 block optimality", Box::new(block_optimality)),
        ("4 Sherman-Morrison and shrink", Box::new(sherman_morrison)),
        ("5 selection dominance", Box::new(selection_dominance)),
        ("6 kernel exactness", Box::new(kernel_exactness)),
    ];
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| {
        let tag = match outcome.passed {
            Some(true) => "PASS",
            Some(false) => {
                failures += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} criterion {name}: {}", outcome.detail);
    };
    for (name, check) in criteria {
        report(name, check());
    }
    report("7 directional result", directional_result(&mut shared));
    report("8 budget-sweep shape", budget_sweep_shape());
    report("9 ablation ordering", ablation_ordering(&shared));
    report("10 dataset reproduction", dataset_reproduction());
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use actsense::data_io::{DataSource, SeasonShape};
use actsense::evaluation::{
    budget_sweep, compare_reports, grid_search, run_batch, summarize_sweep, write_comparison,
    write_grid_csv, write_sweep_csv,
};
use actsense::simulator::learn_season_prior;
use actsense::{
    generate_synthetic, kfold_split, load_csv, read_report, write_report, DatasetManifest,
    EnergyTensor, FactorMatrix, FoldSplit, GridSpec, LoadOptions, SimReport, StrategyKind,
    SyntheticConfig,
};
use anyhow::{Context, Result};
use log::info;

use crate::settings::{parse_list, Settings, SEED_VAR};
use crate::{CompareArgs, GenerateArgs, GridArgs, RunArgs, SimulateArgs, SweepArgs, UsageError};

fn env_seed() -> Option<String> {
    std::env::var(SEED_VAR).ok()
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn list<T>(flag: &str, text: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr + Copy + PartialOrd + std::ops::Add<Output = T> + From<u8>,
{
    parse_list(text).map_err(|e| usage(format!("--{flag}: {e}")))
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let season: SeasonShape = a.season.parse().map_err(|e: actsense::Error| usage(e.to_string()))?;
    let seed = match (a.seed, env_seed()) {
        (Some(seed), _) => seed,
        (None, Some(text)) => text
            .parse()
            .map_err(|_| usage(format!("{SEED_VAR}: invalid seed {text:?}")))?,
        (None, None) => 0,
    };
    let cfg = SyntheticConfig {
        num_homes: a.homes as usize,
        num_appliances: a.appliances as usize,
        num_months: a.months as usize,
        true_rank: a.rank as usize,
        noise_sigma: a.noise,
        season_shape: season,
        seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (tensor, _) = generate_synthetic(&cfg)?;
    actsense::save_csv(&tensor, &a.output)?;
    let manifest = DatasetManifest::describe(&tensor, DataSource::Synthetic);
    let manifest_path = a.output.with_extension("manifest.json");
    manifest.write(&manifest_path)?;
    println!("{} {}", manifest.checksum, a.output.display());
    Ok(())
}

/// Everything a simulation-running command needs.
struct Prepared {
    settings: Settings,
    tensor: EnergyTensor,
    splits: Vec<FoldSplit>,
    prior: Option<FactorMatrix>,
}

fn prepare(run: &RunArgs, extra: &[(&'static str, String)]) -> Result<Prepared> {
    let mut flags = run.flags();
    flags.extend_from_slice(extra);
    let settings = Settings::resolve(run.config.as_deref(), env_seed(), &flags)?;
    let opts = LoadOptions {
        min_coverage: settings.min_coverage,
    };
    let (tensor, manifest) =
        load_csv(&run.data, &opts).with_context(|| format!("loading {}", run.data.display()))?;
    info!(
        "{} homes, {} appliances, {}..{}",
        manifest.home_count,
        manifest.appliances.len(),
        manifest.first_month,
        manifest.last_month
    );
    let homes: Vec<usize> = (0..tensor.num_homes()).collect();
    let mut splits = kfold_split(&homes, settings.folds, settings.validation_fraction, settings.split_seed)
        .map_err(|e| usage(e.to_string()))?;
    if let Some(fold) = run.fold {
        if fold >= splits.len() {
            return Err(usage(format!("--fold {fold} out of range for {} folds", splits.len())));
        }
        splits = vec![splits.swap_remove(fold)];
    }
    if run.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let prior = match &run.prior_data {
        Some(path) => {
            let (previous, _) =
                load_csv(path, &opts).with_context(|| format!("loading {}", path.display()))?;
            let sim = settings.sim_for(tensor.num_months());
            let prior = learn_season_prior(&previous, &sim.model)
                .with_context(|| format!("learning the season prior from {}", path.display()))?;
            info!("season prior learned from {}", path.display());
            Some(prior)
        }
        None => None,
    };
    Ok(Prepared {
        settings,
        tensor,
        splits,
        prior,
    })
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = &a.strategy {
        extra.push(("strategy", s.clone()));
    }
    if let Some(l) = a.budget {
        extra.push(("L", l.to_string()));
    }
    if a.sequential {
        extra.push(("sequential", "true".to_string()));
    }
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let p = prepare(&a.run, &extra)?;
    let base = p.settings.sim_for(p.tensor.num_months());
    base.validate(&p.tensor).map_err(|e| usage(e.to_string()))?;

    let mut batch = Vec::new();
    for split in &p.splits {
        for r in 0..a.repeats {
            let mut cfg = base.clone();
            cfg.seed = base.seed.wrapping_add(r);
            batch.push((cfg, split.clone()));
        }
    }
    let results = run_batch(&p.tensor, &batch, p.prior.as_ref(), a.run.jobs)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    for ((cfg, split), result) in batch.iter().zip(results) {
        let report = result.with_context(|| format!("fold {} seed {}", split.fold, cfg.seed))?;
        let path = a
            .output
            .join(format!("{}-fold{}-seed{}.json", cfg.strategy, split.fold, cfg.seed));
        write_report(&report, &path)?;
        println!(
            "fold {} seed {}: year RMSE {:.4}, {} pairs installed -> {}",
            split.fold,
            cfg.seed,
            report.year_rmse,
            report.installed_count(),
            path.display()
        );
    }
    Ok(())
}

fn read_report_set(spec: &str) -> Result<(String, Vec<SimReport>)> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("expected NAME=PATH, got {spec:?}")))?;
    let path = PathBuf::from(path);
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.clone()]
    };
    if files.is_empty() {
        return Err(usage(format!("no reports in {}", path.display())));
    }
    let reports = files
        .iter()
        .map(|f| read_report(f))
        .collect::<actsense::Result<Vec<_>>>()?;
    Ok((name.to_string(), reports))
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let (base_name, base) = read_report_set(&a.baseline)?;
    let methods = a
        .methods
        .iter()
        .map(|m| read_report_set(m))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &[SimReport])> =
        methods.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
    let cmp = compare_reports((&base_name, &base), &refs)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    write_comparison(&a.output.join("monthly.csv"), &a.output.join("summary.csv"), &cmp)?;
    println!("{:<12} {:>12} {:>10} {:>10}", "strategy", "year RMSE", "max imp%", "mean imp%");
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    for m in &cmp.methods {
        println!(
            "{:<12} {:>12.4} {:>10} {:>10}",
            m.name,
            m.year_rmse,
            pct(m.max_improvement),
            pct(m.mean_improvement)
        );
    }
    Ok(())
}

fn strategies(text: &str) -> Result<Vec<StrategyKind>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|e: actsense::Error| usage(e.to_string())))
        .collect()
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let kinds = strategies(&a.strategies)?;
    let budgets: Vec<usize> = list("L", &a.budgets)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let p = prepare(&a.run, &[])?;
    let base = p.settings.sim_for(p.tensor.num_months());
    for &strategy in &kinds {
        actsense::SimConfig { strategy, ..base.clone() }
            .validate(&p.tensor)
            .map_err(|e| usage(e.to_string()))?;
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|s| base.seed.wrapping_add(s)).collect();
    let rows = budget_sweep(&p.tensor, &p.splits, &kinds, &budgets, &seeds, &base, p.prior.as_ref(), a.run.jobs)?;
    let summary = summarize_sweep(&rows);
    write_sweep_csv(&a.output, &summary)?;
    for s in &summary {
        println!("{:<10} L={:<3} year RMSE {:.4} ({} runs)", s.strategy, s.budget, s.mean_year_rmse, s.runs);
    }
    flag_non_monotone(&summary);
    Ok(())
}

/// Warns when the largest budget does worse than the smallest.
fn flag_non_monotone(summary: &[actsense::evaluation::SweepSummary]) {
    let mut kinds: Vec<StrategyKind> = summary.iter().map(|s| s.strategy).collect();
    kinds.dedup();
    for kind in kinds {
        let rows: Vec<_> = summary.iter().filter(|s| s.strategy == kind).collect();
        let lo = rows.iter().min_by_key(|s| s.budget).unwrap();
        let hi = rows.iter().max_by_key(|s| s.budget).unwrap();
        if hi.mean_year_rmse > lo.mean_year_rmse {
            log::warn!(
                "{kind}: year RMSE at L={} ({:.4}) exceeds L={} ({:.4})",
                hi.budget,
                hi.mean_year_rmse,
                lo.budget,
                lo.mean_year_rmse
            );
        }
    }
}

pub fn gridsearch(a: &GridArgs) -> Result<()> {
    let grid = GridSpec {
        ranks: list("ranks", &a.ranks)?,
        lambdas: list("lambdas", &a.lambdas)?,
        sigmas: list("sigmas", &a.sigmas)?,
        budgets: list("L", &a.budgets)?,
    };
    let mut extra = Vec::new();
    if let Some(s) = &a.strategy {
        extra.push(("strategy", s.clone()));
    }
    if a.run.prior_data.is_some() && grid.ranks.len() != 1 {
        return Err(usage("--prior-data needs a single --ranks value"));
    }
    if let (true, Some(&rank)) = (a.run.prior_data.is_some(), grid.ranks.first()) {
        extra.push(("rank", rank.to_string()));
    }
    let p = prepare(&a.run, &extra)?;
    let base = p.settings.sim_for(p.tensor.num_months());
    base.validate(&p.tensor).map_err(|e| usage(e.to_string()))?;
    let outcome = grid_search(&p.tensor, &p.splits, &grid, &base, p.prior.as_ref(), a.run.jobs)?;

    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    write_grid_csv(&a.output.join("grid.csv"), &outcome.rows)?;
    let mut winner = p.settings.clone();
    let best = outcome.best;
    winner.sim.model = winner.sim.model.with_rank(best.rank).with_lambda(best.lambda);
    winner.sim.kernel.sigma_window = best.sigma;
    winner.sim.budget = best.budget;
    let best_path = a.output.join("best.cfg");
    write_text(&best_path, &winner.to_file_text())?;
    println!(
        "{} points, best rank={} lambda={} sigma={} L={} (validation year RMSE {:.4}) -> {}",
        grid.points().len(),
        best.rank,
        best.lambda,
        best.sigma,
        best.budget,
        outcome.best_validation_rmse,
        best_path.display()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

//! Run settings resolved from flags, an optional `key=value` file, the
//! `ACTSENSE_SEED` variable and built-in defaults, in that order of priority.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use actsense::{AlphaMode, SimConfig, StrategyKind, UncertaintyMode};

use crate::UsageError;

pub const SEED_VAR: &str = "ACTSENSE_SEED";

pub const KEYS: &[&str] = &[
    "strategy",
    "L",
    "months",
    "mode",
    "sequential",
    "committee",
    "seed",
    "rank",
    "lambda",
    "lambda_home",
    "lambda_appliance",
    "lambda_season",
    "max_sweeps",
    "tol",
    "project",
    "sigma",
    "horizon",
    "alpha_mode",
    "alpha_home",
    "alpha_app",
    "delta",
    "noise_sigma",
    "folds",
    "validation_fraction",
    "split_seed",
    "min_coverage",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub sim: SimConfig,
    /// Simulated months; the whole dataset when unset.
    pub months: Option<usize>,
    /// Months scored by the integrated uncertainty; `months` when unset.
    pub horizon: Option<usize>,
    pub folds: usize,
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub min_coverage: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            months: None,
            horizon: None,
            folds: 5,
            validation_fraction: 0.2,
            split_seed: 0,
            min_coverage: 0.8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value {value:?} for {key}")))
}

/// Parses `3`, `1,2,5` or the inclusive range `1..20`.
pub fn parse_list<T>(text: &str) -> Result<Vec<T>, String>
where
    T: FromStr + Copy + PartialOrd + std::ops::Add<Output = T> + From<u8>,
{
    let bad = || format!("cannot read {text:?} as a list");
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: T = lo.trim().parse().map_err(|_| bad())?;
        let hi: T = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(format!("empty range {text:?}"));
        }
        let mut out = vec![lo];
        while *out.last().unwrap() < hi {
            out.push(*out.last().unwrap() + T::from(1));
        }
        return Ok(out);
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let value = value.trim();
        let sim = &mut self.sim;
        match key {
            "strategy" => {
                sim.strategy = StrategyKind::from_str(value).map_err(|e| UsageError(e.to_string()))?
            }
            "L" => sim.budget = parse(key, value)?,
            "months" => self.months = Some(parse(key, value)?),
            "mode" => {
                sim.mode = UncertaintyMode::from_str(value).map_err(|e| UsageError(e.to_string()))?
            }
            "sequential" => sim.sequential = parse(key, value)?,
            "committee" => {
                sim.committee_ranks = parse_list(value).map_err(UsageError)?;
            }
            "seed" => sim.seed = parse(key, value)?,
            "rank" => sim.model.rank = parse(key, value)?,
            "lambda" => sim.model = sim.model.clone().with_lambda(parse(key, value)?),
            "lambda_home" => sim.model.lambda_home = parse(key, value)?,
            "lambda_appliance" => sim.model.lambda_appliance = parse(key, value)?,
            "lambda_season" => sim.model.lambda_season = parse(key, value)?,
            "max_sweeps" => sim.model.max_sweeps = parse(key, value)?,
            "tol" => sim.model.tol = parse(key, value)?,
            "project" => sim.model.project = parse(key, value)?,
            "sigma" => sim.kernel.sigma_window = parse(key, value)?,
            "horizon" => self.horizon = Some(parse(key, value)?),
            "alpha_mode" => {
                sim.confidence.alpha_mode = match value {
                    "fixed" => AlphaMode::Fixed,
                    "derived" => AlphaMode::Derived,
                    _ => return Err(UsageError(format!("alpha_mode must be fixed or derived, got {value:?}"))),
                }
            }
            "alpha_home" => sim.confidence.alpha_home = parse(key, value)?,
            "alpha_app" => sim.confidence.alpha_app = parse(key, value)?,
            "delta" => sim.confidence.delta = parse(key, value)?,
            "noise_sigma" => sim.confidence.noise_sigma = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "min_coverage" => self.min_coverage = parse(key, value)?,
            other => {
                return Err(UsageError(format!(
                    "unknown setting {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` document. Blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str, origin: &str) -> Result<(), UsageError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("{origin}:{}: expected key=value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| UsageError(format!("{origin}:{}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn resolve(
        config: Option<&Path>,
        env_seed: Option<String>,
        flags: &[(&str, String)],
    ) -> anyhow::Result<Self> {
        let mut settings = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            settings.apply_file_text(&text, &path.display().to_string())?;
        }
        if let Some(seed) = env_seed {
            settings
                .set("seed", &seed)
                .map_err(|e| UsageError(format!("{SEED_VAR}: {}", e.0)))?;
        }
        for (key, value) in flags {
            settings.set(key, value)?;
        }
        if settings.folds < 2 {
            return Err(UsageError("folds must be at least 2".into()).into());
        }
        Ok(settings)
    }

    /// The simulation config for a dataset with `available` months.
    pub fn sim_for(&self, available: usize) -> SimConfig {
        let mut sim = self.sim.clone();
        sim.months = self.months.unwrap_or(available);
        sim.kernel.horizon = self.horizon.unwrap_or(sim.months);
        sim
    }

    /// Round-trips through [`Settings::apply_file_text`].
    pub fn to_file_text(&self) -> String {
        let s = &self.sim;
        let m = &s.model;
        let c = &s.confidence;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        put("strategy", s.strategy.to_string());
        put("L", s.budget.to_string());
        if let Some(months) = self.months {
            put("months", months.to_string());
        }
        put("mode", s.mode.to_string());
        put("sequential", s.sequential.to_string());
        let committee: Vec<String> = s.committee_ranks.iter().map(|r| r.to_string()).collect();
        put("committee", committee.join(","));
        put("seed", s.seed.to_string());
        put("rank", m.rank.to_string());
        put("lambda_home", m.lambda_home.to_string());
        put("lambda_appliance", m.lambda_appliance.to_string());
        put("lambda_season", m.lambda_season.to_string());
        put("max_sweeps", m.max_sweeps.to_string());
        put("tol", m.tol.to_string());
        put("project", m.project.to_string());
        put("sigma", s.kernel.sigma_window.to_string());
        if let Some(horizon) = self.horizon {
            put("horizon", horizon.to_string());
        }
        let mode = match c.alpha_mode {
            AlphaMode::Fixed => "fixed",
            AlphaMode::Derived => "derived",
        };
        put("alpha_mode", mode.to_string());
        put("alpha_home", c.alpha_home.to_string());
        put("alpha_app", c.alpha_app.to_string());
        put("delta", c.delta.to_string());
        put("noise_sigma", c.noise_sigma.to_string());
        put("folds", self.folds.to_string());
        put("validation_fraction", self.validation_fraction.to_string());
        put("split_seed", self.split_seed.to_string());
        put("min_coverage", self.min_coverage.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list::<usize>("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_list::<usize>("3").unwrap(), vec![3]);
        assert_eq!(parse_list::<usize>("1, 5,10").unwrap(), vec![1, 5, 10]);
        assert_eq!(parse_list::<f64>("5000,8000").unwrap(), vec![5000.0, 8000.0]);
        assert!(parse_list::<usize>("4..1").is_err());
        assert!(parse_list::<usize>("a,b").is_err());
    }

    #[test]
    fn precedence_is_flags_then_env_then_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# winner\nrank = 3\nseed=5\nL=7\n").unwrap();
        let s = Settings::resolve(Some(&path), Some("9".into()), &[("L", "2".into())]).unwrap();
        assert_eq!(s.sim.model.rank, 3);
        assert_eq!(s.sim.seed, 9);
        assert_eq!(s.sim.budget, 2);
        let s = Settings::resolve(Some(&path), None, &[]).unwrap();
        assert_eq!(s.sim.seed, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = Settings::default();
        let err = s.apply_file_text("rank=2\nrnak=3\n", "x.cfg").unwrap_err();
        assert!(err.0.contains("x.cfg:2"), "{}", err.0);
        assert!(s.apply_file_text("rank", "x.cfg").is_err());
        assert!(s.set("strategy", "greedy").is_err());
        assert!(s.set("rank", "two").is_err());
    }

    #[test]
    fn file_text_round_trips() {
        let mut s = Settings::default();
        s.set("lambda", "8000").unwrap();
        s.set("committee", "1,3").unwrap();
        s.set("alpha_mode", "derived").unwrap();
        s.set("months", "6").unwrap();
        s.set("horizon", "9").unwrap();
        s.set("mode", "current-future").unwrap();
        let mut back = Settings::default();
        back.apply_file_text(&s.to_file_text(), "-").unwrap();
        assert_eq!(back, s);
    }
}

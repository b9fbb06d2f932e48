//! Policies that pick which <home, appliance> pairs to instrument next.
//!
//! All three policies draw from the same [`CandidatePool`] and return the
//! same [`SelectionResult`]; ties are always broken by ascending
//! (home, appliance) index so reruns are reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::fit;
use crate::error::{Error, Result};
use crate::tensor::{
    hadamard_into, predict, EnergyTensor, LatentFactors, ModelConfig, ObservationSet,
};
use crate::uncertainty::{integrated_uncertainty, sherman_morrison_update, ScoringContext};

/// A (home, appliance) pair. Orders by home, then appliance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct Pair {
    pub home: usize,
    pub appliance: usize,
}

impl Pair {
    pub fn new(home: usize, appliance: usize) -> Self {
        Self { home, appliance }
    }
}

impl From<Pair> for [usize; 2] {
    fn from(p: Pair) -> Self {
        [p.home, p.appliance]
    }
}

impl From<[usize; 2]> for Pair {
    fn from([home, appliance]: [usize; 2]) -> Self {
        Pair { home, appliance }
    }
}

/// Pairs that may still be instrumented, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePool {
    pairs: Vec<Pair>,
}

impl CandidatePool {
    /// Every (train home, breakdown appliance) pair not yet installed.
    pub fn build(
        train_homes: &[usize],
        num_appliances: usize,
        aggregate_index: usize,
        installed: &BTreeMap<Pair, usize>,
    ) -> Self {
        let mut pairs: Vec<Pair> = train_homes
            .iter()
            .flat_map(|&i| (0..num_appliances).map(move |j| Pair::new(i, j)))
            .filter(|p| p.appliance != aggregate_index && !installed.contains_key(p))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self { pairs }
    }

    /// Validates an explicit pair list.
    pub fn from_pairs(mut pairs: Vec<Pair>, aggregate_index: usize) -> Result<Self> {
        if pairs.iter().any(|p| p.appliance == aggregate_index) {
            return Err(Error::invalid("the aggregate appliance cannot be instrumented"));
        }
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        if pairs.len() != before {
            return Err(Error::invalid("candidate pool contains duplicates"));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<Pair>,
    /// Score of each chosen pair; zero for random selection.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    ActSense,
    Random,
    Qbc,
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actsense" => Ok(Self::ActSense),
            "random" => Ok(Self::Random),
            "qbc" => Ok(Self::Qbc),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?} (expected actsense, random or qbc)"
            ))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ActSense => "actsense",
            Self::Random => "random",
            Self::Qbc => "qbc",
        })
    }
}

/// The `budget` highest-scoring pairs, ties broken by pair order.
fn top_scored(pool: &CandidatePool, scores: Vec<f64>, budget: usize) -> SelectionResult {
    let mut ranked: Vec<(Pair, f64)> = pool.pairs.iter().copied().zip(scores).collect();
    // Pool order is ascending, and the sort is stable.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(budget);
    let (chosen, scores) = ranked.into_iter().unzip();
    SelectionResult { chosen, scores }
}

/// Pairs with the largest integrated uncertainty at month `t` (1-based).
pub fn select_actsense(
    pool: &CandidatePool,
    budget: usize,
    t: usize,
    ctx: &ScoringContext<'_>,
) -> Result<SelectionResult> {
    if budget == 0 || pool.is_empty() {
        return Ok(SelectionResult::default());
    }
    let scores = pool
        .pairs
        .iter()
        .map(|p| integrated_uncertainty(p.home, p.appliance, t, ctx))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_scored(pool, scores, budget))
}

/// Greedy variant of [`select_actsense`]: after each pick the chosen pair's
/// current-month direction is folded into the cached inverses with a
/// Sherman–Morrison update before the remaining pairs are rescored.
pub fn select_actsense_sequential(
    pool: &CandidatePool,
    budget: usize,
    t: usize,
    ctx: &ScoringContext<'_>,
) -> Result<SelectionResult> {
    let mut inverses = ctx.inverses.clone();
    let mut remaining = pool.clone();
    let mut result = SelectionResult::default();
    let rank = ctx.factors.rank();
    let mut v = vec![0.0; rank];
    while result.chosen.len() < budget && !remaining.is_empty() {
        let step_ctx = ScoringContext {
            inverses: &inverses,
            ..*ctx
        };
        let pick = select_actsense(&remaining, 1, t, &step_ctx)?;
        let (pair, score) = (pick.chosen[0], pick.scores[0]);
        let season = ctx.factors.season.row(t - 1);
        hadamard_into(ctx.factors.appliance.row(pair.appliance), season, &mut v);
        inverses.home[pair.home] = sherman_morrison_update(&inverses.home[pair.home], &v);
        hadamard_into(ctx.factors.home.row(pair.home), season, &mut v);
        inverses.app[pair.appliance] = sherman_morrison_update(&inverses.app[pair.appliance], &v);
        remaining.pairs.retain(|p| *p != pair);
        result.chosen.push(pair);
        result.scores.push(score);
    }
    Ok(result)
}

/// `budget` distinct pairs drawn uniformly without replacement.
pub fn select_random(pool: &CandidatePool, budget: usize, seed: u64) -> SelectionResult {
    let take = budget.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<Pair> = rand::seq::index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|idx| pool.pairs[idx])
        .collect();
    SelectionResult {
        scores: vec![0.0; chosen.len()],
        chosen,
    }
}

/// Population variance of each pool pair's month-`t` prediction across the
/// committee members.
pub fn committee_variances(
    pool: &CandidatePool,
    t: usize,
    committee: &[LatentFactors],
) -> Result<Vec<f64>> {
    pool.pairs
        .iter()
        .map(|p| {
            let preds = committee
                .iter()
                .map(|f| predict(f, p.home, p.appliance, t - 1))
                .collect::<Result<Vec<_>>>()?;
            let n = preds.len() as f64;
            let mean = preds.iter().sum::<f64>() / n;
            Ok(preds.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        })
        .collect()
}

/// Seed of committee member `index` derived from the base seed.
pub fn committee_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
}

/// Query-by-committee: fits one model per rank and picks the pairs whose
/// month-`t` predictions disagree most.
#[allow(clippy::too_many_arguments)]
pub fn select_qbc(
    pool: &CandidatePool,
    budget: usize,
    t: usize,
    tensor: &EnergyTensor,
    omega: &ObservationSet,
    committee_ranks: &[usize],
    base_config: &ModelConfig,
    seed: u64,
) -> Result<SelectionResult> {
    if committee_ranks.len() < 2 {
        return Err(Error::invalid("a committee needs at least two members"));
    }
    if budget == 0 || pool.is_empty() {
        return Ok(SelectionResult::default());
    }
    let committee = committee_ranks
        .par_iter()
        .enumerate()
        .map(|(idx, &rank)| {
            let config = ModelConfig {
                rank,
                seed: committee_seed(seed, idx),
                ..base_config.clone()
            };
            fit(tensor, omega, &config, None, None).map(|f| f.factors)
        })
        .collect::<Result<Vec<_>>>()?;
    let variances = committee_variances(pool, t, &committee)?;
    Ok(top_scored(pool, variances, budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FactorMatrix;
    use crate::uncertainty::{Alphas, KernelConfig, PrecisionInverses, UncertaintyMode};
    use nalgebra::DMatrix;

    fn pool_of(pairs: &[(usize, usize)]) -> CandidatePool {
        CandidatePool::from_pairs(pairs.iter().map(|&(h, a)| Pair::new(h, a)).collect(), 0).unwrap()
    }

    #[test]
    fn pool_excludes_aggregate_and_installed() {
        let mut installed = BTreeMap::new();
        installed.insert(Pair::new(1, 2), 1);
        let pool = CandidatePool::build(&[1, 0], 3, 0, &installed);
        assert_eq!(
            pool.pairs(),
            &[Pair::new(0, 1), Pair::new(0, 2), Pair::new(1, 1)]
        );
        assert!(CandidatePool::from_pairs(vec![Pair::new(0, 0)], 0).is_err());
        assert!(CandidatePool::from_pairs(vec![Pair::new(0, 1), Pair::new(0, 1)], 0).is_err());
    }

    /// Three homes sharing one appliance; identity precisions so each score is
    /// the plain norm of the appliance and home directions.
    fn three_pair_setup() -> (LatentFactors, PrecisionInverses) {
        let mut f = LatentFactors::zeros(3, 2, 1, 2);
        f.season.set_row(0, &[1.0, 1.0]);
        f.appliance.set_row(1, &[3.0, 4.0]);
        f.home.set_row(0, &[0.0, 1.0]); // 5 + 1
        f.home.set_row(1, &[0.0, 0.0]); // 5
        f.home.set_row(2, &[0.0, 0.0]);
        let mut inv = PrecisionInverses {
            home: vec![DMatrix::identity(2, 2); 3],
            app: vec![DMatrix::identity(2, 2); 2],
        };
        // Home 2 is well observed: A = 25 I shrinks its width to 1.
        inv.home[2] = DMatrix::identity(2, 2) / 25.0;
        (f, inv)
    }

    fn ctx<'a>(f: &'a LatentFactors, inv: &'a PrecisionInverses) -> ScoringContext<'a> {
        ScoringContext {
            factors: f,
            inverses: inv,
            season_prior: None,
            alphas: Alphas { home: 1.0, app: 1.0 },
            kernel: KernelConfig {
                sigma_window: 1,
                horizon: 1,
            },
            mode: UncertaintyMode::Full,
        }
    }

    #[test]
    fn actsense_examples() {
        let (f, inv) = three_pair_setup();
        let c = ctx(&f, &inv);
        let pool = pool_of(&[(2, 1), (1, 1), (0, 1)]);
        assert!(select_actsense(&pool, 0, 1, &c).unwrap().chosen.is_empty());

        let single = pool_of(&[(1, 1)]);
        assert_eq!(select_actsense(&single, 5, 1, &c).unwrap().chosen, vec![Pair::new(1, 1)]);

        let sel = select_actsense(&pool, 2, 1, &c).unwrap();
        assert_eq!(sel.chosen, vec![Pair::new(0, 1), Pair::new(1, 1)]);
        assert!((sel.scores[0] - 6.0).abs() < 1e-12);
        assert!((sel.scores[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn actsense_breaks_ties_by_index() {
        let mut f = LatentFactors::zeros(2, 3, 1, 1);
        f.season.set_row(0, &[1.0]);
        for j in 0..3 {
            f.appliance.set_row(j, &[1.0]);
        }
        let inv = PrecisionInverses {
            home: vec![DMatrix::identity(1, 1); 2],
            app: vec![DMatrix::identity(1, 1); 3],
        };
        let pool = pool_of(&[(1, 2), (0, 2), (1, 1), (0, 1)]);
        let sel = select_actsense(&pool, 3, 1, &ctx(&f, &inv)).unwrap();
        assert_eq!(sel.chosen, vec![Pair::new(0, 1), Pair::new(0, 2), Pair::new(1, 1)]);
    }

    #[test]
    fn sequential_mode_spreads_picks() {
        // One home, two identical appliances. Batch mode scores them equally;
        // sequential mode shrinks the home ellipsoid after the first pick.
        let mut f = LatentFactors::zeros(1, 3, 1, 1);
        f.season.set_row(0, &[1.0]);
        f.home.set_row(0, &[1.0]);
        f.appliance.set_row(1, &[1.0]);
        f.appliance.set_row(2, &[1.0]);
        let inv = PrecisionInverses {
            home: vec![DMatrix::identity(1, 1)],
            app: vec![DMatrix::identity(1, 1); 3],
        };
        let pool = pool_of(&[(0, 1), (0, 2)]);
        let c = ctx(&f, &inv);
        let batch = select_actsense(&pool, 2, 1, &c).unwrap();
        let seq = select_actsense_sequential(&pool, 2, 1, &c).unwrap();
        assert_eq!(batch.chosen, seq.chosen);
        assert!(seq.scores[1] < batch.scores[1]);
    }

    #[test]
    fn random_examples() {
        let pool = pool_of(&[(0, 1), (0, 2), (1, 1)]);
        let all = select_random(&pool, 10, 3);
        let mut chosen = all.chosen.clone();
        chosen.sort();
        assert_eq!(chosen, pool.pairs());
        assert_eq!(select_random(&pool, 2, 42), select_random(&pool, 2, 42));
        assert!(select_random(&pool, 0, 1).chosen.is_empty());
    }

    #[test]
    fn random_is_uniform() {
        let pairs: Vec<(usize, usize)> = (0..10).map(|h| (h, 1)).collect();
        let pool = pool_of(&pairs);
        let mut counts = [0usize; 10];
        let trials = 10_000;
        for seed in 0..trials {
            let sel = select_random(&pool, 1, seed as u64);
            counts[sel.chosen[0].home] += 1;
        }
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((0.08..=0.12).contains(&freq), "frequency {freq}");
        }
    }

    fn constant_factors(homes: usize, value: f64) -> LatentFactors {
        let mut f = LatentFactors::zeros(homes, 2, 1, 1);
        for i in 0..homes {
            f.home.set_row(i, &[value]);
        }
        f.appliance.set_row(1, &[1.0]);
        f.season = FactorMatrix::from_rows(&[vec![1.0]]).unwrap();
        f
    }

    #[test]
    fn committee_variance_examples() {
        let pool = pool_of(&[(0, 1), (1, 1), (2, 1)]);
        let same = vec![constant_factors(3, 2.0), constant_factors(3, 2.0)];
        assert!(committee_variances(&pool, 1, &same).unwrap().iter().all(|&v| v == 0.0));
        let tie = top_scored(&pool, vec![0.0; 3], 2);
        assert_eq!(tie.chosen, vec![Pair::new(0, 1), Pair::new(1, 1)]);

        let mut low = constant_factors(3, 10.0);
        let mut high = constant_factors(3, 10.0);
        low.home.set_row(1, &[10.0]);
        high.home.set_row(1, &[20.0]);
        let v = committee_variances(&pool, 1, &[low, high]).unwrap();
        assert_eq!(v, vec![0.0, 25.0, 0.0]);
        let sel = top_scored(&pool, v, 1);
        assert_eq!(sel.chosen, vec![Pair::new(1, 1)]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in ["actsense", "random", "qbc"] {
            assert_eq!(name.parse::<StrategyKind>().unwrap().to_string(), name);
        }
        assert!("vbv".parse::<StrategyKind>().is_err());
    }
}

//! Active sensor deployment for appliance-level energy breakdown.
//!
//! Monthly readings live in a homes × appliances × months tensor whose
//! aggregate slice (the whole-home bill) is always visible. A regularized
//! CP model is fitted by alternating ridge updates, and each month a budget
//! of new (home, appliance) sensors is placed where the model is least sure
//! of itself, now and over the coming months.
//!
//! ```
//! use actsense::{generate_synthetic, run, FoldSplit, SimConfig, SyntheticConfig};
//!
//! let (tensor, _truth) = generate_synthetic(&SyntheticConfig {
//!     num_homes: 8,
//!     num_appliances: 3,
//!     ..Default::default()
//! })
//! .unwrap();
//! let split = FoldSplit::new((0..6).collect(), vec![], vec![6, 7]);
//! let mut cfg = SimConfig::default();
//! cfg.budget = 2;
//! let report = run(&tensor, &split, &cfg, None).unwrap();
//! assert_eq!(report.mean_rmse.len(), 12);
//! // 6 train homes × 3 appliances: the pool runs dry after 9 months.
//! assert_eq!(report.installed_count(), 18);
//! ```

pub mod als;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod simulator;
pub mod strategy;
pub mod tensor;
pub mod uncertainty;

pub use als::{fit, solve_block, Fit, FitReport, SufficientStats};
pub use data_io::{
    generate_synthetic, load_csv, read_report, save_csv, write_report, DatasetManifest,
    LoadOptions, SeasonShape, SyntheticConfig,
};
pub use error::{Error, Result};
pub use evaluation::{kfold_split, relative_improvement, FoldSplit, GridSpec};
pub use simulator::{run, SimConfig, SimReport};
pub use strategy::{CandidatePool, Pair, StrategyKind};
pub use tensor::{
    Cell, EnergyTensor, FactorMatrix, LatentFactors, ModelConfig, NormCaps, ObservationSet,
};
pub use uncertainty::{AlphaMode, ConfidenceParams, KernelConfig, UncertaintyMode};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensor.md")]
    mod tensor {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    mod uncertainty {}
    #[doc = include_str!("../../../book/src/kernel.md")]
    mod kernel {}
    #[doc = include_str!("../../../book/src/deployment.md")]
    mod deployment {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

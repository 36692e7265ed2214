//! Asymmetric Duos: a large base classifier and a small sidekick whose logits
//! are combined with two fitted scalar weights.
//!
//! - [`logit_store`]: on-disk logit bundles and FLOPs bookkeeping
//! - [`aggregate`]: the combination rule, its ablations and uncertainty measures
//! - [`tune`]: NLL-minimizing weights and single-model temperature scaling
//! - [`metrics`]: accuracy, macro-F1, NLL, Brier, ECE, AUROC, risk-coverage, SAC
//! - [`simulate`]: seeded synthetic classifier pairs

pub mod aggregate;
pub mod error;
pub mod logit_store;
pub mod metrics;
pub mod simulate;
pub mod tune;

pub use aggregate::{
    combine_logits, ensemble_average, score, score_duo, softmax, AggregationMode, DuoWeights,
    ScoredPredictions, UncertaintyMeasure,
};
pub use error::{Error, Result};
pub use logit_store::{
    flops_balance, load_bundle, save_bundle, BundlePair, LogitBundle, ModelMeta, Split,
};
pub use metrics::{
    accuracy, auroc_correctness, brier, ece, evaluate, macro_f1, risk_coverage, CalibrationReport,
    EvalInput, EvalOptions, MetricRow, RiskCoverageCurve,
};
pub use simulate::{describe, generate, SimOutput, SimSpec};
pub use tune::{
    duo_nll, fit_duo_temperatures, fit_single_temperature, nll, nll_gradient, ScaleFit, TuneResult,
};

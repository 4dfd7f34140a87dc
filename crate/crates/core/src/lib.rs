//! Anytime-valid conditional-independence testing from a data stream.
//!
//! The tester maintains a nonnegative wealth process that starts at 1 and
//! stays a supermartingale whenever the tested feature is conditionally
//! independent of the response given the covariates. Each incoming batch
//! is scored by comparing a frozen predictive model's error on the real
//! feature against its error on dummy features drawn from the feature's
//! conditional distribution; the score feeds a mixture of betting
//! strategies over a grid of fractions, averaged across an ensemble of
//! batch sizes. Rejecting when the wealth reaches `1 / alpha` controls the
//! type-1 error at `alpha` uniformly over all data-dependent stopping
//! rules.
//!
//! The crate also ships offline randomization baselines against the same
//! conditional samplers, synthetic data generators, and a simulation
//! harness with report emission.

pub mod betting;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod martingale;
pub mod model;
pub mod offline;
pub mod rng;
pub mod sampler;
pub mod types;

pub use betting::{batch_mse, derandomized_score, ScoreFn};
pub use datagen::{gen_autocorrelated, gen_dataset, misspecified_sampler, Regime, SyntheticConfig};
pub use error::{Error, Result};
pub use experiments::{
    load_sampler, ndjson_observations, run_experiment, save_sampler, write_csv_report,
    write_json_report, write_ndjson, ExperimentSpec, MetricsRow, MetricsTable, SamplerSpec,
    Scenario, TrialRecord,
};
pub use martingale::{
    base_wealth, checkpoint, config_hash, decide, restore, run_sequential, MixtureState,
    TesterState,
};
pub use model::{LassoState, ModelLadder, ModelSnapshot, TrainSet};
pub use offline::{
    crt_pvalue, hrt_pvalue, CvLassoTrainer, FixedEtaLassoTrainer, OfflineResult, OfflineTrainer,
};
pub use rng::RngStream;
pub use sampler::{
    fit_gaussian_sampler, fit_logistic_sampler, BernoulliLogisticSampler, DummySampler,
    FittedGaussianSampler, GaussianLinearSampler,
};
pub use types::{
    validate_observation, ville_threshold, Decision, Observation, RawRecord, ScoreKind,
    TestConfig, TestOutcome,
};

//! Interpretable spatial-atlas regression with heteroscedastic uncertainty.
//!
//! The model is additive: one subnetwork per covariate emits a mean and a
//! (strictly positive) variance contribution at a spatial location, and the
//! predicted response distribution is the Gaussian whose parameters are the
//! sums of those contributions. On top of the predictor this crate provides
//!
//! - monotonicity-by-construction subnetworks for covariates with a known
//!   direction of effect ([`monotone`]),
//! - conditional-Gaussian covariate dependence networks ([`dependence`]),
//! - a marginalization engine that turns the additive model plus the
//!   dependence model into single-covariate response distributions via the
//!   laws of total expectation and total variance ([`marginal`]),
//! - missing-covariate imputation and percentile-stationary individualized
//!   prediction ([`inference`]),
//! - evaluation metrics and dataset plumbing ([`metrics`], [`data`]).
//!
//! Training is deterministic for a fixed seed and single threaded. Trained
//! models are immutable and safe to share across threads; the marginalization
//! engine evaluates curve grid points in parallel when the `parallel` feature
//! (default) is enabled, with per-point derived seeds so results do not depend
//! on thread count.

pub mod atlas;
pub mod data;
pub mod dependence;
pub mod error;
pub mod inference;
pub mod marginal;
pub mod math;
pub mod metrics;
pub mod model_io;
pub mod monotone;
pub mod nn;
pub(crate) mod parallel;

pub use atlas::{fit_atlas, nll_loss, AtlasConfig, AtlasModel, GaussianParams, MonotonePrior};
pub use data::{load_csv, split_by_subject, Dataset, Record, SplitSpec};
pub use dependence::{fit_dependence, ConditionalGaussian, DependenceConfig, DependenceModel};
pub use error::{Error, Result};
pub use inference::{gaussian_cdf, impute, individualized_predict, SubjectObservation};
pub use marginal::{
    brute_force_marginal, marginal_curve, CovariateLaw, IndependentMarginals, Integration,
    MarginalCurve, SamplingConfig,
};
pub use metrics::EvalReport;
pub use model_io::SavedModel;
pub use nn::{ActivationKind, DenseNetwork, TrainConfig};

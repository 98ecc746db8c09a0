//! Non-parametric reward guidance for flow-matching samplers.
//!
//! A pretrained flow model is steered toward `p(x) exp(r(x))` by adding a
//! guidance field built from labeled samples `(x_1, r)`. The fields need no
//! gradients of the reward, and the labeled datasets collected while
//! optimizing can be stored and reused or composed later without further
//! reward calls.
//!
//! Module map:
//!
//! * [`flow`]: time grid, the [`FlowModel`] interface and the Euler / stochastic samplers.
//! * [`analytic`]: closed-form Gaussian mixtures and tilting oracles.
//! * [`guidance`]: kernel posterior estimators and guidance fields.
//! * [`optimizer`]: the iterative optimize-and-collect loop.
//! * [`rewards`]: black-box reward interface and implementations.
//! * [`persistence`]: dataset files and metric tables.
//! * [`eval`]: moment and energy-distance metrics, baselines, efficiency gain.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod error;
pub mod eval;
pub mod flow;
pub mod guidance;
pub mod optimizer;
pub mod persistence;
pub mod point;
pub mod rewards;
pub mod softmax;
pub mod stream;

pub use analytic::{tilt_gaussian, Component, GaussianMixture, TiltedGaussian};
pub use error::{FlowError, Result};
pub use flow::{FieldContext, FlowModel, Guidance, SamplerConfig, TimeGrid};
pub use guidance::{Dataset, GuidanceField, KernelNoise, LabeledSample, Mode, RewardNorm};
pub use optimizer::{OptimizerConfig, RunState};
pub use point::Point;
pub use rewards::{CountingReward, RewardFn};

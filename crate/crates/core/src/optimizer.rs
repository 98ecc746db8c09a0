//! The optimize-and-collect loop.
//!
//! Iteration `l` samples `N` trajectories under the model velocity plus the
//! telescoping sum of reward fields built from the datasets `D_0..D_{l-1}`,
//! scores the clean samples with the black-box reward and appends them as
//! `D_l`. Iteration 0 therefore samples the unguided model.

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{FlowError, Result};
use crate::flow::{sample_batch, FlowModel, Guidance, SamplerConfig};
use crate::guidance::{standardize_rewards, Dataset, GuidanceField, KernelNoise, Mode};
use crate::point::Point;
use crate::rewards::{CountingReward, RewardFn};
use crate::stream::derive_seed;

const FIELD_STREAM: u64 = 0x6669_656c;
const SAMPLER_STREAM: u64 = 0x7361_6d70;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Number of iterations `L`.
    pub iterations: usize,
    /// Trajectories (and reward evaluations) per iteration `N`.
    pub batch: usize,
    pub sampler: SamplerConfig,
    pub mode: Mode,
    pub seed: u64,
    #[serde(default)]
    pub noise: KernelNoise,
}

impl OptimizerConfig {
    pub fn budget(&self) -> u64 {
        (self.iterations * self.batch) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(FlowError::InvalidParameter {
                name: "iterations/batch",
                reason: "must both be positive".into(),
            });
        }
        self.sampler.validate().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    /// Cumulative reward evaluations after this iteration.
    pub evaluations: u64,
    pub mean_reward: f64,
    pub best_reward: f64,
    pub best_so_far: f64,
    pub mean_coords: Point,
}

impl IterationMetrics {
    /// Summarizes one scored batch; `best_so_far` is the running maximum
    /// before this batch.
    pub fn from_batch(iter: usize, evaluations: u64, samples: &[Point], rewards: &[f64], best_so_far: f64) -> Self {
        let n = rewards.len() as f64;
        let best_reward = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dim = samples.first().map_or(0, Vec::len);
        let mut mean_coords = vec![0.0; dim];
        for x in samples {
            for (m, xi) in mean_coords.iter_mut().zip(x) {
                *m += xi / n;
            }
        }
        Self {
            iter,
            evaluations,
            mean_reward: rewards.iter().sum::<f64>() / n,
            best_reward,
            best_so_far: best_so_far.max(best_reward),
            mean_coords,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunState {
    pub datasets: Vec<Dataset>,
    pub metrics: Vec<IterationMetrics>,
    pub seed: u64,
}

impl RunState {
    pub fn evaluations(&self) -> u64 {
        self.metrics.last().map_or(0, |m| m.evaluations)
    }

    /// `(evaluations, best reward so far)` after each iteration.
    pub fn best_curve(&self) -> Vec<(u64, f64)> {
        self.metrics.iter().map(|m| (m.evaluations, m.best_so_far)).collect()
    }

    /// `(evaluations, batch mean reward)` after each iteration.
    pub fn mean_curve(&self) -> Vec<(u64, f64)> {
        self.metrics.iter().map(|m| (m.evaluations, m.mean_reward)).collect()
    }

    pub fn all_samples(&self) -> Result<Dataset> {
        Dataset::merged(&self.datasets)
    }
}

impl Serialize for RunState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let samples: Vec<_> = self.datasets.iter().map(|d| d.samples()).collect();
        let mut s = serializer.serialize_struct("RunState", 3)?;
        s.serialize_field("seed", &self.seed)?;
        s.serialize_field("datasets", &samples)?;
        s.serialize_field("metrics", &self.metrics)?;
        s.end()
    }
}

/// Seed of the reward field built from `D_j`.
pub fn field_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, FIELD_STREAM, j as u64)
}

/// Telescoping sum of the per-iteration reward fields. Practical mode
/// standardizes all rewards with one global mean and deviation; exact mode uses
/// raw rewards.
pub fn accumulated_field(datasets: &[Dataset], dim: usize, mode: Mode, seed: u64) -> Result<GuidanceField> {
    if datasets.is_empty() {
        return Ok(GuidanceField::zero(dim));
    }
    let views = match mode {
        Mode::Practical => standardize_rewards(datasets)?,
        Mode::Exact => datasets.to_vec(),
    };
    let children = views
        .into_iter()
        .enumerate()
        .map(|(j, ds)| GuidanceField::reward_tilt(ds, mode, field_seed(seed, j)))
        .collect::<Result<Vec<_>>>()?;
    if children.len() == 1 {
        return Ok(children.into_iter().next().expect("one child"));
    }
    GuidanceField::composite(children)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub samples: Vec<Point>,
    pub state: RunState,
}

/// Runs `config.iterations` rounds; `progress` is called after each round with
/// the new metrics and the state so far (for example to persist datasets).
pub fn run<F>(model: &dyn FlowModel, reward: &dyn RewardFn, config: &OptimizerConfig, mut progress: F) -> Result<RunOutput>
where
    F: FnMut(&IterationMetrics, &RunState) -> Result<()>,
{
    config.validate()?;
    let dim = model.dim();
    let counter = CountingReward::new(reward);
    let mut state = RunState {
        seed: config.seed,
        ..RunState::default()
    };
    let mut best_so_far = f64::NEG_INFINITY;
    let mut last = Vec::new();
    for l in 0..config.iterations {
        let field = accumulated_field(&state.datasets, dim, config.mode, config.seed)?.with_noise(config.noise);
        let sampler = SamplerConfig {
            seed: derive_seed(config.seed, SAMPLER_STREAM, l as u64),
            ..config.sampler
        };
        let guide: Option<&dyn Guidance> = if l == 0 { None } else { Some(&field) };
        let first = (l * config.batch) as u64;
        let samples = sample_batch(model, guide, &sampler, config.batch, first).map_err(|e| match e {
            FlowError::Trajectory { trajectory, source, .. } => FlowError::Trajectory {
                iteration: Some(l),
                trajectory,
                source,
            },
            other => other,
        })?;

        let rewards = counter.evaluate(&samples)?;
        if rewards.len() != samples.len() {
            return Err(FlowError::Reward(format!(
                "expected {} rewards, got {}",
                samples.len(),
                rewards.len()
            )));
        }
        if let Some(bad) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(FlowError::Reward(format!("non-finite reward for sample {bad} in iteration {l}")));
        }

        state.datasets.push(Dataset::from_points(samples.clone(), &rewards, l)?);
        let metrics = IterationMetrics::from_batch(l, counter.count(), &samples, &rewards, best_so_far);
        best_so_far = metrics.best_so_far;
        state.metrics.push(metrics.clone());
        progress(&metrics, &state)?;
        last = samples;
    }
    Ok(RunOutput { samples: last, state })
}

//! Non-parametric posterior-expectation estimators and the guidance fields
//! built from them.
//!
//! Every estimator is a softmax-weighted average of stored clean samples. The
//! softmax logits compare the current state `x_t` with a per-sample kernel
//! center:
//!
//! * [`Mode::Exact`]: center `t x_1^i`, logits `-|x_t - t x_1^i|^2 / (2 (1-t)^2)`.
//! * [`Mode::Practical`]: center `t x_1^i + (1-t) eps_i` with fresh standard
//!   normal `eps_i`, the squared distance further divided by `sqrt(D)`, the
//!   dataset augmented with the model's clean-data prediction, and rewards
//!   standardized with globally shared statistics.
//!
//! Contrastive fields (reward tilt, reuse, data contrast) evaluate both of
//! their softmaxes on the same kernel draws.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow::{predicted_clean, FieldContext, FlowModel, Guidance};
use crate::point::{axpy, check_dim, is_finite, Point};
use crate::softmax::softmax_into;
use crate::stream::{standard_normal, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Practical,
}

impl std::str::FromStr for Mode {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Mode::Exact),
            "practical" => Ok(Mode::Practical),
            other => Err(FlowError::InvalidParameter {
                name: "mode",
                reason: format!("expected `exact` or `practical`, got `{other}`"),
            }),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Exact => "exact",
            Mode::Practical => "practical",
        })
    }
}

/// How often practical-mode kernel noise is redrawn along a trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelNoise {
    /// A fresh draw at every integration step.
    #[default]
    Step,
    /// One draw per trajectory, reused at every step.
    Trajectory,
}

impl std::str::FromStr for KernelNoise {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(KernelNoise::Step),
            "trajectory" => Ok(KernelNoise::Trajectory),
            other => Err(FlowError::InvalidParameter {
                name: "kernel noise",
                reason: format!("expected `step` or `trajectory`, got `{other}`"),
            }),
        }
    }
}

impl std::fmt::Display for KernelNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelNoise::Step => "step",
            KernelNoise::Trajectory => "trajectory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x1: Point,
    pub reward: f64,
    /// Optimization iteration that produced the sample.
    pub iter: usize,
}

/// Reward z-scoring statistics shared by a family of datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub mean: f64,
    pub std: f64,
}

impl RewardNorm {
    /// Population mean and standard deviation. A constant reward set gets
    /// `std = 1`, so every standardized reward is zero.
    pub fn from_rewards<I: IntoIterator<Item = f64>>(rewards: I) -> Option<Self> {
        let values: Vec<f64> = rewards.into_iter().collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            std = 1.0;
        }
        Some(Self { mean, std })
    }

    pub fn apply(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }
}

/// An immutable set of labeled clean samples. Clones share storage, so
/// attaching different normalization statistics is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Arc<Vec<LabeledSample>>,
    dim: usize,
    norm: Option<RewardNorm>,
}

impl Dataset {
    pub fn new(dim: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        for s in &samples {
            check_dim(dim, s.x1.len())?;
            if !is_finite(&s.x1) || !s.reward.is_finite() {
                return Err(FlowError::InvalidParameter {
                    name: "sample",
                    reason: "coordinates and rewards must be finite".into(),
                });
            }
        }
        Ok(Self {
            samples: Arc::new(samples),
            dim,
            norm: None,
        })
    }

    /// Labels `points` with `rewards`, all tagged with iteration `iter`.
    pub fn from_points(points: Vec<Point>, rewards: &[f64], iter: usize) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or(FlowError::Empty("dataset"))?;
        check_dim(points.len(), rewards.len())?;
        let samples = points
            .into_iter()
            .zip(rewards)
            .map(|(x1, &reward)| LabeledSample { x1, reward, iter })
            .collect();
        Self::new(dim, samples)
    }

    /// Unlabeled samples (reward 0), as used by data-contrast fields.
    pub fn unlabeled(points: Vec<Point>) -> Result<Self> {
        let rewards = vec![0.0; points.len()];
        Self::from_points(points, &rewards, 0)
    }

    /// Union of several datasets in order.
    pub fn merged(parts: &[Dataset]) -> Result<Self> {
        let dim = parts.first().map(|d| d.dim).ok_or(FlowError::Empty("dataset list"))?;
        let mut samples = Vec::new();
        for p in parts {
            check_dim(dim, p.dim)?;
            samples.extend(p.samples.iter().cloned());
        }
        Self::new(dim, samples)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn norm(&self) -> Option<RewardNorm> {
        self.norm
    }

    pub fn with_norm(&self, norm: Option<RewardNorm>) -> Self {
        Self {
            samples: Arc::clone(&self.samples),
            dim: self.dim,
            norm,
        }
    }

    /// A view with every reward replaced by `f(reward)`.
    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| LabeledSample {
                reward: f(s.reward),
                ..s.clone()
            })
            .collect();
        Ok(Self::new(self.dim, samples)?.with_norm(self.norm))
    }

    /// Rewards as they enter the logits: standardized in practical mode when
    /// statistics are attached, raw otherwise.
    pub fn effective_rewards(&self, mode: Mode) -> Vec<f64> {
        match (mode, self.norm) {
            (Mode::Practical, Some(norm)) => self.samples.iter().map(|s| norm.apply(s.reward)).collect(),
            _ => self.samples.iter().map(|s| s.reward).collect(),
        }
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(FlowError::Empty("dataset"))
        } else {
            Ok(())
        }
    }
}

/// Attaches one global normalization, computed over the union of all rewards,
/// to every dataset.
pub fn standardize_rewards(datasets: &[Dataset]) -> Result<Vec<Dataset>> {
    let norm = RewardNorm::from_rewards(datasets.iter().flat_map(|d| d.samples.iter().map(|s| s.reward)))
        .ok_or(FlowError::Empty("reward union"))?;
    Ok(datasets.iter().map(|d| d.with_norm(Some(norm))).collect())
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..1.0).contains(&t) {
        Ok(())
    } else {
        Err(FlowError::InvalidTime { t, range: "[0, 1)" })
    }
}

/// Distance part of the softmax logits for one dataset at `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLogits {
    pub values: Vec<f64>,
}

impl KernelLogits {
    pub fn compute<R: Rng + ?Sized>(ds: &Dataset, x: &[f64], t: f64, mode: Mode, rng: &mut R) -> Result<Self> {
        ds.require_nonempty()?;
        check_dim(ds.dim, x.len())?;
        check_time(t)?;
        let omt = 1.0 - t;
        let values = match mode {
            Mode::Exact => {
                let scale = 2.0 * omt * omt;
                ds.samples
                    .iter()
                    .map(|s| {
                        let d2: f64 = x.iter().zip(&s.x1).map(|(xi, yi)| (xi - t * yi).powi(2)).sum();
                        -d2 / scale
                    })
                    .collect()
            }
            Mode::Practical => {
                let scale = 2.0 * omt * omt * (ds.dim as f64).sqrt();
                ds.samples
                    .iter()
                    .map(|s| {
                        let eps = standard_normal(rng, ds.dim);
                        let d2: f64 = x
                            .iter()
                            .zip(&s.x1)
                            .zip(&eps)
                            .map(|((xi, yi), ei)| (xi - t * yi - omt * ei).powi(2))
                            .sum();
                        -d2 / scale
                    })
                    .collect()
            }
        };
        Ok(Self { values })
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.values.len());
        softmax_into(&self.values, &mut w);
        w
    }
}

/// Kernel logits, points and effective rewards of one (possibly augmented)
/// dataset, ready to be combined.
struct Frame<'a> {
    points: Vec<&'a [f64]>,
    logits: Vec<f64>,
    rewards: Vec<f64>,
}

impl<'a> Frame<'a> {
    fn build<R: Rng + ?Sized>(
        ds: &'a Dataset,
        x: &[f64],
        t: f64,
        mode: Mode,
        rng: &mut R,
        prediction: Option<&'a [f64]>,
    ) -> Result<Self> {
        let kernel = KernelLogits::compute(ds, x, t, mode, rng)?;
        let mut frame = Frame {
            points: ds.samples.iter().map(|s| s.x1.as_slice()).collect(),
            logits: kernel.values,
            rewards: ds.effective_rewards(mode),
        };
        if mode == Mode::Practical {
            let x_hat = prediction.ok_or(FlowError::MissingPrediction)?;
            check_dim(ds.dim, x_hat.len())?;
            // reward of the appended prediction: kernel regression on the stored labels
            let r_hat = weighted_scalar(&frame.logits, &frame.rewards);
            frame.points.push(x_hat);
            // its kernel center is x itself, at distance zero
            frame.logits.push(0.0);
            frame.rewards.push(r_hat);
        }
        Ok(frame)
    }

    fn average(&self, shift: impl Fn(f64) -> f64) -> Point {
        let shifted: Vec<f64> = self.logits.iter().zip(&self.rewards).map(|(l, r)| l + shift(*r)).collect();
        let mut w = Vec::with_capacity(shifted.len());
        softmax_into(&shifted, &mut w);
        let mut out = vec![0.0; self.points[0].len()];
        for (wi, p) in w.iter().zip(&self.points) {
            axpy(*wi, p, &mut out);
        }
        out
    }

    /// `sum_i [softmax(l + plus(r))_i - softmax(l + minus(r))_i] x_i`
    fn contrast(&self, plus: impl Fn(f64) -> f64, minus: impl Fn(f64) -> f64) -> Point {
        let lp: Vec<f64> = self.logits.iter().zip(&self.rewards).map(|(l, r)| l + plus(*r)).collect();
        let lm: Vec<f64> = self.logits.iter().zip(&self.rewards).map(|(l, r)| l + minus(*r)).collect();
        let (mut wp, mut wm) = (Vec::new(), Vec::new());
        softmax_into(&lp, &mut wp);
        softmax_into(&lm, &mut wm);
        let mut out = vec![0.0; self.points[0].len()];
        for ((a, b), p) in wp.iter().zip(&wm).zip(&self.points) {
            axpy(a - b, p, &mut out);
        }
        out
    }
}

fn weighted_scalar(logits: &[f64], values: &[f64]) -> f64 {
    let mut w = Vec::with_capacity(logits.len());
    softmax_into(logits, &mut w);
    w.iter().zip(values).map(|(a, b)| a * b).sum()
}

fn scale(mut v: Point, k: f64) -> Point {
    for vi in &mut v {
        *vi *= k;
    }
    v
}

/// Kernel estimate of `E[x_1 | x_t = x]` under the dataset's distribution.
pub fn posterior_estimate<R: Rng + ?Sized>(ds: &Dataset, x: &[f64], t: f64, mode: Mode, rng: &mut R) -> Result<Point> {
    Ok(plain_frame(ds, x, t, mode, rng)?.average(|_| 0.0))
}

/// Kernel estimate of the posterior mean under the reward-tilted target
/// `p(x_1) exp(r(x_1))`.
pub fn target_posterior_estimate<R: Rng + ?Sized>(
    ds: &Dataset,
    x: &[f64],
    t: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Point> {
    let frame = plain_frame(ds, x, t, mode, rng)?;
    Ok(frame.average(|r| r))
}

fn plain_frame<'a, R: Rng + ?Sized>(ds: &'a Dataset, x: &[f64], t: f64, mode: Mode, rng: &mut R) -> Result<Frame<'a>> {
    let kernel = KernelLogits::compute(ds, x, t, mode, rng)?;
    Ok(Frame {
        points: ds.samples.iter().map(|s| s.x1.as_slice()).collect(),
        logits: kernel.values,
        rewards: ds.effective_rewards(mode),
    })
}

/// Kernel regression of the stored rewards at `(x, t)`.
pub fn estimate_reward<R: Rng + ?Sized>(ds: &Dataset, x: &[f64], t: f64, mode: Mode, rng: &mut R) -> Result<f64> {
    let frame = plain_frame(ds, x, t, mode, rng)?;
    Ok(weighted_scalar(&frame.logits, &frame.rewards))
}

/// A dataset extended by the model's clean-data prediction at `(x, t)`.
#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub base: Dataset,
    pub prediction: Point,
    pub predicted_reward: f64,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.base.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Appends `x_hat = x + (1 - t) v(x, t)` with a reward estimated from the
/// stored labels.
pub fn augment_with_prediction<R: Rng + ?Sized>(
    ds: &Dataset,
    x: &[f64],
    t: f64,
    model: &dyn FlowModel,
    rng: &mut R,
) -> Result<AugmentedDataset> {
    let v = model.velocity(x, t)?;
    let prediction = predicted_clean(x, t, &v);
    let predicted_reward = estimate_reward(ds, x, t, Mode::Practical, rng)?;
    Ok(AugmentedDataset {
        base: ds.clone(),
        prediction,
        predicted_reward,
    })
}

/// `(E_target[x_1 | x] - E_base[x_1 | x]) / (1 - t)` from two sample sets.
///
/// Both estimates start from the same stream state, so equal datasets cancel
/// exactly.
pub fn data_field<R: Rng + Clone>(
    base: &Dataset,
    target: &Dataset,
    x: &[f64],
    t: f64,
    mode: Mode,
    rng: &mut R,
    prediction: Option<&[f64]>,
) -> Result<Point> {
    check_dim(base.dim, target.dim)?;
    let mut target_rng = rng.clone();
    let target_frame = Frame::build(target, x, t, mode, &mut target_rng, prediction)?;
    let base_frame = Frame::build(base, x, t, mode, rng, prediction)?;
    let hi = target_frame.average(|_| 0.0);
    let lo = base_frame.average(|_| 0.0);
    let k = 1.0 / (1.0 - t);
    Ok(hi.iter().zip(&lo).map(|(a, b)| k * (a - b)).collect())
}

/// Field transporting the dataset distribution `p` to `p exp(r)`.
pub fn reward_field<R: Rng + ?Sized>(
    ds: &Dataset,
    x: &[f64],
    t: f64,
    mode: Mode,
    rng: &mut R,
    prediction: Option<&[f64]>,
) -> Result<Point> {
    let frame = Frame::build(ds, x, t, mode, rng, prediction)?;
    Ok(scale(frame.contrast(|r| r, |_| 0.0), 1.0 / (1.0 - t)))
}

/// Field transporting `q exp(-alpha r)` to `q exp(alpha r)`, where `q` is the
/// dataset distribution.
pub fn reuse_field<R: Rng + ?Sized>(
    ds: &Dataset,
    alpha: f64,
    x: &[f64],
    t: f64,
    mode: Mode,
    rng: &mut R,
    prediction: Option<&[f64]>,
) -> Result<Point> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(FlowError::InvalidParameter {
            name: "alpha",
            reason: format!("must be nonnegative, got {alpha}"),
        });
    }
    let frame = Frame::build(ds, x, t, mode, rng, prediction)?;
    Ok(scale(frame.contrast(|r| alpha * r, |r| -(alpha * r)), 1.0 / (1.0 - t)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    /// Identically zero; the empty telescoping sum.
    Zero { dim: usize },
    DataContrast { base: Dataset, target: Dataset },
    RewardTilt(Dataset),
    Reuse { ds: Dataset, alpha: f64 },
    Composite(Vec<GuidanceField>),
}

/// An evaluable guidance field. Stochastic (practical-mode) leaves draw their
/// kernel noise from the stream `(seed, trajectory, step)`, or
/// `(seed, trajectory, 0)` under [`KernelNoise::Trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceField {
    pub kind: FieldKind,
    pub mode: Mode,
    pub seed: u64,
    pub noise: KernelNoise,
}

impl GuidanceField {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: FieldKind::Zero { dim },
            mode: Mode::Exact,
            seed: 0,
            noise: KernelNoise::default(),
        }
    }

    pub fn data_contrast(base: Dataset, target: Dataset, mode: Mode, seed: u64) -> Result<Self> {
        base.require_nonempty()?;
        target.require_nonempty()?;
        check_dim(base.dim, target.dim)?;
        Ok(Self {
            kind: FieldKind::DataContrast { base, target },
            mode,
            seed,
            noise: KernelNoise::default(),
        })
    }

    pub fn reward_tilt(ds: Dataset, mode: Mode, seed: u64) -> Result<Self> {
        ds.require_nonempty()?;
        Ok(Self {
            kind: FieldKind::RewardTilt(ds),
            mode,
            seed,
            noise: KernelNoise::default(),
        })
    }

    pub fn reuse(ds: Dataset, alpha: f64, mode: Mode, seed: u64) -> Result<Self> {
        ds.require_nonempty()?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(FlowError::InvalidParameter {
                name: "alpha",
                reason: format!("must be nonnegative, got {alpha}"),
            });
        }
        Ok(Self {
            kind: FieldKind::Reuse { ds, alpha },
            mode,
            seed,
            noise: KernelNoise::default(),
        })
    }

    pub fn composite(children: Vec<GuidanceField>) -> Result<Self> {
        let dim = children.first().map(|c| c.dim()).ok_or(FlowError::Empty("composite"))?;
        for c in &children {
            check_dim(dim, c.dim())?;
        }
        let mode = children[0].mode;
        Ok(Self {
            kind: FieldKind::Composite(children),
            mode,
            seed: 0,
            noise: KernelNoise::default(),
        })
    }

    /// Sets the noise policy of this field and every child.
    pub fn with_noise(mut self, noise: KernelNoise) -> Self {
        self.noise = noise;
        if let FieldKind::Composite(children) = &mut self.kind {
            for child in children.iter_mut() {
                *child = child.clone().with_noise(noise);
            }
        }
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            FieldKind::Zero { dim } => *dim,
            FieldKind::DataContrast { base, .. } => base.dim,
            FieldKind::RewardTilt(ds) | FieldKind::Reuse { ds, .. } => ds.dim,
            FieldKind::Composite(children) => children[0].dim(),
        }
    }

    pub fn evaluate(&self, x: &[f64], t: f64, ctx: &FieldContext<'_>) -> Result<Point> {
        check_dim(self.dim(), x.len())?;
        let step = match self.noise {
            KernelNoise::Step => ctx.step,
            KernelNoise::Trajectory => 0,
        };
        let mut rng = stream(self.seed, ctx.trajectory, step);
        let p = ctx.prediction;
        match &self.kind {
            FieldKind::Zero { dim } => {
                check_time(t)?;
                Ok(vec![0.0; *dim])
            }
            FieldKind::DataContrast { base, target } => data_field(base, target, x, t, self.mode, &mut rng, p),
            FieldKind::RewardTilt(ds) => reward_field(ds, x, t, self.mode, &mut rng, p),
            FieldKind::Reuse { ds, alpha } => reuse_field(ds, *alpha, x, t, self.mode, &mut rng, p),
            FieldKind::Composite(children) => composite_field(children, x, t, ctx),
        }
    }
}

impl Guidance for GuidanceField {
    fn guidance(&self, x: &[f64], t: f64, ctx: &FieldContext<'_>) -> Result<Point> {
        self.evaluate(x, t, ctx)
    }
}

/// Componentwise sum of the children's evaluations.
pub fn composite_field(children: &[GuidanceField], x: &[f64], t: f64, ctx: &FieldContext<'_>) -> Result<Point> {
    let (first, rest) = children.split_first().ok_or(FlowError::Empty("composite"))?;
    let mut acc = first.evaluate(x, t, ctx)?;
    for child in rest {
        let v = child.evaluate(x, t, ctx)?;
        check_dim(acc.len(), v.len())?;
        axpy(1.0, &v, &mut acc);
    }
    Ok(acc)
}

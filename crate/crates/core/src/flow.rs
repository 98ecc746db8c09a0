//! Time grid, velocity-field interface and the two samplers (Euler ODE and the
//! marginal-preserving stochastic sampler).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::point::{check_dim, is_finite, Point};
use crate::stream::{standard_normal, stream};

const TRAJECTORY_STREAM: u64 = 0x7472_616a;

/// Uniform grid `t_k = k / T`, `k = 0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(FlowError::InvalidParameter {
                name: "steps",
                reason: "must be positive".into(),
            });
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    /// Grid points at which velocities are evaluated (all strictly below 1).
    pub fn eval_times(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.steps).map(|k| (k, self.time(k)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Noise level; zero selects the deterministic Euler sampler.
    pub eta: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(steps: usize, eta: f64, seed: u64) -> Self {
        Self { steps, eta, seed }
    }

    pub fn validate(&self) -> Result<TimeGrid> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(FlowError::InvalidParameter {
                name: "eta",
                reason: format!("must be a nonnegative finite number, got {}", self.eta),
            });
        }
        TimeGrid::new(self.steps)
    }
}

/// A pretrained (or analytic) flow model.
///
/// Implementations must be pure: equal arguments give equal outputs.
pub trait FlowModel: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Result<Point>;
}

/// Where a guidance evaluation happens: which trajectory, which grid step, and
/// the model's clean-data prediction at that state.
#[derive(Debug, Clone, Copy)]
pub struct FieldContext<'a> {
    pub trajectory: u64,
    pub step: u64,
    pub prediction: Option<&'a [f64]>,
}

impl<'a> FieldContext<'a> {
    pub fn new(trajectory: u64, step: u64) -> Self {
        Self {
            trajectory,
            step,
            prediction: None,
        }
    }

    pub fn with_prediction(mut self, prediction: &'a [f64]) -> Self {
        self.prediction = Some(prediction);
        self
    }
}

/// An additive correction to the model velocity.
pub trait Guidance: Sync {
    fn guidance(&self, x: &[f64], t: f64, ctx: &FieldContext<'_>) -> Result<Point>;
}

/// `x + dt * v`
pub fn euler_step(x: &[f64], v: &[f64], dt: f64) -> Result<Point> {
    check_dim(x.len(), v.len())?;
    if !(dt > 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    Ok(x.iter().zip(v).map(|(xi, vi)| xi + dt * vi).collect())
}

/// Coefficients `(a, b, c)` of the stochastic step `a x + b v + c eps` with
/// `sigma_t = eta * sqrt((1 - t) / t)`.
pub fn sde_coefficients(t: f64, dt: f64, eta: f64) -> Result<(f64, f64, f64)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(FlowError::InvalidTime { t, range: "(0, 1)" });
    }
    if !(dt > 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    if eta == 0.0 {
        return Ok((1.0, dt, 0.0));
    }
    let sigma_sq = eta * eta * (1.0 - t) / t;
    let a = 1.0 - sigma_sq * dt / (2.0 * (1.0 - t));
    let b = dt * (1.0 + t * sigma_sq / (2.0 * (1.0 - t)));
    let c = sigma_sq.sqrt() * dt.sqrt();
    Ok((a, b, c))
}

pub fn sde_step(x: &[f64], v: &[f64], t: f64, dt: f64, eta: f64, noise: &[f64]) -> Result<Point> {
    check_dim(x.len(), v.len())?;
    check_dim(x.len(), noise.len())?;
    let (a, b, c) = sde_coefficients(t, dt, eta)?;
    Ok(x.iter()
        .zip(v)
        .zip(noise)
        .map(|((xi, vi), ni)| a * xi + b * vi + c * ni)
        .collect())
}

/// Velocity implied by a score of the path marginal: `x/t + ((1-t)/t) score`.
pub fn velocity_from_score(x: &[f64], t: f64, score: &[f64]) -> Result<Point> {
    check_dim(x.len(), score.len())?;
    if !(t > 0.0 && t < 1.0) {
        return Err(FlowError::InvalidTime { t, range: "(0, 1)" });
    }
    let k = (1.0 - t) / t;
    Ok(x.iter().zip(score).map(|(xi, si)| xi / t + k * si).collect())
}

/// The model's clean-data prediction `x + (1 - t) v`.
pub fn predicted_clean(x: &[f64], t: f64, v: &[f64]) -> Point {
    debug_assert_eq!(x.len(), v.len());
    x.iter().zip(v).map(|(xi, vi)| xi + (1.0 - t) * vi).collect()
}

/// Integrates one trajectory from `x0` at `t = 0` to `t = 1`.
///
/// `noise` supplies the per-step Gaussian draws of the stochastic sampler and
/// is untouched when `eta == 0`. The stochastic step is singular at `t = 0`,
/// so the first step is always an Euler step.
pub fn integrate<R: Rng + ?Sized>(
    model: &dyn FlowModel,
    field: Option<&dyn Guidance>,
    config: &SamplerConfig,
    x0: &[f64],
    trajectory: u64,
    noise: &mut R,
) -> Result<Point> {
    let grid = config.validate()?;
    check_dim(model.dim(), x0.len())?;
    let dt = grid.dt();
    let mut x = x0.to_vec();
    for (k, t) in grid.eval_times() {
        let mut v = model.velocity(&x, t)?;
        if let Some(field) = field {
            let prediction = predicted_clean(&x, t, &v);
            let ctx = FieldContext::new(trajectory, k as u64).with_prediction(&prediction);
            let g = field.guidance(&x, t, &ctx)?;
            check_dim(v.len(), g.len())?;
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi += gi;
            }
        }
        x = if config.eta == 0.0 || k == 0 {
            euler_step(&x, &v, dt)?
        } else {
            let eps = standard_normal(noise, x.len());
            sde_step(&x, &v, t, dt, config.eta, &eps)?
        };
        if !is_finite(&x) {
            return Err(FlowError::NonFiniteState { t });
        }
    }
    Ok(x)
}

/// Draws `n` trajectories in parallel. Trajectory `first_trajectory + i` owns
/// the stream `(config.seed, first_trajectory + i)` for both its starting point
/// and its sampler noise, so results do not depend on thread scheduling.
pub fn sample_batch(
    model: &dyn FlowModel,
    field: Option<&dyn Guidance>,
    config: &SamplerConfig,
    n: usize,
    first_trajectory: u64,
) -> Result<Vec<Point>> {
    let dim = model.dim();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = first_trajectory + i as u64;
            let mut rng = stream(config.seed, TRAJECTORY_STREAM, id);
            let x0 = standard_normal(&mut rng, dim);
            integrate(model, field, config, &x0, id, &mut rng).map_err(|e| FlowError::Trajectory {
                iteration: None,
                trajectory: i,
                source: Box::new(e),
            })
        })
        .collect()
}

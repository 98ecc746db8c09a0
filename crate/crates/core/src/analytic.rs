//! Closed-form isotropic Gaussian mixtures along the linear interpolation path
//! `x_t = (1 - t) x_0 + t x_1`, plus exponential-tilting oracles.
//!
//! These stand in for a pretrained flow model and provide ground truth for the
//! non-parametric estimators.

use std::f64::consts::PI;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow::FlowModel;
use crate::point::{check_dim, dot, norm_sq, Point};
use crate::softmax::log_sum_exp;

const T_MAX: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Point,
    /// Isotropic standard deviation: covariance is `sigma^2 I`.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components.first().ok_or(FlowError::Empty("mixture"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(FlowError::InvalidParameter {
                name: "mean",
                reason: "dimension must be positive".into(),
            });
        }
        let mut total = 0.0;
        for c in &components {
            check_dim(dim, c.mean.len())?;
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(FlowError::InvalidParameter {
                    name: "weight",
                    reason: format!("must be nonnegative, got {}", c.weight),
                });
            }
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(FlowError::InvalidParameter {
                    name: "sigma",
                    reason: format!("must be positive, got {}", c.sigma),
                });
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(FlowError::InvalidParameter {
                    name: "mean",
                    reason: "non-finite coordinate".into(),
                });
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(FlowError::InvalidParameter {
                name: "weight",
                reason: format!("weights sum to {total}, expected 1"),
            });
        }
        Ok(Self { components, dim })
    }

    /// Builds a mixture after rescaling the weights to sum to one.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(FlowError::InvalidParameter {
                name: "weight",
                reason: "weights must have a positive sum".into(),
            });
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    pub fn gaussian(mean: Point, sigma: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            sigma,
        }])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid standard normal")
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> Point {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// Row-major `D x D` covariance of the clean distribution.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let mu = self.mean();
        let mut cov = vec![vec![0.0; self.dim]; self.dim];
        for c in &self.components {
            for i in 0..self.dim {
                cov[i][i] += c.weight * c.sigma * c.sigma;
                for j in 0..self.dim {
                    cov[i][j] += c.weight * (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]);
                }
            }
        }
        cov
    }

    fn check_time(t: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&t) {
            return Err(FlowError::InvalidTime { t, range: "[0, 1)" });
        }
        Ok(t.min(T_MAX))
    }

    /// Per-component log of `w_k N(x | t m_k, v_k I)` with `v_k = t^2 s_k^2 + (1-t)^2`.
    fn component_log_terms(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim as f64;
        let omt = 1.0 - t;
        self.components
            .iter()
            .map(|c| {
                let var = t * t * c.sigma * c.sigma + omt * omt;
                let r2: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xi, mi)| (xi - t * mi) * (xi - t * mi))
                    .sum();
                c.weight.ln() - 0.5 * d * (2.0 * PI * var).ln() - r2 / (2.0 * var)
            })
            .collect()
    }

    /// `log p_t(x)` of the path marginal.
    pub fn log_density_t(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let t = Self::check_time(t)?;
        Ok(log_sum_exp(&self.component_log_terms(x, t)))
    }

    /// `E[x_1 | x_t = x]` in closed form.
    pub fn posterior_mean(&self, x: &[f64], t: f64) -> Result<Point> {
        check_dim(self.dim, x.len())?;
        let t = Self::check_time(t)?;
        let logs = self.component_log_terms(x, t);
        let lse = log_sum_exp(&logs);
        let omt2 = (1.0 - t) * (1.0 - t);
        let mut out = vec![0.0; self.dim];
        for (c, l) in self.components.iter().zip(&logs) {
            let gamma = (l - lse).exp();
            if gamma == 0.0 {
                continue;
            }
            let s2 = c.sigma * c.sigma;
            let denom = t * t * s2 + omt2;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += gamma * (t * s2 * xi + omt2 * mi) / denom;
            }
        }
        Ok(out)
    }

    /// Marginal velocity `(E[x_1 | x_t] - x_t) / (1 - t)`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Point> {
        let t = Self::check_time(t)?;
        let m = self.posterior_mean(x, t)?;
        Ok(m.iter().zip(x).map(|(mi, xi)| (mi - xi) / (1.0 - t)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Point> {
        let weights: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        let pick = WeightedIndex::new(&weights).expect("weights validated at construction");
        (0..n)
            .map(|_| {
                let c = &self.components[pick.sample(rng)];
                c.mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + c.sigma * z
                    })
                    .collect()
            })
            .collect()
    }

    /// The mixture reweighted by `exp(scale * a . x)`; every component stays
    /// Gaussian with shifted mean and reweighted mixing proportion.
    pub fn tilt_linear(&self, a: &[f64], scale: f64) -> Result<Self> {
        check_dim(self.dim, a.len())?;
        let a2 = norm_sq(a);
        let log_w: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let s2 = c.sigma * c.sigma;
                c.weight.ln() + scale * dot(a, &c.mean) + 0.5 * scale * scale * s2 * a2
            })
            .collect();
        let lse = log_sum_exp(&log_w);
        let components = self
            .components
            .iter()
            .zip(&log_w)
            .map(|(c, lw)| {
                let tilted = tilt_gaussian(&c.mean, c.sigma, a, scale).expect("sigma validated");
                Component {
                    weight: (lw - lse).exp(),
                    mean: tilted.mean,
                    sigma: c.sigma,
                }
            })
            .collect();
        Self::normalized(components)
    }
}

impl FlowModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Point> {
        GaussianMixture::velocity(self, x, t)
    }
}

/// Closed form of `N(mean, sigma^2 I) * exp(scale * a . x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedGaussian {
    pub mean: Point,
    pub sigma: f64,
    pub base_mean: Point,
    pub direction: Point,
    pub scale: f64,
}

impl TiltedGaussian {
    pub fn as_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::gaussian(self.mean.clone(), self.sigma)
    }
}

/// Exponential tilting of an isotropic Gaussian by a linear reward: the mean
/// moves by `scale * sigma^2 * a`, the spread is unchanged.
pub fn tilt_gaussian(mean: &[f64], sigma: f64, a: &[f64], scale: f64) -> Result<TiltedGaussian> {
    check_dim(mean.len(), a.len())?;
    if !(sigma > 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "sigma",
            reason: format!("must be positive, got {sigma}"),
        });
    }
    let s2 = sigma * sigma;
    Ok(TiltedGaussian {
        mean: mean.iter().zip(a).map(|(m, ai)| m + scale * s2 * ai).collect(),
        sigma,
        base_mean: mean.to_vec(),
        direction: a.to_vec(),
        scale,
    })
}

/// `N(mean, sigma^2 I) * exp(-scale * |x - target|^2)` as a Gaussian
/// (precision-weighted product). Returns `(mean, sigma)`.
pub fn tilt_gaussian_quadratic(
    mean: &[f64],
    sigma: f64,
    target: &[f64],
    scale: f64,
) -> Result<(Point, f64)> {
    check_dim(mean.len(), target.len())?;
    if !(sigma > 0.0) || !(scale >= 0.0) {
        return Err(FlowError::InvalidParameter {
            name: "scale",
            reason: "sigma must be positive and scale nonnegative".into(),
        });
    }
    let prior_precision = 1.0 / (sigma * sigma);
    let precision = prior_precision + 2.0 * scale;
    let m = mean
        .iter()
        .zip(target)
        .map(|(mi, ci)| (prior_precision * mi + 2.0 * scale * ci) / precision)
        .collect();
    Ok((m, precision.recip().sqrt()))
}

/// Central-difference gradient of `f` with step `1e-4 (1 + |x|)`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64]) -> Result<Point>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let h = 1e-4 * (1.0 + norm_sq(x).sqrt());
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Score `grad log p_t(x)` of a mixture by central differences.
pub fn finite_difference_score(gmm: &GaussianMixture, x: &[f64], t: f64) -> Result<Point> {
    finite_difference_gradient(|y| gmm.log_density_t(y, t), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::velocity_from_score;
    use crate::point::dist_sq;
    use crate::stream::stream;

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        dist_sq(a, b).sqrt() / norm_sq(b).sqrt().max(1e-12)
    }

    fn two_bumps() -> GaussianMixture {
        GaussianMixture::new(vec![
            Component {
                weight: 0.3,
                mean: vec![-2.0, 1.0],
                sigma: 0.5,
            },
            Component {
                weight: 0.7,
                mean: vec![1.5, -0.5],
                sigma: 0.8,
            },
        ])
        .unwrap()
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(GaussianMixture::new(vec![]).is_err());
        let bad_weights = vec![
            Component {
                weight: 0.5,
                mean: vec![0.0],
                sigma: 1.0,
            },
            Component {
                weight: 0.6,
                mean: vec![0.0],
                sigma: 1.0,
            },
        ];
        assert!(GaussianMixture::new(bad_weights.clone()).is_err());
        assert!(GaussianMixture::normalized(bad_weights).is_ok());
        assert!(GaussianMixture::gaussian(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let g = GaussianMixture::standard_normal(1);
        let lp = g.log_density_t(&[0.0], 0.0).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!(g.log_density_t(&[0.0], 1.0).is_err());
    }

    #[test]
    fn single_component_path_marginal() {
        let (mu, s, t) = (1.7, 0.6, 0.35);
        let g = GaussianMixture::gaussian(vec![mu], s).unwrap();
        let var = t * t * s * s + (1.0 - t) * (1.0 - t);
        for x in [-1.0, 0.2, 3.0] {
            let expected = -0.5 * (2.0 * PI * var).ln() - (x - t * mu) * (x - t * mu) / (2.0 * var);
            assert!((g.log_density_t(&[x], t).unwrap() - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn symmetric_mixture_density_is_even() {
        let g = GaussianMixture::normalized(vec![
            Component {
                weight: 1.0,
                mean: vec![2.0],
                sigma: 0.7,
            },
            Component {
                weight: 1.0,
                mean: vec![-2.0],
                sigma: 0.7,
            },
        ])
        .unwrap();
        for t in [0.0, 0.3, 0.9] {
            for x in [0.4, 1.3, 5.0] {
                let a = g.log_density_t(&[x], t).unwrap();
                let b = g.log_density_t(&[-x], t).unwrap();
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn posterior_mean_examples() {
        let g = two_bumps();
        let prior = g.posterior_mean(&[3.0, 3.0], 0.0).unwrap();
        let mean = g.mean();
        assert!(relative_error(&prior, &mean) < 1e-14);

        let n = GaussianMixture::standard_normal(1);
        let m = n.posterior_mean(&[0.5], 0.5).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!(n.posterior_mean(&[0.5], 1.0).is_err());
    }

    #[test]
    fn standard_normal_velocity_closed_form() {
        let n = GaussianMixture::standard_normal(1);
        for t in [0.1, 0.5, 0.8] {
            let var = t * t + (1.0 - t) * (1.0 - t);
            let x = 1.3;
            let v = n.velocity(&[x], t).unwrap()[0];
            let expected = x * (t - var) / ((1.0 - t) * var);
            assert!((v - expected).abs() < 1e-12);
        }
        assert!(n.velocity(&[4.0], 0.5).unwrap()[0].abs() < 1e-15);
        let g = two_bumps();
        let v = g.velocity(&[0.4, 0.1], 0.0).unwrap();
        let m = g.mean();
        assert!((v[0] - (m[0] - 0.4)).abs() < 1e-14 && (v[1] - (m[1] - 0.1)).abs() < 1e-14);
    }

    #[test]
    fn velocity_and_posterior_identities_hold() {
        let g = two_bumps();
        let mut rng = stream(5, 0, 0);
        for t in [0.05, 0.25, 0.5, 0.75, 0.95] {
            for x in g.sample(&mut rng, 4) {
                // place the probe on the path at time t
                let noise = crate::stream::standard_normal(&mut rng, 2);
                let xt: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| t * a + (1.0 - t) * e).collect();
                let score = finite_difference_score(&g, &xt, t).unwrap();
                let v = velocity_from_score(&xt, t, &score).unwrap();
                assert!(relative_error(&v, &g.velocity(&xt, t).unwrap()) < 1e-4);
                let pm: Vec<f64> = xt
                    .iter()
                    .zip(&score)
                    .map(|(xi, si)| xi / t + (1.0 - t) * (1.0 - t) / t * si)
                    .collect();
                assert!(relative_error(&pm, &g.posterior_mean(&xt, t).unwrap()) < 1e-4);
            }
        }
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let g = two_bumps();
        for t in [0.0, 0.5, 1.0 - 1e-6] {
            let x = [1e3, -1e3];
            assert!(g.log_density_t(&x, t).unwrap().is_finite());
            assert!(g.posterior_mean(&x, t).unwrap().iter().all(|v| v.is_finite()));
            assert!(g.velocity(&x, t).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn tilt_examples() {
        let t0 = tilt_gaussian(&[0.0], 1.0, &[1.0], 0.0).unwrap();
        assert_eq!(t0.mean, vec![0.0]);
        assert_eq!(tilt_gaussian(&[0.0], 1.0, &[1.0], 1.0).unwrap().mean, vec![1.0]);
        assert_eq!(tilt_gaussian(&[0.0], 1.0, &[1.0], 5.0).unwrap().mean, vec![5.0]);
        // dyadic inputs compose without rounding
        let a = [0.5, -1.25];
        let once = tilt_gaussian(&[0.5, 0.5], 0.5, &a, 1.0).unwrap();
        let twice = tilt_gaussian(&once.mean, once.sigma, &a, 1.0).unwrap();
        let direct = tilt_gaussian(&[0.5, 0.5], 0.5, &a, 2.0).unwrap();
        assert_eq!(twice.mean, direct.mean);
        assert_eq!(twice.sigma, direct.sigma);
        let a = [0.3, -1.1];
        let once = tilt_gaussian(&[0.7, 0.1], 0.9, &a, 1.0).unwrap();
        let twice = tilt_gaussian(&once.mean, once.sigma, &a, 1.0).unwrap();
        let direct = tilt_gaussian(&[0.7, 0.1], 0.9, &a, 2.0).unwrap();
        assert!(twice.mean.iter().zip(&direct.mean).all(|(u, v)| (u - v).abs() < 1e-15));
    }

    #[test]
    fn tilting_a_single_gaussian_mixture_matches_closed_form() {
        let g = GaussianMixture::gaussian(vec![1.0, -1.0], 0.5).unwrap();
        let tilted = g.tilt_linear(&[2.0, 0.0], 1.5).unwrap();
        assert_eq!(tilted.components()[0].mean, vec![1.0 + 1.5 * 0.25 * 2.0, -1.0]);
        assert!((tilted.components()[0].weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_tilt_standard_normal() {
        let lambda = 0.75;
        let (m, s) = tilt_gaussian_quadratic(&[0.0, 0.0], 1.0, &[2.0, -4.0], lambda).unwrap();
        let k = 2.0 * lambda / (1.0 + 2.0 * lambda);
        assert!((m[0] - 2.0 * k).abs() < 1e-15 && (m[1] + 4.0 * k).abs() < 1e-15);
        assert!((s * s - 1.0 / (1.0 + 2.0 * lambda)).abs() < 1e-15);
    }

    #[test]
    fn sampling_respects_weights_and_seed() {
        let g = GaussianMixture::new(vec![
            Component {
                weight: 1.0,
                mean: vec![10.0],
                sigma: 0.1,
            },
            Component {
                weight: 0.0,
                mean: vec![-10.0],
                sigma: 0.1,
            },
        ])
        .unwrap();
        let xs = g.sample(&mut stream(1, 0, 0), 500);
        assert!(xs.iter().all(|x| x[0] > 0.0));
        assert_eq!(xs, g.sample(&mut stream(1, 0, 0), 500));

        let n = 20_000;
        let single = GaussianMixture::gaussian(vec![3.0], 2.0).unwrap();
        let ys = single.sample(&mut stream(2, 0, 0), n);
        let mean = ys.iter().map(|y| y[0]).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 3.0 * 2.0 / (n as f64).sqrt());
    }
}

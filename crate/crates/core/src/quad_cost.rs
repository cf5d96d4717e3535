//! Collision chance cost of a trajectory distribution.
//!
//! At a time `t` the trajectory mixture projects to a 2-D Gaussian mixture.
//! The expected occupancy under component `r` is approximated by a tensor
//! Gauss-Hermite rule after whitening with `Σ_r = L_r L_rᵀ`:
//!
//! `E[p] ≈ π⁻¹ Σ_ij β_i β_j p(√2 L_r [z_i, z_j]ᵀ + μ_r)`.
//!
//! The horizon average uses midpoint-rectangular time samples. The raw
//! quadrature value is returned without clamping to `[0, 1]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Vector2};

use crate::dist::{chol2, PointGaussianMixture, TrajectoryMixture};
use crate::occupancy::HilbertField;
use crate::{Error, Result};

pub const MAX_HERMITE_ORDER: usize = 64;

/// Physicists' Gauss-Hermite rule: `∫ f(z) e^{-z²} dz ≈ Σ β_i f(z_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteRule {
    abscissae: Vec<f64>,
    weights: Vec<f64>,
}

impl HermiteRule {
    /// Nodes by Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > MAX_HERMITE_ORDER {
            return Err(Error::InvalidArgument(format!(
                "Hermite order must be in 1..={MAX_HERMITE_ORDER}, got {order}"
            )));
        }
        const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
        let n = order;
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let half = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            if n % 2 == 1 && i == half - 1 {
                z = 0.0;
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        x.reverse();
        w.reverse();
        Ok(Self {
            abscissae: x,
            weights: w,
        })
    }

    pub fn order(&self) -> usize {
        self.abscissae.len()
    }

    pub fn abscissae(&self) -> &[f64] {
        &self.abscissae
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.abscissae.iter().zip(&self.weights).map(|(z, b)| b * f(*z)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    /// Hermite nodes per axis.
    pub nodes: usize,
    /// Midpoint time samples over the horizon.
    pub time_samples: usize,
    pub horizon: f64,
}

impl CostConfig {
    pub fn new(nodes: usize, time_samples: usize, horizon: f64) -> Result<Self> {
        if nodes == 0 || time_samples == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost config needs nodes, time samples and horizon positive (got {nodes}, {time_samples}, {horizon})"
            )));
        }
        Ok(Self {
            nodes,
            time_samples,
            horizon,
        })
    }

    pub fn times(&self) -> Vec<f64> {
        let k = self.time_samples as f64;
        (0..self.time_samples)
            .map(|i| (i as f64 + 0.5) * self.horizon / k)
            .collect()
    }
}

/// World-space quadrature points of one Gaussian with their weights
/// (`β_iβ_j/π`) and unit abscissae.
pub fn abscissae_points(mean: &Vector2<f64>, cov: &Matrix2<f64>, rule: &HermiteRule) -> Result<Vec<([f64; 2], f64)>> {
    let l = chol2(cov).ok_or_else(|| Error::InvalidCovariance("time-slice covariance failed Cholesky".into()))?;
    let mut out = Vec::with_capacity(rule.order() * rule.order());
    let s2 = std::f64::consts::SQRT_2;
    for (zi, bi) in rule.abscissae.iter().zip(&rule.weights) {
        for (zj, bj) in rule.abscissae.iter().zip(&rule.weights) {
            let x = mean + s2 * l * Vector2::new(*zi, *zj);
            out.push(([x[0], x[1]], bi * bj / PI));
        }
    }
    Ok(out)
}

/// Expected occupancy under a point Gaussian mixture.
pub fn point_cost(pgm: &PointGaussianMixture, field: &HilbertField, rule: &HermiteRule) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..pgm.len() {
        let pts = abscissae_points(&pgm.means[r], &pgm.covariances[r], rule)?;
        let c: f64 = pts.iter().map(|(x, w)| w * field.query(*x)).sum();
        total += pgm.weights[r] * c;
    }
    Ok(total)
}

/// Time-averaged expected occupancy over the horizon.
pub fn trajectory_cost(mix: &TrajectoryMixture, field: &HilbertField, config: &CostConfig) -> Result<f64> {
    let rule = HermiteRule::new(config.nodes)?;
    let times = config.times();
    let mut total = 0.0;
    for t in &times {
        total += point_cost(&mix.project_at_time(*t), field, &rule)?;
    }
    Ok(total / times.len() as f64)
}

/// Gradient of the cost for one component, in the optimizer's coordinates:
/// the location matrix, `log diag 𝓤`, and the column-scale Cholesky factor
/// as `(log L₁₁, L₂₁, log L₂₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGradient {
    pub location: DMatrix<f64>,
    pub log_row_scale: Vec<f64>,
    pub col_chol: [f64; 3],
}

impl ComponentGradient {
    fn zeros(m: usize) -> Self {
        Self {
            location: DMatrix::zeros(m, 2),
            log_row_scale: vec![0.0; m],
            col_chol: [0.0; 3],
        }
    }
}

/// Trajectory cost and its exact gradient under the discretization.
/// Mixture weights are held fixed and get no gradient.
pub fn cost_gradient(
    mix: &TrajectoryMixture,
    field: &HilbertField,
    config: &CostConfig,
) -> Result<(f64, Vec<ComponentGradient>)> {
    let rule = HermiteRule::new(config.nodes)?;
    let times = config.times();
    let m = mix.features().len();
    let origin = Vector2::new(mix.origin()[0], mix.origin()[1]);
    let inv_k = 1.0 / times.len() as f64;
    let s2 = std::f64::consts::SQRT_2;

    let mut cost = 0.0;
    let mut grads: Vec<ComponentGradient> = (0..mix.len()).map(|_| ComponentGradient::zeros(m)).collect();
    let phis: Vec<Vec<f64>> = times.iter().map(|t| mix.features().eval(*t)).collect();

    for (r, comp) in mix.components().iter().enumerate() {
        let alpha = mix.weights()[r];
        let lv = comp.col_chol();
        let u = comp.row_scale();
        let g = &mut grads[r];
        for phi in &phis {
            let s = comp.row_contraction(phi);
            let sqrt_s = s.sqrt();
            let mu = comp.mean_at(phi) + origin;
            let a = lv * sqrt_s;
            let mut c = 0.0;
            let mut g_mu = Vector2::zeros();
            let mut g_a = Matrix2::zeros();
            for (zi, bi) in rule.abscissae.iter().zip(&rule.weights) {
                for (zj, bj) in rule.abscissae.iter().zip(&rule.weights) {
                    let z = Vector2::new(*zi, *zj);
                    let x = mu + s2 * a * z;
                    let w = bi * bj / PI;
                    let (p, dp) = field.query_with_gradient([x[0], x[1]]);
                    c += w * p;
                    let gx = dp * w;
                    g_mu += gx;
                    g_a += s2 * gx * z.transpose();
                }
            }
            let scale = alpha * inv_k;
            cost += scale * c;
            let g_mu = g_mu * scale;
            let g_a = g_a * scale;
            for i in 0..m {
                g.location[(i, 0)] += phi[i] * g_mu[0];
                g.location[(i, 1)] += phi[i] * g_mu[1];
            }
            // A = √s L_V
            let g_s = (g_a[(0, 0)] * lv[(0, 0)] + g_a[(1, 0)] * lv[(1, 0)] + g_a[(1, 1)] * lv[(1, 1)]) / (2.0 * sqrt_s);
            for i in 0..m {
                g.log_row_scale[i] += g_s * u[i] * phi[i] * phi[i];
            }
            g.col_chol[0] += sqrt_s * g_a[(0, 0)] * lv[(0, 0)];
            g.col_chol[1] += sqrt_s * g_a[(1, 0)];
            g.col_chol[2] += sqrt_s * g_a[(1, 1)] * lv[(1, 1)];
        }
    }
    Ok((cost, grads))
}

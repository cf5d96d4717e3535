//! Closest constraint-compliant trajectory distribution.
//!
//! Solves `min_Ψ KL(ω_Ψ ‖ ω_Ψ₀)  s.t.  cost(Ξ_Ψ) ≤ ε` over the location,
//! row-scale and column-scale parameters of every component, mixture weights
//! fixed. The single inequality is handled by an augmented Lagrangian whose
//! subproblems are solved with L-BFGS.

use nalgebra::{DMatrix, Matrix2};

use crate::dist::{mixture_kl, MatrixNormalComponent, TrajectoryMixture};
use crate::lbfgs::{self, LbfgsOptions};
use crate::occupancy::HilbertField;
use crate::quad_cost::{cost_gradient, trajectory_cost, CostConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub initial_penalty: f64,
    /// Starting penalty for the fallback runs after an infeasible first run.
    pub restart_penalty: f64,
    pub penalty_growth: f64,
    pub constraint_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 12,
            max_inner_iterations: 200,
            initial_penalty: 10.0,
            restart_penalty: 1e4,
            penalty_growth: 5.0,
            constraint_tolerance: 1e-3,
            step_tolerance: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_outer_iterations > 0
            && self.max_inner_iterations > 0
            && self.initial_penalty > 0.0
            && self.restart_penalty > 0.0
            && self.constraint_tolerance > 0.0
            && self.step_tolerance > 0.0;
        if !positive || !(self.penalty_growth > 1.0) {
            return Err(Error::InvalidArgument(format!("invalid solver config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimProblem {
    pub prior: TrajectoryMixture,
    pub field: HilbertField,
    pub epsilon: f64,
    pub cost_config: CostConfig,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    FeasibleEarlyExit,
    MaxIterations,
}

impl OptimStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimStatus::Converged => "converged",
            OptimStatus::FeasibleEarlyExit => "feasible-early-exit",
            OptimStatus::MaxIterations => "max-iterations",
        }
    }
}

impl std::fmt::Display for OptimStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub posterior: TrajectoryMixture,
    pub kl: f64,
    pub prior_cost: f64,
    pub cost: f64,
    pub feasible: bool,
    /// Outer (multiplier) iterations.
    pub iterations: usize,
    /// Objective/gradient evaluations over all inner solves.
    pub evaluations: usize,
    pub status: OptimStatus,
}

/// Number of packed parameters per component for `m` features.
pub fn params_per_component(m: usize) -> usize {
    3 * m + 3
}

/// Per component: location entries (row-major), `log diag 𝓤`, then the
/// lower Cholesky factor of `𝓥` as `(log L₁₁, L₂₁, log L₂₂)`.
pub fn pack_parameters(mix: &TrajectoryMixture) -> Vec<f64> {
    let m = mix.features().len();
    let mut out = Vec::with_capacity(mix.len() * params_per_component(m));
    for c in mix.components() {
        for i in 0..m {
            out.push(c.location()[(i, 0)]);
            out.push(c.location()[(i, 1)]);
        }
        out.extend(c.row_scale().iter().map(|u| u.ln()));
        let l = c.col_chol();
        out.push(l[(0, 0)].ln());
        out.push(l[(1, 0)]);
        out.push(l[(1, 1)].ln());
    }
    out
}

/// Inverse of [`pack_parameters`]; weights, features and origin come from `template`.
pub fn unpack_parameters(template: &TrajectoryMixture, params: &[f64]) -> Result<TrajectoryMixture> {
    let m = template.features().len();
    let per = params_per_component(m);
    if params.len() != per * template.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameters, got {}",
            per * template.len(),
            params.len()
        )));
    }
    let comps = params
        .chunks(per)
        .map(|p| {
            let location = DMatrix::from_row_slice(m, 2, &p[..2 * m]);
            let row_scale = p[2 * m..3 * m].iter().map(|v| v.exp()).collect();
            let l = Matrix2::new(p[3 * m].exp(), 0.0, p[3 * m + 1], p[3 * m + 2].exp());
            MatrixNormalComponent::from_col_chol(location, row_scale, l)
        })
        .collect::<Result<Vec<_>>>()?;
    template.with_components(comps)
}

/// `KL(p ‖ q)` and its gradient with respect to `p`'s packed parameters.
pub fn kl_with_gradient(p: &TrajectoryMixture, q: &TrajectoryMixture) -> Result<(f64, Vec<f64>)> {
    let kl = mixture_kl(p, q)?;
    let m = p.features().len();
    let mf = m as f64;
    let mut grad = Vec::with_capacity(p.len() * params_per_component(m));
    for ((alpha, pc), qc) in p.weights().iter().zip(p.components()).zip(q.components()) {
        let vq_inv = qc
            .col_scale()
            .try_inverse()
            .ok_or_else(|| Error::InvalidCovariance("prior column scale is singular".into()))?;
        let uq = qc.row_scale();
        let up = pc.row_scale();
        let tr_v = (vq_inv * pc.col_scale()).trace();
        let tr_u: f64 = up.iter().zip(uq).map(|(a, b)| a / b).sum();
        // ∂/∂𝓜_p = 𝓤_q⁻¹ Δ 𝓥_q⁻¹
        for i in 0..m {
            let d0 = pc.location()[(i, 0)] - qc.location()[(i, 0)];
            let d1 = pc.location()[(i, 1)] - qc.location()[(i, 1)];
            let g0 = (vq_inv[(0, 0)] * d0 + vq_inv[(1, 0)] * d1) / uq[i];
            let g1 = (vq_inv[(0, 1)] * d0 + vq_inv[(1, 1)] * d1) / uq[i];
            grad.push(alpha * g0);
            grad.push(alpha * g1);
        }
        for i in 0..m {
            grad.push(alpha * 0.5 * (tr_v * up[i] / uq[i] - 2.0));
        }
        let l = pc.col_chol();
        let gl = vq_inv * l * tr_u;
        grad.push(alpha * (gl[(0, 0)] * l[(0, 0)] - mf));
        grad.push(alpha * gl[(1, 0)]);
        grad.push(alpha * (gl[(1, 1)] * l[(1, 1)] - mf));
    }
    Ok((kl, grad))
}

/// Trajectory cost and its gradient with respect to packed parameters.
pub fn cost_with_gradient(mix: &TrajectoryMixture, field: &HilbertField, config: &CostConfig) -> Result<(f64, Vec<f64>)> {
    let (cost, comps) = cost_gradient(mix, field, config)?;
    let m = mix.features().len();
    let mut grad = Vec::with_capacity(mix.len() * params_per_component(m));
    for g in comps {
        for i in 0..m {
            grad.push(g.location[(i, 0)]);
            grad.push(g.location[(i, 1)]);
        }
        grad.extend(&g.log_row_scale);
        grad.extend(g.col_chol);
    }
    Ok((cost, grad))
}

/// `1/√h_j` for the diagonal `h` of the KL Hessian at `x0` (central
/// differences of the analytic gradient), floored for flat directions.
fn kl_diagonal_scaling(prior: &TrajectoryMixture, x0: &[f64]) -> Result<Vec<f64>> {
    const H: f64 = 1e-4;
    let mut diag = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for j in 0..x0.len() {
        x[j] = x0[j] + H;
        let (_, gp) = kl_with_gradient(&unpack_parameters(prior, &x)?, prior)?;
        x[j] = x0[j] - H;
        let (_, gm) = kl_with_gradient(&unpack_parameters(prior, &x)?, prior)?;
        x[j] = x0[j];
        diag.push((gp[j] - gm[j]) / (2.0 * H));
    }
    let top = diag.iter().cloned().fold(0.0f64, f64::max);
    let floor = (top * 1e-12).max(f64::MIN_POSITIVE);
    Ok(diag.into_iter().map(|h| 1.0 / h.max(floor).sqrt()).collect())
}

struct Iterate {
    x: Vec<f64>,
    kl: f64,
    cost: f64,
}

/// Outcome of one augmented-Lagrangian run from a given start.
struct Run {
    chosen: Iterate,
    iterations: usize,
    evaluations: usize,
    status: OptimStatus,
}

/// Fixed data shared by the runs of one solve. Runs work in coordinates y
/// with x = x0 + s ⊙ y, where s_j is the inverse square root of the KL
/// Hessian diagonal at the prior, so the KL term is close to ½‖y‖² and the
/// quasi-Newton inner solves start well scaled.
struct Solver<'a> {
    problem: &'a OptimProblem,
    x0: Vec<f64>,
    scale: Vec<f64>,
    inner: LbfgsOptions,
}

impl Solver<'_> {
    fn to_x(&self, y: &[f64]) -> Vec<f64> {
        self.x0.iter().zip(y).zip(&self.scale).map(|((a, b), s)| a + s * b).collect()
    }

    fn to_y(&self, x: &[f64]) -> Vec<f64> {
        self.x0.iter().zip(x).zip(&self.scale).map(|((a, b), s)| (b - a) / s).collect()
    }

    fn run(&self, start: Vec<f64>, initial_penalty: f64) -> Result<Run> {
        let OptimProblem {
            prior,
            field,
            epsilon,
            cost_config,
            solver,
        } = self.problem;
        let epsilon = *epsilon;
        let tol = solver.constraint_tolerance;
        let scale = &self.scale;
        let mut y = self.to_y(&start);
        let mut multiplier = 0.0f64;
        let mut penalty = initial_penalty;
        let mut evaluations = 0usize;
        let mut best_feasible: Option<Iterate> = None;
        let mut last: Option<Iterate> = None;
        let mut prev_violation = f64::INFINITY;
        let mut status = OptimStatus::MaxIterations;
        let mut outer = 0;

        while outer < solver.max_outer_iterations {
            outer += 1;
            let (lam, rho) = (multiplier, penalty);
            let objective = |yv: &[f64], grad: &mut [f64]| -> f64 {
                let Ok(mix) = unpack_parameters(prior, &self.to_x(yv)) else {
                    return f64::INFINITY;
                };
                let (Ok((kl, gk)), Ok((cost, gc))) = (kl_with_gradient(&mix, prior), cost_with_gradient(&mix, field, cost_config)) else {
                    return f64::INFINITY;
                };
                let shifted = cost - epsilon + lam / rho;
                let active = shifted > 0.0;
                for i in 0..grad.len() {
                    let g = if active { gk[i] + rho * shifted * gc[i] } else { gk[i] };
                    grad[i] = g * scale[i];
                }
                if active {
                    kl + 0.5 * rho * shifted * shifted - lam * lam / (2.0 * rho)
                } else {
                    kl - lam * lam / (2.0 * rho)
                }
            };
            let res = lbfgs::minimize(objective, &y, &self.inner);
            evaluations += res.evaluations;
            if !res.value.is_finite() {
                return Err(Error::NonFiniteObjective { iterations: outer });
            }
            y = res.x;
            let x = self.to_x(&y);
            let mix = unpack_parameters(prior, &x)?;
            let kl = mixture_kl(&mix, prior)?;
            let cost = trajectory_cost(&mix, field, cost_config)?;
            if !(kl.is_finite() && cost.is_finite()) {
                return Err(Error::NonFiniteObjective { iterations: outer });
            }
            let g = cost - epsilon;
            if g <= tol && best_feasible.as_ref().is_none_or(|b| kl < b.kl) {
                best_feasible = Some(Iterate { x: x.clone(), kl, cost });
            }
            last = Some(Iterate { x, kl, cost });

            // feasible and complementary
            if g <= tol && (g >= -tol || multiplier == 0.0) {
                status = OptimStatus::Converged;
                break;
            }
            multiplier = (multiplier + penalty * g).max(0.0);
            let violation = g.max(0.0);
            if violation > tol && violation > 0.25 * prev_violation {
                penalty *= solver.penalty_growth;
            }
            prev_violation = violation;
        }

        let chosen = match status {
            OptimStatus::Converged => last.expect("at least one outer iteration"),
            _ => best_feasible.or(last).expect("at least one outer iteration"),
        };
        Ok(Run {
            chosen,
            iterations: outer,
            evaluations,
            status,
        })
    }

    /// Start point where each component's mean path halts at its last free
    /// position before first entering an obstacle, refit in the feature
    /// basis with a pull toward the prior locations.
    fn halted(&self) -> Result<Option<Vec<f64>>> {
        const SAMPLES_PER_STEP: usize = 4;
        const PULL: f64 = 1e-3;
        let OptimProblem {
            prior,
            field,
            cost_config,
            ..
        } = self.problem;
        let fm = prior.features();
        let m = fm.len();
        let per = params_per_component(m);
        let n = SAMPLES_PER_STEP * cost_config.time_samples + 1;
        let horizon = cost_config.horizon;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * horizon / (n - 1) as f64).collect();
        let phi = fm.design_matrix(&times);
        let gram = phi.transpose() * &phi + DMatrix::identity(m, m) * PULL;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidCovariance("singular halted-path system".into()))?;
        let origin = prior.origin();
        let mut start = self.x0.clone();
        let mut moved = false;
        for (r, comp) in prior.components().iter().enumerate() {
            let path: Vec<[f64; 2]> = times.iter().map(|t| prior.mean_position(r, *t)).collect();
            let Some(hit) = path.iter().position(|x| field.query(*x) >= 0.5) else {
                continue;
            };
            let stop = path[hit.saturating_sub(1)];
            let target = DMatrix::from_fn(n, 2, |k, c| if k < hit { path[k][c] } else { stop[c] } - origin[c]);
            let loc = chol.solve(&(phi.transpose() * target + comp.location() * PULL));
            for i in 0..m {
                start[r * per + 2 * i] = loc[(i, 0)];
                start[r * per + 2 * i + 1] = loc[(i, 1)];
            }
            moved = true;
        }
        Ok(moved.then_some(start))
    }

    /// Restart point for a run that ended infeasible: components still over
    /// the limit take the locations of the cheapest component of that run,
    /// keeping their prior shape. `None` when no component is under the limit
    /// or there is nothing to move.
    fn transplant(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let OptimProblem {
            prior,
            field,
            epsilon,
            cost_config,
            ..
        } = self.problem;
        let mix = unpack_parameters(prior, x)?;
        let costs = mix
            .components()
            .iter()
            .map(|c| {
                let single = TrajectoryMixture::new(vec![1.0], vec![c.clone()], mix.features().clone(), mix.origin())?;
                trajectory_cost(&single, field, cost_config)
            })
            .collect::<Result<Vec<_>>>()?;
        let donor = (0..costs.len()).min_by(|a, b| costs[*a].total_cmp(&costs[*b])).expect("nonempty mixture");
        if costs[donor] > *epsilon {
            return Ok(None);
        }
        let per = params_per_component(mix.features().len());
        let loc = 2 * mix.features().len();
        let mut start = self.x0.clone();
        let mut moved = false;
        for (r, c) in costs.iter().enumerate() {
            if *c > *epsilon {
                start[r * per..r * per + loc].copy_from_slice(&x[donor * per..donor * per + loc]);
                moved = true;
            }
        }
        Ok(moved.then_some(start))
    }
}

/// Runs the constrained solve. A prior that already satisfies the limit is
/// returned unchanged.
///
/// A first run from the prior can stall infeasible when a component's path
/// runs into a thick obstacle and the gradient pushes it toward the far side.
/// The solve then restarts with a stiffer penalty, first from paths halted
/// before their first collision, then with stuck components moved onto the
/// path of a compliant one.
pub fn solve(problem: &OptimProblem) -> Result<OptimResult> {
    let OptimProblem {
        prior,
        field,
        epsilon,
        cost_config,
        solver,
    } = problem;
    let epsilon = *epsilon;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be in (0,1), got {epsilon}")));
    }
    solver.validate()?;

    let prior_cost = trajectory_cost(prior, field, cost_config)?;
    if !prior_cost.is_finite() {
        return Err(Error::NonFiniteObjective { iterations: 0 });
    }
    if prior_cost <= epsilon {
        return Ok(OptimResult {
            posterior: prior.clone(),
            kl: 0.0,
            prior_cost,
            cost: prior_cost,
            feasible: true,
            iterations: 0,
            evaluations: 0,
            status: OptimStatus::FeasibleEarlyExit,
        });
    }

    let x0 = pack_parameters(prior);
    let scale = kl_diagonal_scaling(prior, &x0)?;
    let ctx = Solver {
        problem,
        x0: x0.clone(),
        scale,
        inner: LbfgsOptions {
            max_iterations: solver.max_inner_iterations,
            step_tolerance: solver.step_tolerance,
            gradient_tolerance: 1e-7,
            objective_tolerance: 1e-11,
            ..Default::default()
        },
    };
    let tol = solver.constraint_tolerance;
    let feasible = |it: &Iterate| it.cost <= epsilon + tol;

    let mut run = ctx.run(x0, solver.initial_penalty)?;
    // Restarts, tried in order while the best run is still infeasible.
    let restarts: [&dyn Fn(&Iterate) -> Result<Option<Vec<f64>>>; 2] = [&|_| ctx.halted(), &|best| ctx.transplant(&best.x)];
    for restart in restarts {
        if feasible(&run.chosen) {
            break;
        }
        let Some(start) = restart(&run.chosen)? else {
            continue;
        };
        let retry = ctx.run(start, solver.restart_penalty)?;
        let (iterations, evaluations) = (run.iterations + retry.iterations, run.evaluations + retry.evaluations);
        if feasible(&retry.chosen) || retry.chosen.cost < run.chosen.cost {
            run = retry;
        }
        run.iterations = iterations;
        run.evaluations = evaluations;
    }

    let posterior = unpack_parameters(prior, &run.chosen.x)?;
    Ok(OptimResult {
        posterior,
        kl: run.chosen.kl,
        prior_cost,
        cost: run.chosen.cost,
        feasible: feasible(&run.chosen),
        iterations: run.iterations,
        evaluations: run.evaluations,
        status: run.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj_core::RbfFeatureMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mixture(rng: &mut ChaCha8Rng, m: usize, r: usize) -> TrajectoryMixture {
        let comps = (0..r)
            .map(|_| {
                let loc = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-3.0..3.0));
                let u = (0..m).map(|_| rng.random_range(0.05..2.0)).collect();
                let l = Matrix2::new(rng.random_range(0.2..2.0), 0.0, rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
                MatrixNormalComponent::from_col_chol(loc, u, l).unwrap()
            })
            .collect();
        let mut w: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let last = 1.0 - w[..r - 1].iter().sum::<f64>();
        w[r - 1] = last;
        TrajectoryMixture::new(w, comps, RbfFeatureMap::uniform(m, 10.0, 0.2).unwrap(), [1.0, 2.0]).unwrap()
    }

    #[test]
    fn pack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mix = random_mixture(&mut rng, 5, 2);
            let back = unpack_parameters(&mix, &pack_parameters(&mix)).unwrap();
            for (a, b) in mix.components().iter().zip(back.components()) {
                assert!((a.location() - b.location()).abs().max() < 1e-12);
                for (x, y) in a.row_scale().iter().zip(b.row_scale()) {
                    assert!((x - y).abs() <= 1e-12 * x.max(1.0));
                }
                assert!((a.col_scale() - b.col_scale()).abs().max() < 1e-12);
            }
            assert_eq!(back.weights(), mix.weights());
        }
    }

    #[test]
    fn identity_scales_pack_to_zero_logs() {
        let comp = MatrixNormalComponent::new(DMatrix::zeros(3, 2), vec![1.0; 3], Matrix2::identity()).unwrap();
        let mix = TrajectoryMixture::new(vec![1.0], vec![comp], RbfFeatureMap::uniform(3, 5.0, 1.0).unwrap(), [0.0; 2]).unwrap();
        let p = pack_parameters(&mix);
        assert!(p[6..].iter().all(|v| *v == 0.0));
        assert_eq!(p.len(), params_per_component(3));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_mixture(&mut rng, 4, 2);
        let p = random_mixture(&mut rng, 4, 2);
        let p = unpack_parameters(&q, &pack_parameters(&p)).unwrap();
        let x = pack_parameters(&p);
        let (_, g) = kl_with_gradient(&p, &q).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = mixture_kl(&unpack_parameters(&q, &xp).unwrap(), &q).unwrap();
            let fm = mixture_kl(&unpack_parameters(&q, &xm).unwrap(), &q).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn free_space_returns_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = random_mixture(&mut rng, 4, 2);
        let problem = OptimProblem {
            prior: prior.clone(),
            field: HilbertField::constant(1e-6).unwrap(),
            epsilon: 0.05,
            cost_config: CostConfig::new(10, 10, 10.0).unwrap(),
            solver: SolverConfig::default(),
        };
        let res = solve(&problem).unwrap();
        assert_eq!(res.status, OptimStatus::FeasibleEarlyExit);
        assert_eq!(res.kl, 0.0);
        assert_eq!(res.posterior, prior);
    }

    #[test]
    fn rejects_bad_epsilon_and_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut problem = OptimProblem {
            prior: random_mixture(&mut rng, 3, 1),
            field: HilbertField::constant(0.5).unwrap(),
            epsilon: 1.5,
            cost_config: CostConfig::new(4, 4, 10.0).unwrap(),
            solver: SolverConfig::default(),
        };
        assert!(solve(&problem).is_err());
        problem.epsilon = 0.1;
        problem.solver.penalty_growth = 1.0;
        assert!(solve(&problem).is_err());
    }
}

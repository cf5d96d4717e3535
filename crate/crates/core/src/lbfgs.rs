//! Limited-memory BFGS with backtracking Armijo line search.
//!
//! Small dense problems only (hundreds of variables). Non-finite objective
//! values during a line search are treated as "step too long".

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub history: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the step infinity norm falls below this.
    pub step_tolerance: f64,
    /// Stop when the relative objective decrease falls below this.
    pub objective_tolerance: f64,
    pub armijo: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            history: 8,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-8,
            objective_tolerance: 1e-12,
            armijo: 1e-4,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientConverged,
    StepConverged,
    ObjectiveConverged,
    LineSearchFailed,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which writes its gradient into the second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g);
    let mut evaluations = 1;
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return LbfgsResult {
            x,
            value,
            gradient: g,
            iterations: 0,
            evaluations,
            status: LbfgsStatus::NonFinite,
        };
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(opts.history);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(opts.history);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(opts.history);

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if inf_norm(&g) <= opts.gradient_tolerance {
            status = LbfgsStatus::GradientConverged;
            break;
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= alpha[i] * yj;
            }
        }
        let scale = if k > 0 {
            let yy = dot(&y_hist[k - 1], &y_hist[k - 1]);
            1.0 / (rho_hist[k - 1] * yy)
        } else {
            1.0 / inf_norm(&g).max(1.0)
        };
        for dj in d.iter_mut() {
            *dj *= scale;
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alpha[i] - beta) * sj;
            }
        }

        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // not a descent direction; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let sc = 1.0 / inf_norm(&g).max(1.0);
            d = g.iter().map(|v| -v * sc).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut new_value = value;
        for _ in 0..opts.max_line_search {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            new_value = f(&x_new, &mut g_new);
            evaluations += 1;
            if new_value.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && new_value <= value + opts.armijo * step * slope
            {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            status = LbfgsStatus::LineSearchFailed;
            break;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s.clone());
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }

        let decrease = value - new_value;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        value = new_value;

        if inf_norm(&s) <= opts.step_tolerance {
            status = LbfgsStatus::StepConverged;
            break;
        }
        if decrease <= opts.objective_tolerance * value.abs().max(1.0) {
            status = LbfgsStatus::ObjectiveConverged;
            break;
        }
    }

    LbfgsResult {
        x,
        value,
        gradient: g,
        iterations,
        evaluations,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let opts = LbfgsOptions {
            max_iterations: 500,
            ..Default::default()
        };
        let r = minimize(f, &[-1.2, 1.0], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn quadratic_converges_quickly() {
        let diag = [1.0, 10.0, 100.0, 0.5];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..4 {
                g[i] = diag[i] * (x[i] - 1.0);
                v += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            v
        };
        let r = minimize(f, &[0.0; 4], &LbfgsOptions::default());
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(r.iterations < 50);
    }

    #[test]
    fn non_finite_start_is_reported() {
        let r = minimize(|_x, _g| f64::NAN, &[0.0], &LbfgsOptions::default());
        assert_eq!(r.status, LbfgsStatus::NonFinite);
    }

    #[test]
    fn rejects_steps_into_nan_region() {
        // log barrier: undefined for x <= 0
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0 - 1.0 / x[0];
            if x[0] <= 0.0 {
                f64::NAN
            } else {
                x[0] - x[0].ln()
            }
        };
        let r = minimize(f, &[5.0], &LbfgsOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{r:?}");
    }
}

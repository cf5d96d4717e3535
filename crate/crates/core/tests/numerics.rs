//! Finite-difference, dense-quadrature and Monte-Carlo oracles for the
//! numerical kernels.

use ccmotion::dist::{MatrixNormalComponent, PointGaussianMixture, TrajectoryMixture};
use ccmotion::occupancy::{train_field, FieldConfig, HilbertField, OccupancyGrid};
use ccmotion::optimizer::{cost_with_gradient, kl_with_gradient, pack_parameters, unpack_parameters};
use ccmotion::quad_cost::{point_cost, CostConfig, HermiteRule};
use ccmotion::traj_core::RbfFeatureMap;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_mixture(rng: &mut ChaCha8Rng, m: usize, r: usize, horizon: f64) -> TrajectoryMixture {
    let fmap = RbfFeatureMap::uniform(m, horizon, 0.15).unwrap();
    let comps = (0..r)
        .map(|_| {
            let loc = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-1.0..1.0));
            let u = (0..m).map(|_| rng.random_range(0.02..0.2)).collect();
            let l = Matrix2::new(rng.random_range(0.3..0.9), 0.0, rng.random_range(-0.3..0.3), rng.random_range(0.3..0.9));
            MatrixNormalComponent::from_col_chol(loc, u, l).unwrap()
        })
        .collect();
    let mut w: Vec<f64> = (0..r).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    TrajectoryMixture::new(w, comps, fmap, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).unwrap()
}

/// Room with a pillar, trained into a field, as a realistic cost landscape.
fn room_field() -> HilbertField {
    let (w, h) = (16, 16);
    let cells = (0..w * h)
        .map(|i| {
            let (c, r) = (i % w, i / w);
            let wall = c == 0 || r == 0 || c == w - 1 || r == h - 1;
            let pillar = (9..12).contains(&c) && (6..10).contains(&r);
            if wall || pillar { 1.0 } else { 0.0 }
        })
        .collect();
    let grid = OccupancyGrid::new(w, h, 0.5, [-4.0, -4.0], cells).unwrap();
    let config = FieldConfig {
        border_cells: 4,
        exterior_slope: Some(4.0),
        ..FieldConfig::default()
    };
    train_field(&grid, &config).unwrap().field
}

#[test]
fn cost_gradient_matches_central_differences_entrywise() {
    let field = room_field();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..4 {
        let mix = random_mixture(&mut rng, 4, 2, 5.0);
        let cc = CostConfig::new(10, 8, 5.0).unwrap();
        let x0 = pack_parameters(&mix);
        let (_, grad) = cost_with_gradient(&mix, &field, &cc).unwrap();
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let f = |x: &[f64]| cost_with_gradient(&unpack_parameters(&mix, x).unwrap(), &field, &cc).unwrap().0;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(rel_err(grad[i], fd, 1e-3 * gmax) <= 1e-4, "slot {i}: {} vs {fd}", grad[i]);
        }
    }
}

#[test]
fn kl_gradient_matches_central_differences_entrywise() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let q = random_mixture(&mut rng, 5, 3, 8.0);
    let other = random_mixture(&mut rng, 5, 3, 8.0);
    let p = q.with_components(other.components().to_vec()).unwrap();
    let x0 = pack_parameters(&p);
    let (_, grad) = kl_with_gradient(&p, &q).unwrap();
    let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let h = 1e-6;
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        let f = |x: &[f64]| kl_with_gradient(&unpack_parameters(&p, x).unwrap(), &q).unwrap().0;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!(rel_err(grad[i], fd, 1e-3 * gmax) <= 1e-5, "slot {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn field_gradient_matches_central_differences() {
    let field = room_field();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h = 1e-6;
    for _ in 0..200 {
        // includes points outside the map where the exterior ramp is active
        let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        let g = field.query_gradient(x);
        let fx = (field.query([x[0] + h, x[1]]) - field.query([x[0] - h, x[1]])) / (2.0 * h);
        let fy = (field.query([x[0], x[1] + h]) - field.query([x[0], x[1] - h])) / (2.0 * h);
        // floor: central differences of a value near 0 or 1 carry ~1e-10 roundoff
        let scale = g.norm().max(1e-4);
        assert!((g[0] - fx).abs() / scale <= 1e-5 && (g[1] - fy).abs() / scale <= 1e-5, "{x:?}");
    }
}

#[test]
fn field_is_lipschitz_within_a_cell() {
    let grid_res = 0.5;
    let field = room_field();
    let mut l = 0.0f64;
    for i in 0..=64 {
        for j in 0..=64 {
            let x = [-4.0 + 8.0 * i as f64 / 64.0, -4.0 + 8.0 * j as f64 / 64.0];
            l = l.max(field.query_gradient(x).norm());
        }
    }
    // the estimate comes from a lattice, so allow a modest margin
    let l = 1.5 * l;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..500 {
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(0.0..grid_res);
        let y = [x[0] + r * a.cos(), x[1] + r * a.sin()];
        assert!((field.query(y) - field.query(x)).abs() <= l * r + 1e-12);
    }
}

#[test]
fn feature_derivative_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let h = 1e-6;
    for _ in 0..100 {
        let gamma = rng.random_range(0.01..2.0);
        let t = rng.random_range(-2.0..12.0);
        let fmap = RbfFeatureMap::uniform(6, 10.0, gamma).unwrap();
        let d = fmap.eval_derivative(t, 1).unwrap();
        let (p, m) = (fmap.eval(t + h), fmap.eval(t - h));
        let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..6 {
            let fd = (p[i] - m[i]) / (2.0 * h);
            assert!(rel_err(d[i], fd, 1e-3 * dmax.max(1e-12)) <= 1e-6, "γ={gamma} t={t} i={i}");
        }
    }
}

/// Midpoint rule over ±6σ in the whitened frame, 300 points per axis.
fn dense_cost(pgm: &PointGaussianMixture, field: &HilbertField) -> f64 {
    let n = 300;
    let h = 12.0 / n as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI);
    let mut total = 0.0;
    for r in 0..pgm.len() {
        let l = pgm.covariances[r].cholesky().unwrap().l();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let z = Vector2::new(-6.0 + (i as f64 + 0.5) * h, -6.0 + (j as f64 + 0.5) * h);
                let x = pgm.means[r] + l * z;
                acc += (-0.5 * z.norm_squared()).exp() * field.query([x[0], x[1]]);
            }
        }
        total += pgm.weights[r] * acc * norm * h * h;
    }
    total
}

/// A trained wall field is close to a step, where Gauss-Hermite converges
/// slowly; the rule must still approach the dense integral as it grows.
#[test]
fn point_cost_converges_to_dense_integration_on_trained_field() {
    let field = room_field();
    let orders = [10, 20, 40];
    let rules: Vec<HermiteRule> = orders.iter().map(|&i| HermiteRule::new(i).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut mean_err = [0.0; 3];
    for _ in 0..20 {
        let r = rng.random_range(1..4);
        let mut weights: Vec<f64> = (0..r).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        let means = (0..r).map(|_| Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
        let covariances = (0..r)
            .map(|_| {
                let l = Matrix2::new(rng.random_range(0.1..0.6), 0.0, rng.random_range(-0.2..0.2), rng.random_range(0.1..0.6));
                l * l.transpose()
            })
            .collect();
        let pgm = PointGaussianMixture { weights, means, covariances };
        let dense = dense_cost(&pgm, &field);
        for (k, rule) in rules.iter().enumerate() {
            mean_err[k] += rel_err(point_cost(&pgm, &field, rule).unwrap(), dense, 0.0) / 20.0;
        }
    }
    assert!(mean_err[0] < 0.15 && mean_err[1] < mean_err[0] && mean_err[2] < mean_err[1], "{mean_err:?}");
    assert!(mean_err[2] < 0.03, "{mean_err:?}");
}

#[test]
fn shrinking_a_free_space_gaussian_does_not_raise_its_cost() {
    let field = room_field();
    let rule = HermiteRule::new(10).unwrap();
    // the room's free region around (-2, 0) is more than 3σ from any wall
    let base = Matrix2::new(0.04, 0.01, 0.01, 0.03);
    let at = |s: f64| {
        let pgm = PointGaussianMixture {
            weights: vec![1.0],
            means: vec![Vector2::new(-2.0, 0.0)],
            covariances: vec![base * s],
        };
        point_cost(&pgm, &field, &rule).unwrap()
    };
    let mut prev = at(1.0);
    for s in [0.5, 0.25, 0.1, 0.01] {
        let c = at(s);
        assert!(c <= prev + 1e-9, "scale {s}: {c} > {prev}");
        prev = c;
    }
}

#[test]
fn sample_covariance_is_kronecker_entrywise() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let m = 4;
    let loc = DMatrix::from_fn(m, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = vec![0.5, 1.0, 1.7, 0.3];
    let v = Matrix2::new(1.2, 0.5, 0.5, 0.8);
    let c = MatrixNormalComponent::new(loc, u.clone(), v).unwrap();
    let n = 100_000;
    let mut sum = DVector::zeros(2 * m);
    let mut outer = DMatrix::zeros(2 * m, 2 * m);
    for _ in 0..n {
        let w = c.sample(&mut rng);
        let x = DVector::from_iterator(2 * m, w.iter().copied());
        sum += &x;
        outer += &x * x.transpose();
    }
    let mean = sum / n as f64;
    let emp = (outer - &mean * mean.transpose() * n as f64) / (n - 1) as f64;
    for i in 0..2 * m {
        for j in 0..2 * m {
            let (a, ii) = (i / m, i % m);
            let (b, jj) = (j / m, j % m);
            let truth = if ii == jj { v[(a, b)] * u[ii] } else { 0.0 };
            // off-diagonal zeros have no relative scale; measure against the diagonal
            let scale = if truth != 0.0 { truth.abs() } else { (emp[(i, i)] * emp[(j, j)]).sqrt() };
            assert!((emp[(i, j)] - truth).abs() <= 0.05 * scale, "({i},{j}): {} vs {truth}", emp[(i, j)]);
        }
    }
}

#[test]
fn dense_density_agrees_with_matrix_normal_logpdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for _ in 0..200 {
        let m = rng.random_range(1..7);
        let loc = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-2.0..2.0));
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
        let l = Matrix2::new(rng.random_range(0.3..1.5), 0.0, rng.random_range(-0.5..0.5), rng.random_range(0.3..1.5));
        let c = MatrixNormalComponent::from_col_chol(loc, u, l).unwrap();
        let w = c.sample(&mut rng);
        let v = c.col_scale();
        let cov = DMatrix::from_fn(2 * m, 2 * m, |i, j| {
            if i % m == j % m { v[(i / m, j / m)] * c.row_scale()[i % m] } else { 0.0 }
        });
        let d = DVector::from_iterator(2 * m, w.iter().zip(c.location().iter()).map(|(a, b)| a - b));
        let chol = cov.cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let dense = -0.5 * (d.dot(&chol.solve(&d)) + log_det + (2 * m) as f64 * (2.0 * std::f64::consts::PI).ln());
        assert!((c.logpdf(&w) - dense).abs() <= 1e-10);
    }
}

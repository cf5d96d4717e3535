//! Mixtures of matrix normal distributions over trajectory weights.
//!
//! A component `MN(𝓜, 𝓤, 𝓥)` over an M×2 weight matrix is the Gaussian
//! `N(vec(𝓜), 𝓥 ⊗ 𝓤)` under column stacking. `𝓤` (row scale) is diagonal and
//! `𝓥` (column scale, 2×2) is a full SPD matrix; both act as covariances.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::kv::{self, KvDoc};
use crate::traj_core::{ContinuousTrajectory, RbfFeatureMap};
use crate::{Error, Result};

/// Smallest admissible diagonal of 𝓤 and eigenvalue of 𝓥.
pub const SCALE_FLOOR: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower Cholesky factor of a 2×2 SPD matrix.
pub fn chol2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let a = m[(0, 0)];
    if !(a > 0.0) {
        return None;
    }
    let l11 = a.sqrt();
    let l21 = m[(1, 0)] / l11;
    let s = m[(1, 1)] - l21 * l21;
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    Some(Matrix2::new(l11, 0.0, l21, s.sqrt()))
}

fn inv2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalComponent {
    location: DMatrix<f64>,
    row_scale: Vec<f64>,
    col_scale: Matrix2<f64>,
    col_chol: Matrix2<f64>,
    col_inv: Matrix2<f64>,
    log_det_col: f64,
    log_det_row: f64,
}

impl MatrixNormalComponent {
    /// Validates and floors the scales. Negative or non-finite scales and a
    /// non-symmetric or indefinite `col_scale` are rejected.
    pub fn new(location: DMatrix<f64>, row_scale: Vec<f64>, col_scale: Matrix2<f64>) -> Result<Self> {
        let m = row_scale.len();
        if m == 0 || location.nrows() != m || location.ncols() != 2 {
            return Err(Error::InvalidArgument(format!(
                "location must be {m}x2, got {}x{}",
                location.nrows(),
                location.ncols()
            )));
        }
        if location.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("location must be finite".into()));
        }
        if row_scale.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(Error::InvalidCovariance("row scale must be finite and non-negative".into()));
        }
        let row_scale: Vec<f64> = row_scale.into_iter().map(|u| u.max(SCALE_FLOOR)).collect();

        if col_scale.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("column scale must be finite".into()));
        }
        let off = (col_scale[(0, 1)] - col_scale[(1, 0)]).abs();
        let mag = col_scale.abs().max().max(f64::MIN_POSITIVE);
        if off > 1e-9 * mag {
            return Err(Error::InvalidCovariance("column scale must be symmetric".into()));
        }
        let col_scale = floor_spd(col_scale)?;
        let col_chol = chol2(&col_scale)
            .ok_or_else(|| Error::InvalidCovariance("column scale failed Cholesky".into()))?;
        let col_inv = inv2(&col_scale);
        let log_det_col = 2.0 * (col_chol[(0, 0)].ln() + col_chol[(1, 1)].ln());
        let log_det_row = row_scale.iter().map(|u| u.ln()).sum();
        Ok(Self {
            location,
            row_scale,
            col_scale,
            col_chol,
            col_inv,
            log_det_col,
            log_det_row,
        })
    }

    /// Builds a component from the column-scale Cholesky factor `L` with `𝓥 = LLᵀ`.
    pub fn from_col_chol(location: DMatrix<f64>, row_scale: Vec<f64>, col_chol: Matrix2<f64>) -> Result<Self> {
        let v = col_chol * col_chol.transpose();
        // keep exact symmetry regardless of rounding in the product
        let v = Matrix2::new(v[(0, 0)], v[(1, 0)], v[(1, 0)], v[(1, 1)]);
        Self::new(location, row_scale, v)
    }

    pub fn dim(&self) -> usize {
        self.row_scale.len()
    }

    pub fn location(&self) -> &DMatrix<f64> {
        &self.location
    }

    pub fn row_scale(&self) -> &[f64] {
        &self.row_scale
    }

    pub fn col_scale(&self) -> &Matrix2<f64> {
        &self.col_scale
    }

    pub fn col_chol(&self) -> &Matrix2<f64> {
        &self.col_chol
    }

    /// `log N(vec(W); vec(𝓜), 𝓥⊗𝓤)`.
    pub fn logpdf(&self, w: &DMatrix<f64>) -> f64 {
        let m = self.dim();
        let mut quad = 0.0;
        for i in 0..m {
            let d = Vector2::new(w[(i, 0)] - self.location[(i, 0)], w[(i, 1)] - self.location[(i, 1)]);
            quad += (d.transpose() * self.col_inv * d)[(0, 0)] / self.row_scale[i];
        }
        let m = m as f64;
        -0.5 * quad - m * LN_2PI - 0.5 * m * self.log_det_col - self.log_det_row
    }

    /// Draws `W = 𝓜 + 𝓤^{1/2} Z L_𝓥ᵀ` with `Z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let m = self.dim();
        let mut w = self.location.clone();
        let l = &self.col_chol;
        for i in 0..m {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let s = self.row_scale[i].sqrt();
            w[(i, 0)] += s * l[(0, 0)] * z0;
            w[(i, 1)] += s * (l[(1, 0)] * z0 + l[(1, 1)] * z1);
        }
        w
    }

    /// Location mean at time features `phi`: `𝓜ᵀφ`.
    pub fn mean_at(&self, phi: &[f64]) -> Vector2<f64> {
        let mut mu = Vector2::zeros();
        for (i, p) in phi.iter().enumerate() {
            mu[0] += self.location[(i, 0)] * p;
            mu[1] += self.location[(i, 1)] * p;
        }
        mu
    }

    /// `φᵀ𝓤φ`, the row-scale contraction at time features `phi`.
    pub fn row_contraction(&self, phi: &[f64]) -> f64 {
        phi.iter().zip(&self.row_scale).map(|(p, u)| u * p * p).sum()
    }
}

fn floor_spd(v: Matrix2<f64>) -> Result<Matrix2<f64>> {
    let eig = v.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo < -1e-9 * hi.abs().max(1.0) {
        return Err(Error::InvalidCovariance(format!("column scale is indefinite (eigenvalue {lo})")));
    }
    if lo >= SCALE_FLOOR {
        return Ok(v);
    }
    let vals = eig.eigenvalues.map(|e| e.max(SCALE_FLOOR));
    let q = eig.eigenvectors;
    let out = q * Matrix2::from_diagonal(&vals) * q.transpose();
    Ok(Matrix2::new(out[(0, 0)], out[(1, 0)], out[(1, 0)], out[(1, 1)]))
}

/// Closed-form `KL(p ‖ q)` between two matrix normal components of equal size.
pub fn component_kl(p: &MatrixNormalComponent, q: &MatrixNormalComponent) -> Result<f64> {
    let m = p.dim();
    if q.dim() != m {
        return Err(Error::MixtureMismatch(format!("component sizes {m} and {} differ", q.dim())));
    }
    let tr_v = (q.col_inv * p.col_scale).trace();
    let tr_u: f64 = p.row_scale.iter().zip(&q.row_scale).map(|(a, b)| a / b).sum();
    let mut maha = 0.0;
    for i in 0..m {
        let d = Vector2::new(
            p.location[(i, 0)] - q.location[(i, 0)],
            p.location[(i, 1)] - q.location[(i, 1)],
        );
        maha += (d.transpose() * q.col_inv * d)[(0, 0)] / q.row_scale[i];
    }
    let mf = m as f64;
    let log_det_p = mf * p.log_det_col + 2.0 * p.log_det_row;
    let log_det_q = mf * q.log_det_col + 2.0 * q.log_det_row;
    let kl = 0.5 * (tr_v * tr_u + maha - 2.0 * mf + log_det_q - log_det_p);
    Ok(kl.max(0.0))
}

/// 2-D Gaussian mixture: the slice of a trajectory mixture at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vector2<f64>>,
    pub covariances: Vec<Matrix2<f64>>,
}

impl PointGaussianMixture {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn component_density(&self, r: usize, x: &Vector2<f64>) -> f64 {
        let cov = &self.covariances[r];
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let d = x - self.means[r];
        let quad = (d.transpose() * inv2(cov) * d)[(0, 0)];
        (-0.5 * quad).exp() / (2.0 * PI * det.sqrt())
    }

    pub fn density(&self, x: &Vector2<f64>) -> f64 {
        (0..self.len())
            .map(|r| self.weights[r] * self.component_density(r, x))
            .sum()
    }
}

/// Mixture of matrix normal distributions over trajectory weights.
///
/// `origin` is a world-space translation added to every sampled trajectory and
/// every mean path; locations live in the frame centered on it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMixture {
    weights: Vec<f64>,
    components: Vec<MatrixNormalComponent>,
    features: RbfFeatureMap,
    origin: [f64; 2],
}

impl TrajectoryMixture {
    pub fn new(
        weights: Vec<f64>,
        components: Vec<MatrixNormalComponent>,
        features: RbfFeatureMap,
        origin: [f64; 2],
    ) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        if components.iter().any(|c| c.dim() != features.len()) {
            return Err(Error::InvalidArgument("component size differs from feature count".into()));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(Self {
            weights,
            components,
            features,
            origin,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[MatrixNormalComponent] {
        &self.components
    }

    pub fn features(&self) -> &RbfFeatureMap {
        &self.features
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Same mixture with new components; weights, features and origin kept.
    pub fn with_components(&self, components: Vec<MatrixNormalComponent>) -> Result<Self> {
        Self::new(self.weights.clone(), components, self.features.clone(), self.origin)
    }

    pub fn with_origin(mut self, origin: [f64; 2]) -> Self {
        self.origin = origin;
        self
    }

    /// `-log Σ_r α_r MN(W; 𝓜_r, 𝓤_r, 𝓥_r)`, log-sum-exp stabilized.
    pub fn nll(&self, w: &DMatrix<f64>) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(a, c)| a.ln() + c.logpdf(w))
            .collect();
        -log_sum_exp(&terms)
    }

    /// World-space Gaussian mixture of positions at time `t`.
    pub fn project_at_time(&self, t: f64) -> PointGaussianMixture {
        let phi = self.features.eval(t);
        let origin = Vector2::new(self.origin[0], self.origin[1]);
        let means = self.components.iter().map(|c| c.mean_at(&phi) + origin).collect();
        let covariances = self
            .components
            .iter()
            .map(|c| c.col_scale * c.row_contraction(&phi))
            .collect();
        PointGaussianMixture {
            weights: self.weights.clone(),
            means,
            covariances,
        }
    }

    /// Mean path of component `r` at time `t`, in world coordinates.
    pub fn mean_position(&self, r: usize, t: f64) -> [f64; 2] {
        let phi = self.features.eval(t);
        let mu = self.components[r].mean_at(&phi);
        [mu[0] + self.origin[0], mu[1] + self.origin[1]]
    }

    /// Index of the component with the largest weight (first on ties).
    pub fn dominant_component(&self) -> usize {
        let mut best = 0;
        for (r, a) in self.weights.iter().enumerate() {
            if *a > self.weights[best] {
                best = r;
            }
        }
        best
    }

    /// Draws a component from α and a weight matrix from it.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, DMatrix<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.len() - 1;
        for (r, a) in self.weights.iter().enumerate() {
            acc += a;
            if u < acc {
                pick = r;
                break;
            }
        }
        (pick, self.components[pick].sample(rng))
    }

    /// One trajectory drawn deterministically from `seed`.
    pub fn sample_trajectory(&self, seed: u64) -> ContinuousTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_trajectory_with(&mut rng)
    }

    pub fn sample_trajectory_with<R: Rng + ?Sized>(&self, rng: &mut R) -> ContinuousTrajectory {
        let (_, w) = self.sample_weights(rng);
        let wx = w.column(0).iter().copied().collect();
        let wy = w.column(1).iter().copied().collect();
        ContinuousTrajectory::new(wx, wy, self.features.clone())
            .expect("component sizes match the feature map")
            .with_offset(self.origin)
    }

    pub fn to_kv(&self, id: &str) -> KvDoc {
        let mut d = KvDoc::with_header(format!("mixture {id}"));
        d.push("R", self.len());
        d.push("M", self.features.len());
        d.push_f64("gamma", self.features.gamma());
        d.push_f64s("centers", self.features.centers());
        d.push_f64s("origin", &self.origin);
        d.push_f64s("alpha", &self.weights);
        for (r, c) in self.components.iter().enumerate() {
            let m = c.dim();
            let loc: Vec<f64> = (0..m).flat_map(|i| [c.location[(i, 0)], c.location[(i, 1)]]).collect();
            d.push_f64s(format!("component.{r}.location"), &loc);
            d.push_f64s(format!("component.{r}.row_scale"), &c.row_scale);
            let v = &c.col_scale;
            d.push_f64s(format!("component.{r}.col_scale"), &[v[(0, 0)], v[(0, 1)], v[(1, 0)], v[(1, 1)]]);
        }
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let r: usize = doc.parse("R")?;
        let m: usize = doc.parse("M")?;
        let features = RbfFeatureMap::new(doc.f64s("centers")?, doc.parse("gamma")?)?;
        if features.len() != m {
            return Err(Error::Parse(format!("M = {m} but {} centers", features.len())));
        }
        let origin = doc.f64s("origin")?;
        if origin.len() != 2 {
            return Err(Error::Parse("origin must have two entries".into()));
        }
        let alpha = doc.f64s("alpha")?;
        if alpha.len() != r {
            return Err(Error::Parse(format!("R = {r} but {} weights", alpha.len())));
        }
        let mut comps = Vec::with_capacity(r);
        for k in 0..r {
            let loc = doc.f64s(&format!("component.{k}.location"))?;
            let u = doc.f64s(&format!("component.{k}.row_scale"))?;
            let v = doc.f64s(&format!("component.{k}.col_scale"))?;
            if loc.len() != 2 * m || u.len() != m || v.len() != 4 {
                return Err(Error::Parse(format!("component {k} has wrong sizes")));
            }
            let location = DMatrix::from_row_slice(m, 2, &loc);
            comps.push(MatrixNormalComponent::new(location, u, Matrix2::new(v[0], v[1], v[2], v[3]))?);
        }
        Self::new(alpha, comps, features, [origin[0], origin[1]])
    }
}

/// α-weighted sum of matched-component KL divergences. Both mixtures must
/// share R, α, the feature map and the origin.
pub fn mixture_kl(p: &TrajectoryMixture, q: &TrajectoryMixture) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::MixtureMismatch(format!("R = {} vs {}", p.len(), q.len())));
    }
    if p.weights.iter().zip(&q.weights).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::MixtureMismatch("component weights differ".into()));
    }
    if p.features != q.features {
        return Err(Error::MixtureMismatch("feature maps differ".into()));
    }
    if p.origin != q.origin {
        return Err(Error::MixtureMismatch("origins differ".into()));
    }
    let mut total = 0.0;
    for ((a, pc), qc) in p.weights.iter().zip(&p.components).zip(&q.components) {
        total += a * component_kl(pc, qc)?;
    }
    Ok(total)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Serializes mixtures as consecutive `[mixture <id>]` sections.
pub fn write_mixtures(items: &[(String, TrajectoryMixture)]) -> String {
    let mut out = String::from("# trajectory mixtures\nformat = ccmotion-mixtures\nversion = 1\n\n");
    for (id, mix) in items {
        out.push_str(&mix.to_kv(id).render());
        out.push('\n');
    }
    out
}

pub fn read_mixtures(text: &str) -> Result<Vec<(String, TrajectoryMixture)>> {
    let mut out = Vec::new();
    for doc in kv::parse_sections(text)? {
        match doc.header.as_deref() {
            None => {
                let version: u32 = doc.parse_or("version", 1)?;
                if version != 1 {
                    return Err(Error::Parse(format!("unsupported mixture file version {version}")));
                }
            }
            Some(h) => {
                let id = h
                    .strip_prefix("mixture")
                    .ok_or_else(|| Error::Parse(format!("unexpected section [{h}]")))?
                    .trim()
                    .to_string();
                out.push((id, TrajectoryMixture::from_kv(&doc)?));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn fmap(m: usize) -> RbfFeatureMap {
        RbfFeatureMap::uniform(m, 10.0, 0.2).unwrap()
    }

    fn standard(m: usize) -> MatrixNormalComponent {
        MatrixNormalComponent::new(DMatrix::zeros(m, 2), vec![1.0; m], Matrix2::identity()).unwrap()
    }

    fn random_component(m: usize, rng: &mut ChaCha8Rng) -> MatrixNormalComponent {
        let loc = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-3.0..3.0));
        let u = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
        let l = Matrix2::new(rng.random_range(0.3..2.0), 0.0, rng.random_range(-1.0..1.0), rng.random_range(0.3..2.0));
        MatrixNormalComponent::from_col_chol(loc, u, l).unwrap()
    }

    /// Dense `N(vec(𝓜), 𝓥⊗𝓤)` log density, column stacking.
    fn dense_logpdf(c: &MatrixNormalComponent, w: &DMatrix<f64>) -> f64 {
        let m = c.dim();
        let n = 2 * m;
        let u = DMatrix::from_diagonal(&DVector::from_vec(c.row_scale().to_vec()));
        let v = DMatrix::from_fn(2, 2, |i, j| c.col_scale()[(i, j)]);
        let cov = v.kronecker(&u);
        let x = DVector::from_iterator(n, w.iter().copied());
        let mu = DVector::from_iterator(n, c.location().iter().copied());
        let ch = cov.clone().cholesky().unwrap();
        let d = x - mu;
        let sol = ch.solve(&d);
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * d.dot(&sol) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn standard_normal_at_mean() {
        let c = standard(5);
        let lp = c.logpdf(&DMatrix::zeros(5, 2));
        assert!((lp - (-5.0 * (2.0 * PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn logpdf_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let c = random_component(4, &mut rng);
            let w = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-4.0..4.0));
            assert!((c.logpdf(&w) - dense_logpdf(&c, &w)).abs() < 1e-10);
        }
    }

    #[test]
    fn row_scale_times_four_lowers_logpdf_by_m_log4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_component(6, &mut rng);
        let scaled = MatrixNormalComponent::new(
            c.location().clone(),
            c.row_scale().iter().map(|u| 4.0 * u).collect(),
            *c.col_scale(),
        )
        .unwrap();
        let w = c.location().clone();
        let drop = c.logpdf(&w) - scaled.logpdf(&w);
        assert!((drop - 6.0 * 4f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn scales_are_floored_and_bad_ones_rejected() {
        let c = MatrixNormalComponent::new(DMatrix::zeros(2, 2), vec![0.0, 1e-30], Matrix2::identity() * 1e-20).unwrap();
        assert!(c.row_scale().iter().all(|u| *u == SCALE_FLOOR));
        assert!((c.col_scale()[(0, 0)] - SCALE_FLOOR).abs() < 1e-24);
        assert!(MatrixNormalComponent::new(DMatrix::zeros(2, 2), vec![-1.0, 1.0], Matrix2::identity()).is_err());
        assert!(MatrixNormalComponent::new(DMatrix::zeros(2, 2), vec![1.0, 1.0], Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
        assert!(MatrixNormalComponent::new(DMatrix::zeros(2, 2), vec![1.0, 1.0], Matrix2::new(1.0, 0.5, 0.0, 1.0)).is_err());
        assert!(MatrixNormalComponent::new(DMatrix::zeros(3, 2), vec![1.0, 1.0], Matrix2::identity()).is_err());
    }

    fn mixture(weights: Vec<f64>, comps: Vec<MatrixNormalComponent>, m: usize) -> TrajectoryMixture {
        TrajectoryMixture::new(weights, comps, fmap(m), [0.0, 0.0]).unwrap()
    }

    #[test]
    fn single_and_duplicated_components_match_logpdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_component(3, &mut rng);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let one = mixture(vec![1.0], vec![c.clone()], 3);
        let two = mixture(vec![0.5, 0.5], vec![c.clone(), c.clone()], 3);
        assert!((one.nll(&w) + c.logpdf(&w)).abs() < 1e-12);
        assert!((two.nll(&w) + c.logpdf(&w)).abs() < 1e-12);
    }

    #[test]
    fn nll_survives_far_outliers() {
        let c = standard(3);
        let mix = mixture(vec![0.3, 0.7], vec![c.clone(), c], 3);
        let w = DMatrix::from_element(3, 2, 100.0);
        assert!(mix.nll(&w).is_finite());
    }

    #[test]
    fn mixture_weight_validation() {
        let c = standard(3);
        assert!(TrajectoryMixture::new(vec![0.5, 0.4], vec![c.clone(), c.clone()], fmap(3), [0.0; 2]).is_err());
        assert!(TrajectoryMixture::new(vec![1.0], vec![], fmap(3), [0.0; 2]).is_err());
        assert!(TrajectoryMixture::new(vec![1.0], vec![standard(4)], fmap(3), [0.0; 2]).is_err());
    }

    #[test]
    fn projection_of_standard_scales() {
        let m = 5;
        let mix = mixture(vec![1.0], vec![standard(m)], m);
        let t = 3.7;
        let pg = mix.project_at_time(t);
        let phi = mix.features().eval(t);
        let nrm2: f64 = phi.iter().map(|p| p * p).sum();
        assert_eq!(pg.means[0], Vector2::zeros());
        assert!((pg.covariances[0] - Matrix2::identity() * nrm2).abs().max() < 1e-15);
    }

    #[test]
    fn projection_is_pd_over_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mix = mixture(vec![0.4, 0.6], vec![random_component(6, &mut rng), random_component(6, &mut rng)], 6);
        for k in 0..=100 {
            let pg = mix.project_at_time(10.0 * k as f64 / 100.0);
            assert!(pg.covariances.iter().all(|c| chol2(c).is_some()));
        }
    }

    #[test]
    fn degenerate_sampling_returns_location() {
        let loc = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = MatrixNormalComponent::new(loc.clone(), vec![1e-20; 2], Matrix2::identity() * 1e-20).unwrap();
        let mix = mixture(vec![1.0], vec![c], 2);
        let tr = mix.sample_trajectory(99);
        for i in 0..2 {
            assert!((tr.wx[i] - loc[(i, 0)]).abs() < 1e-8);
            assert!((tr.wy[i] - loc[(i, 1)]).abs() < 1e-8);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = mixture(vec![0.5, 0.5], vec![random_component(3, &mut rng), random_component(3, &mut rng)], 3);
        assert_eq!(mix.sample_trajectory(42), mix.sample_trajectory(42));
        assert_ne!(mix.sample_trajectory(42), mix.sample_trajectory(43));
    }

    #[test]
    fn kl_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_component(4, &mut rng);
        assert!(component_kl(&p, &p).unwrap() <= 1e-10);
        // equal scales, shifted locations
        let delta = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let q = MatrixNormalComponent::new(p.location() + &delta, p.row_scale().to_vec(), *p.col_scale()).unwrap();
        let u = DMatrix::from_diagonal(&DVector::from_vec(q.row_scale().to_vec()));
        let v = DMatrix::from_fn(2, 2, |i, j| q.col_scale()[(i, j)]);
        let cov = v.kronecker(&u);
        let dv = DVector::from_iterator(8, delta.iter().copied());
        let expected = 0.5 * dv.dot(&cov.cholesky().unwrap().solve(&dv));
        assert!((component_kl(&p, &q).unwrap() - expected).abs() < 1e-10);
        assert!(component_kl(&p, &standard(3)).is_err());
    }

    #[test]
    fn mixture_kl_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_component(3, &mut rng);
        let b = random_component(3, &mut rng);
        let b2 = random_component(3, &mut rng);
        let p = mixture(vec![0.3, 0.7], vec![a.clone(), b.clone()], 3);
        let q = mixture(vec![0.3, 0.7], vec![a.clone(), b2.clone()], 3);
        assert_eq!(mixture_kl(&p, &p).unwrap(), 0.0);
        let expected = 0.7 * component_kl(&b, &b2).unwrap();
        assert!((mixture_kl(&p, &q).unwrap() - expected).abs() < 1e-12);
        let single = mixture(vec![1.0], vec![a.clone()], 3);
        let single_q = mixture(vec![1.0], vec![b.clone()], 3);
        assert!((mixture_kl(&single, &single_q).unwrap() - component_kl(&a, &b).unwrap()).abs() < 1e-15);
        let other_alpha = mixture(vec![0.5, 0.5], vec![a.clone(), b.clone()], 3);
        assert!(matches!(mixture_kl(&p, &other_alpha), Err(Error::MixtureMismatch(_))));
        assert!(mixture_kl(&p, &single).is_err());
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mix = TrajectoryMixture::new(
            vec![0.1 + 0.2, 1.0 - (0.1 + 0.2)],
            vec![random_component(4, &mut rng), random_component(4, &mut rng)],
            RbfFeatureMap::uniform(4, 15.0, 0.05).unwrap(),
            [3.25, -1.0 / 3.0],
        )
        .unwrap();
        let text = write_mixtures(&[("a".into(), mix.clone()), ("b".into(), mix.clone())]);
        let back = read_mixtures(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "b");
        assert_eq!(back[0].1, mix);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}

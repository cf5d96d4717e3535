//! Continuous-time trajectories over a fixed RBF time basis.
//!
//! A trajectory is `ξ(t) = (wxᵀφ(t), wyᵀφ(t)) + offset` where
//! `φ_i(t) = exp(-γ (t - c_i)²)` for centers `c_1 < … < c_M`.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Ridge coefficient used when a caller does not pick one.
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-4;

/// Fixed RBF basis over time.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfFeatureMap {
    centers: Vec<f64>,
    gamma: f64,
}

impl RbfFeatureMap {
    pub fn new(centers: Vec<f64>, gamma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument("feature map needs at least one center".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        if centers.iter().any(|c| !c.is_finite()) || centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("centers must be finite and strictly increasing".into()));
        }
        Ok(Self { centers, gamma })
    }

    /// `m` centers spaced uniformly on `[0, horizon]`, endpoints included.
    pub fn uniform(m: usize, horizon: f64, gamma: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("feature map needs at least one center".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let centers = if m == 1 {
            vec![0.5 * horizon]
        } else {
            (0..m).map(|i| horizon * i as f64 / (m - 1) as f64).collect()
        };
        Self::new(centers, gamma)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// φ(t).
    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.centers
            .iter()
            .map(|c| (-self.gamma * (t - c) * (t - c)).exp())
            .collect()
    }

    /// First or second time derivative of φ(t).
    pub fn eval_derivative(&self, t: f64, order: u32) -> Result<Vec<f64>> {
        let g = self.gamma;
        let out = match order {
            1 => self
                .centers
                .iter()
                .map(|c| {
                    let d = t - c;
                    -2.0 * g * d * (-g * d * d).exp()
                })
                .collect(),
            2 => self
                .centers
                .iter()
                .map(|c| {
                    let d = t - c;
                    (4.0 * g * g * d * d - 2.0 * g) * (-g * d * d).exp()
                })
                .collect(),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported derivative order {order}; expected 1 or 2"
                )))
            }
        };
        Ok(out)
    }

    /// Rows of φ(t_k)ᵀ for the given times.
    pub fn design_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let m = self.len();
        DMatrix::from_fn(times.len(), m, |r, c| {
            let d = times[r] - self.centers[c];
            (-self.gamma * d * d).exp()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl PathSample {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Self { t, x, y }
    }
}

/// Discrete timestamped 2-D path with strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPath {
    samples: Vec<PathSample>,
}

impl TimedPath {
    pub fn new(samples: Vec<PathSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("path needs at least one sample".into()));
        }
        if samples
            .iter()
            .any(|s| !(s.t.is_finite() && s.x.is_finite() && s.y.is_finite()))
        {
            return Err(Error::InvalidArgument("path samples must be finite".into()));
        }
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidArgument("path timestamps must be strictly increasing".into()));
        }
        Ok(Self { samples })
    }

    pub fn from_xy(times: &[f64], xy: &[[f64; 2]]) -> Result<Self> {
        if times.len() != xy.len() {
            return Err(Error::InvalidArgument("times and coordinates differ in length".into()));
        }
        Self::new(
            times
                .iter()
                .zip(xy)
                .map(|(&t, p)| PathSample::new(t, p[0], p[1]))
                .collect(),
        )
    }

    pub fn samples(&self) -> &[PathSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn first(&self) -> PathSample {
        self.samples[0]
    }

    pub fn last(&self) -> PathSample {
        self.samples[self.samples.len() - 1]
    }

    /// Same path with every timestamp shifted by `-t0`.
    pub fn shifted_time(&self, t0: f64) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| PathSample::new(s.t - t0, s.x, s.y))
                .collect(),
        }
    }

    /// Same path with the first timestamp mapped to zero.
    pub fn reindexed(&self) -> Self {
        self.shifted_time(self.samples[0].t)
    }

    /// Same path with `(dx, dy)` added to every coordinate.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| PathSample::new(s.t, s.x + dx, s.y + dy))
                .collect(),
        }
    }

    /// The trailing `n` samples, or the whole path when shorter.
    pub fn tail(&self, n: usize) -> Self {
        let start = self.samples.len().saturating_sub(n);
        Self {
            samples: self.samples[start..].to_vec(),
        }
    }
}

/// A single trajectory `ξ(t) = (wxᵀφ(t), wyᵀφ(t)) + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
    pub features: RbfFeatureMap,
    pub offset: [f64; 2],
}

impl ContinuousTrajectory {
    pub fn new(wx: Vec<f64>, wy: Vec<f64>, features: RbfFeatureMap) -> Result<Self> {
        if wx.len() != features.len() || wy.len() != features.len() {
            return Err(Error::InvalidArgument(format!(
                "weight lengths ({}, {}) do not match {} features",
                wx.len(),
                wy.len(),
                features.len()
            )));
        }
        Ok(Self {
            wx,
            wy,
            features,
            offset: [0.0, 0.0],
        })
    }

    pub fn with_offset(mut self, offset: [f64; 2]) -> Self {
        self.offset = offset;
        self
    }

    pub fn eval(&self, t: f64) -> (f64, f64) {
        let phi = self.features.eval(t);
        let x = dot(&self.wx, &phi) + self.offset[0];
        let y = dot(&self.wy, &phi) + self.offset[1];
        (x, y)
    }

    /// Velocity (order 1) or acceleration (order 2) at `t`.
    pub fn eval_derivative(&self, t: f64, order: u32) -> Result<(f64, f64)> {
        let dphi = self.features.eval_derivative(t, order)?;
        Ok((dot(&self.wx, &dphi), dot(&self.wy, &dphi)))
    }

    /// Weights as an M×2 matrix (columns x, y).
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let m = self.wx.len();
        DMatrix::from_fn(m, 2, |r, c| if c == 0 { self.wx[r] } else { self.wy[r] })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ridge-regression fit of a discrete path onto the basis:
/// `W = (ΦᵀΦ + λI)⁻¹ΦᵀY`.
///
/// With `lambda == 0` the unregularized least-squares problem is solved
/// directly on Φ, which avoids squaring its condition number.
pub fn fit_ridge(path: &TimedPath, fmap: &RbfFeatureMap, lambda: f64) -> Result<ContinuousTrajectory> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let m = fmap.len();
    let n = path.len();
    let phi = fmap.design_matrix(&path.times());
    let y = DMatrix::from_fn(n, 2, |r, c| {
        let s = path.samples[r];
        if c == 0 {
            s.x
        } else {
            s.y
        }
    });

    let w = if lambda == 0.0 {
        if n < m {
            return Err(Error::IllConditionedFit(format!(
                "{n} samples cannot determine {m} weights without regularization"
            )));
        }
        let svd = phi.svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * (n.max(m) as f64) * f64::EPSILON;
        if svd.rank(tol) < m {
            return Err(Error::IllConditionedFit("design matrix is rank deficient".into()));
        }
        svd.solve(&y, tol)
            .map_err(|e| Error::IllConditionedFit(e.to_string()))?
    } else {
        let mut a = phi.transpose() * &phi;
        for i in 0..m {
            a[(i, i)] += lambda;
        }
        let rhs = phi.transpose() * &y;
        match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => a
                .full_piv_lu()
                .solve(&rhs)
                .ok_or_else(|| Error::IllConditionedFit("normal equations are singular".into()))?,
        }
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditionedFit("non-finite weights".into()));
    }
    let wx: Vec<f64> = w.column(0).iter().copied().collect();
    let wy: Vec<f64> = w.column(1).iter().copied().collect();
    ContinuousTrajectory::new(wx, wy, fmap.clone())
}

/// Value of the ridge objective `‖ΦW − Y‖² + λ‖W‖²` for a weight matrix.
pub fn ridge_objective(path: &TimedPath, fmap: &RbfFeatureMap, lambda: f64, w: &DMatrix<f64>) -> f64 {
    let phi = fmap.design_matrix(&path.times());
    let pred = &phi * w;
    let resid: f64 = path
        .samples
        .iter()
        .enumerate()
        .map(|(r, s)| (pred[(r, 0)] - s.x).powi(2) + (pred[(r, 1)] - s.y).powi(2))
        .sum();
    resid + lambda * w.norm_squared()
}

/// Reads `id,t,x,y` rows. Ids keep their first-appearance order.
pub fn read_paths_csv<R: Read>(reader: R) -> Result<Vec<(String, TimedPath)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "t", "x", "y"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse(format!("expected header `id,t,x,y`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<PathSample>> = Default::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: bad number `{}`", i + 2, &rec[k])))
        };
        let id = rec[0].to_string();
        let sample = PathSample::new(field(1)?, field(2)?, field(3)?);
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(sample);
    }
    order
        .into_iter()
        .map(|id| {
            let samples = groups.remove(&id).expect("grouped id");
            let path = TimedPath::new(samples)
                .map_err(|e| Error::Parse(format!("path `{id}`: {e}")))?;
            Ok((id, path))
        })
        .collect()
}

pub fn write_paths_csv<W: Write>(writer: W, paths: &[(String, TimedPath)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "t", "x", "y"])?;
    for (id, path) in paths {
        for s in path.samples() {
            wtr.write_record([
                id.as_str(),
                &crate::kv::fmt_f64(s.t),
                &crate::kv::fmt_f64(s.x),
                &crate::kv::fmt_f64(s.y),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(m: usize, gamma: f64, horizon: f64) -> RbfFeatureMap {
        RbfFeatureMap::uniform(m, horizon, gamma).unwrap()
    }

    #[test]
    fn feature_at_center_is_one() {
        let f = fmap(5, 0.3, 8.0);
        let phi = f.eval(f.centers()[2]);
        assert_eq!(phi[2], 1.0);
        assert!(phi.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn feature_hand_value() {
        let f = RbfFeatureMap::new(vec![0.0], 0.05).unwrap();
        assert!((f.eval(2.0)[0] - 0.818_730_753_077_981_8).abs() < 1e-15);
        let d = f.eval_derivative(2.0, 1).unwrap();
        assert!((d[0] - (-0.2 * 0.818_730_753_077_981_8)).abs() < 1e-15);
    }

    #[test]
    fn tiny_gamma_flattens_kernel() {
        let f = RbfFeatureMap::new(vec![0.0, 3.0, 9.0], 1e-14).unwrap();
        assert!(f.eval(5.0).iter().all(|v| (v - 1.0).abs() < 1e-11));
    }

    #[test]
    fn derivative_vanishes_at_center() {
        let f = fmap(4, 0.7, 6.0);
        let d = f.eval_derivative(f.centers()[1], 1).unwrap();
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn unsupported_order_rejected() {
        let f = fmap(3, 0.7, 6.0);
        assert!(matches!(f.eval_derivative(1.0, 3), Err(Error::InvalidArgument(_))));
        assert!(f.eval_derivative(1.0, 0).is_err());
    }

    #[test]
    fn second_derivative_matches_fd_of_first() {
        let f = fmap(6, 0.4, 10.0);
        let h = 1e-5;
        for &t in &[0.3, 2.2, 5.0, 9.7] {
            let d2 = f.eval_derivative(t, 2).unwrap();
            let p = f.eval_derivative(t + h, 1).unwrap();
            let m = f.eval_derivative(t - h, 1).unwrap();
            for i in 0..6 {
                let fd = (p[i] - m[i]) / (2.0 * h);
                assert!((d2[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(RbfFeatureMap::new(vec![], 1.0).is_err());
        assert!(RbfFeatureMap::new(vec![0.0, 0.0], 1.0).is_err());
        assert!(RbfFeatureMap::new(vec![0.0, 1.0], 0.0).is_err());
        assert!(RbfFeatureMap::uniform(3, -1.0, 1.0).is_err());
    }

    #[test]
    fn uniform_centers_span_horizon() {
        let f = fmap(8, 0.05, 15.0);
        assert_eq!(f.centers()[0], 0.0);
        assert_eq!(f.centers()[7], 15.0);
    }

    #[test]
    fn zero_weights_evaluate_to_origin() {
        let f = fmap(4, 0.5, 5.0);
        let tr = ContinuousTrajectory::new(vec![0.0; 4], vec![0.0; 4], f).unwrap();
        for t in [0.0, 1.3, 4.9, 20.0] {
            assert_eq!(tr.eval(t), (0.0, 0.0));
        }
    }

    #[test]
    fn unit_weight_picks_feature() {
        let f = fmap(4, 0.5, 6.0);
        let mut wx = vec![0.0; 4];
        wx[2] = 1.0;
        let tr = ContinuousTrajectory::new(wx, vec![0.0; 4], f.clone()).unwrap();
        let t = f.centers()[2];
        assert_eq!(tr.eval(t).0, f.eval(t)[2]);
        assert_eq!(tr.eval(t).0, 1.0);
    }

    #[test]
    fn evaluation_is_linear() {
        let f = fmap(5, 0.5, 6.0);
        let wx = vec![0.3, -1.0, 2.0, 0.1, 0.7];
        let wy = vec![1.0, 0.2, -0.4, 0.0, 3.0];
        let a = ContinuousTrajectory::new(wx.clone(), wy.clone(), f.clone()).unwrap();
        let b = ContinuousTrajectory::new(
            wx.iter().map(|v| 2.0 * v).collect(),
            wy.iter().map(|v| 2.0 * v).collect(),
            f,
        )
        .unwrap();
        for t in [0.0, 1.1, 3.3, 5.9] {
            let (ax, ay) = a.eval(t);
            let (bx, by) = b.eval(t);
            assert!((bx - 2.0 * ax).abs() < 1e-12 && (by - 2.0 * ay).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolates_at_centers_with_zero_lambda() {
        let f = fmap(5, 1.0, 8.0);
        let xy: Vec<[f64; 2]> = (0..5).map(|i| [i as f64 * 0.7 - 1.0, (i as f64).sin()]).collect();
        let path = TimedPath::from_xy(f.centers(), &xy).unwrap();
        let tr = fit_ridge(&path, &f, 0.0).unwrap();
        for s in path.samples() {
            let (x, y) = tr.eval(s.t);
            assert!((x - s.x).abs() < 1e-8 && (y - s.y).abs() < 1e-8);
        }
    }

    #[test]
    fn underdetermined_zero_lambda_is_ill_conditioned() {
        let f = fmap(6, 1.0, 8.0);
        let path = TimedPath::from_xy(&[0.0, 1.0], &[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(fit_ridge(&path, &f, 0.0), Err(Error::IllConditionedFit(_))));
        assert!(fit_ridge(&path, &f, 1e-4).is_ok());
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let f = fmap(5, 0.5, 6.0);
        let path = TimedPath::from_xy(&[0.0, 2.0, 4.0, 6.0], &[[1.0, 2.0], [3.0, 1.0], [0.0, 5.0], [4.0, 4.0]]).unwrap();
        let tr = fit_ridge(&path, &f, 1e12).unwrap();
        assert!(tr.wx.iter().chain(&tr.wy).all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn ridge_beats_zero_weights() {
        let f = fmap(8, 0.05, 15.0);
        let times: Vec<f64> = (1..=15).map(f64::from).collect();
        let xy: Vec<[f64; 2]> = times.iter().map(|t| [t * 0.9, (t * 0.3).cos() * 2.0]).collect();
        let path = TimedPath::from_xy(&times, &xy).unwrap();
        let tr = fit_ridge(&path, &f, DEFAULT_RIDGE_LAMBDA).unwrap();
        let at_fit = ridge_objective(&path, &f, DEFAULT_RIDGE_LAMBDA, &tr.weight_matrix());
        let at_zero = ridge_objective(&path, &f, DEFAULT_RIDGE_LAMBDA, &DMatrix::zeros(8, 2));
        assert!(at_fit <= at_zero);
    }

    #[test]
    fn csv_round_trip_and_grouping() {
        let text = "id,t,x,y\na,0,1,2\nb,0,5,5\na,1,1.5,2.5\n";
        let paths = read_paths_csv(text.as_bytes()).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].0, "a");
        assert_eq!(paths[0].1.len(), 2);
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &paths).unwrap();
        assert_eq!(read_paths_csv(buf.as_slice()).unwrap(), paths);
    }

    #[test]
    fn csv_rejects_unsorted_and_bad_header() {
        assert!(read_paths_csv("id,t,x,y\na,1,0,0\na,0,0,0\n".as_bytes()).is_err());
        assert!(read_paths_csv("id,time,x,y\na,1,0,0\n".as_bytes()).is_err());
    }
}

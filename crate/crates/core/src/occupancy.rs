//! Occupancy grids and a continuous Hilbert-map occupancy field.
//!
//! The field is `p(m=1|x) = σ(b + Σ_k w_k exp(-γ_m ‖x - c_k‖²))` with inducing
//! points `c_k` on a regular lattice, trained by L2-regularized logistic
//! regression on grid cell centers.
//!
//! Grid row `j` (the `j`-th line of a grid file) covers world
//! `y ∈ origin_y + [j, j+1)·resolution`; column `i` covers x likewise.

use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kv::{self, KvDoc};
use crate::{Error, Result};

/// Kernel terms with `γ‖x−c‖²` above this are dropped (`e^-36 ≈ 2.3e-16`).
const CUTOFF_EXPONENT: f64 = 36.0;
const BUCKET_SPLIT: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, resolution: f64, origin: [f64; 2], cells: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid must be nonempty".into()));
        }
        if width * height != cells.len() {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} grid with {} cells",
                cells.len()
            )));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution}")));
        }
        if let Some(bad) = cells.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!("cell value {bad} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            cells,
        })
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.cells[row * self.width + col]
    }

    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, x: [f64; 2]) -> Option<(usize, usize)> {
        let fx = (x[0] - self.origin[0]) / self.resolution;
        let fy = (x[1] - self.origin[1]) / self.resolution;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (c, r) = (fx.floor() as usize, fy.floor() as usize);
        (c < self.width && r < self.height).then_some((c, r))
    }

    /// Cell value at a world point; points outside the grid count as occupied.
    pub fn value_at(&self, x: [f64; 2]) -> f64 {
        self.cell_of(x).map_or(1.0, |(c, r)| self.get(c, r))
    }

    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        (
            self.origin,
            [
                self.origin[0] + self.width as f64 * self.resolution,
                self.origin[1] + self.height as f64 * self.resolution,
            ],
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| kv::fmt_f64(self.get(c, r))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// P2 PGM with maxval 255, dark = occupied.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|c| format!("{}", ((1.0 - self.get(c, r)) * 255.0).round() as u32))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Parses grid text (CSV, or PGM P2 when it starts with `P2`).
pub fn parse_grid(text: &str, resolution: f64, origin: [f64; 2]) -> Result<OccupancyGrid> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Err(Error::Parse("empty grid file".into()));
    }
    if trimmed.starts_with("P2") {
        parse_pgm(trimmed, resolution, origin)
    } else {
        parse_csv_grid(trimmed, resolution, origin)
    }
}

fn parse_csv_grid(text: &str, resolution: f64, origin: [f64; 2]) -> Result<OccupancyGrid> {
    let mut width = None;
    let mut cells = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad cell `{}`", lineno + 1, tok.trim())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse(format!(
                    "line {}: {} cells, expected {w}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        cells.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Parse("empty grid file".into()))?;
    OccupancyGrid::new(width, height, resolution, origin, cells).map_err(|e| Error::Parse(e.to_string()))
}

fn parse_pgm(text: &str, resolution: f64, origin: [f64; 2]) -> Result<OccupancyGrid> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let magic = tokens.next();
    if magic != Some("P2") {
        return Err(Error::Parse("expected PGM magic P2".into()));
    }
    let mut header = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("PGM header: bad {what}")))
    };
    let width = header("width")?;
    let height = header("height")?;
    let maxval = header("maxval")?;
    if maxval == 0 {
        return Err(Error::Parse("PGM maxval must be positive".into()));
    }
    let mut cells = Vec::with_capacity(width * height);
    for tok in tokens {
        let gray: usize = tok
            .parse()
            .map_err(|_| Error::Parse(format!("PGM: bad pixel `{tok}`")))?;
        if gray > maxval {
            return Err(Error::Parse(format!("PGM: pixel {gray} exceeds maxval {maxval}")));
        }
        cells.push(1.0 - gray as f64 / maxval as f64);
    }
    if cells.len() != width * height {
        return Err(Error::Parse(format!(
            "PGM: {} pixels for {width}x{height}",
            cells.len()
        )));
    }
    OccupancyGrid::new(width, height, resolution, origin, cells).map_err(|e| Error::Parse(e.to_string()))
}

/// Reads a grid file; see [`parse_grid`].
pub fn load_grid(path: &Path, resolution: f64, origin: [f64; 2]) -> Result<OccupancyGrid> {
    let text = std::fs::read_to_string(path)?;
    parse_grid(&text, resolution, origin).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Uniform bucket index over inducing points for truncated kernel sums.
#[derive(Debug, Clone)]
struct BucketIndex {
    min: [f64; 2],
    size: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    ids: Vec<usize>,
}

impl BucketIndex {
    /// Buckets are `radius / BUCKET_SPLIT` wide; a query scans the block of
    /// buckets that can hold points within `radius`.
    fn build(points: &[[f64; 2]], radius: f64) -> Self {
        let size = radius / BUCKET_SPLIT as f64;
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        let nx = (((max[0] - min[0]) / size).floor() as usize + 1).max(1);
        let ny = (((max[1] - min[1]) / size).floor() as usize + 1).max(1);
        let bucket = |p: &[f64; 2]| -> usize {
            let bx = (((p[0] - min[0]) / size) as usize).min(nx - 1);
            let by = (((p[1] - min[1]) / size) as usize).min(ny - 1);
            by * nx + bx
        };
        let mut counts = vec![0usize; nx * ny + 1];
        for p in points {
            counts[bucket(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut ids = vec![0; points.len()];
        for (k, p) in points.iter().enumerate() {
            let b = bucket(p);
            ids[fill[b]] = k;
            fill[b] += 1;
        }
        Self {
            min,
            size,
            nx,
            ny,
            starts: counts,
            ids,
        }
    }

    /// Calls `visit(k)` for every point in buckets near `x`, in a fixed order.
    fn for_neighbors(&self, x: [f64; 2], mut visit: impl FnMut(usize)) {
        let fx = ((x[0] - self.min[0]) / self.size).floor();
        let fy = ((x[1] - self.min[1]) / self.size).floor();
        let reach = BUCKET_SPLIT as f64;
        if fx < -reach || fy < -reach || fx > self.nx as f64 - 1.0 + reach || fy > self.ny as f64 - 1.0 + reach {
            return;
        }
        let (bx, by) = (fx as i64, fy as i64);
        let reach = BUCKET_SPLIT as i64;
        for yy in (by - reach).max(0)..=(by + reach).min(self.ny as i64 - 1) {
            for xx in (bx - reach).max(0)..=(bx + reach).min(self.nx as i64 - 1) {
                let b = yy as usize * self.nx + xx as usize;
                for &k in &self.ids[self.starts[b]..self.starts[b + 1]] {
                    visit(k);
                }
            }
        }
    }
}

/// Inducing points laid out row-major on a tensor-product grid
/// `(xs[i], ys[j])`, which lets the kernel factor into 1-D terms.
#[derive(Debug, Clone)]
struct TensorGrid {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Common spacing of `xs` / `ys` when uniform.
    steps: [Option<f64>; 2],
}

impl TensorGrid {
    fn detect(points: &[[f64; 2]]) -> Option<Self> {
        let y0 = points.first()?[1];
        let nx = points.iter().take_while(|p| p[1] == y0).count();
        if nx < 2 || points.len() % nx != 0 {
            return None;
        }
        let xs: Vec<f64> = points[..nx].iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.chunks(nx).map(|row| row[0][1]).collect();
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&xs) || !increasing(&ys) {
            return None;
        }
        let exact = points
            .chunks(nx)
            .zip(&ys)
            .all(|(row, y)| row.iter().zip(&xs).all(|(p, x)| p[0] == *x && p[1] == *y));
        let steps = [Self::uniform_step(&xs), Self::uniform_step(&ys)];
        exact.then_some(Self { xs, ys, steps })
    }

    fn uniform_step(v: &[f64]) -> Option<f64> {
        if v.len() < 2 {
            return None;
        }
        let h = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
        let uniform = v
            .iter()
            .enumerate()
            .all(|(i, c)| (c - (v[0] + i as f64 * h)).abs() <= 1e-12 * h.max(c.abs()));
        uniform.then_some(h)
    }

    /// Index range of `v` (sorted) within `radius` of `c`.
    fn window(v: &[f64], c: f64, radius: f64) -> std::ops::Range<usize> {
        v.partition_point(|a| *a < c - radius)..v.partition_point(|a| *a <= c + radius)
    }
}

/// Fills `out[k] = e^{-γ (x - centers[k])²}`. On a uniform axis with a
/// moderate step the exponentials come from a two-term product recurrence.
fn axis_kernels(centers: &[f64], step: Option<f64>, gamma: f64, x: f64, out: &mut [f64]) {
    match step {
        Some(h) if !centers.is_empty() && h * gamma.sqrt() <= 4.0 => {
            let d0 = x - centers[0];
            let mut e = (-gamma * d0 * d0).exp();
            let mut ratio = (gamma * h * (2.0 * d0 - h)).exp();
            let decay = (-2.0 * gamma * h * h).exp();
            for o in out.iter_mut() {
                *o = e;
                e *= ratio;
                ratio *= decay;
            }
        }
        _ => {
            for (o, c) in out.iter_mut().zip(centers) {
                let d = x - c;
                *o = (-gamma * d * d).exp();
            }
        }
    }
}

/// Logit ramp outside an axis-aligned box: `slope · Σ h(d)` over the per-axis
/// distances `d` past the box, with `h(d) = d·e^{-1/d}` for `d > 0` and zero
/// otherwise. `h` is smooth and vanishes identically inside the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exterior {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub slope: f64,
}

impl Exterior {
    /// `h(d)` and `h'(d)`.
    fn ramp(d: f64) -> (f64, f64) {
        if d <= 0.0 {
            return (0.0, 0.0);
        }
        let e = (-1.0 / d).exp();
        (d * e, e * (1.0 + 1.0 / d))
    }

    fn logit(&self, x: [f64; 2]) -> (f64, Vector2<f64>) {
        let mut z = 0.0;
        let mut dz = Vector2::zeros();
        for a in 0..2 {
            let (below, db) = Self::ramp(self.lo[a] - x[a]);
            let (above, da) = Self::ramp(x[a] - self.hi[a]);
            z += self.slope * (below + above);
            dz[a] = self.slope * (da - db);
        }
        (z, dz)
    }
}

/// Continuous occupancy probability with analytic spatial gradient.
#[derive(Debug, Clone)]
pub struct HilbertField {
    inducing: Vec<[f64; 2]>,
    weights: Vec<f64>,
    bias: f64,
    gamma: f64,
    index: BucketIndex,
    tensor: Option<TensorGrid>,
    exterior: Option<Exterior>,
}

impl PartialEq for HilbertField {
    fn eq(&self, other: &Self) -> bool {
        self.inducing == other.inducing
            && self.weights == other.weights
            && self.bias == other.bias
            && self.gamma == other.gamma
            && self.exterior == other.exterior
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl HilbertField {
    pub fn new(inducing: Vec<[f64; 2]>, weights: Vec<f64>, bias: f64, gamma: f64) -> Result<Self> {
        if inducing.is_empty() || inducing.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inducing points with {} weights",
                inducing.len(),
                weights.len()
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("field lengthscale must be positive, got {gamma}")));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) || inducing.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("field parameters must be finite".into()));
        }
        let radius = (CUTOFF_EXPONENT / gamma).sqrt();
        let index = BucketIndex::build(&inducing, radius);
        let tensor = TensorGrid::detect(&inducing);
        Ok(Self {
            inducing,
            weights,
            bias,
            gamma,
            index,
            tensor,
            exterior: None,
        })
    }

    /// Adds a logit ramp outside `[lo, hi]` so that space beyond the mapped
    /// area reads as increasingly occupied.
    pub fn with_exterior(mut self, exterior: Exterior) -> Result<Self> {
        let ok = (0..2).all(|a| exterior.lo[a].is_finite() && exterior.hi[a].is_finite() && exterior.lo[a] < exterior.hi[a])
            && exterior.slope > 0.0
            && exterior.slope.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid exterior {exterior:?}")));
        }
        self.exterior = Some(exterior);
        Ok(self)
    }

    pub fn exterior(&self) -> Option<&Exterior> {
        self.exterior.as_ref()
    }

    /// A field with constant probability `p` everywhere.
    pub fn constant(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("constant probability must be in (0,1), got {p}")));
        }
        Self::new(vec![[0.0, 0.0]], vec![0.0], (p / (1.0 - p)).ln(), 1.0)
    }

    pub fn inducing(&self) -> &[[f64; 2]] {
        &self.inducing
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn cutoff2(&self) -> f64 {
        CUTOFF_EXPONENT / self.gamma
    }

    /// Logit `b + Σ w_k k(x, c_k)`, plus the exterior ramp when present.
    pub fn logit(&self, x: [f64; 2]) -> f64 {
        let ext = self.exterior.map_or(0.0, |e| e.logit(x).0);
        ext + self.kernel_logit(x)
    }

    fn kernel_logit(&self, x: [f64; 2]) -> f64 {
        if self.tensor.is_some() {
            return self.tensor_logit(x, false).0;
        }
        let r2max = self.cutoff2();
        let mut z = self.bias;
        self.index.for_neighbors(x, |k| {
            let c = self.inducing[k];
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            if d2 < r2max {
                z += self.weights[k] * (-self.gamma * d2).exp();
            }
        });
        z
    }

    /// `p(m=1|x)`.
    pub fn query(&self, x: [f64; 2]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Logit and its spatial gradient on a tensor-grid layout. Sums over the
    /// square window around the cutoff circle; the extra corner terms are
    /// below `|w|·e^-36`.
    fn tensor_logit(&self, x: [f64; 2], with_gradient: bool) -> (f64, Vector2<f64>) {
        const STACK: usize = 32;
        let grid = self.tensor.as_ref().expect("tensor layout");
        let radius = self.cutoff2().sqrt();
        let cols = TensorGrid::window(&grid.xs, x[0], radius);
        let rows = TensorGrid::window(&grid.ys, x[1], radius);
        let nx = grid.xs.len();
        let (ncols, nrows) = (cols.len(), rows.len());
        let mut stack = [0.0f64; 3 * STACK];
        let mut heap = Vec::new();
        let buf: &mut [f64] = if ncols.max(nrows) <= STACK {
            &mut stack[..2 * ncols + nrows]
        } else {
            heap.resize(2 * ncols + nrows, 0.0);
            &mut heap
        };
        // ex[k] = e^{-γ dx²}, exd[k] = ex[k]·dx, ey[j] = e^{-γ dy²}
        let (ex, rest) = buf.split_at_mut(ncols);
        let (exd, ey) = rest.split_at_mut(ncols);
        axis_kernels(&grid.xs[cols.clone()], grid.steps[0], self.gamma, x[0], ex);
        axis_kernels(&grid.ys[rows.clone()], grid.steps[1], self.gamma, x[1], ey);
        for ((o, e), c) in exd.iter_mut().zip(&*ex).zip(&grid.xs[cols.clone()]) {
            *o = e * (x[0] - c);
        }
        let mut z = self.bias;
        let mut dz = Vector2::zeros();
        for (j, eyj) in rows.zip(&*ey) {
            let w = &self.weights[j * nx + cols.start..j * nx + cols.end];
            let s: f64 = w.iter().zip(&*ex).map(|(a, b)| a * b).sum();
            z += eyj * s;
            if with_gradient {
                let sx: f64 = w.iter().zip(&*exd).map(|(a, b)| a * b).sum();
                dz[0] += -2.0 * self.gamma * eyj * sx;
                dz[1] += -2.0 * self.gamma * (x[1] - grid.ys[j]) * eyj * s;
            }
        }
        (z, dz)
    }

    /// Probability and its gradient with respect to `x`.
    pub fn query_with_gradient(&self, x: [f64; 2]) -> (f64, Vector2<f64>) {
        let (mut z, mut dz) = self.kernel_logit_with_gradient(x);
        if let Some(e) = self.exterior {
            let (ez, edz) = e.logit(x);
            z += ez;
            dz += edz;
        }
        let p = sigmoid(z);
        (p, dz * (p * (1.0 - p)))
    }

    fn kernel_logit_with_gradient(&self, x: [f64; 2]) -> (f64, Vector2<f64>) {
        if self.tensor.is_some() {
            return self.tensor_logit(x, true);
        }
        let r2max = self.cutoff2();
        let mut z = self.bias;
        let mut dz = Vector2::zeros();
        self.index.for_neighbors(x, |k| {
            let c = self.inducing[k];
            let (dx, dy) = (x[0] - c[0], x[1] - c[1]);
            let d2 = dx * dx + dy * dy;
            if d2 < r2max {
                let kw = self.weights[k] * (-self.gamma * d2).exp();
                z += kw;
                dz[0] += -2.0 * self.gamma * dx * kw;
                dz[1] += -2.0 * self.gamma * dy * kw;
            }
        });
        (z, dz)
    }

    pub fn query_gradient(&self, x: [f64; 2]) -> Vector2<f64> {
        self.query_with_gradient(x).1
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", "ccmotion-field");
        d.push("version", 1);
        d.push("K", self.inducing.len());
        d.push_f64("gamma", self.gamma);
        d.push_f64("bias", self.bias);
        let flat: Vec<f64> = self.inducing.iter().flatten().copied().collect();
        d.push_f64s("inducing", &flat);
        d.push_f64s("weights", &self.weights);
        if let Some(e) = &self.exterior {
            d.push_f64s("exterior", &[e.lo[0], e.lo[1], e.hi[0], e.hi[1], e.slope]);
        }
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let version: u32 = doc.parse("version")?;
        if version != 1 {
            return Err(Error::Parse(format!("unsupported field version {version}")));
        }
        let k: usize = doc.parse("K")?;
        let flat = doc.f64s("inducing")?;
        let weights = doc.f64s("weights")?;
        if flat.len() != 2 * k || weights.len() != k {
            return Err(Error::Parse("field arrays do not match K".into()));
        }
        let inducing = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
        let field = Self::new(inducing, weights, doc.parse("bias")?, doc.parse("gamma")?)?;
        if doc.get("exterior").is_none() {
            return Ok(field);
        }
        match doc.f64s("exterior")?[..] {
            [lx, ly, hx, hy, slope] => field.with_exterior(Exterior {
                lo: [lx, ly],
                hi: [hx, hy],
                slope,
            }),
            _ => Err(Error::Parse("exterior needs lo, hi and slope".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldConfig {
    /// Inducing lattice spacing, in grid cells.
    pub spacing_cells: usize,
    /// Width of the occupied ring added around the grid, in cells. Matches
    /// the grid convention that everything outside it is occupied.
    pub border_cells: usize,
    /// Exterior logit slope beyond the grid extent; see [`Exterior`].
    pub exterior_slope: Option<f64>,
    /// Kernel lengthscale γ_m (1/m²); `None` picks `1/spacing²` in meters.
    pub gamma: Option<f64>,
    pub iterations: usize,
    /// Gradient step as a fraction of the inverse Lipschitz bound.
    pub step: f64,
    /// L2 weight on `½‖w‖²` against the summed (not averaged) logistic loss.
    pub regularization: f64,
    /// Early stop when the loss decrease over one iteration falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            spacing_cells: 2,
            border_cells: 0,
            exterior_slope: None,
            gamma: None,
            iterations: 500,
            step: 0.5,
            regularization: 1e-4,
            tolerance: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldTraining {
    pub field: HilbertField,
    /// Objective value before the first step and after each iteration.
    pub losses: Vec<f64>,
}

/// Sparse rows of kernel features at the training points.
struct SparseDesign {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    ncols: usize,
}

impl SparseDesign {
    fn mul(&self, w: &[f64], bias: f64, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut z = bias;
            for e in self.starts[r]..self.starts[r + 1] {
                z += self.vals[e] * w[self.cols[e]];
            }
            *o = z;
        }
    }

    fn mul_t(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, vr) in v.iter().enumerate() {
            for e in self.starts[r]..self.starts[r + 1] {
                out[self.cols[e]] += self.vals[e] * vr;
            }
        }
    }

    /// Largest eigenvalue of `[Φ 1]ᵀ[Φ 1] / n` by power iteration.
    fn gram_norm(&self) -> f64 {
        let n = self.starts.len() - 1;
        let mut w = vec![1.0; self.ncols];
        let mut b = 1.0;
        let mut z = vec![0.0; n];
        let mut tmp = vec![0.0; self.ncols];
        let mut lambda = 1.0;
        for _ in 0..50 {
            self.mul(&w, b, &mut z);
            self.mul_t(&z, &mut tmp);
            let nb: f64 = z.iter().sum::<f64>();
            let norm = (tmp.iter().map(|v| v * v).sum::<f64>() + nb * nb).sqrt();
            let prev = (w.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
            lambda = norm / prev / n as f64;
            for (wi, ti) in w.iter_mut().zip(&tmp) {
                *wi = ti / norm;
            }
            b = nb / norm;
        }
        lambda
    }
}

/// Fits a Hilbert field to a grid. Cells with value ≥ 0.5 are occupied.
pub fn train_field(grid: &OccupancyGrid, config: &FieldConfig) -> Result<FieldTraining> {
    let spacing_cells = config.spacing_cells.max(1);
    let spacing = spacing_cells as f64 * grid.resolution;
    let gamma = config.gamma.unwrap_or(1.0 / (spacing * spacing));

    // lattice covering the padded grid, one ring beyond its edge
    let border = config.border_cells as i64;
    let pad = border as f64 * grid.resolution;
    let (lo, hi) = grid.extent();
    let lo = [lo[0] - pad, lo[1] - pad];
    let hi = [hi[0] + pad, hi[1] + pad];
    let nx = ((hi[0] - lo[0]) / spacing).ceil() as i64;
    let ny = ((hi[1] - lo[1]) / spacing).ceil() as i64;
    let mut inducing = Vec::new();
    for j in -1..=ny + 1 {
        for i in -1..=nx + 1 {
            inducing.push([lo[0] + i as f64 * spacing, lo[1] + j as f64 * spacing]);
        }
    }
    let k = inducing.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    let probe = HilbertField::new(inducing.clone(), vec![0.0; k], 0.0, gamma)?;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let (w, h) = (grid.width as i64, grid.height as i64);
    for r in -border..h + border {
        for c in -border..w + border {
            let inside = (0..w).contains(&c) && (0..h).contains(&r);
            points.push([
                grid.origin[0] + (c as f64 + 0.5) * grid.resolution,
                grid.origin[1] + (r as f64 + 0.5) * grid.resolution,
            ]);
            let occupied = !inside || grid.get(c as usize, r as usize) >= 0.5;
            labels.push(if occupied { 1.0 } else { 0.0 });
        }
    }
    let r2max = probe.cutoff2();
    let mut design = SparseDesign {
        starts: vec![0],
        cols: Vec::new(),
        vals: Vec::new(),
        ncols: k,
    };
    for x in &points {
        probe.index.for_neighbors(*x, |kk| {
            let c = inducing[kk];
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            if d2 < r2max {
                design.cols.push(kk);
                design.vals.push((-gamma * d2).exp());
            }
        });
        design.starts.push(design.cols.len());
    }

    let n = points.len() as f64;
    // the penalty is relative to the summed loss; objective stays per-sample
    let reg = config.regularization / n;
    let lipschitz = 0.25 * design.gram_norm() + reg;
    let lr = config.step / lipschitz;

    let objective = |w: &[f64], bias: f64, z: &mut [f64]| -> f64 {
        design.mul(w, bias, z);
        let mut loss = 0.0;
        for (zi, yi) in z.iter().zip(&labels) {
            // log(1 + e^z) - y z, stable
            let sp = if *zi > 0.0 { zi + (-zi).exp().ln_1p() } else { zi.exp().ln_1p() };
            loss += sp - yi * zi;
        }
        loss / n + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>()
    };
    // gradient at the point whose logits are in `z`; returns the bias part
    let gradient = |w: &[f64], z: &[f64], resid: &mut [f64], grad: &mut [f64]| -> f64 {
        for ((r, zi), yi) in resid.iter_mut().zip(z).zip(&labels) {
            *r = (sigmoid(*zi) - yi) / n;
        }
        design.mul_t(resid, grad);
        for (g, wi) in grad.iter_mut().zip(w) {
            *g += reg * wi;
        }
        resid.iter().sum()
    };

    // Nesterov-accelerated gradient descent. A step that would raise the
    // loss is replaced by a plain gradient step and the momentum restarts,
    // so the recorded losses never increase.
    let mut w = weights;
    let mut bias = 0.0;
    let mut w_prev = w.clone();
    let mut b_prev = bias;
    let mut momentum_k = 0usize;
    let mut z = vec![0.0; points.len()];
    let mut resid = vec![0.0; points.len()];
    let mut grad = vec![0.0; k];
    let mut w_look = vec![0.0; k];
    let mut w_new = vec![0.0; k];

    let mut losses = vec![objective(&w, bias, &mut z)];
    for _ in 0..config.iterations {
        let prev = *losses.last().expect("nonempty");
        let beta = momentum_k as f64 / (momentum_k as f64 + 3.0);
        for i in 0..k {
            w_look[i] = w[i] + beta * (w[i] - w_prev[i]);
        }
        let b_look = bias + beta * (bias - b_prev);
        design.mul(&w_look, b_look, &mut z);
        let gb = gradient(&w_look, &z, &mut resid, &mut grad);
        for i in 0..k {
            w_new[i] = w_look[i] - lr * grad[i];
        }
        let mut b_new = b_look - lr * gb;
        let mut loss = objective(&w_new, b_new, &mut z);
        momentum_k += 1;
        if !(loss <= prev) {
            momentum_k = 0;
            design.mul(&w, bias, &mut z);
            let gb = gradient(&w, &z, &mut resid, &mut grad);
            for i in 0..k {
                w_new[i] = w[i] - lr * grad[i];
            }
            b_new = bias - lr * gb;
            loss = objective(&w_new, b_new, &mut z);
        }
        std::mem::swap(&mut w_prev, &mut w);
        b_prev = bias;
        std::mem::swap(&mut w, &mut w_new);
        bias = b_new;
        losses.push(loss);
        if prev - loss < config.tolerance {
            break;
        }
    }

    let mut field = HilbertField::new(inducing, w, bias, gamma)?;
    if let Some(slope) = config.exterior_slope {
        let (lo, hi) = grid.extent();
        field = field.with_exterior(Exterior { lo, hi, slope })?;
    }
    Ok(FieldTraining { field, losses })
}

/// Fraction of cell centers whose thresholded prediction matches the label.
pub fn classification_accuracy(field: &HilbertField, grid: &OccupancyGrid) -> f64 {
    let mut hits = 0usize;
    for r in 0..grid.height {
        for c in 0..grid.width {
            let occupied = grid.get(c, r) >= 0.5;
            if (field.query(grid.cell_center(c, r)) >= 0.5) == occupied {
                hits += 1;
            }
        }
    }
    hits as f64 / (grid.width * grid.height) as f64
}

pub fn write_field(field: &HilbertField) -> String {
    field.to_kv().render()
}

pub fn read_field(text: &str) -> Result<HilbertField> {
    HilbertField::from_kv(&kv::parse_single(text)?)
}

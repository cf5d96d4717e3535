//! Simulated floor-plan scenario, trajectory ingestion, metrics and baselines.

use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dist::TrajectoryMixture;
use crate::kv::{self, KvDoc};
use crate::learner::{encode_history, ENCODING_DIM};
use crate::mlp::{Adam, Mlp};
use crate::occupancy::{parse_grid, HilbertField, OccupancyGrid};
use crate::quad_cost::{trajectory_cost, CostConfig};
use crate::traj_core::{read_paths_csv, write_paths_csv, PathSample, TimedPath};
use crate::{Error, Result};

const HALLWAY_PLAN: &str = include_str!("../assets/hallway.txt");

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

type Rect = [f64; 4];

/// Rectangle-based floor plan with a waypoint graph for agent routing.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorPlan {
    pub name: String,
    pub width: f64,
    pub height: f64,
    pub resolution: f64,
    pub free: Vec<Rect>,
    pub obstacles: Vec<Rect>,
    pub nodes: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    /// Destination nodes; every node when empty.
    pub goals: Vec<usize>,
}

fn parse_rows<const N: usize>(doc: &KvDoc, key: &str) -> Result<Vec<[f64; N]>> {
    doc.require(key)?
        .split(';')
        .map(|row| {
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("{key}: bad number `{t}`"))))
                .collect::<Result<_>>()?;
            vals.try_into()
                .map_err(|v: Vec<f64>| Error::Parse(format!("{key}: expected {N} values, got {}", v.len())))
        })
        .collect()
}

impl FloorPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = kv::parse_single(text)?;
        let nodes: Vec<[f64; 2]> = parse_rows(&doc, "nodes")?;
        let edges: Vec<(usize, usize)> = parse_rows::<2>(&doc, "edges")?
            .into_iter()
            .map(|[a, b]| (a as usize, b as usize))
            .collect();
        if edges.iter().any(|&(a, b)| a >= nodes.len() || b >= nodes.len() || a == b) {
            return Err(Error::Parse("edge references an unknown node".into()));
        }
        let goals: Vec<usize> = match doc.get("goals") {
            Some(g) => g
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("goals: bad node `{t}`"))))
                .collect::<Result<_>>()?,
            None => (0..nodes.len()).collect(),
        };
        if goals.iter().any(|&g| g >= nodes.len()) {
            return Err(Error::Parse("goal references an unknown node".into()));
        }
        Ok(Self {
            name: doc.require("name")?.to_string(),
            width: doc.parse("width")?,
            height: doc.parse("height")?,
            resolution: doc.parse("resolution")?,
            free: parse_rows(&doc, "free")?,
            obstacles: parse_rows(&doc, "obstacles")?,
            nodes,
            edges,
            goals,
        })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "hallway" => Self::parse(HALLWAY_PLAN),
            other => Err(Error::InvalidArgument(format!("unknown floor plan `{other}`"))),
        }
    }

    pub fn is_free(&self, p: [f64; 2]) -> bool {
        let inside = |r: &Rect| p[0] >= r[0] && p[0] <= r[2] && p[1] >= r[1] && p[1] <= r[3];
        self.free.iter().any(inside) && !self.obstacles.iter().any(inside)
    }

    /// Rasterizes by cell center: 0 for free, 1 for occupied.
    pub fn rasterize(&self) -> Result<OccupancyGrid> {
        let w = (self.width / self.resolution).round() as usize;
        let h = (self.height / self.resolution).round() as usize;
        let mut cells = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                let c = [(col as f64 + 0.5) * self.resolution, (row as f64 + 0.5) * self.resolution];
                cells.push(if self.is_free(c) { 0.0 } else { 1.0 });
            }
        }
        OccupancyGrid::new(w, h, self.resolution, [0.0, 0.0], cells)
    }

    /// `next_hops()[i][j]` is the first node after `i` on a shortest path to `j`.
    fn next_hops(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.nodes.len();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        let mut next = vec![vec![None; n]; n];
        for i in 0..n {
            d[i][i] = 0.0;
            next[i][i] = Some(i);
        }
        for &(a, b) in &self.edges {
            let w = dist(self.nodes[a], self.nodes[b]);
            d[a][b] = w;
            d[b][a] = w;
            next[a][b] = Some(b);
            next[b][a] = Some(a);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                        next[i][j] = next[i][k];
                    }
                }
            }
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub floor_plan: String,
    pub pairs: usize,
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            floor_plan: "hallway".into(),
            pairs: 200,
            history_steps: 10,
            horizon_steps: 15,
            dt: 1.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.history_steps < 2 || self.horizon_steps == 0 {
            return Err(Error::InvalidArgument("scenario counts must be positive".into()));
        }
        if !(self.dt > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("dt must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub id: String,
    pub history: TimedPath,
    pub future: TimedPath,
}

impl TrajectoryPair {
    /// Ground truth with time measured from the last observed sample.
    pub fn relative_future(&self) -> TimedPath {
        self.future.shifted_time(self.history.last().t)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub pairs: Vec<TrajectoryPair>,
    pub grid: OccupancyGrid,
}

/// Agents walk shortest waypoint routes from a random node to a random goal
/// at a per-agent speed; each sample
/// gets Gaussian jitter, redrawn if it would land on an occupied cell.
pub fn generate_simulated(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let plan = FloorPlan::builtin(&config.floor_plan)?;
    let grid = plan.rasterize()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let steps = config.history_steps + config.horizon_steps;
    let mut pairs = Vec::with_capacity(config.pairs);
    for idx in 0..config.pairs {
        let speed = rng.random_range(0.8..1.3);
        let length = speed * config.dt * (steps - 1) as f64;
        let route = random_route(&plan, length, &mut rng);
        let mut samples = Vec::with_capacity(steps);
        for k in 0..steps {
            let base = point_along(&route, speed * config.dt * k as f64);
            let mut p = base;
            for _ in 0..32 {
                let cand = [base[0] + noise.sample(&mut rng), base[1] + noise.sample(&mut rng)];
                if grid.value_at(cand) < 0.5 {
                    p = cand;
                    break;
                }
            }
            samples.push(PathSample::new(k as f64 * config.dt, p[0], p[1]));
        }
        let history = TimedPath::new(samples[..config.history_steps].to_vec())?;
        let future = TimedPath::new(samples[config.history_steps..].to_vec())?;
        pairs.push(TrajectoryPair {
            id: format!("sim{idx:04}"),
            history,
            future,
        });
    }
    Ok(Scenario { pairs, grid })
}

/// Shortest waypoint route between a random start and goal, with jittered
/// waypoints and a random entry point, long enough to cover `length`.
fn random_route<R: Rng>(plan: &FloorPlan, length: f64, rng: &mut R) -> Vec<[f64; 2]> {
    let next_hop = plan.next_hops();
    let n = plan.nodes.len();
    loop {
        let start = rng.random_range(0..n);
        let goal = plan.goals[rng.random_range(0..plan.goals.len())];
        if start == goal {
            continue;
        }
        let mut route = Vec::new();
        let mut cur = start;
        loop {
            let p = plan.nodes[cur];
            route.push([p[0] + rng.random_range(-0.3..0.3), p[1] + rng.random_range(-0.3..0.3)]);
            if cur == goal {
                break;
            }
            cur = next_hop[cur][goal].expect("connected graph");
        }
        let total: f64 = route.windows(2).map(|w| dist(w[0], w[1])).sum();
        if total < length {
            continue;
        }
        let skip = rng.random_range(0.0..=total - length);
        let mut out = vec![point_along(&route, skip)];
        let mut acc = 0.0;
        for w in route.windows(2) {
            acc += dist(w[0], w[1]);
            if acc > skip {
                out.push(w[1]);
            }
        }
        return out;
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn point_along(route: &[[f64; 2]], s: f64) -> [f64; 2] {
    let mut left = s;
    for w in route.windows(2) {
        let d = dist(w[0], w[1]);
        if left <= d && d > 0.0 {
            let f = left / d;
            return [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
        }
        left -= d;
    }
    *route.last().unwrap()
}

/// Splits in generation order: the first `⌊fraction·n⌋` pairs train.
pub fn split_pairs(pairs: &[TrajectoryPair], train_fraction: f64) -> (Vec<TrajectoryPair>, Vec<TrajectoryPair>) {
    let n_train = ((pairs.len() as f64) * train_fraction).floor() as usize;
    let n_train = n_train.min(pairs.len());
    (pairs[..n_train].to_vec(), pairs[n_train..].to_vec())
}

/// Cuts full tracks into non-overlapping (history, future) windows.
pub fn pairs_from_tracks(
    tracks: &[(String, TimedPath)],
    history_steps: usize,
    horizon_steps: usize,
) -> Result<Vec<TrajectoryPair>> {
    let span = history_steps + horizon_steps;
    let mut out = Vec::new();
    for (id, track) in tracks {
        let s = track.samples();
        for (w, start) in (0..).zip((0..).step_by(span).take_while(|st| st + span <= s.len())) {
            out.push(TrajectoryPair {
                id: format!("{id}-{w}"),
                history: TimedPath::new(s[start..start + history_steps].to_vec())?,
                future: TimedPath::new(s[start + history_steps..start + span].to_vec())?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub floor_plan: String,
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    pub train_fraction: f64,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub seed: u64,
    pub noise: f64,
}

impl DatasetManifest {
    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn to_kv(&self, pairs: usize) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", "ccmotion-dataset");
        d.push("version", 1);
        d.push("floor_plan", &self.floor_plan);
        d.push("pairs", pairs);
        d.push("history_steps", self.history_steps);
        d.push("horizon_steps", self.horizon_steps);
        d.push_f64("dt", self.dt);
        d.push_f64("train_fraction", self.train_fraction);
        d.push_f64("resolution", self.resolution);
        d.push_f64s("origin", &self.origin);
        d.push("seed", self.seed);
        d.push_f64("noise", self.noise);
        d.push("history", "history.csv");
        d.push("future", "future.csv");
        d.push("grid", "grid.csv");
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        if doc.get("format") != Some("ccmotion-dataset") {
            return Err(Error::Parse("not a dataset manifest".into()));
        }
        let version: u32 = doc.parse("version")?;
        if version != 1 {
            return Err(Error::Parse(format!("unsupported dataset version {version}")));
        }
        let origin = doc.f64s("origin")?;
        if origin.len() != 2 {
            return Err(Error::Parse("origin needs two values".into()));
        }
        Ok(Self {
            floor_plan: doc.parse_or("floor_plan", "custom".to_string())?,
            history_steps: doc.parse("history_steps")?,
            horizon_steps: doc.parse("horizon_steps")?,
            dt: doc.parse("dt")?,
            train_fraction: doc.parse_or("train_fraction", DEFAULT_TRAIN_FRACTION)?,
            resolution: doc.parse("resolution")?,
            origin: [origin[0], origin[1]],
            seed: doc.parse_or("seed", 0)?,
            noise: doc.parse_or("noise", 0.0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<TrajectoryPair>,
    pub grid: OccupancyGrid,
}

impl Dataset {
    pub fn from_scenario(scenario: Scenario, config: &ScenarioConfig) -> Self {
        let manifest = DatasetManifest {
            floor_plan: config.floor_plan.clone(),
            history_steps: config.history_steps,
            horizon_steps: config.horizon_steps,
            dt: config.dt,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            resolution: scenario.grid.resolution,
            origin: scenario.grid.origin,
            seed: config.seed,
            noise: config.noise,
        };
        Self {
            manifest,
            pairs: scenario.pairs,
            grid: scenario.grid,
        }
    }

    pub fn split(&self) -> (Vec<TrajectoryPair>, Vec<TrajectoryPair>) {
        split_pairs(&self.pairs, self.manifest.train_fraction)
    }

    /// Writes `manifest.txt`, `history.csv`, `future.csv` and `grid.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), self.manifest.to_kv(self.pairs.len()).render())?;
        let hist: Vec<(String, TimedPath)> = self.pairs.iter().map(|p| (p.id.clone(), p.history.clone())).collect();
        let fut: Vec<(String, TimedPath)> = self.pairs.iter().map(|p| (p.id.clone(), p.future.clone())).collect();
        write_paths_csv(fs::File::create(dir.join("history.csv"))?, &hist)?;
        write_paths_csv(fs::File::create(dir.join("future.csv"))?, &fut)?;
        fs::write(dir.join("grid.csv"), self.grid.to_csv())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let malformed = |file: &str, reason: String| Error::MalformedFile {
            path: dir.join(file),
            reason,
        };
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let doc = kv::parse_single(&text).map_err(|e| malformed("manifest.txt", e.to_string()))?;
        let manifest = DatasetManifest::from_kv(&doc).map_err(|e| malformed("manifest.txt", e.to_string()))?;
        let read_csv = |key: &str| -> Result<Vec<(String, TimedPath)>> {
            let name = doc.require(key)?;
            read_paths_csv(fs::File::open(dir.join(name))?).map_err(|e| malformed(name, e.to_string()))
        };
        let hist = read_csv("history")?;
        let fut = read_csv("future")?;
        if hist.len() != fut.len() || hist.iter().zip(&fut).any(|(h, f)| h.0 != f.0) {
            return Err(malformed("future.csv", "history and future ids do not line up".into()));
        }
        let pairs = hist
            .into_iter()
            .zip(fut)
            .map(|((id, history), (_, future))| TrajectoryPair { id, history, future })
            .collect();
        let grid_name = doc.require("grid")?;
        let grid_text = fs::read_to_string(dir.join(grid_name))?;
        let grid = parse_grid(&grid_text, manifest.resolution, manifest.origin)
            .map_err(|e| malformed(grid_name, e.to_string()))?;
        Ok(Self { manifest, pairs, grid })
    }
}

// ---- metrics ----

fn dist2(a: [f64; 2], b: &PathSample) -> f64 {
    ((a[0] - b.x).powi(2) + (a[1] - b.y).powi(2)).sqrt()
}

/// Minimum over components of the mean distance between the component mean
/// path and the truth. Truth times are relative to the prediction start.
pub fn metric_ade(mix: &TrajectoryMixture, truth: &TimedPath) -> f64 {
    (0..mix.len())
        .map(|r| {
            truth.samples().iter().map(|s| dist2(mix.mean_position(r, s.t), s)).sum::<f64>() / truth.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn metric_fde(mix: &TrajectoryMixture, truth: &TimedPath) -> f64 {
    let last = truth.last();
    (0..mix.len())
        .map(|r| dist2(mix.mean_position(r, last.t), &last))
        .fold(f64::INFINITY, f64::min)
}

/// Mean over truth samples of the time-slice mixture density at the true point.
pub fn metric_al(mix: &TrajectoryMixture, truth: &TimedPath) -> f64 {
    truth
        .samples()
        .iter()
        .map(|s| mix.project_at_time(s.t).density(&Vector2::new(s.x, s.y)))
        .sum::<f64>()
        / truth.len() as f64
}

pub fn metric_cvp(
    mixtures: &[TrajectoryMixture],
    field: &HilbertField,
    config: &CostConfig,
    epsilon: f64,
) -> Result<f64> {
    if mixtures.is_empty() {
        return Err(Error::InvalidArgument("no mixtures to score".into()));
    }
    let mut violating = 0;
    for m in mixtures {
        if trajectory_cost(m, field, config)? > epsilon {
            violating += 1;
        }
    }
    Ok(100.0 * violating as f64 / mixtures.len() as f64)
}

/// Index-aligned displacement errors of a deterministic prediction.
pub fn path_ade(pred: &TimedPath, truth: &TimedPath) -> Result<f64> {
    check_aligned(pred, truth)?;
    Ok(pred
        .samples()
        .iter()
        .zip(truth.samples())
        .map(|(p, t)| dist2([p.x, p.y], t))
        .sum::<f64>()
        / truth.len() as f64)
}

pub fn path_fde(pred: &TimedPath, truth: &TimedPath) -> Result<f64> {
    check_aligned(pred, truth)?;
    let p = pred.last();
    Ok(dist2([p.x, p.y], &truth.last()))
}

fn check_aligned(pred: &TimedPath, truth: &TimedPath) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} samples, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ade: f64,
    pub fde: f64,
    /// `None` for deterministic predictors.
    pub al: Option<f64>,
    /// `None` when no collision model applies.
    pub cvp: Option<f64>,
}

/// Averages mixture metrics over a test set. `truths` use relative time.
pub fn evaluate_mixtures(
    mixtures: &[TrajectoryMixture],
    truths: &[TimedPath],
    field: &HilbertField,
    config: &CostConfig,
    epsilon: f64,
) -> Result<EvalReport> {
    if mixtures.is_empty() || mixtures.len() != truths.len() {
        return Err(Error::InvalidArgument("mixtures and truths must be nonempty and aligned".into()));
    }
    let n = mixtures.len() as f64;
    let mean = |f: &dyn Fn(&TrajectoryMixture, &TimedPath) -> f64| {
        mixtures.iter().zip(truths).map(|(m, t)| f(m, t)).sum::<f64>() / n
    };
    Ok(EvalReport {
        ade: mean(&metric_ade),
        fde: mean(&metric_fde),
        al: Some(mean(&metric_al)),
        cvp: Some(metric_cvp(mixtures, field, config, epsilon)?),
    })
}

pub fn evaluate_paths(preds: &[TimedPath], truths: &[TimedPath]) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::InvalidArgument("predictions and truths must be nonempty and aligned".into()));
    }
    let n = preds.len() as f64;
    let mut ade = 0.0;
    let mut fde = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        ade += path_ade(p, t)?;
        fde += path_fde(p, t)?;
    }
    Ok(EvalReport {
        ade: ade / n,
        fde: fde / n,
        al: None,
        cvp: None,
    })
}

// ---- baselines ----

/// Constant-velocity extrapolation using the window's mean velocity.
pub fn baseline_cv(history: &TimedPath, horizon_steps: usize) -> Result<TimedPath> {
    if history.len() < 2 {
        return Err(Error::InvalidArgument("constant velocity needs at least 2 samples".into()));
    }
    let (first, last) = (history.first(), history.last());
    let elapsed = last.t - first.t;
    let (vx, vy) = ((last.x - first.x) / elapsed, (last.y - first.y) / elapsed);
    let dt = elapsed / (history.len() - 1) as f64;
    let samples = (1..=horizon_steps)
        .map(|k| {
            let tau = k as f64 * dt;
            PathSample::new(last.t + tau, last.x + vx * tau, last.y + vy * tau)
        })
        .collect();
    TimedPath::new(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveNnConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for NaiveNnConfig {
    fn default() -> Self {
        Self {
            hidden: 180,
            epochs: 500,
            batch_size: 32,
            step_size: 1e-3,
            seed: 0,
        }
    }
}

/// Deterministic regressor from the centered 20-value window to future coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveNn {
    mlp: Mlp,
    horizon_steps: usize,
}

#[derive(Debug, Clone)]
pub struct NaiveNnTraining {
    pub model: NaiveNn,
    /// Mean squared error per coordinate, before training and after each epoch.
    pub losses: Vec<f64>,
}

fn nn_sample(pair: &TrajectoryPair, horizon_steps: usize) -> Result<([f64; ENCODING_DIM], Vec<f64>)> {
    let enc = encode_history(&pair.history, true)?;
    if pair.future.len() != horizon_steps {
        return Err(Error::InvalidArgument(format!(
            "pair {} has {} future samples, expected {horizon_steps}",
            pair.id,
            pair.future.len()
        )));
    }
    let target = pair
        .future
        .samples()
        .iter()
        .flat_map(|s| [s.x - enc.reference[0], s.y - enc.reference[1]])
        .collect();
    Ok((enc.values, target))
}

pub fn baseline_nn_naive(pairs: &[TrajectoryPair], config: &NaiveNnConfig) -> Result<NaiveNnTraining> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 || config.hidden == 0 || !(config.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid NN config {config:?}")));
    }
    let horizon_steps = pairs[0].future.len();
    let data: Vec<_> = pairs.iter().map(|p| nn_sample(p, horizon_steps)).collect::<Result<_>>()?;
    let out_dim = 2 * horizon_steps;
    let mut mlp = Mlp::random(&[ENCODING_DIM, config.hidden, config.hidden, out_dim], config.seed);
    let mut adam = Adam::new(mlp.params().len(), config.step_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5851_f42d_4c95_7f2d));
    let mse = |mlp: &Mlp| {
        data.iter()
            .map(|(x, y)| mlp.forward(x).iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (data.len() * out_dim) as f64
    };
    let mut losses = vec![mse(&mlp)];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; mlp.params().len()];
            let scale = 2.0 / (chunk.len() * out_dim) as f64;
            for &i in chunk {
                let (x, y) = &data[i];
                let trace = mlp.trace(x);
                let d: Vec<f64> = trace.output.iter().zip(y).map(|(a, b)| scale * (a - b)).collect();
                mlp.backward(&trace, &d, &mut grad);
            }
            adam.step(mlp.params_mut(), &grad);
        }
        losses.push(mse(&mlp));
    }
    Ok(NaiveNnTraining {
        model: NaiveNn { mlp, horizon_steps },
        losses,
    })
}

impl NaiveNn {
    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", "ccmotion-nn-naive");
        d.push("version", 1);
        d.push("horizon_steps", self.horizon_steps);
        d.push(
            "layers",
            self.mlp.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
        );
        d.push_f64s("params", self.mlp.params());
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        if doc.get("format") != Some("ccmotion-nn-naive") {
            return Err(Error::Parse("not a naive NN checkpoint".into()));
        }
        let version: u32 = doc.parse("version")?;
        if version != 1 {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let horizon_steps: usize = doc.parse("horizon_steps")?;
        let sizes: Vec<usize> = doc
            .require("layers")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad layer size `{t}`"))))
            .collect::<Result<_>>()?;
        if sizes.len() < 2 || sizes[0] != ENCODING_DIM || *sizes.last().unwrap() != 2 * horizon_steps {
            return Err(Error::Parse(format!("layer sizes {sizes:?} do not fit the encoding")));
        }
        let mut mlp = Mlp::zeros(&sizes);
        if !mlp.set_params(doc.f64s("params")?) {
            return Err(Error::Parse("parameter count mismatch".into()));
        }
        Ok(Self { mlp, horizon_steps })
    }

    /// Predicted future positions at the history's sampling interval.
    pub fn predict(&self, history: &TimedPath) -> Result<TimedPath> {
        let enc = encode_history(history, true)?;
        let out = self.mlp.forward(&enc.values);
        let last = history.last();
        let dt = (last.t - history.first().t) / (history.len() - 1) as f64;
        let samples = (0..self.horizon_steps)
            .map(|k| {
                PathSample::new(
                    last.t + (k + 1) as f64 * dt,
                    out[2 * k] + enc.reference[0],
                    out[2 * k + 1] + enc.reference[1],
                )
            })
            .collect();
        TimedPath::new(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::MatrixNormalComponent;
    use crate::traj_core::RbfFeatureMap;
    use nalgebra::{DMatrix, Matrix2};

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            pairs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn builtin_plan_is_consistent() {
        let plan = FloorPlan::builtin("hallway").unwrap();
        let grid = plan.rasterize().unwrap();
        assert_eq!((grid.width, grid.height), (80, 60));
        // every waypoint edge keeps at least 0.9 m clearance from occupied space
        for &(a, b) in &plan.edges {
            let (pa, pb) = (plan.nodes[a], plan.nodes[b]);
            for k in 0..=100 {
                let f = k as f64 / 100.0;
                let p = [pa[0] + f * (pb[0] - pa[0]), pa[1] + f * (pb[1] - pa[1])];
                for ang in 0..16 {
                    let th = ang as f64 * std::f64::consts::PI / 8.0;
                    let q = [p[0] + 0.9 * th.cos(), p[1] + 0.9 * th.sin()];
                    assert!(plan.is_free(q), "edge {a}-{b} too close to a wall at {q:?}");
                }
            }
        }
        assert!(FloorPlan::builtin("nope").is_err());
    }

    #[test]
    fn generator_is_deterministic_and_in_free_space() {
        let a = generate_simulated(&small_config()).unwrap();
        let b = generate_simulated(&small_config()).unwrap();
        assert_eq!(a.pairs, b.pairs);
        for p in &a.pairs {
            assert_eq!(p.history.len(), 10);
            assert_eq!(p.future.len(), 15);
            for s in p.history.samples().iter().chain(p.future.samples()) {
                assert!(a.grid.value_at([s.x, s.y]) < 0.5);
            }
        }
        let c = generate_simulated(&ScenarioConfig { seed: 1, ..small_config() }).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn default_split_is_80_20() {
        let s = generate_simulated(&ScenarioConfig::default()).unwrap();
        assert_eq!(s.pairs.len(), 200);
        let (tr, te) = split_pairs(&s.pairs, DEFAULT_TRAIN_FRACTION);
        assert_eq!((tr.len(), te.len()), (160, 40));
    }

    #[test]
    fn tracks_cut_into_windows() {
        let xy: Vec<[f64; 2]> = (0..60).map(|k| [k as f64, 0.0]).collect();
        let t: Vec<f64> = (0..60).map(|k| k as f64).collect();
        let tracks = vec![("a".to_string(), TimedPath::from_xy(&t, &xy).unwrap())];
        let pairs = pairs_from_tracks(&tracks, 10, 15).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].history.first().t, 25.0);
        assert_eq!(pairs[1].future.last().t, 49.0);
    }

    fn line_mixture(offsets: &[[f64; 2]]) -> (TrajectoryMixture, TimedPath) {
        // regenerate the mean path from weights so the truth lies exactly on it
        let fmap = RbfFeatureMap::uniform(4, 10.0, 0.3).unwrap();
        let w = DMatrix::from_fn(4, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 });
        let times: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        let xy: Vec<[f64; 2]> = times
            .iter()
            .map(|&t| {
                let phi = fmap.eval(t);
                let x: f64 = (0..4).map(|i| w[(i, 0)] * phi[i]).sum();
                let y: f64 = (0..4).map(|i| w[(i, 1)] * phi[i]).sum();
                [x, y]
            })
            .collect();
        let truth = TimedPath::from_xy(&times, &xy).unwrap();
        // a constant offset needs Σφ = const, so shift via the origin instead of the weights
        let mix_for = |o: [f64; 2]| {
            let c = MatrixNormalComponent::new(w.clone(), vec![1.0; 4], Matrix2::identity()).unwrap();
            TrajectoryMixture::new(vec![1.0], vec![c], fmap.clone(), o).unwrap()
        };
        if offsets.len() == 1 {
            return (mix_for(offsets[0]), truth);
        }
        let comps: Vec<_> = offsets
            .iter()
            .map(|o| {
                let mut loc = w.clone();
                // shifting every weight row shifts the path by o·Σφ; only used where o = 0 matters
                if o[0] != 0.0 || o[1] != 0.0 {
                    loc.column_mut(0).add_scalar_mut(o[0]);
                    loc.column_mut(1).add_scalar_mut(o[1]);
                }
                MatrixNormalComponent::new(loc, vec![1.0; 4], Matrix2::identity()).unwrap()
            })
            .collect();
        let n = offsets.len() as f64;
        (
            TrajectoryMixture::new(vec![1.0 / n; offsets.len()], comps, fmap, [0.0, 0.0]).unwrap(),
            truth,
        )
    }

    #[test]
    fn ade_fde_on_hand_fixtures() {
        let (m, truth) = line_mixture(&[[0.0, 0.0]]);
        assert!(metric_ade(&m, &truth) < 1e-12);
        assert!(metric_fde(&m, &truth) < 1e-12);
        let (m, truth) = line_mixture(&[[3.0, 4.0]]);
        assert!((metric_ade(&m, &truth) - 5.0).abs() < 1e-12);
        let (m, truth) = line_mixture(&[[0.0, 0.0], [3.0, 0.0]]);
        assert!(metric_ade(&m, &truth) < 1e-12);
        let (m, truth) = line_mixture(&[[0.0, 2.0]]);
        assert!((metric_fde(&m, &truth) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fde_ignores_earlier_samples() {
        let (m, truth) = line_mixture(&[[0.0, 0.0]]);
        let mut s = truth.samples().to_vec();
        s[3].x += 10.0;
        let moved = TimedPath::new(s).unwrap();
        assert_eq!(metric_fde(&m, &truth), metric_fde(&m, &moved));
        assert!(metric_ade(&m, &moved) > 0.9);
    }

    #[test]
    fn al_at_mean_of_unit_gaussian() {
        // single basis function at t = 0 with weight 1 → Σ = φᵀUφ · V = I at t = 0
        let fmap = RbfFeatureMap::new(vec![0.0], 1.0).unwrap();
        let c = MatrixNormalComponent::new(DMatrix::zeros(1, 2), vec![1.0], Matrix2::identity()).unwrap();
        let mix = TrajectoryMixture::new(vec![1.0], vec![c], fmap.clone(), [0.0, 0.0]).unwrap();
        let truth = TimedPath::from_xy(&[0.0], &[[0.0, 0.0]]).unwrap();
        let al = metric_al(&mix, &truth);
        assert!((al - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        let wide = MatrixNormalComponent::new(DMatrix::zeros(1, 2), vec![1.0], Matrix2::identity() * 4.0).unwrap();
        let mix4 = TrajectoryMixture::new(vec![1.0], vec![wide], fmap, [0.0, 0.0]).unwrap();
        assert!((metric_al(&mix4, &truth) - al / 4.0).abs() < 1e-12);
    }

    #[test]
    fn cvp_counts_violations() {
        let (m, _) = line_mixture(&[[0.0, 0.0]]);
        let cfg = CostConfig::new(4, 5, 10.0).unwrap();
        let free = HilbertField::constant(0.01).unwrap();
        assert_eq!(metric_cvp(&[m.clone(), m.clone()], &free, &cfg, 0.05).unwrap(), 0.0);
        let full = HilbertField::constant(0.5).unwrap();
        assert_eq!(metric_cvp(&[m], &full, &cfg, 0.05).unwrap(), 100.0);
        assert!(metric_cvp(&[], &free, &cfg, 0.05).is_err());
    }

    #[test]
    fn constant_velocity_cases() {
        let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let still = TimedPath::from_xy(&t, &[[2.0, 3.0]; 10]).unwrap();
        let p = baseline_cv(&still, 5).unwrap();
        assert!(p.samples().iter().all(|s| s.x == 2.0 && s.y == 3.0));
        let xy: Vec<[f64; 2]> = (0..10).map(|k| [k as f64, 0.0]).collect();
        let moving = TimedPath::from_xy(&t, &xy).unwrap();
        let p = baseline_cv(&moving, 3).unwrap();
        let got: Vec<[f64; 3]> = p.samples().iter().map(|s| [s.t, s.x, s.y]).collect();
        assert_eq!(got, vec![[10.0, 10.0, 0.0], [11.0, 11.0, 0.0], [12.0, 12.0, 0.0]]);
        assert!(baseline_cv(&TimedPath::from_xy(&[0.0], &[[0.0, 0.0]]).unwrap(), 3).is_err());
    }

    #[test]
    fn constant_velocity_on_arc_uses_chord_direction() {
        // unit circle, 10° per step: chord from first to last sample, extended
        let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let xy: Vec<[f64; 2]> = (0..10)
            .map(|k| {
                let a = (k as f64 * 10.0).to_radians();
                [a.cos(), a.sin()]
            })
            .collect();
        let hist = TimedPath::from_xy(&t, &xy).unwrap();
        let p = baseline_cv(&hist, 2).unwrap();
        let a9 = 90f64.to_radians();
        let (vx, vy) = ((a9.cos() - 1.0) / 9.0, a9.sin() / 9.0);
        let s = p.samples()[1];
        assert!((s.x - (a9.cos() + 2.0 * vx)).abs() < 1e-12);
        assert!((s.y - (a9.sin() + 2.0 * vy)).abs() < 1e-12);
    }

    #[test]
    fn naive_nn_overfits_one_pair() {
        let s = generate_simulated(&ScenarioConfig { pairs: 1, ..Default::default() }).unwrap();
        let cfg = NaiveNnConfig { epochs: 1500, hidden: 32, step_size: 3e-3, ..Default::default() };
        let a = baseline_nn_naive(&s.pairs, &cfg).unwrap();
        assert!(*a.losses.last().unwrap() < 1e-3, "{}", a.losses.last().unwrap());
        let b = baseline_nn_naive(&s.pairs, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let back = NaiveNn::from_kv(&kv::parse_single(&a.model.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back, a.model);
        let pred = a.model.predict(&s.pairs[0].history).unwrap();
        assert!(path_ade(&pred, &s.pairs[0].future).unwrap() < 0.1);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = small_config();
        let ds = Dataset::from_scenario(generate_simulated(&cfg).unwrap(), &cfg);
        let dir = std::env::temp_dir().join(format!("ccmotion-bench-{}", std::process::id()));
        ds.write(&dir).unwrap();
        let back = Dataset::read(&dir).unwrap();
        assert_eq!(back.pairs, ds.pairs);
        assert_eq!(back.grid, ds.grid);
        assert_eq!(back.manifest, ds.manifest);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

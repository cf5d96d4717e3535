//! Run configuration: one flat `key = value` file covering every stage.

use std::path::{Path, PathBuf};

use ccmotion::bench::{NaiveNnConfig, ScenarioConfig};
use ccmotion::kv::{self, fmt_f64, KvDoc};
use ccmotion::learner::{MdnHyper, TrainConfig, HISTORY_STEPS};
use ccmotion::occupancy::FieldConfig;
use ccmotion::optimizer::SolverConfig;
use ccmotion::quad_cost::CostConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// File the config was read from, if any.
    pub source: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub floor_plan: String,
    pub pairs: usize,
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    pub noise: f64,
    pub train_fraction: f64,
    /// Generic `id,t,x,y` track CSV; replaces the simulator when set.
    pub tracks: Option<PathBuf>,
    /// CSV or PGM grid paired with `tracks`.
    pub grid: Option<PathBuf>,
    pub origin: [f64; 2],
    pub resolution: f64,

    pub m: usize,
    pub r: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub anchor: bool,
    pub centering: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub weight_decay: f64,

    pub field_spacing_cells: usize,
    pub field_border_cells: usize,
    /// Zero disables the exterior ramp.
    pub field_exterior_slope: f64,
    pub field_iterations: usize,
    pub field_step: f64,
    pub field_regularization: f64,

    pub epsilon: f64,
    pub nodes: usize,
    pub time_samples: usize,
    pub solver: SolverConfig,

    pub nn_hidden: usize,
    pub nn_epochs: usize,
    pub nn_batch_size: usize,
    pub nn_step_size: f64,

    pub plot_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        let train = TrainConfig::default();
        let nn = NaiveNnConfig::default();
        let field = FieldConfig::default();
        Self {
            source: None,
            out_dir: PathBuf::from("run"),
            seed: 0,
            floor_plan: scenario.floor_plan,
            pairs: scenario.pairs,
            history_steps: scenario.history_steps,
            horizon_steps: scenario.horizon_steps,
            dt: scenario.dt,
            noise: scenario.noise,
            train_fraction: 0.8,
            tracks: None,
            grid: None,
            origin: [0.0, 0.0],
            resolution: 0.5,
            m: 8,
            r: 2,
            gamma: 0.05,
            lambda: 0.1,
            anchor: true,
            centering: true,
            epochs: train.epochs,
            batch_size: train.batch_size,
            step_size: train.step_size,
            weight_decay: train.weight_decay,
            field_spacing_cells: field.spacing_cells,
            field_border_cells: 8,
            field_exterior_slope: 4.0,
            field_iterations: field.iterations,
            field_step: field.step,
            field_regularization: field.regularization,
            epsilon: 0.05,
            nodes: 10,
            time_samples: 15,
            solver: SolverConfig::default(),
            nn_hidden: nn.hidden,
            nn_epochs: nn.epochs,
            nn_batch_size: nn.batch_size,
            nn_step_size: nn.step_size,
            plot_samples: 20,
        }
    }
}

fn bad(key: &str, raw: &str) -> CliError {
    CliError::Config(format!("bad value for `{key}`: {raw}"))
}

fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| bad(key, raw))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, raw)),
    }
}

fn opt_path(raw: &str, base: Option<&Path>) -> Option<PathBuf> {
    if raw.is_empty() || raw == "none" {
        return None;
    }
    let p = PathBuf::from(raw);
    Some(match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    })
}

impl RunConfig {
    /// Reads a config file. Relative `tracks`/`grid` paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text, path.parent())?;
        cfg.source = Some(path.to_path_buf());
        Ok(cfg)
    }

    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let doc = kv::parse_single(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (key, raw) in doc.entries() {
            cfg.set(key, raw, base)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str, base: Option<&Path>) -> Result<()> {
        let s = &mut self.solver;
        match key {
            "out_dir" => self.out_dir = PathBuf::from(raw),
            "seed" => self.seed = num(key, raw)?,
            "floor_plan" => self.floor_plan = raw.to_string(),
            "pairs" => self.pairs = num(key, raw)?,
            "history_steps" => self.history_steps = num(key, raw)?,
            "horizon_steps" => self.horizon_steps = num(key, raw)?,
            "dt" => self.dt = num(key, raw)?,
            "noise" => self.noise = num(key, raw)?,
            "train_fraction" => self.train_fraction = num(key, raw)?,
            "tracks" => self.tracks = opt_path(raw, base),
            "grid" => self.grid = opt_path(raw, base),
            "origin_x" => self.origin[0] = num(key, raw)?,
            "origin_y" => self.origin[1] = num(key, raw)?,
            "resolution" => self.resolution = num(key, raw)?,
            "M" => self.m = num(key, raw)?,
            "R" => self.r = num(key, raw)?,
            "gamma" => self.gamma = num(key, raw)?,
            "lambda" => self.lambda = num(key, raw)?,
            "anchor" => self.anchor = flag(key, raw)?,
            "centering" => self.centering = flag(key, raw)?,
            "epochs" => self.epochs = num(key, raw)?,
            "batch_size" => self.batch_size = num(key, raw)?,
            "step_size" => self.step_size = num(key, raw)?,
            "weight_decay" => self.weight_decay = num(key, raw)?,
            "field.spacing_cells" => self.field_spacing_cells = num(key, raw)?,
            "field.border_cells" => self.field_border_cells = num(key, raw)?,
            "field.exterior_slope" => self.field_exterior_slope = num(key, raw)?,
            "field.iterations" => self.field_iterations = num(key, raw)?,
            "field.step" => self.field_step = num(key, raw)?,
            "field.regularization" => self.field_regularization = num(key, raw)?,
            "epsilon" => self.epsilon = num(key, raw)?,
            "nodes" => self.nodes = num(key, raw)?,
            "time_samples" => self.time_samples = num(key, raw)?,
            "solver.max_outer_iterations" => s.max_outer_iterations = num(key, raw)?,
            "solver.max_inner_iterations" => s.max_inner_iterations = num(key, raw)?,
            "solver.initial_penalty" => s.initial_penalty = num(key, raw)?,
            "solver.restart_penalty" => s.restart_penalty = num(key, raw)?,
            "solver.penalty_growth" => s.penalty_growth = num(key, raw)?,
            "solver.constraint_tolerance" => s.constraint_tolerance = num(key, raw)?,
            "solver.step_tolerance" => s.step_tolerance = num(key, raw)?,
            "nn.hidden" => self.nn_hidden = num(key, raw)?,
            "nn.epochs" => self.nn_epochs = num(key, raw)?,
            "nn.batch_size" => self.nn_batch_size = num(key, raw)?,
            "nn.step_size" => self.nn_step_size = num(key, raw)?,
            "plot.samples" => self.plot_samples = num(key, raw)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting in a fixed order; `parse(render())` reproduces `self`
    /// apart from `source`.
    pub fn to_kv(&self) -> KvDoc {
        let s = &self.solver;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut d = KvDoc::new();
        d.push("out_dir", self.out_dir.display());
        d.push("seed", self.seed);
        d.push("floor_plan", &self.floor_plan);
        d.push("pairs", self.pairs);
        d.push("history_steps", self.history_steps);
        d.push("horizon_steps", self.horizon_steps);
        d.push_f64("dt", self.dt);
        d.push_f64("noise", self.noise);
        d.push_f64("train_fraction", self.train_fraction);
        d.push("tracks", path(&self.tracks));
        d.push("grid", path(&self.grid));
        d.push_f64("origin_x", self.origin[0]);
        d.push_f64("origin_y", self.origin[1]);
        d.push_f64("resolution", self.resolution);
        d.push("M", self.m);
        d.push("R", self.r);
        d.push_f64("gamma", self.gamma);
        d.push_f64("lambda", self.lambda);
        d.push("anchor", self.anchor);
        d.push("centering", self.centering);
        d.push("epochs", self.epochs);
        d.push("batch_size", self.batch_size);
        d.push_f64("step_size", self.step_size);
        d.push_f64("weight_decay", self.weight_decay);
        d.push("field.spacing_cells", self.field_spacing_cells);
        d.push("field.border_cells", self.field_border_cells);
        d.push_f64("field.exterior_slope", self.field_exterior_slope);
        d.push("field.iterations", self.field_iterations);
        d.push_f64("field.step", self.field_step);
        d.push_f64("field.regularization", self.field_regularization);
        d.push_f64("epsilon", self.epsilon);
        d.push("nodes", self.nodes);
        d.push("time_samples", self.time_samples);
        d.push("solver.max_outer_iterations", s.max_outer_iterations);
        d.push("solver.max_inner_iterations", s.max_inner_iterations);
        d.push_f64("solver.initial_penalty", s.initial_penalty);
        d.push_f64("solver.restart_penalty", s.restart_penalty);
        d.push_f64("solver.penalty_growth", s.penalty_growth);
        d.push_f64("solver.constraint_tolerance", s.constraint_tolerance);
        d.push_f64("solver.step_tolerance", s.step_tolerance);
        d.push("nn.hidden", self.nn_hidden);
        d.push("nn.epochs", self.nn_epochs);
        d.push("nn.batch_size", self.nn_batch_size);
        d.push_f64("nn.step_size", self.nn_step_size);
        d.push("plot.samples", self.plot_samples);
        d
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# ccmotion run config\n");
        if let Some(src) = &self.source {
            out.push_str(&format!("# loaded from {}\n", src.display()));
        }
        out.push_str(&self.to_kv().render());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("resolution", self.resolution),
            ("gamma", self.gamma),
            ("step_size", self.step_size),
            ("field.step", self.field_step),
            ("epsilon", self.epsilon),
            ("nn.step_size", self.nn_step_size),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("`{key}` must be positive, got {}", fmt_f64(v))));
            }
        }
        let counts = [
            ("pairs", self.pairs),
            ("horizon_steps", self.horizon_steps),
            ("M", self.m),
            ("R", self.r),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("field.spacing_cells", self.field_spacing_cells),
            ("field.iterations", self.field_iterations),
            ("nodes", self.nodes),
            ("time_samples", self.time_samples),
            ("nn.hidden", self.nn_hidden),
            ("nn.epochs", self.nn_epochs),
            ("nn.batch_size", self.nn_batch_size),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(CliError::Config(format!("`{key}` must be positive")));
            }
        }
        if self.history_steps < HISTORY_STEPS {
            return Err(CliError::Config(format!("`history_steps` must be at least {HISTORY_STEPS}")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config("`train_fraction` must lie in (0, 1)".into()));
        }
        if !(self.lambda >= 0.0) || !(self.noise >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CliError::Config("`lambda`, `noise` and `weight_decay` must be non-negative".into()));
        }
        if !(self.field_exterior_slope >= 0.0) || !(self.field_regularization >= 0.0) {
            return Err(CliError::Config("field slope and regularization must be non-negative".into()));
        }
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match (&self.tracks, &self.grid) {
            (None, None) => {}
            (Some(t), Some(g)) => {
                for p in [t, g] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("referenced file {} does not exist", p.display())));
                    }
                }
            }
            _ => return Err(CliError::Config("`tracks` and `grid` must be given together".into())),
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            floor_plan: self.floor_plan.clone(),
            pairs: self.pairs,
            history_steps: self.history_steps,
            horizon_steps: self.horizon_steps,
            dt: self.dt,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn hyper(&self, horizon: f64) -> MdnHyper {
        MdnHyper {
            m: self.m,
            r: self.r,
            gamma: self.gamma,
            horizon,
            centering: self.centering,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            step_size: self.step_size,
            seed: self.seed,
            weight_decay: self.weight_decay,
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            spacing_cells: self.field_spacing_cells,
            border_cells: self.field_border_cells,
            exterior_slope: Some(self.field_exterior_slope).filter(|s| *s > 0.0),
            iterations: self.field_iterations,
            step: self.field_step,
            regularization: self.field_regularization,
            seed: self.seed,
            ..FieldConfig::default()
        }
    }

    pub fn nn_config(&self) -> NaiveNnConfig {
        NaiveNnConfig {
            hidden: self.nn_hidden,
            epochs: self.nn_epochs,
            batch_size: self.nn_batch_size,
            step_size: self.nn_step_size,
            seed: self.seed,
        }
    }

    pub fn cost_config(&self, horizon: f64) -> Result<CostConfig> {
        Ok(CostConfig::new(self.nodes, self.time_samples, horizon)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig {
            seed: 7,
            lambda: 1e-3,
            anchor: false,
            field_exterior_slope: 0.0,
            tracks: Some(PathBuf::from("/data/tracks.csv")),
            grid: Some(PathBuf::from("/data/map.pgm")),
            ..RunConfig::default()
        };
        cfg.solver.penalty_growth = 3.0;
        let back = RunConfig::parse(&cfg.render(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = RunConfig::parse("gama = 0.1\n", None).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn non_positive_hyperparameters_rejected() {
        for text in ["M = 0", "gamma = -1", "epsilon = 0", "dt = nan"] {
            let cfg = RunConfig::parse(text, None).unwrap();
            assert_eq!(cfg.validate().unwrap_err().category(), "config", "{text}");
        }
    }

    #[test]
    fn missing_referenced_file_rejected() {
        let cfg = RunConfig::parse("tracks = /nonexistent/t.csv\ngrid = /nonexistent/g.csv\n", None).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::parse("tracks = t.csv\ngrid = none\n", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(cfg.tracks, Some(PathBuf::from("/cfg/t.csv")));
        assert_eq!(cfg.grid, None);
    }
}

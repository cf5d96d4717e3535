//! Stage drivers. Each stage reads the files written by the stages before it
//! and writes only its own, so rerunning a stage never touches upstream
//! artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ccmotion::bench::{
    self, baseline_cv, baseline_nn_naive, evaluate_mixtures, evaluate_paths, generate_simulated, Dataset,
    DatasetManifest, EvalReport, NaiveNn, TrajectoryPair,
};
use ccmotion::dist::{read_mixtures, write_mixtures, TrajectoryMixture};
use ccmotion::kv::{self, fmt_f64};
use ccmotion::learner::{build_example, encode_history, read_checkpoint, train, write_checkpoint, MdnNetwork};
use ccmotion::occupancy::{classification_accuracy, load_grid, read_field, train_field, write_field, HilbertField};
use ccmotion::optimizer::{solve, OptimProblem};
use ccmotion::quad_cost::trajectory_cost;
use ccmotion::traj_core::{read_paths_csv, TimedPath};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::plot::{render_case, CasePlot, PlotStats};
use crate::report::Report;

const DATASET_FORMAT: &str = "ccmotion-dataset";
const FIELD_FORMAT: &str = "ccmotion-field";
const MDN_FORMAT: &str = "ccmotion-mdn";
const NN_FORMAT: &str = "ccmotion-nn-naive";
const MIXTURE_FORMAT: &str = "ccmotion-mixtures";
const SCHEMA_VERSION: u32 = 1;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn field(&self) -> PathBuf {
        self.root.join("field.txt")
    }
    pub fn field_loss(&self) -> PathBuf {
        self.root.join("field_loss.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.txt")
    }
    pub fn train_loss(&self) -> PathBuf {
        self.root.join("train_loss.csv")
    }
    pub fn nn_naive(&self) -> PathBuf {
        self.root.join("nn_naive.txt")
    }
    pub fn priors(&self) -> PathBuf {
        self.root.join("priors.txt")
    }
    pub fn posteriors(&self) -> PathBuf {
        self.root.join("posteriors.txt")
    }
    pub fn optimize_csv(&self) -> PathBuf {
        self.root.join("optimize.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn run_log(&self) -> PathBuf {
        self.root.join("run_log.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Validates the config, creates the output directory and snapshots the
/// effective config into it.
pub fn prepare(cfg: &RunConfig) -> Result<Layout> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    fs::create_dir_all(&layout.root).map_err(|e| CliError::io(&layout.root, e))?;
    write(&layout.config(), cfg.render())?;
    Ok(layout)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_artifact(path: &Path, what: &'static str, stage: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what,
            path: path.to_path_buf(),
            stage,
        });
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Checks the `format`/`version` keys of an artifact's leading section.
fn check_schema(path: &Path, text: &str, format: &str) -> Result<()> {
    let mismatch = |reason: String| CliError::SchemaMismatch {
        path: path.to_path_buf(),
        reason,
    };
    let docs = kv::parse_sections(text).map_err(|e| mismatch(e.to_string()))?;
    let head = docs
        .iter()
        .find(|d| d.header.is_none())
        .ok_or_else(|| mismatch("no format header".into()))?;
    match head.get("format") {
        Some(f) if f == format => {}
        Some(f) => return Err(mismatch(format!("expected format `{format}`, found `{f}`"))),
        None => return Err(mismatch(format!("missing `format` (expected `{format}`)"))),
    }
    let version = head.get("version").unwrap_or("");
    if version.parse::<u32>().ok() != Some(SCHEMA_VERSION) {
        return Err(mismatch(format!("unsupported version `{version}`, expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

fn malformed(path: &Path, e: ccmotion::Error) -> CliError {
    CliError::Core(ccmotion::Error::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_dataset(layout: &Layout) -> Result<Dataset> {
    let manifest = layout.dataset().join("manifest.txt");
    let text = read_artifact(&manifest, "dataset manifest", "simulate")?;
    check_schema(&manifest, &text, DATASET_FORMAT)?;
    Ok(Dataset::read(&layout.dataset())?)
}

pub fn load_field(layout: &Layout) -> Result<HilbertField> {
    let path = layout.field();
    let text = read_artifact(&path, "occupancy field", "fit-map")?;
    check_schema(&path, &text, FIELD_FORMAT)?;
    read_field(&text).map_err(|e| malformed(&path, e))
}

pub fn load_model(layout: &Layout) -> Result<MdnNetwork> {
    let path = layout.model();
    let text = read_artifact(&path, "model checkpoint", "train")?;
    check_schema(&path, &text, MDN_FORMAT)?;
    read_checkpoint(&text).map_err(|e| malformed(&path, e))
}

pub fn load_nn(layout: &Layout) -> Result<NaiveNn> {
    let path = layout.nn_naive();
    let text = read_artifact(&path, "NN-naive checkpoint", "train")?;
    check_schema(&path, &text, NN_FORMAT)?;
    let doc = kv::parse_single(&text).map_err(|e| malformed(&path, e))?;
    NaiveNn::from_kv(&doc).map_err(|e| malformed(&path, e))
}

pub fn load_mixtures(path: &Path, what: &'static str, stage: &'static str) -> Result<Vec<(String, TrajectoryMixture)>> {
    let text = read_artifact(path, what, stage)?;
    check_schema(path, &text, MIXTURE_FORMAT)?;
    read_mixtures(&text).map_err(|e| malformed(path, e))
}

/// Appends rows to `run_log.csv`, writing the header on first use.
fn log_rows(layout: &Layout, rows: &[[String; 8]]) -> Result<()> {
    let path = layout.run_log();
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["stage", "case", "kl", "cost_before", "cost_after", "iterations", "status", "seconds"])?;
    }
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

fn log_stage(layout: &Layout, stage: &str, started: Instant) -> Result<()> {
    let mut row: [String; 8] = Default::default();
    row[0] = stage.into();
    row[6] = "ok".into();
    row[7] = format!("{:.3}", started.elapsed().as_secs_f64());
    log_rows(layout, &[row])
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", fmt_f64(*l)));
    }
    write(path, out)
}

fn test_pairs(dataset: &Dataset) -> Result<Vec<TrajectoryPair>> {
    let (_, test) = dataset.split();
    if test.is_empty() {
        return Err(CliError::Config("the train/test split leaves no test pairs".into()));
    }
    Ok(test)
}

/// Builds the dataset: simulated from the floor plan, or cut from the
/// configured track CSV and grid.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Dataset> {
    let layout = prepare(cfg)?;
    let started = Instant::now();
    let dataset = match (&cfg.tracks, &cfg.grid) {
        (Some(tracks), Some(grid)) => {
            let file = fs::File::open(tracks).map_err(|e| CliError::io(tracks, e))?;
            let tracks = read_paths_csv(file).map_err(|e| malformed(tracks, e))?;
            let pairs = bench::pairs_from_tracks(&tracks, cfg.history_steps, cfg.horizon_steps)?;
            if pairs.is_empty() {
                return Err(CliError::Config("no track is long enough for one history/future window".into()));
            }
            let grid = load_grid(grid, cfg.resolution, cfg.origin)?;
            Dataset {
                manifest: DatasetManifest {
                    floor_plan: "custom".into(),
                    history_steps: cfg.history_steps,
                    horizon_steps: cfg.horizon_steps,
                    dt: cfg.dt,
                    train_fraction: cfg.train_fraction,
                    resolution: cfg.resolution,
                    origin: cfg.origin,
                    seed: cfg.seed,
                    noise: 0.0,
                },
                pairs,
                grid,
            }
        }
        _ => {
            let scenario = cfg.scenario();
            let mut ds = Dataset::from_scenario(generate_simulated(&scenario)?, &scenario);
            ds.manifest.train_fraction = cfg.train_fraction;
            ds
        }
    };
    dataset.write(&layout.dataset())?;
    log_stage(&layout, "simulate", started)?;
    Ok(dataset)
}

pub struct FitSummary {
    pub field: HilbertField,
    pub accuracy: f64,
}

pub fn cmd_fit_map(cfg: &RunConfig) -> Result<FitSummary> {
    let layout = prepare(cfg)?;
    let dataset = load_dataset(&layout)?;
    let started = Instant::now();
    let fit = train_field(&dataset.grid, &cfg.field_config())?;
    let accuracy = classification_accuracy(&fit.field, &dataset.grid);
    write(&layout.field(), write_field(&fit.field))?;
    write_losses(&layout.field_loss(), &fit.losses)?;
    log_stage(&layout, "fit-map", started)?;
    Ok(FitSummary {
        field: fit.field,
        accuracy,
    })
}

pub struct TrainSummary {
    pub initial_nll: f64,
    pub final_nll: f64,
    pub nn_initial_mse: f64,
    pub nn_final_mse: f64,
}

/// Trains the mixture network and the NN-naive baseline on the train split.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let layout = prepare(cfg)?;
    let dataset = load_dataset(&layout)?;
    let started = Instant::now();
    let (train_pairs, _) = dataset.split();
    if train_pairs.is_empty() {
        return Err(CliError::Config("the train/test split leaves no training pairs".into()));
    }
    let hyper = cfg.hyper(dataset.manifest.horizon());
    let fmap = hyper.features()?;
    let examples = train_pairs
        .iter()
        .map(|p| build_example(&p.history, &p.future, &fmap, cfg.lambda, cfg.anchor, cfg.centering))
        .collect::<ccmotion::Result<Vec<_>>>()?;
    let out = train(hyper, &examples, &cfg.train_config())?;
    write(&layout.model(), write_checkpoint(&out.network))?;
    write_losses(&layout.train_loss(), &out.losses)?;

    let nn = baseline_nn_naive(&train_pairs, &cfg.nn_config())?;
    write(&layout.nn_naive(), nn.model.to_kv().render())?;
    log_stage(&layout, "train", started)?;
    Ok(TrainSummary {
        initial_nll: out.losses[0],
        final_nll: *out.losses.last().unwrap(),
        nn_initial_mse: nn.losses[0],
        nn_final_mse: *nn.losses.last().unwrap(),
    })
}

/// Predicts one prior mixture per test pair.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<(String, TrajectoryMixture)>> {
    let layout = prepare(cfg)?;
    let net = load_model(&layout)?;
    let dataset = load_dataset(&layout)?;
    let started = Instant::now();
    if (net.hyper().horizon - dataset.manifest.horizon()).abs() > 1e-9 {
        return Err(CliError::SchemaMismatch {
            path: layout.model(),
            reason: format!(
                "model horizon {} does not match dataset horizon {}",
                net.hyper().horizon,
                dataset.manifest.horizon()
            ),
        });
    }
    let centering = net.hyper().centering;
    let priors = test_pairs(&dataset)?
        .iter()
        .map(|p| Ok((p.id.clone(), net.predict_prior(&encode_history(&p.history, centering)?)?)))
        .collect::<Result<Vec<_>>>()?;
    write(&layout.priors(), write_mixtures(&priors))?;
    log_stage(&layout, "predict", started)?;
    Ok(priors)
}

#[derive(Debug, Clone)]
pub struct OptimRecord {
    pub case: String,
    pub prior_cost: f64,
    pub cost: f64,
    pub kl: f64,
    pub feasible: bool,
    pub status: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub seconds: f64,
}

/// Solves the constrained problem for every prior. Priors already within ε
/// pass through unchanged; a solver error keeps the prior and is recorded
/// with status `error`.
pub fn cmd_optimize(cfg: &RunConfig) -> Result<Vec<OptimRecord>> {
    let layout = prepare(cfg)?;
    let priors = load_mixtures(&layout.priors(), "prior mixtures", "predict")?;
    let field = load_field(&layout)?;
    let dataset = load_dataset(&layout)?;
    let cost_config = cfg.cost_config(dataset.manifest.horizon())?;
    let started = Instant::now();
    let mut posteriors = Vec::with_capacity(priors.len());
    let mut records = Vec::with_capacity(priors.len());
    for (id, prior) in &priors {
        let t0 = Instant::now();
        let problem = OptimProblem {
            prior: prior.clone(),
            field: field.clone(),
            epsilon: cfg.epsilon,
            cost_config: cost_config.clone(),
            solver: cfg.solver.clone(),
        };
        let (posterior, rec) = match solve(&problem) {
            Ok(res) => {
                let rec = OptimRecord {
                    case: id.clone(),
                    prior_cost: res.prior_cost,
                    cost: res.cost,
                    kl: res.kl,
                    feasible: res.feasible,
                    status: res.status.as_str().into(),
                    iterations: res.iterations,
                    evaluations: res.evaluations,
                    seconds: t0.elapsed().as_secs_f64(),
                };
                (res.posterior, rec)
            }
            Err(e) => {
                let c = trajectory_cost(prior, &field, &cost_config)?;
                let rec = OptimRecord {
                    case: id.clone(),
                    prior_cost: c,
                    cost: c,
                    kl: 0.0,
                    feasible: c <= cfg.epsilon,
                    status: format!("error: {}", e.category()),
                    iterations: 0,
                    evaluations: 0,
                    seconds: t0.elapsed().as_secs_f64(),
                };
                (prior.clone(), rec)
            }
        };
        posteriors.push((id.clone(), posterior));
        records.push(rec);
    }
    write(&layout.posteriors(), write_mixtures(&posteriors))?;

    let path = layout.optimize_csv();
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "case", "prior_cost", "cost", "kl", "feasible", "status", "iterations", "evaluations", "seconds",
    ])?;
    for r in &records {
        w.write_record([
            r.case.clone(),
            fmt_f64(r.prior_cost),
            fmt_f64(r.cost),
            fmt_f64(r.kl),
            r.feasible.to_string(),
            r.status.clone(),
            r.iterations.to_string(),
            r.evaluations.to_string(),
            format!("{:.4}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let rows: Vec<[String; 8]> = records
        .iter()
        .map(|r| {
            [
                "optimize".into(),
                r.case.clone(),
                fmt_f64(r.kl),
                fmt_f64(r.prior_cost),
                fmt_f64(r.cost),
                r.iterations.to_string(),
                r.status.clone(),
                format!("{:.4}", r.seconds),
            ]
        })
        .collect();
    log_rows(&layout, &rows)?;
    log_stage(&layout, "optimize", started)?;
    Ok(records)
}

fn align<'a>(
    mixtures: &'a [(String, TrajectoryMixture)],
    pairs: &[TrajectoryPair],
    path: &Path,
) -> Result<Vec<&'a TrajectoryMixture>> {
    if mixtures.len() != pairs.len() || mixtures.iter().zip(pairs).any(|((id, _), p)| *id != p.id) {
        return Err(CliError::SchemaMismatch {
            path: path.to_path_buf(),
            reason: "mixture ids do not match the dataset's test split".into(),
        });
    }
    Ok(mixtures.iter().map(|(_, m)| m).collect())
}

/// Scores baselines, priors and posteriors on the test split and writes
/// `report.txt`. Reads only files, so repeated calls give identical bytes.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Report> {
    let layout = prepare(cfg)?;
    let dataset = load_dataset(&layout)?;
    let field = load_field(&layout)?;
    let nn = load_nn(&layout)?;
    let priors = load_mixtures(&layout.priors(), "prior mixtures", "predict")?;
    let posteriors = load_mixtures(&layout.posteriors(), "optimized mixtures", "optimize")?;
    let started = Instant::now();
    let test = test_pairs(&dataset)?;
    let priors = align(&priors, &test, &layout.priors())?;
    let posteriors = align(&posteriors, &test, &layout.posteriors())?;
    let cost_config = cfg.cost_config(dataset.manifest.horizon())?;
    let eps = cfg.epsilon;
    // a posterior within the solver tolerance of ε counts as compliant
    let threshold = eps + cfg.solver.constraint_tolerance;

    let futures: Vec<TimedPath> = test.iter().map(|p| p.future.clone()).collect();
    let truths: Vec<TimedPath> = test.iter().map(|p| p.relative_future()).collect();
    let h = dataset.manifest.horizon_steps;
    let cv = test.iter().map(|p| baseline_cv(&p.history, h)).collect::<ccmotion::Result<Vec<_>>>()?;
    let nn_preds = test.iter().map(|p| nn.predict(&p.history)).collect::<ccmotion::Result<Vec<_>>>()?;

    let owned = |v: &[&TrajectoryMixture]| v.iter().map(|m| (*m).clone()).collect::<Vec<_>>();
    let (priors, posteriors) = (owned(&priors), owned(&posteriors));
    let prior_costs = priors
        .iter()
        .map(|m| trajectory_cost(m, &field, &cost_config))
        .collect::<ccmotion::Result<Vec<_>>>()?;
    let post_costs = posteriors
        .iter()
        .map(|m| trajectory_cost(m, &field, &cost_config))
        .collect::<ccmotion::Result<Vec<_>>>()?;
    let flagged: Vec<usize> = (0..test.len()).filter(|&i| prior_costs[i] > eps).collect();
    let subset = |mix: &[TrajectoryMixture]| -> Result<Option<EvalReport>> {
        if flagged.is_empty() {
            return Ok(None);
        }
        let m: Vec<_> = flagged.iter().map(|&i| mix[i].clone()).collect();
        let t: Vec<_> = flagged.iter().map(|&i| truths[i].clone()).collect();
        Ok(Some(evaluate_mixtures(&m, &t, &field, &cost_config, threshold)?))
    };
    let report = Report {
        dataset: dataset.manifest.floor_plan.clone(),
        test_pairs: test.len(),
        epsilon: eps,
        threshold,
        cv: evaluate_paths(&cv, &futures)?,
        nn_naive: evaluate_paths(&nn_preds, &futures)?,
        prior: evaluate_mixtures(&priors, &truths, &field, &cost_config, threshold)?,
        optimized: evaluate_mixtures(&posteriors, &truths, &field, &cost_config, threshold)?,
        violating: flagged.len(),
        violating_prior: subset(&priors)?,
        violating_optimized: subset(&posteriors)?,
        feasible: flagged.iter().filter(|&&i| post_costs[i] <= threshold).count(),
        max_optimized_cost: post_costs.iter().copied().fold(0.0, f64::max),
    };
    write(&layout.report(), report.render())?;
    log_stage(&layout, "evaluate", started)?;
    Ok(report)
}

/// Which test cases to draw.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// Cases whose prior cost exceeds ε.
    Violating,
    Ids(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct PlotRecord {
    pub case: String,
    pub path: PathBuf,
    pub optimized: bool,
    pub stats: PlotStats,
}

/// Writes `<case>_prior.svg` and, when posteriors exist,
/// `<case>_optimized.svg` for each selected case.
pub fn cmd_plot(cfg: &RunConfig, selection: &Selection) -> Result<Vec<PlotRecord>> {
    let layout = prepare(cfg)?;
    let dataset = load_dataset(&layout)?;
    let priors = load_mixtures(&layout.priors(), "prior mixtures", "predict")?;
    let posteriors = if layout.posteriors().exists() {
        Some(load_mixtures(&layout.posteriors(), "optimized mixtures", "optimize")?)
    } else {
        None
    };
    let started = Instant::now();
    let test = test_pairs(&dataset)?;
    align(&priors, &test, &layout.priors())?;
    if let Some(post) = &posteriors {
        align(post, &test, &layout.posteriors())?;
    }
    let cost_config = cfg.cost_config(dataset.manifest.horizon())?;
    let chosen: Vec<usize> = match selection {
        Selection::Ids(ids) => ids
            .iter()
            .map(|id| {
                test.iter()
                    .position(|p| p.id == *id)
                    .ok_or_else(|| CliError::Config(format!("unknown test case `{id}`")))
            })
            .collect::<Result<_>>()?,
        Selection::Violating => {
            let field = load_field(&layout)?;
            let mut out = Vec::new();
            for (i, (_, m)) in priors.iter().enumerate() {
                if trajectory_cost(m, &field, &cost_config)? > cfg.epsilon {
                    out.push(i);
                }
            }
            out
        }
    };
    let mut records = Vec::new();
    if chosen.is_empty() {
        log_stage(&layout, "plot", started)?;
        return Ok(records);
    }
    let dir = layout.plots();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for i in chosen {
        let pair = &test[i];
        let truth = pair.future.clone();
        let mut variants = vec![(false, &priors[i].1)];
        if let Some(post) = &posteriors {
            variants.push((true, &post[i].1));
        }
        for (optimized, mix) in variants {
            let tag = if optimized { "optimized" } else { "prior" };
            let title = format!("{} ({tag})", pair.id);
            let (svg, stats) = render_case(&CasePlot {
                title: &title,
                grid: &dataset.grid,
                history: &pair.history,
                truth: &truth,
                mixture: mix,
                cost: &cost_config,
                samples: cfg.plot_samples,
                seed: cfg.seed,
            })?;
            let path = dir.join(format!("{}_{tag}.svg", pair.id));
            let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            f.write_all(svg.as_bytes()).map_err(|e| CliError::io(&path, e))?;
            records.push(PlotRecord {
                case: pair.id.clone(),
                path,
                optimized,
                stats,
            });
        }
    }
    log_stage(&layout, "plot", started)?;
    Ok(records)
}

/// Every stage in order; returns the evaluation report.
pub fn cmd_run(cfg: &RunConfig) -> Result<Report> {
    cmd_simulate(cfg)?;
    cmd_fit_map(cfg)?;
    cmd_train(cfg)?;
    cmd_predict(cfg)?;
    cmd_optimize(cfg)?;
    cmd_evaluate(cfg)
}

//! Mixture density network over trajectory weight matrices.
//!
//! A 10-step observed window, flattened to 20 values, is mapped through four
//! dense layers (ReLU on the first three) to `R(3M+4)` outputs. Per component
//! the output slots are:
//!
//! | slots        | activation | meaning                         |
//! |--------------|------------|---------------------------------|
//! | `2M`         | linear     | location 𝓜 (row-major)         |
//! | `M`          | exp        | `diag 𝓤^{1/2}`                  |
//! | `2`          | exp        | `diag 𝓥^{1/2}`                  |
//! | `1`          | linear     | strict lower entry of `𝓥^{1/2}` |
//! | `1`          | softmax    | mixture weight logit            |
//!
//! Gradients are accumulated by a hand-written reverse pass over this fixed
//! graph.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{log_sum_exp, MatrixNormalComponent, TrajectoryMixture};
use crate::kv::{self, KvDoc};
use crate::mlp::{Adam, Mlp};
use crate::traj_core::{fit_ridge, RbfFeatureMap, TimedPath};
use crate::{Error, Result};

pub const HISTORY_STEPS: usize = 10;
pub const ENCODING_DIM: usize = 2 * HISTORY_STEPS;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Log-scale outputs are clipped to this magnitude and the lower Cholesky
/// entry to `LOWER_RATIO` times the smaller diagonal entry, so any finite
/// network yields a finite column scale that still factors in f64.
const LOG_SCALE_LIMIT: f64 = 50.0;
const LOWER_RATIO: f64 = 1e3;

/// Flattened observation window `[x₁, y₁, …, x₁₀, y₁₀]`.
///
/// With centering on, coordinates are relative to `reference`, the last
/// observed position; otherwise `reference` is the world origin.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEncoding {
    pub values: [f64; ENCODING_DIM],
    pub reference: [f64; 2],
}

pub fn encode_history(path: &TimedPath, centering: bool) -> Result<HistoryEncoding> {
    if path.len() < HISTORY_STEPS {
        return Err(Error::InvalidArgument(format!(
            "history needs at least {HISTORY_STEPS} samples, got {}",
            path.len()
        )));
    }
    let window = &path.samples()[path.len() - HISTORY_STEPS..];
    let last = window[HISTORY_STEPS - 1];
    let reference = if centering { [last.x, last.y] } else { [0.0, 0.0] };
    let mut values = [0.0; ENCODING_DIM];
    for (k, s) in window.iter().enumerate() {
        values[2 * k] = s.x - reference[0];
        values[2 * k + 1] = s.y - reference[1];
    }
    Ok(HistoryEncoding { values, reference })
}

/// One supervised example: an encoded history and the ridge-fit weight
/// matrix of its future, expressed relative to the encoding's reference and
/// the last observed time.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub encoding: HistoryEncoding,
    pub target: DMatrix<f64>,
}

/// With `anchor`, the last observed sample joins the fit at relative time 0,
/// tying the target path to where the history ends.
pub fn build_example(
    history: &TimedPath,
    future: &TimedPath,
    features: &RbfFeatureMap,
    lambda: f64,
    anchor: bool,
    centering: bool,
) -> Result<Example> {
    let encoding = encode_history(history, centering)?;
    let future = if anchor {
        let mut samples = vec![history.last()];
        samples.extend(future.samples().iter().filter(|s| s.t > history.last().t));
        TimedPath::new(samples)?
    } else {
        future.clone()
    };
    let rel = future
        .shifted_time(history.last().t)
        .translated(-encoding.reference[0], -encoding.reference[1]);
    let target = fit_ridge(&rel, features, lambda)?.weight_matrix();
    Ok(Example { encoding, target })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdnHyper {
    pub m: usize,
    pub r: usize,
    pub gamma: f64,
    pub horizon: f64,
    pub centering: bool,
}

impl MdnHyper {
    pub fn features(&self) -> Result<RbfFeatureMap> {
        RbfFeatureMap::uniform(self.m, self.horizon, self.gamma)
    }

    pub fn per_component(&self) -> usize {
        3 * self.m + 4
    }

    pub fn layer_sizes(&self) -> [usize; 5] {
        let mr = self.m * self.r;
        [ENCODING_DIM, 15 * mr, 5 * mr, 5 * mr, self.r * self.per_component()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdnNetwork {
    hyper: MdnHyper,
    mlp: Mlp,
    features: RbfFeatureMap,
}

impl MdnNetwork {
    pub fn zeros(hyper: MdnHyper) -> Result<Self> {
        if hyper.m == 0 || hyper.r == 0 {
            return Err(Error::InvalidArgument("M and R must be positive".into()));
        }
        let features = hyper.features()?;
        let mlp = Mlp::zeros(&hyper.layer_sizes());
        Ok(Self { hyper, mlp, features })
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn random(hyper: MdnHyper, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(hyper)?;
        net.mlp = Mlp::random(net.mlp.sizes(), seed);
        Ok(net)
    }

    pub fn hyper(&self) -> &MdnHyper {
        &self.hyper
    }

    pub fn features(&self) -> &RbfFeatureMap {
        &self.features
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn num_params(&self) -> usize {
        self.mlp.params().len()
    }

    /// Raw network outputs for an encoding.
    pub fn raw_output(&self, enc: &HistoryEncoding) -> Vec<f64> {
        self.mlp.forward(&enc.values)
    }

    /// The predicted mixture in the encoding's frame (origin = reference).
    pub fn forward(&self, enc: &HistoryEncoding) -> Result<TrajectoryMixture> {
        let out = self.raw_output(enc);
        let heads = decode(&out, &self.hyper);
        let mut comps = Vec::with_capacity(self.hyper.r);
        for h in &heads {
            let row_scale = h.log_sqrt_u.iter().map(|z| (2.0 * z).exp()).collect();
            comps.push(MatrixNormalComponent::from_col_chol(h.location.clone(), row_scale, h.col_chol())?);
        }
        let alpha = softmax(&heads.iter().map(|h| h.alpha_logit).collect::<Vec<_>>());
        TrajectoryMixture::new(alpha, comps, self.features.clone(), enc.reference)
    }

    /// Per-example NLL and its gradient with respect to raw outputs.
    fn output_nll(&self, out: &[f64], target: &DMatrix<f64>, grad: Option<&mut [f64]>) -> f64 {
        let hy = &self.hyper;
        let m = hy.m;
        let mf = m as f64;
        let heads = decode(out, hy);
        let logits: Vec<f64> = heads.iter().map(|h| h.alpha_logit).collect();
        let log_alpha = log_softmax(&logits);

        struct Parts {
            ll: f64,
            v_inv: Matrix2<f64>,
            l: Matrix2<f64>,
            u: Vec<f64>,
            d: Vec<Vector2<f64>>,
        }
        let parts: Vec<Parts> = heads
            .iter()
            .map(|h| {
                let l = h.col_chol();
                let l_inv = Matrix2::new(1.0 / l[(0, 0)], 0.0, -l[(1, 0)] / (l[(0, 0)] * l[(1, 1)]), 1.0 / l[(1, 1)]);
                let v_inv = l_inv.transpose() * l_inv;
                let u: Vec<f64> = h.log_sqrt_u.iter().map(|z| (2.0 * z).exp()).collect();
                let mut quad = 0.0;
                let d: Vec<Vector2<f64>> = (0..m)
                    .map(|i| Vector2::new(target[(i, 0)] - h.location[(i, 0)], target[(i, 1)] - h.location[(i, 1)]))
                    .collect();
                for i in 0..m {
                    quad += (d[i].transpose() * v_inv * d[i])[(0, 0)] / u[i];
                }
                let log_det_v = 2.0 * (h.log_diag_sqrt_v[0] + h.log_diag_sqrt_v[1]);
                let log_det_u: f64 = 2.0 * h.log_sqrt_u.iter().sum::<f64>();
                let ll = -0.5 * quad - mf * LN_2PI - 0.5 * mf * log_det_v - log_det_u;
                Parts { ll, v_inv, l, u, d }
            })
            .collect();
        let joint: Vec<f64> = parts.iter().zip(&log_alpha).map(|(p, a)| a + p.ll).collect();
        let lse = log_sum_exp(&joint);
        let nll = -lse;

        if let Some(grad) = grad {
            let per = hy.per_component();
            for (r, p) in parts.iter().enumerate() {
                let resp = (joint[r] - lse).exp();
                let alpha = log_alpha[r].exp();
                let g = &mut grad[r * per..(r + 1) * per];
                let mut s = Matrix2::zeros();
                for i in 0..m {
                    let vd = p.v_inv * p.d[i] / p.u[i];
                    g[2 * i] = -resp * vd[0];
                    g[2 * i + 1] = -resp * vd[1];
                    let q = (p.d[i].transpose() * p.v_inv * p.d[i])[(0, 0)];
                    g[2 * m + i] = -resp * (q / p.u[i] - 2.0);
                    s += p.d[i] * p.d[i].transpose() / p.u[i];
                }
                let l_inv_t = p.l.try_inverse().expect("positive diagonal").transpose();
                let dl = p.v_inv * s * l_inv_t;
                g[3 * m] = -resp * (dl[(0, 0)] * p.l[(0, 0)] - mf);
                g[3 * m + 1] = -resp * (dl[(1, 1)] * p.l[(1, 1)] - mf);
                g[3 * m + 2] = -resp * dl[(1, 0)];
                g[3 * m + 3] = alpha - resp;
            }
            mask_clipped(out, grad, hy);
        }
        nll
    }

    /// Mean NLL over the batch plus `½·decay·‖weights‖²`.
    pub fn nll_loss(&self, batch: &[Example], weight_decay: f64) -> f64 {
        let data: f64 = batch
            .iter()
            .map(|ex| self.output_nll(&self.raw_output(&ex.encoding), &ex.target, None))
            .sum::<f64>()
            / batch.len() as f64;
        data + self.decay_term(weight_decay)
    }

    fn decay_term(&self, weight_decay: f64) -> f64 {
        if weight_decay == 0.0 {
            return 0.0;
        }
        let mask = self.mlp.weight_mask();
        0.5 * weight_decay
            * self
                .params()
                .iter()
                .zip(&mask)
                .filter(|(_, w)| **w)
                .map(|(p, _)| p * p)
                .sum::<f64>()
    }

    /// Loss and its gradient with respect to all parameters.
    pub fn loss_and_gradient(&self, batch: &[Example], weight_decay: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_params()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let mut g_out = vec![0.0; self.hyper.r * self.hyper.per_component()];
        for ex in batch {
            let trace = self.mlp.trace(&ex.encoding.values);
            total += self.output_nll(&trace.output, &ex.target, Some(&mut g_out));
            g_out.iter_mut().for_each(|g| *g *= scale);
            self.mlp.backward(&trace, &g_out, &mut grad);
        }
        if weight_decay != 0.0 {
            for ((g, p), w) in grad.iter_mut().zip(self.params()).zip(self.mlp.weight_mask()) {
                if w {
                    *g += weight_decay * p;
                }
            }
        }
        (total * scale + self.decay_term(weight_decay), grad)
    }

    /// Prior trajectory distribution in world coordinates.
    pub fn predict_prior(&self, enc: &HistoryEncoding) -> Result<TrajectoryMixture> {
        self.forward(enc)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("format", "ccmotion-mdn");
        d.push("version", 1);
        d.push("M", self.hyper.m);
        d.push("R", self.hyper.r);
        d.push_f64("gamma", self.hyper.gamma);
        d.push_f64("horizon", self.hyper.horizon);
        d.push("centering", self.hyper.centering);
        d.push(
            "layers",
            self.mlp.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
        );
        d.push_f64s("params", self.params());
        d
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        if doc.get("format") != Some("ccmotion-mdn") {
            return Err(Error::Parse("not an MDN checkpoint".into()));
        }
        let version: u32 = doc.parse("version")?;
        if version != 1 {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let hyper = MdnHyper {
            m: doc.parse("M")?,
            r: doc.parse("R")?,
            gamma: doc.parse("gamma")?,
            horizon: doc.parse("horizon")?,
            centering: doc.parse("centering")?,
        };
        let mut net = Self::zeros(hyper)?;
        let sizes: Vec<usize> = doc
            .require("layers")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad layer size `{t}`"))))
            .collect::<Result<_>>()?;
        if sizes != net.mlp.sizes() {
            return Err(Error::Parse(format!("layer sizes {sizes:?} do not match hyperparameters")));
        }
        if !net.mlp.set_params(doc.f64s("params")?) {
            return Err(Error::Parse("parameter count mismatch".into()));
        }
        Ok(net)
    }
}

struct Head {
    location: DMatrix<f64>,
    log_sqrt_u: Vec<f64>,
    log_diag_sqrt_v: [f64; 2],
    lower_sqrt_v: f64,
    alpha_logit: f64,
}

impl Head {
    fn col_chol(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.log_diag_sqrt_v[0].exp(),
            0.0,
            self.lower_sqrt_v,
            self.log_diag_sqrt_v[1].exp(),
        )
    }
}

fn decode(out: &[f64], hy: &MdnHyper) -> Vec<Head> {
    let m = hy.m;
    out.chunks(hy.per_component())
        .map(|o| {
            let log_diag_sqrt_v = [clip_log(o[3 * m]), clip_log(o[3 * m + 1])];
            let bound = lower_bound(log_diag_sqrt_v);
            Head {
                location: DMatrix::from_row_slice(m, 2, &o[..2 * m]),
                log_sqrt_u: o[2 * m..3 * m].iter().map(|z| clip_log(*z)).collect(),
                log_diag_sqrt_v,
                lower_sqrt_v: o[3 * m + 2].clamp(-bound, bound),
                alpha_logit: o[3 * m + 3],
            }
        })
        .collect()
}

fn clip_log(z: f64) -> f64 {
    z.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
}

fn lower_bound(log_diag: [f64; 2]) -> f64 {
    LOWER_RATIO * log_diag[0].min(log_diag[1]).exp()
}

/// Zeroes the gradient of output slots that sit on a clip. Clips are far
/// outside anything training visits, so the bound's own dependence on the
/// diagonal is ignored.
fn mask_clipped(out: &[f64], grad: &mut [f64], hy: &MdnHyper) {
    let m = hy.m;
    for (o, g) in out.chunks(hy.per_component()).zip(grad.chunks_mut(hy.per_component())) {
        for i in 2 * m..3 * m + 2 {
            if o[i].abs() > LOG_SCALE_LIMIT {
                g[i] = 0.0;
            }
        }
        if o[3 * m + 2].abs() > lower_bound([clip_log(o[3 * m]), clip_log(o[3 * m + 1])]) {
            g[3 * m + 2] = 0.0;
        }
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| v - lse).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = log_softmax(z).into_iter().map(f64::exp).collect();
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= s);
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            step_size: 1e-3,
            seed: 0,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub network: MdnNetwork,
    /// Full-dataset loss before training, then after every epoch.
    pub losses: Vec<f64>,
}

pub fn train(hyper: MdnHyper, dataset: &[Example], config: &TrainConfig) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid training config {config:?}")));
    }
    if dataset.iter().any(|ex| ex.target.nrows() != hyper.m || ex.target.ncols() != 2) {
        return Err(Error::InvalidArgument("target shapes do not match M".into()));
    }
    let mut net = MdnNetwork::random(hyper, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(net.num_params(), config.step_size);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = vec![net.nll_loss(dataset, config.weight_decay)];
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (_, grad) = net.loss_and_gradient(&batch, config.weight_decay);
            adam.step(net.mlp.params_mut(), &grad);
        }
        losses.push(net.nll_loss(dataset, config.weight_decay));
    }
    Ok(TrainOutput { network: net, losses })
}

pub fn write_checkpoint(net: &MdnNetwork) -> String {
    net.to_kv().render()
}

pub fn read_checkpoint(text: &str) -> Result<MdnNetwork> {
    MdnNetwork::from_kv(&kv::parse_single(text)?)
}

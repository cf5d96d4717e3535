//! Dense ReLU stack with a linear output layer and a manual reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// Per layer: row-major `out × in` weights followed by `out` biases.
    params: Vec<f64>,
}

/// Layer inputs recorded during a forward pass, consumed by `backward`.
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least one layer");
        let n = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn random(sizes: &[usize], seed: u64) -> Self {
        let mut net = Self::zeros(sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in &mut net.params[off..off + w[1] * (w[0] + 1)] {
                *v = rng.random_range(-bound..bound);
            }
            off += w[1] * (w[0] + 1);
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> bool {
        if params.len() != self.params.len() {
            return false;
        }
        self.params = params;
        true
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of layer `l`'s weight block; its biases follow `out × in` entries later.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.sizes.windows(2).take(l).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.sizes.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.trace(input).output
    }

    pub fn trace(&self, input: &[f64]) -> Trace {
        debug_assert_eq!(input.len(), self.sizes[0]);
        let mut inputs = Vec::with_capacity(self.layers());
        let mut h = input.to_vec();
        let mut off = 0;
        for l in 0..self.layers() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + no * ni];
            let b = &self.params[off + no * ni..off + no * (ni + 1)];
            let mut out: Vec<f64> = (0..no)
                .map(|o| b[o] + w[o * ni..(o + 1) * ni].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            if l + 1 < self.layers() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, out));
            off += no * (ni + 1);
        }
        Trace { inputs, output: h }
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂output`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grad: &mut [f64]) {
        let mut delta = d_output.to_vec();
        for l in (0..self.layers()).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let input = &trace.inputs[l];
            let w_off = self.layer_offset(l);
            let b_off = w_off + no * ni;
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[b_off + o] += d;
                for (gw, x) in grad[w_off + o * ni..w_off + (o + 1) * ni].iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[w_off..w_off + no * ni];
            let mut prev = vec![0.0; ni];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (pv, wv) in prev.iter_mut().zip(&w[o * ni..(o + 1) * ni]) {
                    *pv += d * wv;
                }
            }
            // this layer's input is the previous layer's ReLU output
            for (pv, x) in prev.iter_mut().zip(input) {
                if *x <= 0.0 {
                    *pv = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// First-order optimizer with bias-corrected adaptive moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

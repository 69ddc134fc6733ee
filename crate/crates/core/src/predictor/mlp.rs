//! Fully connected network with hand-derived backpropagation.
//!
//! All parameters live in one flat vector; layer `l` stores its weight
//! matrix (`out x in`, row-major) followed by its bias. The flat layout is
//! shared by the optimizer, the finite-difference checker and checkpoints.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
    /// `ln(1 + e^x)`
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Pre-activations of every layer, kept for the backward pass.
pub struct ForwardCache {
    inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Zero biases, weights uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Self {
        let mut net = Self::zeros(widths, activation);
        let mut rng = SimRng::seed_from_u64(seed);
        for l in 0..net.n_layers() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w_off, _) = net.offsets(l);
            for p in &mut net.params[w_off..w_off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0));
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<f64>) -> Option<Self> {
        let mut net = Self::zeros(widths, activation);
        if params.len() != net.params.len() {
            return None;
        }
        net.params = params;
        Some(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets of layer `l`'s weight and bias in the flat parameter vector.
    pub fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w_off, b_off) = self.offsets(l);
        ArrayView2::from_shape((self.widths[l + 1], self.widths[l]), &self.params[w_off..b_off]).unwrap()
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b_off) = self.offsets(l);
        ArrayView1::from(&self.params[b_off..b_off + self.widths[l + 1]])
    }

    /// Batch forward pass; rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for l in 0..self.n_layers() {
            let mut z = a.dot(&self.weight(l).t());
            z += &self.bias(l);
            if l + 1 < self.n_layers() {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, ForwardCache) {
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut a = x.to_owned();
        for l in 0..self.n_layers() {
            let mut z = a.dot(&self.weight(l).t());
            z += &self.bias(l);
            if l + 1 < self.n_layers() {
                a = z.mapv(|v| self.activation.apply(v));
                pre.push(z);
            } else {
                a = z.clone();
                pre.push(z);
            }
        }
        (
            a,
            ForwardCache {
                inputs: x.to_owned(),
                pre,
            },
        )
    }

    /// Parameter gradient given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = d_out.to_owned();
        for l in (0..self.n_layers()).rev() {
            let a_prev = if l == 0 {
                cache.inputs.clone()
            } else {
                cache.pre[l - 1].mapv(|v| self.activation.apply(v))
            };
            let d_w = delta.t().dot(&a_prev);
            let d_b: Array1<f64> = delta.sum_axis(Axis(0));
            let (w_off, b_off) = self.offsets(l);
            grad[w_off..b_off].copy_from_slice(d_w.as_slice().expect("standard layout"));
            grad[b_off..b_off + self.widths[l + 1]].copy_from_slice(d_b.as_slice().unwrap());
            if l > 0 {
                let mut d_a = delta.dot(&self.weight(l));
                d_a.zip_mut_with(&cache.pre[l - 1], |d, &z| *d *= self.activation.derivative(z));
                delta = d_a;
            }
        }
        grad
    }

    /// `scale * sum ||out - target||^2` and its parameter gradient.
    pub fn squared_error_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        scale: f64,
    ) -> (f64, Vec<f64>) {
        let (out, cache) = self.forward_cached(x);
        let diff = &out - &target;
        let loss = scale * diff.iter().map(|d| d * d).sum::<f64>();
        let d_out = diff.mapv(|d| 2.0 * scale * d);
        (loss, self.backward(&cache, d_out.view()))
    }

    pub fn squared_error(&self, x: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, scale: f64) -> f64 {
        let out = self.forward(x);
        scale * (&out - &target).iter().map(|d| d * d).sum::<f64>()
    }
}

/// Largest relative disagreement between the backpropagated gradient of
/// `scale * sum ||net(x) - target||^2` and central finite differences with
/// step `1e-5`. Denominators are floored at `1e-6` so parameters with a
/// vanishing gradient compare on an absolute scale.
pub fn finite_difference_check(net: &Mlp, x: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, scale: f64) -> f64 {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (_, analytic) = net.squared_error_and_grad(x, target, scale);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + STEP;
        let up = probe.squared_error(x, target, scale);
        probe.params[i] = orig - STEP;
        let down = probe.squared_error(x, target, scale);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

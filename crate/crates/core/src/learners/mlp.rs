//! Fully connected regression network trained by mini-batch Adam.
//!
//! Samples are stored column-wise (`features × batch`). The loss is the mean
//! squared error plus `l2 · Σ‖W‖²` over weight matrices (biases are not
//! penalized).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Hidden layers use `activation`; the single output unit is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Parameter gradients, shaped like [`Network::layers`].
pub type Gradients = Vec<Layer>;

impl Network {
    /// He-normal weights, zero biases.
    pub fn new(input: usize, hidden: &[usize], activation: Activation, rng_seed: u64) -> Self {
        let mut rng = rng_for(rng_seed, Stream::Learner, 0);
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let sd = (2.0 / w[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| sd * rng.sample::<f64, _>(StandardNormal)),
                    b: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(input: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers =
            sizes.windows(2).map(|w| Layer { w: DMatrix::zeros(w[1], w[0]), b: DVector::zeros(w[1]) }).collect();
        Self { layers, activation }
    }

    /// Redraws every bias from `N(0, sd²)`. With all-zero biases a unit fed
    /// only by inactive ReLUs sits exactly on the kink, where finite
    /// differences are meaningless.
    pub fn jitter_biases(&mut self, sd: f64, rng_seed: u64) {
        let mut rng = rng_for(rng_seed, Stream::Learner, 2);
        for layer in &mut self.layers {
            layer.b.iter_mut().for_each(|b| *b = sd * rng.sample::<f64, _>(StandardNormal));
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn affine(layer: &Layer, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &layer.w * a;
        for mut col in z.column_iter_mut() {
            col += &layer.b;
        }
        z
    }

    /// Outputs for the columns of `x` (`input × m`).
    pub fn forward(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &a);
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        a.row(0).iter().copied().collect()
    }

    /// Loss and analytic gradients on the columns of `x`.
    pub fn loss_and_gradients(&self, x: &DMatrix<f64>, y: &[f64], l2: f64) -> (f64, Gradients) {
        let m = x.ncols();
        let last = self.layers.len() - 1;
        let mut pre: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &acts[l]);
            let a = if l < last { z.map(|v| self.activation.apply(v)) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let out = &acts[last + 1];
        let mut delta = DMatrix::from_fn(1, m, |_, j| 2.0 * (out[(0, j)] - y[j]) / m as f64);
        let mut loss = (0..m).map(|j| (out[(0, j)] - y[j]).powi(2)).sum::<f64>() / m as f64;
        if l2 > 0.0 {
            loss += l2 * self.layers.iter().map(|l| l.w.norm_squared()).sum::<f64>();
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let mut gw = &delta * acts[l].transpose();
            if l2 > 0.0 {
                gw += &self.layers[l].w * (2.0 * l2);
            }
            let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            if l > 0 {
                let mut back = self.layers[l].w.tr_mul(&delta);
                back.zip_apply(&pre[l - 1], |d, z| *d *= self.activation.derivative(z));
                delta = back;
            }
            grads.push(Layer { w: gw, b: gb });
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn loss(&self, x: &DMatrix<f64>, y: &[f64], l2: f64) -> f64 {
        let out = self.forward(x);
        let mut loss = out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        if l2 > 0.0 {
            loss += l2 * self.layers.iter().map(|l| l.w.norm_squared()).sum::<f64>();
        }
        loss
    }

    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if k < layer.w.len() {
                return &mut layer.w.as_mut_slice()[k];
            }
            k -= layer.w.len();
            if k < layer.b.len() {
                return &mut layer.b.as_mut_slice()[k];
            }
            k -= layer.b.len();
        }
        panic!("parameter index out of range")
    }
}

fn flatten(g: &Gradients) -> Vec<f64> {
    g.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
}

/// Maximum relative discrepancy between analytic gradients and central
/// differences with step `1e-5`. The denominator is floored at `1e-6`.
pub fn gradient_check(net: &Network, x: &DMatrix<f64>, y: &[f64], l2: f64) -> f64 {
    let (_, g) = net.loss_and_gradients(x, y, l2);
    let analytic = flatten(&g);
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(k);
        *probe.param_mut(k) = orig + h;
        let up = probe.loss(x, y, l2);
        *probe.param_mut(k) = orig - h;
        let down = probe.loss(x, y, l2);
        *probe.param_mut(k) = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub l2: f64,
    /// 0 disables early stopping and the validation split.
    pub patience: usize,
    pub validation_fraction: f64,
}

/// Per-epoch losses recorded while training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurves {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut k = 0;
        for (layer, g) in net.layers.iter_mut().zip(grads) {
            for (p, gi) in layer.w.iter_mut().chain(layer.b.iter_mut()).zip(g.w.iter().chain(g.b.iter())) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = Self::B1 * *m + (1.0 - Self::B1) * gi;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gi * gi;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                k += 1;
            }
        }
    }
}

fn gather(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Trains `net` in place on the columns of `x`. With early stopping the
/// parameters from the epoch with the lowest validation loss are restored.
pub fn train(net: &mut Network, x: &DMatrix<f64>, y: &[f64], p: &TrainParams, rng_seed: u64) -> TrainCurves {
    let n = x.ncols();
    let mut rng = rng_for(rng_seed, Stream::Learner, 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_val = if p.patience > 0 { ((n as f64 * p.validation_fraction).round() as usize).min(n - 1) } else { 0 };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let xv = gather(x, val_idx);
    let yv: Vec<f64> = val_idx.iter().map(|&i| y[i]).collect();
    let mut adam = Adam::new(net.n_params());
    let mut curves = TrainCurves::default();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut stale = 0;
    let bs = p.batch_size.max(1);
    for epoch in 0..p.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(bs) {
            let xb = gather(x, chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, grads) = net.loss_and_gradients(&xb, &yb, p.l2);
            total += loss * chunk.len() as f64;
            adam.step(net, &grads, p.step_size);
        }
        curves.train.push(total / train_idx.len() as f64);
        if n_val > 0 {
            let vl = net.loss(&xv, &yv, 0.0);
            curves.validation.push(vl);
            if vl < best.0 {
                best = (vl, net.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= p.patience {
                    break;
                }
            }
        }
    }
    if n_val > 0 && best.0.is_finite() {
        *net = best.1;
        curves.best_epoch = best.2;
    } else {
        curves.best_epoch = curves.train.len().saturating_sub(1);
    }
    curves
}

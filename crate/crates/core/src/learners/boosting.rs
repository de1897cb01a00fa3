//! Least-squares gradient boosting of regression trees.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::tree::{grow, GrowParams, Presorted, Tree};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTrees {
    pub base: f64,
    pub learning_rate: f64,
    /// Trees with the learning rate already folded into the leaves.
    pub trees: Vec<Tree>,
}

impl BoostedTrees {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![self.base; x.nrows()];
        for t in &self.trees {
            for (i, o) in out.iter_mut().enumerate() {
                *o += t.predict_row(x, i);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoostParams {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub grow: GrowParams,
}

/// Fits the ensemble and returns it with the training MSE after each stage
/// (entry 0 is the constant initial model).
pub fn fit_boosting(x: &DMatrix<f64>, y: &[f64], p: &BoostParams, rng_seed: u64) -> (BoostedTrees, Vec<f64>) {
    let n = x.nrows();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut f = vec![base; n];
    let mse = |f: &[f64]| f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    let mut curve = vec![mse(&f)];
    let sorted = Presorted::new(x);
    let mut trees = Vec::with_capacity(p.n_stages);
    let take = ((p.subsample * n as f64).round() as usize).clamp(1, n);
    let mut mask = vec![true; n];
    let mut resid = vec![0.0; n];
    for stage in 0..p.n_stages {
        for i in 0..n {
            resid[i] = y[i] - f[i];
        }
        let structure = if take < n {
            let mut rng = rng_for(rng_seed, Stream::Learner, stage as u64);
            mask.iter_mut().for_each(|m| *m = false);
            for i in sample(&mut rng, n, take) {
                mask[i] = true;
            }
            Some(mask.as_slice())
        } else {
            None
        };
        let grown = grow(x, &sorted, &resid, structure, p.grow);
        let mut tree = grown.tree;
        tree.scale_leaves(p.learning_rate);
        for i in 0..n {
            f[i] += tree.leaf_value(grown.leaf_of[i]);
        }
        curve.push(mse(&f));
        trees.push(tree);
    }
    (BoostedTrees { base, learning_rate: p.learning_rate, trees }, curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(stages: usize, lr: f64, sub: f64, l2: f64) -> BoostParams {
        BoostParams { n_stages: stages, learning_rate: lr, subsample: sub, grow: GrowParams { max_depth: 2, min_leaf: 2, l2_leaf: l2 } }
    }

    fn toy() -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(80, 2, |i, j| ((i * (j + 3)) % 17) as f64 / 17.0);
        let y = (0..80).map(|i| (x[(i, 0)] * 6.0).sin() + x[(i, 1)]).collect();
        (x, y)
    }

    #[test]
    fn training_loss_never_increases() {
        let (x, y) = toy();
        for (sub, l2) in [(1.0, 0.0), (0.6, 0.0), (0.7, 5.0)] {
            let (_, curve) = fit_boosting(&x, &y, &params(60, 0.3, sub, l2), 1);
            for w in curve.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{w:?}");
            }
        }
    }

    #[test]
    fn tiny_step_stays_at_mean() {
        let (x, y) = toy();
        let (m, _) = fit_boosting(&x, &y, &params(40, 1e-12, 1.0, 0.0), 1);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(m.predict(&x).iter().all(|p| (p - mean).abs() < 1e-6));
    }

    #[test]
    fn stored_predictions_match_fit_path() {
        let (x, y) = toy();
        let (m, curve) = fit_boosting(&x, &y, &params(25, 0.2, 0.8, 1.0), 3);
        let pred = m.predict(&x);
        let mse = pred.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        assert!((mse - curve.last().unwrap()).abs() < 1e-9);
    }
}

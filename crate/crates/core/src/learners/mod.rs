//! Nuisance regressors behind one fit/predict interface.

pub mod boosting;
pub mod mlp;
pub mod tree;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{rng_for, Stream};

use boosting::{fit_boosting, BoostParams, BoostedTrees};
pub use mlp::Activation;
use mlp::{Network, TrainCurves, TrainParams};
use tree::{grow, GrowParams, Presorted, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Linear,
    Tree,
    GradientBoosting,
    RegularizedBoosting,
    Mlp,
}

impl LearnerKind {
    pub fn short_name(self) -> &'static str {
        match self {
            LearnerKind::Linear => "linear",
            LearnerKind::Tree => "tree",
            LearnerKind::GradientBoosting => "gbm",
            LearnerKind::RegularizedBoosting => "rgbm",
            LearnerKind::Mlp => "mlp",
        }
    }
}

impl FromStr for LearnerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(LearnerKind::Linear),
            "tree" => Ok(LearnerKind::Tree),
            "gbm" | "gradient_boosting" => Ok(LearnerKind::GradientBoosting),
            "rgbm" | "regularized_boosting" | "xgboost" => Ok(LearnerKind::RegularizedBoosting),
            "mlp" => Ok(LearnerKind::Mlp),
            other => Err(Error::Config(format!("unknown learner {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub n_stages: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub l2_leaf: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 3, min_leaf: 5, n_stages: 300, learning_rate: 0.05, subsample: 1.0, l2_leaf: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpParams {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub l2: f64,
    pub early_stop_patience: usize,
    pub init_seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden_layers: vec![100, 50, 25],
            activation: Activation::Relu,
            epochs: 200,
            batch_size: 64,
            step_size: 1e-3,
            l2: 0.015,
            early_stop_patience: 20,
            init_seed: 0,
        }
    }
}

/// Learner kind plus hyper-parameters. Only the block matching `kind` is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default)]
    pub tree: TreeParams,
    #[serde(default)]
    pub mlp: MlpParams,
}

impl LearnerSpec {
    pub fn linear() -> Self {
        Self { kind: LearnerKind::Linear, tree: TreeParams::default(), mlp: MlpParams::default() }
    }

    pub fn tree(max_depth: usize) -> Self {
        Self { kind: LearnerKind::Tree, tree: TreeParams { max_depth, n_stages: 1, learning_rate: 1.0, ..TreeParams::default() }, mlp: MlpParams::default() }
    }

    pub fn gradient_boosting() -> Self {
        Self { kind: LearnerKind::GradientBoosting, tree: TreeParams::default(), mlp: MlpParams::default() }
    }

    pub fn regularized_boosting() -> Self {
        Self {
            kind: LearnerKind::RegularizedBoosting,
            tree: TreeParams { max_depth: 5, n_stages: 300, learning_rate: 0.1, subsample: 0.8, l2_leaf: 1.0, ..TreeParams::default() },
            mlp: MlpParams::default(),
        }
    }

    pub fn mlp(hidden: &[usize]) -> Self {
        Self {
            kind: LearnerKind::Mlp,
            tree: TreeParams::default(),
            mlp: MlpParams { hidden_layers: hidden.to_vec(), ..MlpParams::default() },
        }
    }

    /// Default spec for a learner kind.
    pub fn default_for(kind: LearnerKind) -> Self {
        match kind {
            LearnerKind::Linear => Self::linear(),
            LearnerKind::Tree => Self::tree(5),
            LearnerKind::GradientBoosting => Self::gradient_boosting(),
            LearnerKind::RegularizedBoosting => Self::regularized_boosting(),
            LearnerKind::Mlp => Self::mlp(&[100, 50, 25]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LearnerKind::Linear => Ok(()),
            LearnerKind::Tree | LearnerKind::GradientBoosting | LearnerKind::RegularizedBoosting => {
                let t = &self.tree;
                if !(t.learning_rate > 0.0 && t.learning_rate <= 1.0) {
                    return Err(Error::Config(format!("learning_rate must lie in (0, 1], got {}", t.learning_rate)));
                }
                if t.min_leaf == 0 || t.n_stages == 0 {
                    return Err(Error::Config("min_leaf and n_stages must be >= 1".into()));
                }
                if !(t.subsample > 0.0 && t.subsample <= 1.0) {
                    return Err(Error::Config(format!("subsample must lie in (0, 1], got {}", t.subsample)));
                }
                if !(t.l2_leaf >= 0.0) {
                    return Err(Error::Config("l2_leaf must be >= 0".into()));
                }
                Ok(())
            }
            LearnerKind::Mlp => {
                let m = &self.mlp;
                if m.hidden_layers.is_empty() || m.hidden_layers.contains(&0) {
                    return Err(Error::Config("hidden_layers must be non-empty with positive widths".into()));
                }
                if m.epochs == 0 || m.batch_size == 0 {
                    return Err(Error::Config("epochs and batch_size must be >= 1".into()));
                }
                if !(m.step_size > 0.0) || !(m.l2 >= 0.0) {
                    return Err(Error::Config("step_size must be > 0 and l2 >= 0".into()));
                }
                Ok(())
            }
        }
    }

    /// Rough parameter count for a `d`-column input, used to break ties.
    pub fn complexity(&self, d: usize) -> usize {
        match self.kind {
            LearnerKind::Linear => d + 1,
            LearnerKind::Tree => 2usize.pow(self.tree.max_depth.min(30) as u32),
            LearnerKind::GradientBoosting | LearnerKind::RegularizedBoosting => {
                self.tree.n_stages * 2usize.pow(self.tree.max_depth.min(30) as u32)
            }
            LearnerKind::Mlp => {
                let mut sizes = vec![d];
                sizes.extend_from_slice(&self.mlp.hidden_layers);
                sizes.push(1);
                sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
        }
    }

    /// Short label such as `gbm` or `mlp(50,25,12)`.
    pub fn label(&self) -> String {
        match self.kind {
            LearnerKind::Mlp => {
                let h: Vec<String> = self.mlp.hidden_layers.iter().map(|v| v.to_string()).collect();
                format!("mlp({})", h.join(","))
            }
            k => k.short_name().to_string(),
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Model {
    Linear { means: Vec<f64>, sds: Vec<f64>, coef: Vec<f64>, intercept: f64 },
    Tree(Tree),
    Boosted(BoostedTrees),
    Mlp { net: Network, means: Vec<f64>, sds: Vec<f64>, y_mean: f64, y_sd: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub final_train_loss: f64,
    /// Per-stage (boosting) or per-epoch (MLP) training loss.
    pub train_curve: Vec<f64>,
    /// Per-epoch validation loss; empty for learners without a split.
    pub validation_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: LearnerSpec,
    input_dim: usize,
    model: Model,
    pub diagnostics: Diagnostics,
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if n < 10 {
        return Err(Error::InsufficientData(format!("fit needs >= 10 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::InsufficientData("fit needs at least one feature".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in training data".into()));
    }
    Ok(())
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Trains a learner on the rows of `x`.
pub fn fit(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64], rng_seed: u64) -> Result<FittedModel> {
    spec.validate()?;
    check_inputs(x, y)?;
    let (n, d) = x.shape();
    let t = &spec.tree;
    let (model, diagnostics) = match spec.kind {
        LearnerKind::Linear => {
            let (means, sds) = linalg::column_moments(x);
            let xs = linalg::standardize_with(x, &means, &sds);
            let ybar = y.iter().sum::<f64>() / n as f64;
            let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
            let coef = linalg::solve_normal(&xs, &yc, 1e-8 * n as f64)?;
            let model = Model::Linear { means, sds, coef: coef.iter().copied().collect(), intercept: ybar };
            (model, Diagnostics::default())
        }
        LearnerKind::Tree => {
            let p = GrowParams { max_depth: t.max_depth, min_leaf: t.min_leaf, l2_leaf: 0.0 };
            let g = grow(x, &Presorted::new(x), y, None, p);
            (Model::Tree(g.tree), Diagnostics::default())
        }
        LearnerKind::GradientBoosting | LearnerKind::RegularizedBoosting => {
            let l2 = if spec.kind == LearnerKind::RegularizedBoosting { t.l2_leaf } else { 0.0 };
            let p = BoostParams {
                n_stages: t.n_stages,
                learning_rate: t.learning_rate,
                subsample: t.subsample,
                grow: GrowParams { max_depth: t.max_depth, min_leaf: t.min_leaf, l2_leaf: l2 },
            };
            let (m, curve) = fit_boosting(x, y, &p, rng_seed);
            let diag = Diagnostics { final_train_loss: *curve.last().unwrap(), train_curve: curve, validation_curve: vec![] };
            (Model::Boosted(m), diag)
        }
        LearnerKind::Mlp => {
            let mp = &spec.mlp;
            let (means, sds) = linalg::column_moments(x);
            let xs = linalg::standardize_with(x, &means, &sds).transpose();
            let y_mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
            let y_sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
            let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_sd).collect();
            let mut net = Network::new(d, &mp.hidden_layers, mp.activation, mp.init_seed ^ rng_seed);
            let tp = TrainParams {
                epochs: mp.epochs,
                batch_size: mp.batch_size,
                step_size: mp.step_size,
                l2: mp.l2,
                patience: mp.early_stop_patience,
                validation_fraction: 0.1,
            };
            let TrainCurves { train, validation, .. } = mlp::train(&mut net, &xs, &ys, &tp, rng_seed);
            let model = Model::Mlp { net, means, sds, y_mean, y_sd };
            let diag = Diagnostics { final_train_loss: 0.0, train_curve: train, validation_curve: validation };
            (model, diag)
        }
    };
    let mut fitted = FittedModel { spec: spec.clone(), input_dim: d, model, diagnostics };
    if !matches!(spec.kind, LearnerKind::GradientBoosting | LearnerKind::RegularizedBoosting) {
        fitted.diagnostics.final_train_loss = mse(&fitted.predict(x)?, y);
    }
    Ok(fitted)
}

impl FittedModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: x.ncols() });
        }
        Ok(match &self.model {
            Model::Linear { means, sds, coef, intercept } => {
                let xs = linalg::standardize_with(x, means, sds);
                (xs * DVector::from_column_slice(coef)).iter().map(|v| v + intercept).collect()
            }
            Model::Tree(t) => t.predict(x),
            Model::Boosted(b) => b.predict(x),
            Model::Mlp { net, means, sds, y_mean, y_sd } => {
                let xs = linalg::standardize_with(x, means, sds).transpose();
                net.forward(&xs).into_iter().map(|v| y_mean + y_sd * v).collect()
            }
        })
    }

    /// Number of trees for boosted models, 1 for a single tree.
    pub fn n_trees(&self) -> usize {
        match &self.model {
            Model::Boosted(b) => b.trees.len(),
            Model::Tree(_) => 1,
            _ => 0,
        }
    }

    /// Writes `step,train,validation` rows (validation blank when absent).
    pub fn write_loss_curve<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_loss", "validation_loss"])?;
        let d = &self.diagnostics;
        for (i, tl) in d.train_curve.iter().enumerate() {
            let vl = d.validation_curve.get(i).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([i.to_string(), tl.to_string(), vl])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn predict(model: &FittedModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.predict(x)
}

/// Finite-difference check of the MLP's squared-loss gradients on `x`
/// (rows are samples), using the learner's architecture, activation, seed and
/// L2 weight; biases get a small random offset. Returns the maximum relative
/// error.
pub fn grad_check(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    if spec.kind != LearnerKind::Mlp {
        return Err(Error::Config("grad_check needs an Mlp spec".into()));
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    let mut net = Network::new(x.ncols(), &spec.mlp.hidden_layers, spec.mlp.activation, spec.mlp.init_seed);
    net.jitter_biases(0.1, spec.mlp.init_seed);
    Ok(mlp::gradient_check(&net, &x.transpose(), y, spec.mlp.l2))
}

/// Target family for [`smoothness_gap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapTarget {
    /// `sin(w·x) + ‖x‖²/d` with a random unit direction `w`.
    RotatedSmooth,
    /// Sum of two axis-aligned steps.
    AxisSteps,
}

pub const GAP_DIM: usize = 30;

/// Test-set MSE of the default boosting and MLP learners on a synthetic
/// regression task (2000 train / 1000 test rows in 30 dimensions).
pub fn smoothness_gap(rng_seed: u64) -> Result<(f64, f64)> {
    smoothness_gap_with(rng_seed, GapTarget::RotatedSmooth)
}

pub fn smoothness_gap_with(rng_seed: u64, target: GapTarget) -> Result<(f64, f64)> {
    let d = GAP_DIM;
    let mut rng = rng_for(rng_seed, Stream::Misc, 77);
    let mut w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    let f = |row: &[f64]| -> f64 {
        match target {
            GapTarget::RotatedSmooth => {
                let s: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                s.sin() + row.iter().map(|v| v * v).sum::<f64>() / d as f64
            }
            GapTarget::AxisSteps => f64::from(u8::from(row[0] > 0.0)) + f64::from(u8::from(row[1] > 0.5)),
        }
    };
    let mut draw = |n: usize| {
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n).map(|i| f(&x.row(i).iter().copied().collect::<Vec<_>>())).collect();
        (x, y)
    };
    let (xtr, ytr) = draw(2000);
    let (xte, yte) = draw(1000);
    let gbm = fit(&LearnerSpec::gradient_boosting(), &xtr, &ytr, rng_seed)?;
    let net = fit(&LearnerSpec::default_for(LearnerKind::Mlp), &xtr, &ytr, rng_seed)?;
    Ok((mse(&gbm.predict(&xte)?, &yte), mse(&net.predict(&xte)?, &yte)))
}

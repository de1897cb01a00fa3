//! Treatment-effect estimators: difference in means, OLS on the structured
//! covariates, and cross-fitted partially linear regression.

use std::fs::OpenOptions;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FeatureSet};
use crate::error::{Error, Result};
use crate::learners::{fit, LearnerSpec};
use crate::linalg;
use crate::par::Execution;
use crate::rng::{derive_seed, rng_for, Stream};
use crate::stats::{mean, variance};

pub const CLIP_LOW: f64 = 0.01;
pub const CLIP_HIGH: f64 = 0.99;
pub const DEFAULT_FOLDS: usize = 5;

/// Seeded uniform permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, Stream::Folds, 0));
    order
}

/// Splits `order` into `k` contiguous blocks whose sizes differ by at most one.
pub fn contiguous_folds(order: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mse_outcome: f64,
    pub mse_treatment: f64,
}

/// Out-of-fold nuisance predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisancePair {
    pub g_hat: Vec<f64>,
    pub m_hat: Vec<f64>,
    /// Fold id of each unit; `usize::MAX` for nuisances not produced by cross-fitting.
    pub fold_of: Vec<usize>,
    /// Units whose propensity prediction was clipped.
    pub n_clipped: usize,
    pub folds: Vec<FoldDiagnostics>,
}

impl NuisancePair {
    /// Builds a pair from externally supplied predictions (clipping `m_hat`).
    pub fn from_parts(g_hat: Vec<f64>, m_hat: Vec<f64>) -> Self {
        let n = g_hat.len();
        let mut m_hat = m_hat;
        let n_clipped = clip_propensity(&mut m_hat);
        Self { g_hat, m_hat, fold_of: vec![usize::MAX; n], n_clipped, folds: vec![] }
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }
}

fn clip_propensity(m: &mut [f64]) -> usize {
    let mut clipped = 0;
    for v in m.iter_mut() {
        if *v < CLIP_LOW || *v > CLIP_HIGH {
            *v = v.clamp(CLIP_LOW, CLIP_HIGH);
            clipped += 1;
        }
    }
    clipped
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    OlsStructured,
    Plr,
    OraclePlr,
    LatentPlr,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::OlsStructured => "ols_structured",
            EstimatorKind::Plr => "plr",
            EstimatorKind::OraclePlr => "oracle_plr",
            EstimatorKind::LatentPlr => "latent_plr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub estimator: EstimatorKind,
    pub theta_hat: f64,
    pub std_err: f64,
    /// Set when the standard error is zero or undefined.
    pub degenerate_se: bool,
    pub n_units: usize,
    pub n_folds: usize,
    pub learner_spec: Option<LearnerSpec>,
    pub feature_set: Option<FeatureSet>,
    pub seed: u64,
    pub true_ate: Option<f64>,
    pub bias_abs: Option<f64>,
    pub bias_pct: Option<f64>,
    pub n_clipped: usize,
    pub folds: Vec<FoldDiagnostics>,
}

impl DmlEstimate {
    fn new(estimator: EstimatorKind, theta_hat: f64, std_err: f64, ds: &Dataset) -> Self {
        Self {
            estimator,
            theta_hat,
            std_err,
            degenerate_se: !(std_err > 0.0) || !std_err.is_finite(),
            n_units: ds.len(),
            n_folds: 0,
            learner_spec: None,
            feature_set: None,
            seed: ds.seed(),
            true_ate: None,
            bias_abs: None,
            bias_pct: None,
            n_clipped: 0,
            folds: vec![],
        }
    }

    /// Fills the bias fields against `truth`.
    pub fn with_truth(mut self, truth: f64) -> Self {
        self.true_ate = Some(truth);
        self.bias_abs = Some(self.theta_hat - truth);
        self.bias_pct = Some(100.0 * (self.theta_hat - truth) / truth);
        self
    }

    /// Bias fields against the dataset's stored truth (a labeled oracle read).
    pub fn scored(self, ds: &Dataset) -> Self {
        let truth = ds.oracle().true_ate();
        self.with_truth(truth)
    }

    /// Whether `truth` lies inside the nominal 95% interval.
    pub fn covers(&self, truth: f64) -> bool {
        (self.theta_hat - truth).abs() <= 1.959_963_984_540_054 * self.std_err
    }

    pub fn label(&self) -> String {
        match (&self.learner_spec, self.feature_set) {
            (Some(s), Some(f)) => format!("{}[{}:{}]", self.estimator.name(), s.label(), f),
            _ => self.estimator.name().to_string(),
        }
    }
}

fn arms(ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y1 = Vec::new();
    let mut y0 = Vec::new();
    for u in ds.units() {
        if u.treatment == 1 {
            y1.push(u.outcome);
        } else {
            y0.push(u.outcome);
        }
    }
    if y1.is_empty() || y0.is_empty() {
        return Err(Error::DegenerateTreatment("one treatment arm is empty".into()));
    }
    Ok((y1, y0))
}

/// Difference in arm means with the unpooled two-sample standard error.
pub fn naive_ate(ds: &Dataset) -> Result<DmlEstimate> {
    let (y1, y0) = arms(ds)?;
    let theta = mean(&y1) - mean(&y0);
    let v1 = if y1.len() > 1 { variance(&y1) } else { 0.0 };
    let v0 = if y0.len() > 1 { variance(&y0) } else { 0.0 };
    let se = (v1 / y1.len() as f64 + v0 / y0.len() as f64).sqrt();
    Ok(DmlEstimate::new(EstimatorKind::Naive, theta, se, ds).scored(ds))
}

/// OLS of `Y` on `[1, T, X_structured]`; the coefficient on `T`.
pub fn ols_structured(ds: &Dataset) -> Result<DmlEstimate> {
    arms(ds)?;
    let x = ds.structured_matrix();
    let t = ds.treatments();
    let n = ds.len();
    let design = DMatrix::from_fn(n, x.ncols() + 2, |i, j| match j {
        0 => 1.0,
        1 => t[i],
        _ => x[(i, j - 2)],
    });
    let fit = linalg::ols(&design, &DVector::from_vec(ds.outcomes()))?;
    Ok(DmlEstimate::new(EstimatorKind::OlsStructured, fit.coef[1], fit.std_err[1], ds).scored(ds))
}

/// Cross-fits `E[Y|W]` and `E[T|W]` on the dataset's design for `features`.
pub fn crossfit_nuisance(ds: &Dataset, features: FeatureSet, spec: &LearnerSpec, k: usize, rng_seed: u64) -> Result<NuisancePair> {
    crossfit_nuisance_with(ds, features, spec, k, rng_seed, Execution::default())
}

pub fn crossfit_nuisance_with(
    ds: &Dataset,
    features: FeatureSet,
    spec: &LearnerSpec,
    k: usize,
    rng_seed: u64,
    exec: Execution,
) -> Result<NuisancePair> {
    crossfit_matrix(&ds.design(features), &ds.outcomes(), &ds.treatments(), spec, k, rng_seed, exec)
}

/// Matrix-level cross-fitting. Each fold trains one outcome model and one
/// treatment model on the other folds; the `2k` fits are independent.
pub fn crossfit_matrix(
    w: &DMatrix<f64>,
    y: &[f64],
    t: &[f64],
    spec: &LearnerSpec,
    k: usize,
    rng_seed: u64,
    exec: Execution,
) -> Result<NuisancePair> {
    let n = w.nrows();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if y.len() != n || t.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len().min(t.len()) });
    }
    if n < 10 * k {
        return Err(Error::InsufficientData(format!("{n} units for {k} folds (need >= {})", 10 * k)));
    }
    spec.validate()?;
    let folds = contiguous_folds(&seeded_permutation(n, rng_seed), k);
    let mut fold_of = vec![0usize; n];
    for (f, rows) in folds.iter().enumerate() {
        for &i in rows {
            fold_of[i] = f;
        }
    }
    let jobs: Vec<Result<Vec<f64>>> = exec.map_range(2 * k, |job| {
        let (f, target) = (job / 2, if job % 2 == 0 { y } else { t });
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let xtr = linalg::select_rows(w, &train);
        let ytr = linalg::select_entries(target, &train);
        let model = fit(spec, &xtr, &ytr, derive_seed(rng_seed, Stream::Learner, job as u64))?;
        model.predict(&linalg::select_rows(w, &folds[f]))
    });
    let mut g_hat = vec![0.0; n];
    let mut m_hat = vec![0.0; n];
    let mut diags = Vec::with_capacity(k);
    let mut it = jobs.into_iter();
    for (f, rows) in folds.iter().enumerate() {
        let pg = it.next().expect("job count")?;
        let pm = it.next().expect("job count")?;
        let (mut sg, mut sm) = (0.0, 0.0);
        for ((&i, g), m) in rows.iter().zip(pg).zip(pm) {
            g_hat[i] = g;
            m_hat[i] = m;
            sg += (y[i] - g) * (y[i] - g);
            sm += (t[i] - m) * (t[i] - m);
        }
        let nt = rows.len() as f64;
        diags.push(FoldDiagnostics { fold: f, n_train: n - rows.len(), n_test: rows.len(), mse_outcome: sg / nt, mse_treatment: sm / nt });
    }
    let n_clipped = clip_propensity(&mut m_hat);
    if n_clipped > 0 {
        log::warn!("{n_clipped} of {n} propensity predictions clipped to [{CLIP_LOW}, {CLIP_HIGH}]");
    }
    Ok(NuisancePair { g_hat, m_hat, fold_of, n_clipped, folds: diags })
}

/// `(theta, std_err)` of the partialled-out score on given residual inputs.
pub fn plr_core(y: &[f64], t: &[f64], g_hat: &[f64], m_hat: &[f64]) -> Result<(f64, f64)> {
    let n = y.len();
    if [t.len(), g_hat.len(), m_hat.len()].iter().any(|&l| l != n) {
        return Err(Error::DimensionMismatch { expected: n, got: t.len().min(g_hat.len()).min(m_hat.len()) });
    }
    let yt: Vec<f64> = y.iter().zip(g_hat).map(|(a, b)| a - b).collect();
    let tt: Vec<f64> = t.iter().zip(m_hat).map(|(a, b)| a - b).collect();
    let stt: f64 = tt.iter().map(|v| v * v).sum();
    if !(stt >= 1e-8 * n as f64) {
        return Err(Error::NoIdentifyingVariation(format!("sum of squared treatment residuals {stt:e} is below 1e-8·n")));
    }
    let theta = tt.iter().zip(&yt).map(|(a, b)| a * b).sum::<f64>() / stt;
    let nf = n as f64;
    let psi2 = tt.iter().zip(&yt).map(|(d, r)| ((r - theta * d) * d).powi(2)).sum::<f64>() / nf;
    let jac = stt / nf;
    let se = (psi2 / (jac * jac)).sqrt() / nf.sqrt();
    Ok((theta, se))
}

/// Residual-on-residual estimate from a completed nuisance pair.
pub fn plr_estimate(ds: &Dataset, nuis: &NuisancePair) -> Result<DmlEstimate> {
    let (theta, se) = plr_core(&ds.outcomes(), &ds.treatments(), &nuis.g_hat, &nuis.m_hat)?;
    let mut est = DmlEstimate::new(EstimatorKind::Plr, theta, se, ds);
    est.n_folds = nuis.n_folds();
    est.n_clipped = nuis.n_clipped;
    est.folds = nuis.folds.clone();
    Ok(est.scored(ds))
}

/// Cross-fit plus estimate, with the learner and feature set recorded.
pub fn dml(ds: &Dataset, features: FeatureSet, spec: &LearnerSpec, k: usize, rng_seed: u64, exec: Execution) -> Result<DmlEstimate> {
    let nuis = crossfit_nuisance_with(ds, features, spec, k, rng_seed, exec)?;
    let mut est = plr_estimate(ds, &nuis)?;
    est.learner_spec = Some(spec.clone());
    est.feature_set = Some(features);
    Ok(est)
}

/// Nuisances computed from the stored structural model:
/// `m* = P(T=1 | everything)` and `g* = baseline + τᵢ·m*`.
pub fn oracle_nuisance(ds: &Dataset) -> NuisancePair {
    let o = ds.oracle();
    let m = o.propensities();
    let g: Vec<f64> = o.baselines().iter().zip(o.true_effects()).zip(&m).map(|((b, tau), p)| b + tau * p).collect();
    NuisancePair::from_parts(g, m)
}

pub fn oracle_plr(ds: &Dataset) -> Result<DmlEstimate> {
    let mut est = plr_estimate(ds, &oracle_nuisance(ds))?;
    est.estimator = EstimatorKind::OraclePlr;
    Ok(est)
}

/// Cross-fitted PLR on the structured covariates plus the true latents.
///
/// This reads the latents through the oracle view; it shows that once the
/// confounders themselves are conditioned on, the estimator is unbiased.
pub fn latent_plr(ds: &Dataset, spec: &LearnerSpec, k: usize, rng_seed: u64, exec: Execution) -> Result<DmlEstimate> {
    let o = ds.oracle();
    let (a, m) = (o.abilities(), o.motivations());
    let x = ds.structured_matrix();
    let p = x.ncols();
    let w = DMatrix::from_fn(ds.len(), p + 2, |i, j| match j {
        j if j < p => x[(i, j)],
        j if j == p => a[i],
        _ => m[i],
    });
    let nuis = crossfit_matrix(&w, &ds.outcomes(), &ds.treatments(), spec, k, rng_seed, exec)?;
    let mut est = plr_estimate(ds, &nuis)?;
    est.estimator = EstimatorKind::LatentPlr;
    est.learner_spec = Some(spec.clone());
    Ok(est)
}

/// Which moment the probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeScore {
    /// The partialled-out score used by [`plr_estimate`].
    Orthogonal,
    /// `Σ(Y − ĝ)(T − T̄) / Σ(T − T̄)²`, which ignores `m̂`.
    Contrast,
}

fn probe_theta(score: ProbeScore, y: &[f64], t: &[f64], g: &[f64], m: &[f64]) -> f64 {
    match score {
        ProbeScore::Orthogonal => {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..y.len() {
                let d = t[i] - m[i];
                num += d * (y[i] - g[i]);
                den += d * d;
            }
            num / den
        }
        ProbeScore::Contrast => {
            let tbar = mean(t);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..y.len() {
                let d = t[i] - tbar;
                num += d * (y[i] - g[i]);
                den += d * d;
            }
            num / den
        }
    }
}

/// Perturbation direction for the probe: the standardized propensity
/// prediction, projected so that it is sample-orthogonal to the treatment
/// residuals and to the score residuals, rescaled to unit root-mean-square.
pub fn probe_direction(y: &[f64], t: &[f64], g: &[f64], m: &[f64]) -> Vec<f64> {
    let n = y.len();
    let tt: Vec<f64> = t.iter().zip(m).map(|(a, b)| a - b).collect();
    let theta = probe_theta(ProbeScore::Orthogonal, y, t, g, m);
    let psi: Vec<f64> = (0..n).map(|i| (y[i] - g[i]) - theta * tt[i]).collect();
    let mbar = mean(m);
    let mut u: Vec<f64> = m.iter().map(|v| v - mbar).collect();
    if u.iter().all(|v| v.abs() < 1e-12) {
        u = (0..n).map(|i| ((i as f64) * 0.618_033_988_749_895).fract() - 0.5).collect();
    }
    // Gram-Schmidt against the two residual vectors.
    let basis = {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let e1: Vec<f64> = tt.clone();
        let c = dot(&psi, &e1) / dot(&e1, &e1).max(f64::MIN_POSITIVE);
        let e2: Vec<f64> = psi.iter().zip(&e1).map(|(p, e)| p - c * e).collect();
        [e1, e2]
    };
    for e in &basis {
        let ee: f64 = e.iter().map(|v| v * v).sum();
        if ee > 0.0 {
            let c = u.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ee;
            u.iter_mut().zip(e).for_each(|(a, b)| *a -= c * b);
        }
    }
    let rms = (u.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        u.iter_mut().for_each(|v| *v /= rms);
    }
    u
}

/// `(|Δθ(eps)|, |Δθ(eps/2)|)` under the perturbation
/// `m̂ → m̂ − s·eps·u`, `ĝ → ĝ + sd(Y)·eps·u` with `s = sign(θ̂)`.
pub fn orthogonality_probe(ds: &Dataset, nuis: &NuisancePair, eps: f64) -> Result<(f64, f64)> {
    orthogonality_probe_with(ds, nuis, eps, ProbeScore::Orthogonal)
}

pub fn orthogonality_probe_with(ds: &Dataset, nuis: &NuisancePair, eps: f64, score: ProbeScore) -> Result<(f64, f64)> {
    if !(0.0..=0.5).contains(&eps) {
        return Err(Error::ParameterDomain(format!("eps must lie in [0, 0.5], got {eps}")));
    }
    let y = ds.outcomes();
    let t = ds.treatments();
    let (g, m) = (&nuis.g_hat, &nuis.m_hat);
    let u = probe_direction(&y, &t, g, m);
    let theta0 = probe_theta(score, &y, &t, g, m);
    let s_m = -probe_theta(ProbeScore::Orthogonal, &y, &t, g, m).signum();
    let s_g = variance(&y).sqrt();
    let shifted = |e: f64| {
        let gp: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a + e * s_g * b).collect();
        let mp: Vec<f64> = m.iter().zip(&u).map(|(a, b)| a + e * s_m * b).collect();
        probe_theta(score, &y, &t, &gp, &mp)
    };
    Ok(((shifted(eps) - theta0).abs(), (shifted(eps / 2.0) - theta0).abs()))
}

/// Columns written by [`append_ledger`].
pub const LEDGER_HEADER: [&str; 12] = [
    "estimator", "learner", "features", "seed", "n_units", "n_folds", "theta_hat", "std_err", "true_ate", "bias_abs",
    "bias_pct", "n_clipped",
];

pub fn ledger_row(e: &DmlEstimate) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        e.estimator.name().to_string(),
        e.learner_spec.as_ref().map(|s| s.label()).unwrap_or_default(),
        e.feature_set.map(|f| f.to_string()).unwrap_or_default(),
        e.seed.to_string(),
        e.n_units.to_string(),
        e.n_folds.to_string(),
        e.theta_hat.to_string(),
        e.std_err.to_string(),
        opt(e.true_ate),
        opt(e.bias_abs),
        opt(e.bias_pct),
        e.n_clipped.to_string(),
    ]
}

/// Appends estimates to a CSV ledger, writing the header for a new file.
pub fn append_ledger(path: &Path, estimates: &[DmlEstimate]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(LEDGER_HEADER)?;
    }
    for e in estimates {
        w.write_record(ledger_row(e))?;
    }
    w.flush()?;
    Ok(())
}

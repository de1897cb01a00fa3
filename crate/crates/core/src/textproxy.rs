//! Simulated text-embedding pipeline.
//!
//! Profile text is not generated. Instead each unit's latent traits are pushed
//! through a fixed smooth feature map, lifted into a `raw_dim`-dimensional
//! space by a seeded orthonormal basis and corrupted with isotropic Gaussian
//! noise. The resulting vectors are reduced by PCA and expanded with squares
//! and a handful of leading interactions, which yields the estimator-facing
//! feature block.
//!
//! The feature map has three parts:
//!
//! * a *headline* facet, a saturating monotone function of ability with a
//!   small motivation admixture, given a large gain so that it dominates the
//!   first principal component;
//! * an *ability* block of periodic and mixed facets of both latents;
//! * a *motivation* block of staggered sigmoidal ramps in motivation, so
//!   that motivation is a smooth function spread densely over many
//!   directions.
//!
//! Both blocks are whitened to identity covariance under the reference latent
//! law and scaled by their own gain. Because each block is isotropic its
//! principal directions are not identified, so the information it carries is
//! spread across many retained components rather than aligned with any
//! single axis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{rng_for, Stream};

/// Number of ramps in the motivation block.
pub const MOTIVATION_RAMPS: usize = 10;
/// Index range of the motivation block within the facet vector.
const MOTIVATION_FACETS: std::ops::Range<usize> = 8..8 + MOTIVATION_RAMPS;
/// Number of block facets produced by [`EmbeddingModel`].
pub const BLOCK_FACETS: usize = MOTIVATION_FACETS.end - 1;
/// Number of leading pairwise interactions appended by [`poly_expand`].
pub const INTERACTIONS: [(usize, usize); 5] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub raw_dim: usize,
    pub pca_dim: usize,
    pub out_dim: usize,
    /// Per-coordinate SD of the isotropic raw-space noise.
    pub signal_noise_sd: f64,
    pub basis_seed: u64,
    /// Gain of the headline facet (raw-space norm per unit SD).
    pub headline_gain: f64,
    /// Slope of ability inside the headline facet.
    pub headline_slope: f64,
    /// Weight of motivation inside the headline facet.
    pub headline_motivation: f64,
    /// Gain of the whitened ability block.
    pub facet_gain: f64,
    /// Gain of the whitened motivation block.
    pub motivation_gain: f64,
    /// Slope of the motivation ramps.
    pub motivation_slope: f64,
    /// Offset of the motivation ramp centres, which span `[-2, 2]` at zero.
    pub ramp_shift: f64,
    /// Latent correlation of the reference law used for whitening.
    pub reference_rho: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            raw_dim: 768,
            pca_dim: 30,
            out_dim: 65,
            signal_noise_sd: 0.07,
            basis_seed: 20_240_611,
            headline_gain: 0.3,
            headline_slope: 0.8,
            headline_motivation: 0.33,
            facet_gain: 0.05,
            motivation_gain: 0.08,
            motivation_slope: 1.5,
            ramp_shift: 0.0,
            reference_rho: 0.3,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pca_dim == 0 || self.raw_dim < self.pca_dim {
            return Err(Error::ParameterDomain(format!(
                "need 1 <= pca_dim <= raw_dim, got pca_dim={} raw_dim={}",
                self.pca_dim, self.raw_dim
            )));
        }
        if self.pca_dim < 4 {
            return Err(Error::ParameterDomain("pca_dim must be at least 4 for the interaction block".into()));
        }
        if self.out_dim != expanded_dim(self.pca_dim) {
            return Err(Error::ParameterDomain(format!(
                "out_dim must equal 2*pca_dim+5 = {}, got {}",
                expanded_dim(self.pca_dim),
                self.out_dim
            )));
        }
        if !(self.signal_noise_sd > 0.0) {
            return Err(Error::ParameterDomain("signal_noise_sd must be > 0".into()));
        }
        if self.raw_dim < 1 + BLOCK_FACETS {
            return Err(Error::ParameterDomain("raw_dim too small for the facet basis".into()));
        }
        Ok(())
    }
}

pub fn expanded_dim(pca_dim: usize) -> usize {
    2 * pca_dim + INTERACTIONS.len()
}

fn ramp_center(cfg: &EmbeddingConfig, k: usize) -> f64 {
    cfg.ramp_shift - 2.0 + 4.0 * k as f64 / (MOTIVATION_RAMPS - 1) as f64
}

/// Evaluates the unwhitened facets `[headline, ability block, motivation block]`.
fn raw_facets(cfg: &EmbeddingConfig, a: f64, m: f64, out: &mut [f64]) {
    let w = cfg.motivation_slope;
    out[0] = (cfg.headline_slope * a).tanh() + cfg.headline_motivation * m.tanh();
    out[1] = a.sin();
    out[2] = a.cos();
    out[3] = (1.7 * a + 0.5).sin();
    out[4] = (1.7 * a + 0.5).cos();
    out[5] = (a + m).sin();
    out[6] = (a - m).cos();
    out[7] = a.tanh() * m.tanh();
    for k in 0..MOTIVATION_RAMPS {
        out[MOTIVATION_FACETS.start + k] = (w * (m - ramp_center(cfg, k))).tanh();
    }
}

/// Upper bounds on `|∂f/∂a|` and `|∂f/∂m|` for each raw facet.
fn facet_derivative_bounds(cfg: &EmbeddingConfig) -> Vec<(f64, f64)> {
    let w = cfg.motivation_slope.abs();
    let mut out = vec![
        (cfg.headline_slope.abs(), cfg.headline_motivation.abs()),
        (1.0, 0.0),
        (1.0, 0.0),
        (1.7, 0.0),
        (1.7, 0.0),
        (1.0, 1.0),
        (1.0, 1.0),
        (1.0, 1.0),
    ];
    out.extend((0..MOTIVATION_RAMPS).map(|_| (0.0, w)));
    out
}

/// Fixed part of the embedding simulator: feature map, whitening and basis.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    cfg: EmbeddingConfig,
    center: DVector<f64>,
    /// `gain ⊙ L⁻¹`, lower triangular, `(1+BLOCK_FACETS)²`.
    mix: DMatrix<f64>,
    /// `raw_dim × (1+BLOCK_FACETS)` with orthonormal columns.
    basis: DMatrix<f64>,
}

const REFERENCE_DRAWS: usize = 100_000;

impl EmbeddingModel {
    pub fn new(cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        let k = 1 + BLOCK_FACETS;
        let rho = cfg.reference_rho.clamp(-1.0, 1.0);
        let mut rng = rng_for(cfg.basis_seed, Stream::Basis, 0);
        let mut sum = DVector::<f64>::zeros(k);
        let mut cross = DMatrix::<f64>::zeros(k, k);
        let mut f = vec![0.0; k];
        for _ in 0..REFERENCE_DRAWS {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let a = z1;
            let m = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
            raw_facets(cfg, a, m, &mut f);
            for i in 0..k {
                sum[i] += f[i];
                for j in 0..=i {
                    cross[(i, j)] += f[i] * f[j];
                }
            }
        }
        let nd = REFERENCE_DRAWS as f64;
        let center = &sum / nd;
        let mut cov = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let c = cross[(i, j)] / nd - center[i] * center[j];
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("facet covariance not positive definite".into()))?;
        let l_inv = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::LinearAlgebra("facet whitening failed".into()))?;
        let mut mix = l_inv;
        for i in 0..k {
            let gain = if i == 0 {
                cfg.headline_gain
            } else if MOTIVATION_FACETS.contains(&i) {
                cfg.motivation_gain
            } else {
                cfg.facet_gain
            };
            for j in 0..k {
                mix[(i, j)] *= gain;
            }
        }
        let mut basis_rng = rng_for(cfg.basis_seed, Stream::Basis, 1);
        let gauss = DMatrix::from_fn(cfg.raw_dim, k, |_, _| basis_rng.sample::<f64, _>(StandardNormal));
        let basis = gauss.qr().q();
        Ok(Self { cfg: cfg.clone(), center, mix, basis })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.cfg
    }

    /// Noise-free facet coordinates `gain ⊙ L⁻¹ (f(a, m) − f̄)`.
    pub fn facets(&self, ability: f64, motivation: f64) -> DVector<f64> {
        let k = self.center.len();
        let mut f = vec![0.0; k];
        raw_facets(&self.cfg, ability, motivation, &mut f);
        let centered = DVector::from_iterator(k, f.iter().zip(self.center.iter()).map(|(v, c)| v - c));
        &self.mix * centered
    }

    /// Embeds one unit. The noise draw is keyed by `rng_seed` alone.
    pub fn embed(&self, ability: f64, motivation: f64, rng_seed: u64) -> Vec<f64> {
        let signal = &self.basis * self.facets(ability, motivation);
        let mut rng = rng_for(rng_seed, Stream::Embedding, 0);
        let sd = self.cfg.signal_noise_sd;
        signal
            .iter()
            .map(|s| {
                let z: f64 = rng.sample(StandardNormal);
                if sd.is_finite() {
                    s + sd * z
                } else {
                    z
                }
            })
            .collect()
    }

    /// Lipschitz constant of the noise-free map `(a, m) ↦ embedding` w.r.t.
    /// the Euclidean norm: `‖mix‖₂ · ‖J‖_F` with facet derivative bounds.
    pub fn lipschitz_constant(&self) -> f64 {
        let op = self.mix.clone().svd(false, false).singular_values.max();
        let jac: f64 = facet_derivative_bounds(&self.cfg).iter().map(|(da, dm)| da * da + dm * dm).sum();
        op * jac.sqrt()
    }
}

/// Convenience wrapper over [`EmbeddingModel::embed`].
pub fn embed(ability: f64, motivation: f64, cfg: &EmbeddingConfig, rng_seed: u64) -> Result<Vec<f64>> {
    Ok(EmbeddingModel::new(cfg)?.embed(ability, motivation, rng_seed))
}

/// Principal-component model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `pca_dim` rows of length `raw_dim`, mutually orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, nonincreasing.
    pub explained_variance: Vec<f64>,
    /// Set when the input had fewer than `pca_dim` non-null directions.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `components · (v − mean)`.
    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), got: v.len() });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((ci, vi), mi)| ci * (vi - mi)).sum())
            .collect())
    }

    /// `mean + componentsᵀ · z`.
    pub fn inverse_transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.components.len() {
            return Err(Error::DimensionMismatch { expected: self.components.len(), got: z.len() });
        }
        let mut out = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += ci * zi;
            }
        }
        Ok(out)
    }
}

/// Fits PCA by eigendecomposition of the sample covariance.
pub fn pca_fit(vectors: &[Vec<f64>], pca_dim: usize) -> Result<PcaModel> {
    let n = vectors.len();
    let d = vectors.first().map(Vec::len).unwrap_or(0);
    if pca_dim == 0 || pca_dim > d {
        return Err(Error::ParameterDomain(format!("pca_dim {pca_dim} out of range for input dim {d}")));
    }
    if n < pca_dim + 1 {
        return Err(Error::InsufficientData(format!("{n} vectors for {pca_dim} components")));
    }
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let data = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean: Vec<f64> = data.column_iter().map(|c| c.sum() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-12 * d as f64;
    let mut components = Vec::with_capacity(pca_dim);
    let mut explained = Vec::with_capacity(pca_dim);
    let mut rank_deficient = false;
    for &idx in order.iter().take(pca_dim) {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > tol) {
            rank_deficient = true;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Sign convention: largest-magnitude loading is positive.
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |acc, (i, x)| if x.abs() > acc.1 + 1e-12 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(lambda.max(0.0));
    }
    Ok(PcaModel { mean, components, explained_variance: explained, rank_deficient })
}

pub fn pca_transform(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    model.transform(v)
}

/// `[z, z², z₁z₂, z₁z₃, z₂z₃, z₁z₄, z₂z₄]` (1-based pairs).
pub fn poly_expand(z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(expanded_dim(z.len()));
    out.extend_from_slice(z);
    out.extend(z.iter().map(|v| v * v));
    for &(i, j) in INTERACTIONS.iter() {
        out.push(z.get(i).copied().unwrap_or(0.0) * z.get(j).copied().unwrap_or(0.0));
    }
    out
}

/// Default ridge penalty grid for [`ability_r2`], on standardized features.
const RIDGE_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];

/// Five-fold cross-validated out-of-sample R² of a ridge regression of
/// `target` on the columns of `features`.
///
/// Features are standardized on each training fold; the penalty is picked
/// from a fixed grid by an inner split of the training fold. Folds are
/// contiguous blocks of a seeded permutation.
pub fn ability_r2(features: &DMatrix<f64>, target: &[f64]) -> Result<f64> {
    let (n, p) = features.shape();
    if target.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: target.len() });
    }
    if n < 50 {
        return Err(Error::InsufficientData(format!("ability_r2 needs >= 50 rows, got {n}")));
    }
    if p > n / 5 {
        return Err(Error::ParameterDomain(format!("{p} columns exceeds rows/5 = {}", n / 5)));
    }
    let var = crate::stats::variance(target);
    if !(var > 1e-12) {
        return Err(Error::UndefinedR2("target is constant".into()));
    }
    let order = crate::dml::seeded_permutation(n, 0x52_32);
    let folds = crate::dml::contiguous_folds(&order, 5);
    let mut sse = 0.0;
    let tbar = crate::stats::mean(target);
    let mut sst = 0.0;
    for k in 0..5 {
        let test: &[usize] = &folds[k];
        let train: Vec<usize> = (0..5).filter(|&j| j != k).flat_map(|j| folds[j].iter().copied()).collect();
        let lambda = choose_ridge(features, target, &train);
        let pred = ridge_fit_predict(features, target, &train, test, lambda)?;
        for (&i, p) in test.iter().zip(pred) {
            sse += (target[i] - p).powi(2);
            sst += (target[i] - tbar).powi(2);
        }
    }
    Ok((1.0 - sse / sst).clamp(0.0, 1.0))
}

fn choose_ridge(x: &DMatrix<f64>, y: &[f64], train: &[usize]) -> f64 {
    let cut = train.len() * 4 / 5;
    let (fit, val) = train.split_at(cut);
    let mut best = (f64::INFINITY, RIDGE_GRID[3]);
    for &lambda in RIDGE_GRID.iter() {
        if let Ok(pred) = ridge_fit_predict(x, y, fit, val, lambda) {
            let mse: f64 = val.iter().zip(pred).map(|(&i, p)| (y[i] - p).powi(2)).sum();
            if mse < best.0 {
                best = (mse, lambda);
            }
        }
    }
    best.1
}

fn ridge_fit_predict(x: &DMatrix<f64>, y: &[f64], train: &[usize], test: &[usize], lambda: f64) -> Result<Vec<f64>> {
    let xt = linalg::select_rows(x, train);
    let (means, sds) = linalg::column_moments(&xt);
    let xs = linalg::standardize_with(&xt, &means, &sds);
    let ybar = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
    let yc = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i] - ybar));
    let beta = linalg::solve_normal(&xs, &yc, lambda * train.len() as f64 / 100.0)?;
    let xv = linalg::standardize_with(&linalg::select_rows(x, test), &means, &sds);
    Ok((xv * beta).iter().map(|v| v + ybar).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn poly_layout_matches_hand_evaluation() {
        let mut z = vec![0.0; 30];
        assert!(poly_expand(&z).iter().all(|v| *v == 0.0));
        z[0] = 2.0;
        let out = poly_expand(&z);
        assert_eq!(out.len(), 65);
        for (i, v) in out.iter().enumerate() {
            let expect = match i {
                0 => 2.0,
                30 => 4.0,
                _ => 0.0,
            };
            assert_eq!(*v, expect, "slot {i}");
        }
        let z: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let out = poly_expand(&z);
        assert_eq!(&out[60..], &[2.0, 3.0, 6.0, 4.0, 8.0]);
    }

    #[test]
    fn config_dimension_rules() {
        let cfg = EmbeddingConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.out_dim, 2 * cfg.pca_dim + 5);
        let bad = EmbeddingConfig { pca_dim: 800, out_dim: 1605, ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = EmbeddingConfig { out_dim: 64, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embed_is_deterministic() {
        let model = EmbeddingModel::new(&EmbeddingConfig::default()).unwrap();
        assert_eq!(model.embed(0.3, -0.2, 11), model.embed(0.3, -0.2, 11));
        assert_ne!(model.embed(0.3, -0.2, 11), model.embed(0.3, -0.2, 12));
    }

    #[test]
    fn embedding_respects_lipschitz_bound() {
        let model = EmbeddingModel::new(&EmbeddingConfig::default()).unwrap();
        let lip = model.lipschitz_constant();
        assert!(lip.is_finite() && lip > 0.0);
        for k in 0..200 {
            let a = -3.0 + 0.03 * k as f64;
            let m = (k as f64 * 0.37).sin() * 2.0;
            let (da, dm) = (0.006 * (k as f64).cos(), 0.007 * (k as f64 * 1.3).sin());
            let norm = (da * da + dm * dm).sqrt();
            let e0 = model.embed(a, m, 5);
            let e1 = model.embed(a + da, m + dm, 5);
            let diff: f64 = e0.iter().zip(&e1).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(diff <= lip * norm + 1e-12, "diff {diff} > {lip}·{norm}");
        }
    }

    #[test]
    fn single_axis_spectrum() {
        let vectors: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let mut v = vec![1.0; 5];
                v[2] += (i as f64 - 20.0) * 0.1;
                v
            })
            .collect();
        let model = pca_fit(&vectors, 1).unwrap();
        let c = &model.components[0];
        for (j, v) in c.iter().enumerate() {
            assert_abs_diff_eq!(v.abs(), if j == 2 { 1.0 } else { 0.0 }, epsilon = 1e-6);
        }
    }

    #[test]
    fn transform_contracts() {
        let mut rng = rng_for(4, Stream::Misc, 0);
        let vectors: Vec<Vec<f64>> =
            (0..60).map(|_| (0..6).map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64)).collect()).collect();
        let model = pca_fit(&vectors, 6).unwrap();
        let zero = model.transform(&model.mean).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-8));
        let shifted: Vec<f64> = model.mean.iter().zip(&model.components[0]).map(|(m, c)| m + c).collect();
        let e1 = model.transform(&shifted).unwrap();
        assert_abs_diff_eq!(e1[0], 1.0, epsilon = 1e-10);
        assert!(e1[1..].iter().all(|v| v.abs() < 1e-10));
        let v: Vec<f64> = (0..6).map(|j| (j as f64 * 0.7).sin()).collect();
        let back = model.inverse_transform(&model.transform(&v).unwrap()).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        assert!(matches!(model.transform(&[1.0; 5]), Err(Error::DimensionMismatch { .. })));
        for w in model.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn pca_rejects_oversized_dim() {
        let vectors = vec![vec![0.0; 3]; 10];
        assert!(matches!(pca_fit(&vectors, 4), Err(Error::ParameterDomain(_))));
    }

    #[test]
    fn rank_deficient_input_is_flagged() {
        let vectors: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, 0.0, 0.0]).collect();
        let model = pca_fit(&vectors, 3).unwrap();
        assert!(model.rank_deficient);
        assert_eq!(model.dim(), 3);
    }
}

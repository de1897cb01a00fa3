//! Synthetic labor-market data from a structural causal model.
//!
//! Two correlated latent traits (ability, motivation) drive treatment uptake
//! through a logistic selection index and drive earnings through additive
//! loadings. Observed structured covariates carry part of the ability signal;
//! the simulated profile embeddings in [`crate::textproxy`] carry most of it.
//! Every unit keeps its ground-truth effect and latents for diagnostics, but
//! those are only reachable through the audited [`Dataset::oracle`] view.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::{derive_seed, rng_for, Stream};
use crate::stats::logistic;
use crate::textproxy::{self, EmbeddingConfig, EmbeddingModel, PcaModel};

pub use io::{read_dataset, write_dataset, DatasetSidecar};

/// Number of structured covariates per unit.
pub const STRUCTURED_DIM: usize = 12;

/// Column names of the structured covariates, in storage order.
pub const STRUCTURED_NAMES: [&str; STRUCTURED_DIM] = [
    "experience_years",
    "education_level",
    "platform_score",
    "job_success",
    "total_jobs",
    "age",
    "gender",
    "urban",
    "country_code",
    "sector_code",
    "profile_views",
    "response_rate",
];

pub const COL_EXPERIENCE: usize = 0;
pub const COL_PLATFORM_SCORE: usize = 2;
pub const COL_AGE: usize = 5;
pub const COL_URBAN: usize = 7;
pub const COL_SECTOR: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sector {
    DataScience,
    WebDevelopment,
    ContentWriting,
    GraphicDesign,
    Marketing,
}

impl Sector {
    pub const ALL: [Sector; 5] = [
        Sector::DataScience,
        Sector::WebDevelopment,
        Sector::ContentWriting,
        Sector::GraphicDesign,
        Sector::Marketing,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Sector> {
        Sector::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Sector::DataScience => "DataScience",
            Sector::WebDevelopment => "WebDevelopment",
            Sector::ContentWriting => "ContentWriting",
            Sector::GraphicDesign => "GraphicDesign",
            Sector::Marketing => "Marketing",
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Sector::ALL
            .iter()
            .copied()
            .find(|sec| sec.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown sector {s:?}")))
    }
}

/// Unobserved confounders of one unit, in standard-deviation units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    pub ability: f64,
    pub motivation: f64,
}

/// Loadings that tie the structured covariates to the latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateModel {
    /// Correlation target between experience and ability.
    pub experience_ability: f64,
    pub education_ability: f64,
    pub education_motivation: f64,
    pub platform_ability: f64,
    pub platform_motivation: f64,
    pub success_ability: f64,
    pub success_motivation: f64,
    pub jobs_ability: f64,
    pub jobs_motivation: f64,
    pub urban_share: f64,
    /// Multiplies every idiosyncratic covariate shock; 0 switches them off.
    pub noise_scale: f64,
}

impl Default for CovariateModel {
    fn default() -> Self {
        Self {
            experience_ability: 0.35,
            education_ability: 0.30,
            education_motivation: 0.10,
            platform_ability: 0.40,
            platform_motivation: 0.15,
            success_ability: 0.30,
            success_motivation: 0.20,
            jobs_ability: 0.20,
            jobs_motivation: 0.25,
            urban_share: 0.6,
            noise_scale: 1.0,
        }
    }
}

/// Every coefficient of the structural model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructuralConfig {
    pub tau_by_sector: BTreeMap<Sector, f64>,
    pub intercept: f64,
    /// Outcome loadings on the structured covariates, in storage order.
    pub beta: Vec<f64>,
    pub gamma_ability: f64,
    pub gamma_motivation: f64,
    pub sel_intercept: f64,
    pub sel_ability: f64,
    pub sel_motivation: f64,
    pub sel_urban: f64,
    pub rho: f64,
    pub kappa: f64,
    pub noise_outcome_sd: f64,
    pub noise_sel_sd: f64,
    /// +1 for positive selection on the latents, −1 for negative selection.
    pub selection_sign: i32,
    pub covariates: CovariateModel,
    pub embedding: EmbeddingConfig,
}

pub fn default_tau_by_sector() -> BTreeMap<Sector, f64> {
    Sector::ALL.iter().copied().zip([746.0, 649.0, 395.0, 436.0, 559.0]).collect()
}

impl Default for StructuralConfig {
    fn default() -> Self {
        Self {
            tau_by_sector: default_tau_by_sector(),
            intercept: 1500.0,
            beta: vec![25.0, 60.0, 4.0, 3.0, 1.0, 0.0, 0.0, 40.0, 0.0, 30.0, 0.0, 0.0],
            gamma_ability: 60.0,
            gamma_motivation: 680.0,
            sel_intercept: -0.4,
            sel_ability: 1.2,
            sel_motivation: 0.8,
            sel_urban: 0.15,
            rho: 0.3,
            kappa: 0.4,
            noise_outcome_sd: 350.0,
            noise_sel_sd: 0.5,
            selection_sign: 1,
            covariates: CovariateModel::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl StructuralConfig {
    pub fn validate(&self) -> Result<()> {
        for s in Sector::ALL {
            match self.tau_by_sector.get(&s) {
                Some(v) if v.is_finite() => {}
                _ => return Err(Error::Config(format!("tau_by_sector missing finite value for {s}"))),
            }
        }
        if self.tau_by_sector.len() != Sector::ALL.len() {
            return Err(Error::Config("tau_by_sector must have exactly 5 sectors".into()));
        }
        if self.beta.len() != STRUCTURED_DIM {
            return Err(Error::Config(format!("beta must have {STRUCTURED_DIM} entries, got {}", self.beta.len())));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::ParameterDomain(format!("rho must lie in [-1, 1], got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::ParameterDomain(format!("kappa must lie in [0, 1), got {}", self.kappa)));
        }
        if !(self.noise_outcome_sd > 0.0) || !(self.noise_sel_sd > 0.0) {
            return Err(Error::ParameterDomain("noise scales must be > 0".into()));
        }
        if self.selection_sign != 1 && self.selection_sign != -1 {
            return Err(Error::ParameterDomain(format!("selection_sign must be +1 or -1, got {}", self.selection_sign)));
        }
        let finite = [
            self.intercept,
            self.gamma_ability,
            self.gamma_motivation,
            self.sel_intercept,
            self.sel_ability,
            self.sel_motivation,
            self.sel_urban,
        ];
        if finite.iter().chain(self.beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("structural coefficients must be finite".into()));
        }
        self.embedding.validate()
    }

    pub fn tau(&self, sector: Sector) -> Result<f64> {
        self.tau_by_sector
            .get(&sector)
            .copied()
            .ok_or_else(|| Error::Config(format!("no effect configured for sector {sector}")))
    }

    /// Equal-weight mean of the per-sector effects.
    pub fn overall_tau(&self) -> f64 {
        self.tau_by_sector.values().sum::<f64>() / self.tau_by_sector.len() as f64
    }

    /// Parses a JSON config; absent fields take the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: StructuralConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ground truth and latents kept alongside each unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub true_effect: f64,
    pub latents: LatentProfile,
    /// Treatment probability including the selection shock.
    pub propensity: f64,
    /// Untreated mean outcome `intercept + xβ + Uγ`.
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: usize,
    pub sector: Sector,
    pub structured: [f64; STRUCTURED_DIM],
    pub embedding_features: Vec<f64>,
    pub treatment: u8,
    pub outcome: f64,
    pub(crate) oracle: OracleRecord,
}

/// Which covariates an estimator conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    StructuredOnly,
    TextAugmented,
}

impl FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "structured" | "structured_only" => Ok(FeatureSet::StructuredOnly),
            "text" | "text_augmented" => Ok(FeatureSet::TextAugmented),
            other => Err(Error::Config(format!("unknown feature set {other:?}"))),
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::StructuredOnly => "structured",
            FeatureSet::TextAugmented => "text",
        })
    }
}

/// An immutable generated (or imported) sample.
#[derive(Debug)]
pub struct Dataset {
    units: Vec<UnitRecord>,
    config: StructuralConfig,
    seed: u64,
    true_ate: f64,
    true_ate_by_sector: BTreeMap<Sector, f64>,
    pca: Option<PcaModel>,
    oracle_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            units: self.units.clone(),
            config: self.config.clone(),
            seed: self.seed,
            true_ate: self.true_ate,
            true_ate_by_sector: self.true_ate_by_sector.clone(),
            pca: self.pca.clone(),
            oracle_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.units == other.units
            && self.config == other.config
            && self.seed == other.seed
            && self.true_ate.to_bits() == other.true_ate.to_bits()
            && self.true_ate_by_sector == other.true_ate_by_sector
    }
}

impl Dataset {
    /// Assembles a dataset and computes its ground-truth summaries.
    pub fn from_units(units: Vec<UnitRecord>, config: StructuralConfig, seed: u64, pca: Option<PcaModel>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Data("dataset has no units".into()));
        }
        let true_ate = units.iter().map(|u| u.oracle.true_effect).sum::<f64>() / units.len() as f64;
        let mut sums: BTreeMap<Sector, (f64, usize)> = BTreeMap::new();
        for u in &units {
            let e = sums.entry(u.sector).or_insert((0.0, 0));
            e.0 += u.oracle.true_effect;
            e.1 += 1;
        }
        let true_ate_by_sector = sums.into_iter().map(|(s, (t, c))| (s, t / c as f64)).collect();
        Ok(Self { units, config, seed, true_ate, true_ate_by_sector, pca, oracle_reads: AtomicUsize::new(0) })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn config(&self) -> &StructuralConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pca(&self) -> Option<&PcaModel> {
        self.pca.as_ref()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    pub fn treatments(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.treatment as f64).collect()
    }

    pub fn sectors(&self) -> Vec<Sector> {
        self.units.iter().map(|u| u.sector).collect()
    }

    pub fn structured_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), STRUCTURED_DIM, |i, j| self.units[i].structured[j])
    }

    pub fn embedding_matrix(&self) -> DMatrix<f64> {
        let d = self.units[0].embedding_features.len();
        DMatrix::from_fn(self.len(), d, |i, j| self.units[i].embedding_features[j])
    }

    /// Estimator-facing design matrix for a feature set.
    pub fn design(&self, features: FeatureSet) -> DMatrix<f64> {
        match features {
            FeatureSet::StructuredOnly => self.structured_matrix(),
            FeatureSet::TextAugmented => crate::linalg::hstack(&self.structured_matrix(), &self.embedding_matrix()),
        }
    }

    /// Restricts to a subset of units, keeping the generating config.
    pub fn subset(&self, keep: impl Fn(&UnitRecord) -> bool) -> Result<Dataset> {
        let units: Vec<UnitRecord> = self.units.iter().filter(|u| keep(u)).cloned().collect();
        Dataset::from_units(units, self.config.clone(), self.seed, self.pca.clone())
    }

    /// Applies `f` to every outcome (scale checks, relabelling experiments).
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Dataset {
        let mut out = self.clone();
        for u in &mut out.units {
            u.outcome = f(u.outcome);
        }
        out
    }

    /// Swaps treatment and control labels. Ground truth is left untouched.
    pub fn relabel_treatment(&self) -> Dataset {
        let mut out = self.clone();
        for u in &mut out.units {
            u.treatment = 1 - u.treatment;
        }
        out
    }

    /// Diagnostic access to latents and ground truth. Each call is counted
    /// so that tests can assert estimator paths never touch it.
    pub fn oracle(&self) -> OracleView<'_> {
        self.oracle_reads.fetch_add(1, Ordering::Relaxed);
        OracleView { ds: self }
    }

    /// Number of [`Dataset::oracle`] calls so far.
    pub fn oracle_reads(&self) -> usize {
        self.oracle_reads.load(Ordering::Relaxed)
    }
}

/// Read-only ground-truth view; see [`Dataset::oracle`].
pub struct OracleView<'a> {
    ds: &'a Dataset,
}

impl<'a> OracleView<'a> {
    pub fn true_ate(&self) -> f64 {
        self.ds.true_ate
    }

    pub fn true_ate_by_sector(&self) -> &'a BTreeMap<Sector, f64> {
        &self.ds.true_ate_by_sector
    }

    pub fn record(&self, i: usize) -> &'a OracleRecord {
        &self.ds.units[i].oracle
    }

    pub fn true_effects(&self) -> Vec<f64> {
        self.ds.units.iter().map(|u| u.oracle.true_effect).collect()
    }

    pub fn abilities(&self) -> Vec<f64> {
        self.ds.units.iter().map(|u| u.oracle.latents.ability).collect()
    }

    pub fn motivations(&self) -> Vec<f64> {
        self.ds.units.iter().map(|u| u.oracle.latents.motivation).collect()
    }

    pub fn propensities(&self) -> Vec<f64> {
        self.ds.units.iter().map(|u| u.oracle.propensity).collect()
    }

    pub fn baselines(&self) -> Vec<f64> {
        self.ds.units.iter().map(|u| u.oracle.baseline).collect()
    }
}

// ---------------------------------------------------------------------------
// Generation steps
// ---------------------------------------------------------------------------

/// Draws `n` bivariate standard-normal latent pairs with correlation `rho`.
pub fn draw_latents(n: usize, rho: f64, rng_seed: u64) -> Result<Vec<LatentProfile>> {
    draw_latents_with(n, rho, rng_seed, Execution::Sequential)
}

pub fn draw_latents_with(n: usize, rho: f64, rng_seed: u64, exec: Execution) -> Result<Vec<LatentProfile>> {
    if !(rho.abs() <= 1.0) {
        return Err(Error::ParameterDomain(format!("rho must lie in [-1, 1], got {rho}")));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 latent draws, got {n}")));
    }
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    Ok(exec.map_range(n, |i| {
        let mut rng = rng_for(rng_seed, Stream::Latents, i as u64);
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        LatentProfile { ability: z1, motivation: rho * z1 + tail * z2 }
    }))
}

/// Structured covariate vector for one unit.
fn structured_for(lat: &LatentProfile, model: &CovariateModel, rho: f64, rng_seed: u64, index: u64) -> [f64; STRUCTURED_DIM] {
    let mut rng = rng_for(rng_seed, Stream::Structured, index);
    let s = model.noise_scale;
    let mut shock = || -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
    let (a, m) = (lat.ability, lat.motivation);
    // Unit-variance index with the requested latent loadings and an
    // idiosyncratic remainder.
    let loading = |la: f64, lm: f64, z: f64| -> f64 {
        let explained = la * la + lm * lm + 2.0 * rho * la * lm;
        la * a + lm * m + (1.0 - explained).max(0.0).sqrt() * z
    };
    let experience = (6.0 + 3.0 * loading(model.experience_ability, 0.0, shock())).max(0.0);
    let education = (2.0 + 1.1 * loading(model.education_ability, model.education_motivation, shock())).round().clamp(0.0, 4.0);
    let platform = (72.0 + 11.0 * loading(model.platform_ability, model.platform_motivation, shock())).clamp(0.0, 100.0);
    let success = (84.0 + 7.0 * loading(model.success_ability, model.success_motivation, shock())).clamp(0.0, 100.0);
    let jobs = (2.6 + 0.6 * loading(model.jobs_ability, model.jobs_motivation, shock())).exp().round();
    let age = (25.0 + 0.9 * experience + 6.0 * shock()).clamp(18.0, 80.0);
    let mut rng = rng_for(rng_seed, Stream::Sector, index);
    let gender = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let urban = if rng.random::<f64>() < model.urban_share { 1.0 } else { 0.0 };
    let country = rng.random_range(0..10) as f64;
    let sector = rng.random_range(0..Sector::ALL.len()) as f64;
    let mut rng = rng_for(rng_seed, Stream::Structured, index ^ 0xA0A0_0000);
    let views = 0.6 * platform + 8.0 * s * rng.sample::<f64, _>(StandardNormal);
    let response = (platform / 100.0 + 0.1 * s * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
    [experience, education, platform, success, jobs, age, gender, urban, country, sector, views, response]
}

/// Generates the 12 structured covariates for each latent profile.
pub fn gen_structured(latents: &[LatentProfile], model: &CovariateModel, rho: f64, rng_seed: u64) -> Result<Vec<[f64; STRUCTURED_DIM]>> {
    gen_structured_with(latents, model, rho, rng_seed, Execution::Sequential)
}

pub fn gen_structured_with(
    latents: &[LatentProfile],
    model: &CovariateModel,
    rho: f64,
    rng_seed: u64,
    exec: Execution,
) -> Result<Vec<[f64; STRUCTURED_DIM]>> {
    if latents.is_empty() {
        return Err(Error::InsufficientData("no latent profiles".into()));
    }
    Ok(exec.map_range(latents.len(), |i| structured_for(&latents[i], model, rho, rng_seed, i as u64)))
}

/// Treatment probability `σ(c + s·(a·α + m·μ) + u·urban + noise)`.
pub fn propensity(profile: &LatentProfile, urban: f64, config: &StructuralConfig, noise: f64) -> f64 {
    let sign = config.selection_sign as f64;
    let index = config.sel_intercept
        + sign * (config.sel_ability * profile.ability + config.sel_motivation * profile.motivation)
        + config.sel_urban * urban
        + noise;
    logistic(index).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// One Bernoulli(p) draw keyed by `rng_seed`.
pub fn assign_treatment(p: f64, rng_seed: u64) -> u8 {
    let mut rng = rng_for(rng_seed, Stream::Treatment, 0);
    u8::from(rng.random::<f64>() < p)
}

/// Unit-level effect with diminishing returns in ability.
pub fn unit_effect(tau_sector: f64, ability: f64, kappa: f64) -> f64 {
    tau_sector * (1.0 - kappa * (logistic(ability) - 0.5))
}

/// A unit whose treatment is assigned but whose outcome is not yet drawn.
#[derive(Debug, Clone, Copy)]
pub struct PendingUnit<'a> {
    pub sector: Sector,
    pub structured: &'a [f64; STRUCTURED_DIM],
    pub latents: LatentProfile,
    pub treatment: u8,
}

/// Draws the outcome. Returns `(outcome, true_effect, baseline)`.
pub fn gen_outcome(unit: &PendingUnit<'_>, config: &StructuralConfig, rng_seed: u64) -> Result<(f64, f64, f64)> {
    let tau_s = config.tau(unit.sector)?;
    let effect = unit_effect(tau_s, unit.latents.ability, config.kappa);
    let baseline = config.intercept
        + unit.structured.iter().zip(&config.beta).map(|(x, b)| x * b).sum::<f64>()
        + config.gamma_ability * unit.latents.ability
        + config.gamma_motivation * unit.latents.motivation;
    let mut rng = rng_for(rng_seed, Stream::Outcome, 0);
    let noise: f64 = config.noise_outcome_sd * rng.sample::<f64, _>(StandardNormal);
    Ok((baseline + effect * unit.treatment as f64 + noise, effect, baseline))
}

/// Runs the full generator.
pub fn generate(config: &StructuralConfig, n: usize, seed: u64) -> Result<Dataset> {
    generate_with(config, n, seed, Execution::default())
}

pub fn generate_with(config: &StructuralConfig, n: usize, seed: u64, exec: Execution) -> Result<Dataset> {
    config.validate()?;
    let latents = draw_latents_with(n, config.rho, seed, exec)?;
    let structured = gen_structured_with(&latents, &config.covariates, config.rho, seed, exec)?;
    let embedder = EmbeddingModel::new(&config.embedding)?;

    struct Draft {
        sector: Sector,
        treatment: u8,
        outcome: f64,
        oracle: OracleRecord,
        raw: Vec<f64>,
    }
    let drafts: Vec<Result<Draft>> = exec.map_range(n, |i| {
        let lat = latents[i];
        let x = &structured[i];
        let sector = Sector::from_code(x[COL_SECTOR] as usize).expect("sector code in range");
        let mut rng = rng_for(seed, Stream::Selection, i as u64);
        let shock = config.noise_sel_sd * rng.sample::<f64, _>(StandardNormal);
        let p = propensity(&lat, x[COL_URBAN], config, shock);
        let treatment = assign_treatment(p, derive_seed(seed, Stream::Treatment, i as u64));
        let pending = PendingUnit { sector, structured: x, latents: lat, treatment };
        let (outcome, effect, baseline) = gen_outcome(&pending, config, derive_seed(seed, Stream::Outcome, i as u64))?;
        let raw = embedder.embed(lat.ability, lat.motivation, derive_seed(seed, Stream::Embedding, i as u64));
        Ok(Draft {
            sector,
            treatment,
            outcome,
            oracle: OracleRecord { true_effect: effect, latents: lat, propensity: p, baseline },
            raw,
        })
    });
    let drafts: Vec<Draft> = drafts.into_iter().collect::<Result<_>>()?;
    let raw: Vec<Vec<f64>> = drafts.iter().map(|d| d.raw.clone()).collect();
    let pca = textproxy::pca_fit(&raw, config.embedding.pca_dim)?;
    let features: Vec<Vec<f64>> = exec.map_slice(&raw, |v| {
        let z = pca.transform(v).expect("raw dimension fixed by config");
        textproxy::poly_expand(&z)
    });
    let units = drafts
        .into_iter()
        .zip(features)
        .enumerate()
        .map(|(i, (d, f))| UnitRecord {
            id: i,
            sector: d.sector,
            structured: structured[i],
            embedding_features: f,
            treatment: d.treatment,
            outcome: d.outcome,
            oracle: d.oracle,
        })
        .collect();
    Dataset::from_units(units, config.clone(), seed, Some(pca))
}

// ---------------------------------------------------------------------------
// Omitted-variable bias oracle
// ---------------------------------------------------------------------------

/// Plug-in omitted-variable bias and its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvbBias {
    pub bias: f64,
    pub std_err: f64,
}

/// `γ · Cov(T, U | X) / Var(T | X)` with the stored latents and the
/// configured loadings, where conditioning on `X` is linear projection on the
/// structured covariates (plus intercept).
pub fn ovb_bias(dataset: &Dataset) -> Result<OvbBias> {
    let cfg = dataset.config();
    let oracle = dataset.oracle();
    let x = crate::linalg::with_intercept(&dataset.structured_matrix());
    let t = dataset.treatments();
    let n = t.len();
    if t.iter().all(|&v| v == t[0]) {
        return Err(Error::DegenerateTreatment("only one treatment arm present".into()));
    }
    let conf: Vec<f64> = oracle
        .abilities()
        .iter()
        .zip(oracle.motivations())
        .map(|(a, m)| cfg.gamma_ability * a + cfg.gamma_motivation * m)
        .collect();
    let t_res = residualize(&x, &t)?;
    let stt: f64 = t_res.iter().map(|v| v * v).sum();
    if !(stt > 1e-10 * n as f64) {
        return Err(Error::DegenerateTreatment("Var(T | X) is zero".into()));
    }
    let c_res = residualize(&x, &conf)?;
    let bias = t_res.iter().zip(&c_res).map(|(a, b)| a * b).sum::<f64>() / stt;
    let resid: Vec<f64> = c_res.iter().zip(&t_res).map(|(c, t)| c - bias * t).collect();
    let dof = (n as f64 - x.ncols() as f64 - 1.0).max(1.0);
    let s2 = resid.iter().map(|v| v * v).sum::<f64>() / dof;
    Ok(OvbBias { bias, std_err: (s2 / stt).sqrt() })
}

fn residualize(x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let yv = nalgebra::DVector::from_column_slice(y);
    let coef = crate::linalg::solve_normal(x, &yv, 0.0)?;
    Ok((yv - x * coef).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{correlation, mean, variance};
    use approx::assert_abs_diff_eq;

    fn small_config() -> StructuralConfig {
        StructuralConfig {
            embedding: EmbeddingConfig { raw_dim: 64, ..EmbeddingConfig::default() },
            ..StructuralConfig::default()
        }
    }

    #[test]
    fn perfect_correlation_copies_ability() {
        let lat = draw_latents(4, 1.0, 7).unwrap();
        assert!(lat.iter().all(|l| l.ability == l.motivation));
    }

    #[test]
    fn latent_correlation_matches_rho() {
        let lat = draw_latents(200_000, 0.3, 1).unwrap();
        let a: Vec<f64> = lat.iter().map(|l| l.ability).collect();
        let m: Vec<f64> = lat.iter().map(|l| l.motivation).collect();
        let r = correlation(&a, &m);
        assert!((0.293..=0.307).contains(&r), "r = {r}");
        let lat = draw_latents(100_000, 0.0, 2).unwrap();
        let a: Vec<f64> = lat.iter().map(|l| l.ability).collect();
        let m: Vec<f64> = lat.iter().map(|l| l.motivation).collect();
        assert!(correlation(&a, &m).abs() < 0.01);
    }

    #[test]
    fn latent_moments_within_sampling_bands() {
        let n = 40_000;
        let lat = draw_latents(n, 0.3, 9).unwrap();
        let tol_mean = 3.0 / (n as f64).sqrt();
        let tol_var = 5.0 / (n as f64).sqrt();
        for xs in [
            lat.iter().map(|l| l.ability).collect::<Vec<_>>(),
            lat.iter().map(|l| l.motivation).collect::<Vec<_>>(),
        ] {
            assert!(mean(&xs).abs() < tol_mean);
            assert!((variance(&xs) - 1.0).abs() < tol_var);
        }
    }

    #[test]
    fn rho_out_of_domain_is_rejected() {
        assert!(matches!(draw_latents(10, 1.2, 0), Err(Error::ParameterDomain(_))));
        assert!(matches!(draw_latents(1, 0.2, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn structured_covariates_respect_bounds_and_correlation() {
        let lat = draw_latents(2000, 0.3, 3).unwrap();
        let x = gen_structured(&lat, &CovariateModel::default(), 0.3, 3).unwrap();
        let exp: Vec<f64> = x.iter().map(|r| r[COL_EXPERIENCE]).collect();
        let a: Vec<f64> = lat.iter().map(|l| l.ability).collect();
        let r = correlation(&exp, &a);
        assert!((0.30..=0.40).contains(&r), "corr(experience, ability) = {r}");
        for row in &x {
            assert!((0.0..=100.0).contains(&row[COL_PLATFORM_SCORE]));
            assert!(row[COL_EXPERIENCE] >= 0.0);
            assert!((18.0..=80.0).contains(&row[COL_AGE]));
            assert!(row[COL_SECTOR] >= 0.0 && row[COL_SECTOR] < 5.0 && row[COL_SECTOR].fract() == 0.0);
        }
    }

    #[test]
    fn zero_signal_experience_is_constant() {
        let lat = vec![LatentProfile { ability: 0.0, motivation: 0.0 }; 50];
        let model = CovariateModel { noise_scale: 0.0, ..CovariateModel::default() };
        let x = gen_structured(&lat, &model, 0.3, 3).unwrap();
        assert!(x.iter().all(|r| r[COL_EXPERIENCE] == 6.0));
    }

    #[test]
    fn propensity_closed_forms() {
        let cfg = StructuralConfig::default();
        let zero = LatentProfile { ability: 0.0, motivation: 0.0 };
        let expect = 1.0 / (1.0 + 0.4_f64.exp());
        assert_abs_diff_eq!(propensity(&zero, 0.0, &cfg, 0.0), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(propensity(&zero, 0.0, &cfg, 0.0), 0.40131, epsilon = 1e-4);
        let high = LatentProfile { ability: 20.0, motivation: 0.0 };
        assert!(propensity(&high, 0.0, &cfg, 0.0) > 0.9999);
        let neg = StructuralConfig { selection_sign: -1, ..cfg };
        let one = LatentProfile { ability: 1.0, motivation: 0.0 };
        assert_abs_diff_eq!(propensity(&one, 0.0, &neg, 0.0), 1.0 / (1.0 + 1.6_f64.exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(propensity(&one, 0.0, &neg, 0.0), 0.1680, epsilon = 1e-4);
    }

    #[test]
    fn propensity_stays_inside_unit_interval() {
        let cfg = StructuralConfig::default();
        for a in [-50.0, -5.0, 0.0, 5.0, 50.0] {
            let p = propensity(&LatentProfile { ability: a, motivation: a }, 1.0, &cfg, 0.0);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn treatment_draws() {
        let n = 1_000_000u64;
        let ones: u64 = (0..n).map(|i| assign_treatment(1.0 - 1e-12, i) as u64).sum();
        assert!(ones as f64 / n as f64 >= 0.999_999);
        let mean = (0..n).map(|i| assign_treatment(0.5, i) as f64).sum::<f64>() / n as f64;
        assert!((0.498..=0.502).contains(&mean), "mean {mean}");
        let a: Vec<u8> = (0..100).map(|i| assign_treatment(0.3, i)).collect();
        let b: Vec<u8> = (0..100).map(|i| assign_treatment(0.3, i)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn diminishing_returns_neutral_cases() {
        let cfg0 = StructuralConfig { kappa: 0.0, ..StructuralConfig::default() };
        let x = [0.0; STRUCTURED_DIM];
        for (a, s) in [(1.3, Sector::DataScience), (-2.0, Sector::Marketing)] {
            let unit = PendingUnit { sector: s, structured: &x, latents: LatentProfile { ability: a, motivation: 0.0 }, treatment: 0 };
            let (_, effect, _) = gen_outcome(&unit, &cfg0, 1).unwrap();
            assert_eq!(effect, cfg0.tau(s).unwrap());
        }
        let cfg = StructuralConfig { kappa: 0.4, ..StructuralConfig::default() };
        let unit = PendingUnit { sector: Sector::WebDevelopment, structured: &x, latents: LatentProfile { ability: 0.0, motivation: 0.7 }, treatment: 1 };
        let (_, effect, _) = gen_outcome(&unit, &cfg, 1).unwrap();
        assert_eq!(effect, 649.0);
    }

    #[test]
    fn unknown_sector_is_a_config_error() {
        let mut cfg = StructuralConfig::default();
        cfg.tau_by_sector.remove(&Sector::Marketing);
        let x = [0.0; STRUCTURED_DIM];
        let unit = PendingUnit { sector: Sector::Marketing, structured: &x, latents: LatentProfile { ability: 0.0, motivation: 0.0 }, treatment: 1 };
        assert!(matches!(gen_outcome(&unit, &cfg, 1), Err(Error::Config(_))));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_sector_effects_close_on_overall_ate() {
        let cfg = StructuralConfig::default();
        assert_eq!(cfg.tau_by_sector.len(), 5);
        assert!((cfg.overall_tau() - 557.0).abs() < 1.0);
        assert_eq!(cfg.tau(Sector::Marketing).unwrap(), 5.0 * 557.0 - (746.0 + 649.0 + 395.0 + 436.0));
        assert_eq!((cfg.sel_intercept, cfg.sel_ability, cfg.sel_motivation, cfg.sel_urban), (-0.4, 1.2, 0.8, 0.15));
    }

    #[test]
    fn generation_is_deterministic_across_strategies() {
        let cfg = small_config();
        let a = generate_with(&cfg, 300, 5, Execution::Parallel).unwrap();
        let b = generate_with(&cfg, 300, 5, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let c = generate_with(&cfg, 300, 6, Execution::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ground_truth_summaries_are_exact_means() {
        let ds = generate(&small_config(), 400, 2).unwrap();
        let o = ds.oracle();
        let effects = o.true_effects();
        assert_eq!(o.true_ate(), effects.iter().sum::<f64>() / effects.len() as f64);
        for (s, v) in o.true_ate_by_sector() {
            let e: Vec<f64> = ds.units().iter().filter(|u| u.sector == *s).map(|u| u.oracle.true_effect).collect();
            assert_eq!(*v, e.iter().sum::<f64>() / e.len() as f64);
        }
        for u in ds.units() {
            assert!(u.oracle.true_effect.is_finite());
            assert!(u.oracle.true_effect.signum() == ds.config().tau(u.sector).unwrap().signum());
        }
    }

    #[test]
    fn estimator_accessors_do_not_touch_oracle() {
        let ds = generate(&small_config(), 100, 2).unwrap();
        let _ = (ds.outcomes(), ds.treatments(), ds.design(FeatureSet::TextAugmented));
        assert_eq!(ds.oracle_reads(), 0);
        let _ = ds.oracle().true_ate();
        assert_eq!(ds.oracle_reads(), 1);
    }

    #[test]
    fn ovb_is_zero_without_outcome_confounding() {
        let cfg = StructuralConfig { gamma_ability: 0.0, gamma_motivation: 0.0, ..small_config() };
        let ds = generate(&cfg, 500, 4).unwrap();
        assert_eq!(ovb_bias(&ds).unwrap().bias, 0.0);
    }

    #[test]
    fn ovb_rejects_single_arm() {
        let cfg = StructuralConfig { sel_intercept: -60.0, sel_ability: 0.0, sel_motivation: 0.0, ..small_config() };
        let ds = generate(&cfg, 100, 4).unwrap();
        assert!(matches!(ovb_bias(&ds), Err(Error::DegenerateTreatment(_))));
    }
}

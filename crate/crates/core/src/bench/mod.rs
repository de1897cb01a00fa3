//! Multi-seed experiment suites and their report files.
//!
//! Every suite is a pure function of an [`ExperimentPlan`]: datasets are
//! regenerated from `(config, n_units, seed)` and all learner randomness is
//! derived from the seed, so a plan reproduces its report byte for byte.
//! Seeds run as independent jobs; the report is assembled sequentially in
//! seed order.

mod report;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_with, Dataset, FeatureSet, Sector, StructuralConfig};
use crate::dml::{self, DmlEstimate, EstimatorKind, DEFAULT_FOLDS};
use crate::error::{Error, Result};
use crate::learners::{fit, LearnerSpec};
use crate::linalg;
use crate::par::Execution;
use crate::rng::{derive_seed, Stream};
use crate::stats::{correlation, mean, quantile};
use crate::textproxy::ability_r2;

pub use report::{
    aggregate, write_report, Aggregate, BenchmarkReport, Boxplot, DiagnosticsRow, RunRecord, SectorRow, Suite,
    REPORT_FILE,
};

/// How the nuisance learner of a rung without an explicit spec is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceSelection {
    #[default]
    FixedSpec,
    /// Cross-validated outcome-model MSE over `ExperimentPlan::candidates`.
    MinOutOfSampleMse,
}

/// One estimator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureSet>,
    /// Nuisance learner; `None` on a PLR rung defers to the selection rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner: Option<LearnerSpec>,
}

impl Rung {
    pub fn naive() -> Self {
        Self { estimator: EstimatorKind::Naive, features: None, learner: None }
    }

    pub fn ols_structured() -> Self {
        Self { estimator: EstimatorKind::OlsStructured, features: None, learner: None }
    }

    pub fn plr(features: FeatureSet, learner: LearnerSpec) -> Self {
        Self { estimator: EstimatorKind::Plr, features: Some(features), learner: Some(learner) }
    }

    /// PLR whose learner is picked per dataset by the selection rule.
    pub fn plr_selected(features: FeatureSet) -> Self {
        Self { estimator: EstimatorKind::Plr, features: Some(features), learner: None }
    }

    pub fn label(&self) -> String {
        match self.estimator {
            EstimatorKind::Plr | EstimatorKind::LatentPlr => {
                let learner = self.learner.as_ref().map_or("selected".to_string(), |l| l.label());
                let features = self.features.map_or(String::new(), |f| format!(":{f}"));
                format!("{}[{learner}{features}]", self.estimator.name())
            }
            e => e.name().to_string(),
        }
    }

    fn validate(&self, selection: NuisanceSelection) -> Result<()> {
        match self.estimator {
            EstimatorKind::Naive | EstimatorKind::OlsStructured | EstimatorKind::OraclePlr => Ok(()),
            EstimatorKind::Plr => {
                if self.features.is_none() {
                    return Err(Error::Config(format!("rung {} needs a feature set", self.label())));
                }
                match &self.learner {
                    Some(l) => l.validate(),
                    None if selection == NuisanceSelection::MinOutOfSampleMse => Ok(()),
                    None => Err(Error::Config(format!(
                        "rung {} has no learner and the selection rule is fixed_spec",
                        self.label()
                    ))),
                }
            }
            EstimatorKind::LatentPlr => match &self.learner {
                Some(l) => l.validate(),
                None => Err(Error::Config("latent_plr rung needs a learner".into())),
            },
        }
    }
}

/// Everything a suite needs; serialized as the plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub n_units: usize,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub config: StructuralConfig,
    pub ladder: Vec<Rung>,
    pub tournament: Vec<LearnerSpec>,
    pub architectures: Vec<Vec<usize>>,
    /// Non-MLP row reported next to the architecture sweep.
    pub sweep_reference: Option<LearnerSpec>,
    pub sectors: Vec<Sector>,
    pub sector_rungs: Vec<Rung>,
    pub min_sector_units: usize,
    pub selection: NuisanceSelection,
    pub candidates: Vec<LearnerSpec>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let gbm = LearnerSpec::gradient_boosting();
        let baseline = LearnerSpec::mlp(&[100, 50, 25]);
        Self {
            n_units: 2000,
            seeds: (0..10).collect(),
            folds: DEFAULT_FOLDS,
            config: StructuralConfig::default(),
            ladder: vec![
                Rung::naive(),
                Rung::ols_structured(),
                Rung::plr(FeatureSet::StructuredOnly, gbm.clone()),
                Rung::plr(FeatureSet::TextAugmented, gbm.clone()),
                Rung::plr(FeatureSet::TextAugmented, baseline.clone()),
            ],
            tournament: vec![gbm.clone(), LearnerSpec::regularized_boosting(), baseline.clone()],
            architectures: vec![vec![50, 25, 12], vec![100, 50, 25], vec![120, 60, 30]],
            sweep_reference: Some(gbm.clone()),
            sectors: Sector::ALL.to_vec(),
            sector_rungs: vec![
                Rung::plr(FeatureSet::StructuredOnly, gbm.clone()),
                Rung::plr(FeatureSet::TextAugmented, gbm.clone()),
                Rung::plr(FeatureSet::TextAugmented, baseline),
            ],
            min_sector_units: 200,
            selection: NuisanceSelection::FixedSpec,
            candidates: vec![
                gbm,
                LearnerSpec::regularized_boosting(),
                LearnerSpec::mlp(&[50, 25, 12]),
                LearnerSpec::mlp(&[100, 50, 25]),
                LearnerSpec::mlp(&[120, 60, 30]),
            ],
        }
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("plan seeds must be distinct".into()));
        }
        if self.n_units < 10 * self.folds.max(2) {
            return Err(Error::Config(format!("n_units {} too small for {} folds", self.n_units, self.folds)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        for r in self.ladder.iter().chain(&self.sector_rungs) {
            r.validate(self.selection)?;
        }
        for l in self.tournament.iter().chain(&self.candidates).chain(&self.sweep_reference) {
            l.validate()?;
        }
        if self.architectures.iter().any(|a| a.is_empty() || a.contains(&0)) {
            return Err(Error::Config("architectures must be non-empty lists of positive widths".into()));
        }
        if self.selection == NuisanceSelection::MinOutOfSampleMse && self.candidates.is_empty() {
            return Err(Error::Config("min_out_of_sample_mse needs candidates".into()));
        }
        Ok(())
    }
}

type Outcome = std::result::Result<DmlEstimate, String>;

/// Suite runner that memoizes datasets and estimates, so that suites run on
/// the same plan share their work.
pub struct Bench {
    plan: ExperimentPlan,
    exec: Execution,
    datasets: Arc<Mutex<HashMap<u64, Arc<Dataset>>>>,
    estimates: Arc<Mutex<HashMap<(u64, String), Outcome>>>,
    selected: Arc<Mutex<HashMap<(u64, FeatureSet), LearnerSpec>>>,
}

impl Bench {
    pub fn new(plan: ExperimentPlan) -> Result<Self> {
        Self::with_execution(plan, Execution::default())
    }

    pub fn with_execution(plan: ExperimentPlan, exec: Execution) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan,
            exec,
            datasets: Arc::default(),
            estimates: Arc::default(),
            selected: Arc::default(),
        })
    }

    /// The same plan on other seeds, sharing this runner's caches.
    pub fn with_seeds(&self, seeds: Vec<u64>) -> Result<Self> {
        let plan = ExperimentPlan { seeds, ..self.plan.clone() };
        plan.validate()?;
        Ok(Self {
            plan,
            exec: self.exec,
            datasets: Arc::clone(&self.datasets),
            estimates: Arc::clone(&self.estimates),
            selected: Arc::clone(&self.selected),
        })
    }

    /// Runs one rung on the dataset for `seed`.
    pub fn run(&self, seed: u64, rung: &Rung) -> Result<DmlEstimate> {
        rung.validate(self.plan.selection)?;
        let ds = self.dataset(seed)?;
        self.estimate(&ds, "full", rung).map_err(Error::Data)
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    /// The dataset for `seed`, generated once.
    pub fn dataset(&self, seed: u64) -> Result<Arc<Dataset>> {
        if let Some(ds) = self.datasets.lock().expect("dataset cache").get(&seed) {
            return Ok(Arc::clone(ds));
        }
        let ds = Arc::new(generate_with(&self.plan.config, self.plan.n_units, seed, self.exec)?);
        self.datasets.lock().expect("dataset cache").entry(seed).or_insert_with(|| Arc::clone(&ds));
        Ok(ds)
    }

    fn selected_spec(&self, ds: &Dataset, features: FeatureSet) -> Result<LearnerSpec> {
        let key = (ds.seed(), features);
        if let Some(s) = self.selected.lock().expect("selection cache").get(&key) {
            return Ok(s.clone());
        }
        let (spec, _) = select_nuisance_spec_on(
            &self.plan.candidates,
            &ds.design(features),
            &ds.outcomes(),
            self.plan.folds,
            ds.seed(),
            self.exec,
        )?;
        self.selected.lock().expect("selection cache").insert(key, spec.clone());
        Ok(spec)
    }

    /// Runs one rung on one dataset, memoized by `(seed, rung)`.
    fn estimate(&self, ds: &Dataset, scope: &str, rung: &Rung) -> Outcome {
        let key = (ds.seed(), format!("{scope}|{}", serde_json::to_string(rung).map_err(|e| e.to_string())?));
        if let Some(hit) = self.estimates.lock().expect("estimate cache").get(&key) {
            return hit.clone();
        }
        let out = self.compute(ds, rung).map_err(|e| e.to_string());
        if let Err(e) = &out {
            log::warn!("seed {} {}: {e}", ds.seed(), rung.label());
        }
        self.estimates.lock().expect("estimate cache").insert(key, out.clone());
        out
    }

    fn compute(&self, ds: &Dataset, rung: &Rung) -> Result<DmlEstimate> {
        let k = self.plan.folds;
        let seed = ds.seed();
        match rung.estimator {
            EstimatorKind::Naive => dml::naive_ate(ds),
            EstimatorKind::OlsStructured => dml::ols_structured(ds),
            EstimatorKind::OraclePlr => dml::oracle_plr(ds),
            EstimatorKind::LatentPlr => {
                let spec = rung.learner.as_ref().ok_or_else(|| Error::Config("latent_plr needs a learner".into()))?;
                dml::latent_plr(ds, spec, k, seed, self.exec)
            }
            EstimatorKind::Plr => {
                let features = rung.features.ok_or_else(|| Error::Config("plr rung needs features".into()))?;
                let spec = match &rung.learner {
                    Some(s) => s.clone(),
                    None => self.selected_spec(ds, features)?,
                };
                dml::dml(ds, features, &spec, k, seed, self.exec)
            }
        }
    }

    /// Runs `rungs` on every seed's full dataset.
    fn run_rungs(&self, rungs: &[Rung]) -> Result<Vec<RunRecord>> {
        let per_seed: Vec<Result<Vec<RunRecord>>> = self.exec.map_slice(&self.plan.seeds, |&seed| {
            let ds = self.dataset(seed)?;
            Ok(rungs.iter().map(|r| RunRecord::new(r.label(), seed, None, self.estimate(&ds, "full", r))).collect())
        });
        let mut runs = Vec::new();
        for r in per_seed {
            runs.extend(r?);
        }
        Ok(runs)
    }

    fn report(&self, suite: Suite, runs: Vec<RunRecord>, labels: &[String]) -> BenchmarkReport {
        let aggregates = labels
            .iter()
            .map(|l| {
                let rs: Vec<&RunRecord> = runs.iter().filter(|r| &r.label == l).collect();
                aggregate(l, &rs)
            })
            .collect();
        BenchmarkReport::new(suite, self.plan.clone(), runs, aggregates)
    }

    /// Baseline ladder: naive, structured-only OLS and PLR rungs.
    pub fn ladder(&self) -> Result<BenchmarkReport> {
        let rungs = &self.plan.ladder;
        let runs = self.run_rungs(rungs)?;
        let labels: Vec<String> = rungs.iter().map(Rung::label).collect();
        let mut report = self.report(Suite::Ladder, runs, &labels);
        let means: Vec<Option<f64>> = report.aggregates.iter().map(|a| a.mean_bias_pct).collect();
        if !means.windows(2).all(|w| matches!(w, [Some(a), Some(b)] if a > b)) {
            report.flags.push("ladder_not_strictly_decreasing".into());
        }
        Ok(report)
    }

    /// Text-augmented PLR with each tournament learner.
    pub fn tournament(&self) -> Result<BenchmarkReport> {
        if self.plan.seeds.len() < 10 {
            return Err(Error::Config(format!("tournament needs at least 10 seeds, got {}", self.plan.seeds.len())));
        }
        if self.plan.tournament.is_empty() {
            return Err(Error::Config("tournament needs at least one learner".into()));
        }
        let rungs: Vec<Rung> =
            self.plan.tournament.iter().map(|l| Rung::plr(FeatureSet::TextAugmented, l.clone())).collect();
        let runs = self.run_rungs(&rungs)?;
        let labels: Vec<String> = rungs.iter().map(Rung::label).collect();
        Ok(self.report(Suite::Tournament, runs, &labels))
    }

    /// Text-augmented PLR with one MLP per architecture, plus the reference row.
    pub fn arch_sweep(&self) -> Result<BenchmarkReport> {
        if self.plan.architectures.is_empty() {
            return Err(Error::Config("architecture grid is empty".into()));
        }
        let mut rungs: Vec<Rung> = self
            .plan
            .architectures
            .iter()
            .map(|a| Rung::plr(FeatureSet::TextAugmented, LearnerSpec::mlp(a)))
            .collect();
        let n_arch = rungs.len();
        if let Some(r) = &self.plan.sweep_reference {
            rungs.push(Rung::plr(FeatureSet::TextAugmented, r.clone()));
        }
        let runs = self.run_rungs(&rungs)?;
        let labels: Vec<String> = rungs.iter().map(Rung::label).collect();
        let mut report = self.report(Suite::ArchSweep, runs, &labels);
        report.best_architecture = report.aggregates[..n_arch]
            .iter()
            .filter_map(|a| a.mean_bias_pct.map(|b| (b.abs(), a.label.clone())))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, l)| l);
        Ok(report)
    }

    /// Sector-stratified estimates against the stored sector truths.
    pub fn sector_split(&self) -> Result<BenchmarkReport> {
        let plan = &self.plan;
        if plan.sectors.is_empty() {
            return Err(Error::Config("sector list is empty".into()));
        }
        let per_seed: Vec<Result<Vec<RunRecord>>> = self.exec.map_slice(&plan.seeds, |&seed| {
            let ds = self.dataset(seed)?;
            let mut out = Vec::new();
            for &sector in &plan.sectors {
                let sub = ds.subset(|u| u.sector == sector)?;
                for r in &plan.sector_rungs {
                    let outcome = if sub.len() < plan.min_sector_units {
                        Err(format!("sector too small: {} units < {}", sub.len(), plan.min_sector_units))
                    } else {
                        self.estimate(&sub, sector.name(), r)
                    };
                    out.push(RunRecord::new(r.label(), seed, Some(sector), outcome));
                }
            }
            Ok(out)
        });
        let mut runs = Vec::new();
        for r in per_seed {
            runs.extend(r?);
        }
        let labels: Vec<String> = plan.sector_rungs.iter().map(Rung::label).collect();
        let mut sectors = Vec::new();
        for &sector in &plan.sectors {
            let truth = plan.config.tau(sector)?;
            for l in &labels {
                let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.sector == Some(sector) && &r.label == l).collect();
                sectors.push(SectorRow::from_runs(sector, l, truth, &rs));
            }
        }
        let mut report = self.report(Suite::Sectors, runs, &labels);
        if sectors.iter().any(|s| s.skipped) {
            report.flags.push("sector_skipped_too_small".into());
        }
        report.sectors = sectors;
        Ok(report)
    }

    /// Identification diagnostics per seed. These read the oracle by design.
    pub fn diagnostics(&self) -> Result<BenchmarkReport> {
        let rows: Vec<Result<DiagnosticsRow>> = self.exec.map_slice(&self.plan.seeds, |&seed| {
            let ds = self.dataset(seed)?;
            diagnostics_row(&ds)
        });
        let rows: Vec<DiagnosticsRow> = rows.into_iter().collect::<Result<_>>()?;
        let mut report = BenchmarkReport::new(Suite::Diagnostics, self.plan.clone(), vec![], vec![]);
        if rows.iter().any(|r| r.r2_text < 0.1) {
            report.flags.push("text_proxy_destroyed".into());
        }
        if rows.iter().any(|r| !(r.r2_combined >= r.r2_text && r.r2_text >= r.r2_structured)) {
            report.flags.push("r2_ladder_collapsed".into());
        }
        report.diagnostics = rows;
        Ok(report)
    }
}

pub fn run_ladder(plan: &ExperimentPlan) -> Result<BenchmarkReport> {
    Bench::new(plan.clone())?.ladder()
}

pub fn run_tournament(plan: &ExperimentPlan) -> Result<BenchmarkReport> {
    Bench::new(plan.clone())?.tournament()
}

pub fn run_arch_sweep(plan: &ExperimentPlan) -> Result<BenchmarkReport> {
    Bench::new(plan.clone())?.arch_sweep()
}

pub fn run_sector_split(plan: &ExperimentPlan) -> Result<BenchmarkReport> {
    Bench::new(plan.clone())?.sector_split()
}

pub fn run_diagnostics(plan: &ExperimentPlan) -> Result<BenchmarkReport> {
    Bench::new(plan.clone())?.diagnostics()
}

/// Ability gap, overlap, PC1 alignment and the R² ladder for one dataset.
pub fn diagnostics_row(ds: &Dataset) -> Result<DiagnosticsRow> {
    let o = ds.oracle();
    let ability = o.abilities();
    let p = o.propensities();
    let t = ds.treatments();
    let arm = |flag: f64, v: &[f64]| -> Vec<f64> { v.iter().zip(&t).filter(|(_, ti)| **ti == flag).map(|(x, _)| *x).collect() };
    let (a1, a0) = (arm(1.0, &ability), arm(0.0, &ability));
    let (p1, p0) = (arm(1.0, &p), arm(0.0, &p));
    if a1.is_empty() || a0.is_empty() {
        return Err(Error::DegenerateTreatment("one treatment arm is empty".into()));
    }
    let emb = ds.embedding_matrix();
    let pc1: Vec<f64> = emb.column(0).iter().copied().collect();
    let pc1_corr = correlation(&pc1, &ability);
    let in_support = |v: &[f64]| v.iter().filter(|x| (0.05..=0.95).contains(*x)).count() as f64 / v.len() as f64;
    Ok(DiagnosticsRow {
        seed: ds.seed(),
        n_units: ds.len(),
        ability_treated: mean(&a1),
        ability_control: mean(&a0),
        ability_gap: mean(&a1) - mean(&a0),
        propensity_treated_q05: quantile(&p1, 0.05),
        propensity_treated_median: quantile(&p1, 0.5),
        propensity_treated_q95: quantile(&p1, 0.95),
        propensity_control_q05: quantile(&p0, 0.05),
        propensity_control_median: quantile(&p0, 0.5),
        propensity_control_q95: quantile(&p0, 0.95),
        share_in_support: in_support(&p),
        pc1_corr,
        pc1_corr_abs: pc1_corr.abs(),
        r2_structured: ability_r2(&ds.structured_matrix(), &ability)?,
        r2_text: ability_r2(&emb, &ability)?,
        r2_combined: ability_r2(&ds.design(FeatureSet::TextAugmented), &ability)?,
    })
}

/// Picks the candidate with the lowest cross-validated outcome-model MSE on
/// the text-augmented design. Only `Y` and `W` are used.
pub fn select_nuisance_spec(candidates: &[LearnerSpec], dataset: &Dataset) -> Result<LearnerSpec> {
    let w = dataset.design(FeatureSet::TextAugmented);
    let (spec, _) =
        select_nuisance_spec_on(candidates, &w, &dataset.outcomes(), DEFAULT_FOLDS, dataset.seed(), Execution::default())?;
    Ok(spec)
}

/// Matrix-level selection; returns the winner and every candidate's CV MSE.
/// Ties (within a relative 1e-12) go to the candidate with fewer parameters.
pub fn select_nuisance_spec_on(
    candidates: &[LearnerSpec],
    x: &nalgebra::DMatrix<f64>,
    y: &[f64],
    k: usize,
    rng_seed: u64,
    exec: Execution,
) -> Result<(LearnerSpec, Vec<f64>)> {
    let first = candidates.first().ok_or_else(|| Error::Config("no candidate learners".into()))?;
    if candidates.len() == 1 {
        first.validate()?;
        return Ok((first.clone(), vec![f64::NAN]));
    }
    let n = x.nrows();
    if n < 2 * k || k < 2 {
        return Err(Error::InsufficientData(format!("{n} rows for {k}-fold selection")));
    }
    let folds = dml::contiguous_folds(&dml::seeded_permutation(n, derive_seed(rng_seed, Stream::Folds, 1)), k);
    let mut mses = Vec::with_capacity(candidates.len());
    for (c, spec) in candidates.iter().enumerate() {
        spec.validate()?;
        let per_fold: Vec<Result<f64>> = exec.map_range(k, |f| {
            let test = &folds[f];
            let train: Vec<usize> = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, r)| r.clone()).collect();
            let model = fit(
                spec,
                &linalg::select_rows(x, &train),
                &linalg::select_entries(y, &train),
                derive_seed(rng_seed, Stream::Learner, (c * k + f) as u64),
            )?;
            let pred = model.predict(&linalg::select_rows(x, test))?;
            Ok(test.iter().zip(pred).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>())
        });
        let sse: f64 = per_fold.into_iter().collect::<Result<Vec<f64>>>()?.iter().sum();
        mses.push(sse / n as f64);
    }
    let d = x.ncols();
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (mses[i], mses[best]);
        let tie = (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        if (!tie && a < b) || (tie && candidates[i].complexity(d) < candidates[best].complexity(d)) {
            best = i;
        }
    }
    Ok((candidates[best].clone(), mses))
}

#[cfg(test)]
mod tests;

//! Report types, aggregation and the JSON/CSV writers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentPlan;
use crate::datagen::Sector;
use crate::dml::DmlEstimate;
use crate::error::Result;
use crate::stats::{mean, quantile, std_dev};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Ladder,
    Tournament,
    ArchSweep,
    Sectors,
    Diagnostics,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Ladder => "ladder",
            Suite::Tournament => "tournament",
            Suite::ArchSweep => "arch_sweep",
            Suite::Sectors => "sectors",
            Suite::Diagnostics => "diagnostics",
        }
    }

    pub fn csv_file(self) -> String {
        format!("{}.csv", self.name())
    }
}

/// One estimator run on one seed (and optionally one sector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub sector: Option<Sector>,
    pub estimate: Option<DmlEstimate>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(label: String, seed: u64, sector: Option<Sector>, outcome: std::result::Result<DmlEstimate, String>) -> Self {
        match outcome {
            Ok(e) => Self { label, seed, sector, estimate: Some(e), error: None },
            Err(e) => Self { label, seed, sector, estimate: None, error: Some(e) },
        }
    }

    fn bias_pct(&self) -> Option<f64> {
        self.estimate.as_ref().and_then(|e| e.bias_pct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boxplot {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Boxplot {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        Some(Self {
            min: quantile(v, 0.0),
            q1: quantile(v, 0.25),
            median: quantile(v, 0.5),
            q3: quantile(v, 0.75),
            max: quantile(v, 1.0),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    pub fn iqr_covers(&self, x: f64) -> bool {
        self.q1 <= x && x <= self.q3
    }
}

/// Summary of every successful run sharing a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub n_runs: usize,
    pub n_failed: usize,
    pub mean_estimate: Option<f64>,
    pub sd_estimate: Option<f64>,
    pub mean_truth: Option<f64>,
    pub mean_bias_pct: Option<f64>,
    pub mean_abs_bias_pct: Option<f64>,
    pub estimates: Option<Boxplot>,
    /// Whether the estimate IQR contains the mean truth.
    pub iqr_covers_truth: Option<bool>,
    /// Share of runs whose 95% interval contains that run's truth.
    pub coverage: Option<f64>,
}

pub fn aggregate(label: &str, runs: &[&RunRecord]) -> Aggregate {
    let ok: Vec<&DmlEstimate> = runs.iter().filter_map(|r| r.estimate.as_ref()).collect();
    let n_failed = runs.len() - ok.len();
    let opt = |v: Vec<f64>| if v.is_empty() { None } else { Some(mean(&v)) };
    let theta: Vec<f64> = ok.iter().map(|e| e.theta_hat).collect();
    let truths: Vec<f64> = ok.iter().filter_map(|e| e.true_ate).collect();
    let bias: Vec<f64> = runs.iter().filter_map(|r| r.bias_pct()).collect();
    let estimates = Boxplot::of(&theta);
    let mean_truth = opt(truths);
    let covered: Vec<f64> =
        ok.iter().filter_map(|e| e.true_ate.map(|t| if e.covers(t) { 1.0 } else { 0.0 })).collect();
    Aggregate {
        label: label.to_string(),
        n_runs: ok.len(),
        n_failed,
        mean_estimate: opt(theta.clone()),
        sd_estimate: (theta.len() > 1).then(|| std_dev(&theta)),
        mean_truth,
        mean_bias_pct: opt(bias.clone()),
        mean_abs_bias_pct: opt(bias.iter().map(|b| b.abs()).collect()),
        estimates,
        iqr_covers_truth: estimates.zip(mean_truth).map(|(b, t)| b.iqr_covers(t)),
        coverage: opt(covered),
    }
}

/// One estimator within one sector, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorRow {
    pub sector: Sector,
    pub label: String,
    /// Structural sector effect.
    pub config_tau: f64,
    /// Mean over seeds of the sample sector effect.
    pub sample_truth: Option<f64>,
    pub n_runs: usize,
    pub skipped: bool,
    pub mean_estimate: Option<f64>,
    pub mean_bias_pct: Option<f64>,
    pub mean_abs_bias_pct: Option<f64>,
}

impl SectorRow {
    pub fn from_runs(sector: Sector, label: &str, config_tau: f64, runs: &[&RunRecord]) -> Self {
        let agg = aggregate(label, runs);
        Self {
            sector,
            label: label.to_string(),
            config_tau,
            sample_truth: agg.mean_truth,
            n_runs: agg.n_runs,
            skipped: agg.n_runs == 0,
            mean_estimate: agg.mean_estimate,
            mean_bias_pct: agg.mean_bias_pct,
            mean_abs_bias_pct: agg.mean_abs_bias_pct,
        }
    }
}

/// Identification diagnostics for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub seed: u64,
    pub n_units: usize,
    pub ability_treated: f64,
    pub ability_control: f64,
    pub ability_gap: f64,
    pub propensity_treated_q05: f64,
    pub propensity_treated_median: f64,
    pub propensity_treated_q95: f64,
    pub propensity_control_q05: f64,
    pub propensity_control_median: f64,
    pub propensity_control_q95: f64,
    /// Share of units with propensity in `[0.05, 0.95]`.
    pub share_in_support: f64,
    pub pc1_corr: f64,
    pub pc1_corr_abs: f64,
    pub r2_structured: f64,
    pub r2_text: f64,
    pub r2_combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub suite: Suite,
    pub plan: ExperimentPlan,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    #[serde(default)]
    pub sectors: Vec<SectorRow>,
    #[serde(default)]
    pub diagnostics: Vec<DiagnosticsRow>,
    #[serde(default)]
    pub best_architecture: Option<String>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl BenchmarkReport {
    pub fn new(suite: Suite, plan: ExperimentPlan, runs: Vec<RunRecord>, aggregates: Vec<Aggregate>) -> Self {
        Self {
            suite,
            plan,
            runs,
            aggregates,
            sectors: vec![],
            diagnostics: vec![],
            best_architecture: None,
            flags: vec![],
        }
    }

    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// Long-format table: one row per run, or per sector/diagnostic row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self.suite {
            Suite::Diagnostics => {
                for r in &self.diagnostics {
                    w.serialize(r)?;
                }
            }
            Suite::Sectors => {
                w.write_record(["sector", "label", "seed", "theta_hat", "std_err", "true_ate", "bias_pct", "config_tau", "error"])?;
                for r in &self.runs {
                    let sector = r.sector.map(|s| s.name().to_string()).unwrap_or_default();
                    let tau = r
                        .sector
                        .and_then(|s| self.sectors.iter().find(|row| row.sector == s))
                        .map(|row| fmt(row.config_tau))
                        .unwrap_or_default();
                    let [theta, se, truth, bias] = run_fields(r);
                    let err = r.error.clone().unwrap_or_default();
                    w.write_record([sector, r.label.clone(), r.seed.to_string(), theta, se, truth, bias, tau, err])?;
                }
            }
            _ => {
                w.write_record(["label", "seed", "theta_hat", "std_err", "true_ate", "bias_pct", "error"])?;
                for r in &self.runs {
                    let [theta, se, truth, bias] = run_fields(r);
                    let err = r.error.clone().unwrap_or_default();
                    w.write_record([r.label.clone(), r.seed.to_string(), theta, se, truth, bias, err])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn run_fields(r: &RunRecord) -> [String; 4] {
    match &r.estimate {
        Some(e) => [
            fmt(e.theta_hat),
            fmt(e.std_err),
            e.true_ate.map(fmt).unwrap_or_default(),
            e.bias_pct.map(fmt).unwrap_or_default(),
        ],
        None => Default::default(),
    }
}

/// Writes `report.json` and the suite's long-format CSV into `dir`.
pub fn write_report(report: &BenchmarkReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(dir.join(REPORT_FILE), json + "\n")?;
    let file = fs::File::create(dir.join(report.suite.csv_file()))?;
    report.write_csv(std::io::BufWriter::new(file))
}

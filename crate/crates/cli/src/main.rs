//! `proxydml`: generate synthetic samples, run single estimates and the
//! multi-seed benchmark suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use proxydml::bench::{self, Bench, BenchmarkReport, ExperimentPlan, Rung};
use proxydml::datagen::{generate_with, read_dataset, write_dataset};
use proxydml::dml;
use proxydml::par::{with_jobs, Execution};
use proxydml::{Error, ErrorKind, FeatureSet, LearnerKind, LearnerSpec, Result};

const DEFAULT_ARCH: [usize; 3] = [100, 50, 25];

#[derive(Parser, Debug)]
#[command(name = "proxydml", version, about = "Text-proxy confounding benchmark for double machine learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one synthetic sample and write data.csv + config.json.
    Generate(Opts),
    /// Run one PLR estimate and print it as JSON.
    Estimate(Opts),
    /// Naive, structured-only and text-augmented estimator ladder.
    Ladder(Opts),
    /// Text-augmented PLR with each tournament learner.
    Tournament(Opts),
    /// Text-augmented PLR over the MLP architecture grid.
    ArchSweep(Opts),
    /// Sector-stratified estimates against the sector truths.
    Sectors(Opts),
    /// Identification diagnostics per seed.
    Diagnostics(Opts),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LearnerArg {
    Linear,
    Tree,
    Gbm,
    Rgbm,
    Mlp,
}

impl LearnerArg {
    fn kind(self) -> LearnerKind {
        match self {
            LearnerArg::Linear => LearnerKind::Linear,
            LearnerArg::Tree => LearnerKind::Tree,
            LearnerArg::Gbm => LearnerKind::GradientBoosting,
            LearnerArg::Rgbm => LearnerKind::RegularizedBoosting,
            LearnerArg::Mlp => LearnerKind::Mlp,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FeaturesArg {
    Structured,
    Text,
}

/// Every flag is optional so that a config file value is only replaced
/// when the flag is given.
#[derive(Args, Debug, Default)]
struct Opts {
    /// Sample size [default: 2000]
    #[arg(long)]
    n: Option<usize>,
    /// Single seed; for suites this runs one seed [default: 0]
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Inclusive seed range `A..B` (or `A..=B`, or a comma list) [default: 0..9]
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    /// Correlation of the two latents [default: 0.3]
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    /// Direction of selection on the latents, +1 or -1 [default: 1]
    #[arg(long, allow_hyphen_values = true)]
    selection_sign: Option<i32>,
    /// Effect heterogeneity in ability [default: 0.4]
    #[arg(long)]
    kappa: Option<f64>,
    /// Nuisance learner; for tournament it replaces the learner list [default: mlp]
    #[arg(long, value_enum)]
    learner: Option<LearnerArg>,
    /// MLP hidden widths, e.g. 50,25,12; for arch-sweep it replaces the grid [default: 100,50,25]
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Cross-fitting folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    /// Covariates for estimate [default: text]
    #[arg(long, value_enum)]
    features: Option<FeaturesArg>,
    /// Output directory [default: results for suites; required for generate]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment plan JSON; missing fields take the built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by generate (estimate only)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parallel seed workers; 1 runs sequentially [default: all cores]
    #[arg(long)]
    jobs: Option<usize>,
}

/// Parsed `--seeds` value; a newtype so clap treats it as one value.
#[derive(Clone, Debug, PartialEq)]
struct Seeds(Vec<u64>);

/// Parsed `--arch` value.
#[derive(Clone, Debug, PartialEq)]
struct Arch(Vec<usize>);

fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    let bad = |_| format!("invalid seed list {s:?}");
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(format!("empty seed range {s:?}"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(bad)).collect::<std::result::Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("empty seed list {s:?}"));
    }
    Ok(Seeds(seeds))
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    let arch: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| format!("invalid width in {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if arch.is_empty() || arch.contains(&0) {
        return Err(format!("architecture {s:?} needs positive widths"));
    }
    Ok(Arch(arch))
}

impl Opts {
    /// Built-in defaults, then the config file, then flags.
    fn plan(&self) -> Result<ExperimentPlan> {
        let mut plan = match &self.config {
            Some(path) => ExperimentPlan::from_json(&fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?)?,
            None => ExperimentPlan::default(),
        };
        if let Some(n) = self.n {
            plan.n_units = n;
        }
        if let Some(seed) = self.seed {
            plan.seeds = vec![seed];
        }
        if let Some(seeds) = &self.seeds {
            plan.seeds = seeds.0.clone();
        }
        if let Some(rho) = self.rho {
            plan.config.rho = rho;
        }
        if let Some(sign) = self.selection_sign {
            plan.config.selection_sign = sign;
        }
        if let Some(kappa) = self.kappa {
            plan.config.kappa = kappa;
        }
        if let Some(k) = self.folds {
            plan.folds = k;
        }
        plan.validate()?;
        Ok(plan)
    }

    fn learner(&self) -> Result<LearnerSpec> {
        let kind = self.learner.map_or(LearnerKind::Mlp, LearnerArg::kind);
        match (&self.arch, kind) {
            (Some(a), LearnerKind::Mlp) => Ok(LearnerSpec::mlp(&a.0)),
            (None, LearnerKind::Mlp) => Ok(LearnerSpec::mlp(&DEFAULT_ARCH)),
            (Some(_), _) => Err(Error::Config("--arch only applies to --learner mlp".into())),
            (None, k) => Ok(LearnerSpec::default_for(k)),
        }
    }

    fn features(&self) -> FeatureSet {
        match self.features {
            Some(FeaturesArg::Structured) => FeatureSet::StructuredOnly,
            _ => FeatureSet::TextAugmented,
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("results"))
    }

    fn execution(&self) -> Execution {
        match self.jobs {
            Some(1) => Execution::Sequential,
            _ => Execution::Parallel,
        }
    }
}

fn generate(o: &Opts) -> Result<()> {
    let out = o.out.as_deref().ok_or_else(|| Error::Config("generate needs --out DIR".into()))?;
    let plan = o.plan()?;
    let seed = plan.seeds[0];
    let ds = generate_with(&plan.config, plan.n_units, seed, o.execution())?;
    write_dataset(&ds, out)?;
    println!("wrote {} units (seed {seed}) to {}", ds.len(), out.display());
    Ok(())
}

fn estimate(o: &Opts) -> Result<()> {
    let plan = o.plan()?;
    let spec = o.learner()?;
    spec.validate()?;
    let ds = match &o.data {
        Some(dir) => read_dataset(dir)?,
        None => generate_with(&plan.config, plan.n_units, plan.seeds[0], o.execution())?,
    };
    let est = dml::dml(&ds, o.features(), &spec, plan.folds, ds.seed(), o.execution())?;
    let json = serde_json::to_string_pretty(&est)?;
    if let Some(out) = &o.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("estimate.json"), format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(())
}

fn suite(o: &Opts, run: impl FnOnce(&Bench) -> Result<BenchmarkReport>, adjust: impl FnOnce(&mut ExperimentPlan) -> Result<()>) -> Result<()> {
    let mut plan = o.plan()?;
    adjust(&mut plan)?;
    plan.validate()?;
    let bench = Bench::with_execution(plan, o.execution())?;
    let report = run(&bench)?;
    let out = o.out_dir();
    bench::write_report(&report, &out)?;
    print_summary(&report, &out);
    Ok(())
}

fn print_summary(r: &BenchmarkReport, out: &Path) {
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
    for a in &r.aggregates {
        println!(
            "{:<32} runs {:>2} failed {:>2} mean {:>9} bias% {:>8} |bias%| {:>7}",
            a.label,
            a.n_runs,
            a.n_failed,
            f(a.mean_estimate),
            f(a.mean_bias_pct),
            f(a.mean_abs_bias_pct)
        );
    }
    for s in &r.sectors {
        println!("{:<12} {:<32} tau {:>6.0} bias% {:>8}", s.sector.name(), s.label, s.config_tau, f(s.mean_bias_pct));
    }
    for d in &r.diagnostics {
        println!(
            "seed {:>3} gap {:.3} |r(pc1)| {:.3} R2 {:.3}/{:.3}/{:.3}",
            d.seed, d.ability_gap, d.pc1_corr_abs, d.r2_structured, d.r2_text, d.r2_combined
        );
    }
    if let Some(b) = &r.best_architecture {
        println!("best architecture: {b}");
    }
    for flag in &r.flags {
        println!("flag: {flag}");
    }
    println!("wrote {}", out.display());
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Generate(o) => generate(o),
        Command::Estimate(o) => estimate(o),
        Command::Ladder(o) => suite(o, Bench::ladder, |_| Ok(())),
        Command::Tournament(o) => suite(o, Bench::tournament, |p| {
            if o.learner.is_some() || o.arch.is_some() {
                p.tournament = vec![o.learner()?];
            }
            Ok(())
        }),
        Command::ArchSweep(o) => suite(o, Bench::arch_sweep, |p| {
            if let Some(a) = &o.arch {
                p.architectures = vec![a.0.clone()];
            }
            Ok(())
        }),
        Command::Sectors(o) => suite(o, Bench::sector_split, |p| {
            if o.learner.is_some() || o.arch.is_some() {
                p.sector_rungs.push(Rung::plr(FeatureSet::TextAugmented, o.learner()?));
            }
            Ok(())
        }),
        Command::Diagnostics(o) => suite(o, Bench::diagnostics, |_| Ok(())),
    }
}

fn opts(cmd: &Command) -> &Opts {
    match cmd {
        Command::Generate(o)
        | Command::Estimate(o)
        | Command::Ladder(o)
        | Command::Tournament(o)
        | Command::ArchSweep(o)
        | Command::Sectors(o)
        | Command::Diagnostics(o) => o,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numerical => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let jobs = opts(&cli.command).jobs.unwrap_or(0);
    match with_jobs(jobs, || dispatch(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

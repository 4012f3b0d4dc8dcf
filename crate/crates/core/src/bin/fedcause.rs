use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedcause::estimators::{clb_ipw, crossfit_aipw, meta_ipw, wls_outcome_fitter, AipwFlavor, AipwOptions, MetaWeighting};
use fedcause::fedsim::{run_algorithm1, run_algorithm2, Alg2Config, FedConfig, OutcomeTraining, PropensitySource};
use fedcause::harness::{ci_grid, sweep_kl, SweepSpec};
use fedcause::io::{read_dataset_dir, write_dataset_dir};
use fedcause::nuisance::{fit_propensity, Eta};
use fedcause::ratio::{FeatureMap, RatioBackend};
use fedcause::synth::{gen_covariate_shift, ShiftConfig};
use fedcause::{EstimateReport, EstimatorKind, Error, Result, SeedSpec};

#[derive(Parser)]
#[command(name = "fedcause", version, about = "Collaborative causal-effect estimation across data sites")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw one replication of the covariate-shift design into a directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        replication: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the target ATE from a dataset directory.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "clb-ipw")]
        estimator: EstimatorKind,
        #[arg(long, value_enum, default_value_t = Ratio::Tilting)]
        ratio: Ratio,
        #[arg(long, default_value_t = 0.95)]
        ci: f64,
        /// Run the site/server protocol instead of the pooled computation.
        #[arg(long)]
        federated: bool,
        /// Message log (JSON lines) for federated runs.
        #[arg(long, requires = "federated")]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        fold_seed: u64,
        /// FedAvg settings (JSON) for federated AIPW.
        #[arg(long)]
        fed_config: Option<PathBuf>,
    },
    /// MSE against heterogeneity.
    SweepKl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Interval widths and coverage over the specification grid.
    CiGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ratio {
    Tilting,
    Knn,
}

impl Ratio {
    fn backend(self) -> RatioBackend {
        match self {
            Ratio::Tilting => RatioBackend::tilting(FeatureMap::IdentityPlusIntercept),
            Ratio::Knn => RatioBackend::knn(),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    replication: u64,
    true_tau: f64,
    site_means: &'a [f64],
    d_kl: f64,
    /// `Σ_k (μ_k − μ_t)² / (2σ²)` over scalar means, without a factor `d`.
    d_kl_convention: &'static str,
    config: &'a ShiftConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn generate(config: Option<&Path>, seed: u64, replication: u64, out: &Path) -> Result<()> {
    let cfg: ShiftConfig = match config {
        Some(p) => read_json(p)?,
        None => ShiftConfig::default(),
    };
    let draw = gen_covariate_shift(&cfg, &SeedSpec::new(seed), replication)?;
    fs::create_dir_all(out)?;
    let files = write_dataset_dir(out, &draw.sites, &draw.target)?;
    let manifest = Manifest {
        seed,
        replication,
        true_tau: draw.true_tau,
        site_means: &draw.site_means,
        d_kl: cfg.d_kl,
        d_kl_convention: "sum_over_sites_scalar_means",
        config: &cfg,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} files and manifest.json to {}", files.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    data: &Path,
    kind: EstimatorKind,
    ratio: Ratio,
    level: f64,
    federated: bool,
    log_path: Option<&Path>,
    folds: usize,
    fold_seed: u64,
    fed_config: Option<&Path>,
) -> Result<EstimateReport> {
    let (sites, target) = read_dataset_dir(data)?;
    let backend = ratio.backend();
    let flavor = match kind {
        EstimatorKind::MetaAIPW => AipwFlavor::Meta,
        _ => AipwFlavor::Clb,
    };
    if !federated {
        let p = fit_propensity(&sites, &target, &backend)?;
        return match kind {
            EstimatorKind::MetaIPW => meta_ipw(&sites, &p, Some(&target), &MetaWeighting::InverseVariance, level),
            EstimatorKind::ClbIPW => clb_ipw(&sites, &p, &Eta::vanilla(), level),
            EstimatorKind::MetaAIPW | EstimatorKind::ClbAIPW => {
                let opts = AipwOptions { flavor, folds, fold_seed, level, ..Default::default() };
                crossfit_aipw(&sites, &target, &p, &opts, &wls_outcome_fitter)
            }
        };
    }
    let (report, log) = match kind {
        EstimatorKind::MetaIPW => {
            return Err(Error::InvalidInput("meta-ipw has no federated protocol; use clb-ipw, meta-aipw or clb-aipw".into()))
        }
        EstimatorKind::ClbIPW => {
            let p = fit_propensity(&sites, &target, &backend)?;
            run_algorithm1(&sites, &p, &Eta::vanilla(), level)?
        }
        EstimatorKind::MetaAIPW | EstimatorKind::ClbAIPW => {
            let fed: FedConfig = match fed_config {
                Some(p) => read_json(p)?,
                None => FedConfig::default(),
            };
            let cfg = Alg2Config { outcome: OutcomeTraining::FedAvg(fed), flavor, folds, fold_seed, level, ..Default::default() };
            run_algorithm2(&sites, &target, &PropensitySource::Fit(backend), &cfg)?
        }
    };
    if let Some(path) = log_path {
        log.write_jsonl(path)?;
        eprintln!("wrote {} messages to {}", log.len(), path.display());
    }
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("--jobs: {e}")))?;
    }
    match cli.cmd {
        Cmd::Generate { config, seed, replication, out } => generate(config.as_deref(), seed, replication, &out),
        Cmd::Estimate { data, estimator, ratio, ci, federated, log, folds, fold_seed, fed_config } => {
            let report =
                estimate(&data, estimator, ratio, ci, federated, log.as_deref(), folds, fold_seed, fed_config.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Cmd::SweepKl { config, seed, out, json } => {
            let spec: SweepSpec = read_json(&config)?;
            let result = sweep_kl(&spec, seed, fs::File::create(&out)?)?;
            if let Some(p) = json {
                write_json(&p, &result)?;
            }
            Ok(())
        }
        Cmd::CiGrid { config, seed, out, json } => {
            let spec: SweepSpec = read_json(&config)?;
            let result = ci_grid(&spec, seed, fs::File::create(&out)?)?;
            if let Some(p) = json {
                write_json(&p, &result)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Monte Carlo driver for the covariate-shift design: replicated draws per
//! heterogeneity level, every requested estimator under every nuisance
//! specification, and CSV/JSON summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SeedSpec, SiteDataset, TargetCovariates};
use crate::error::{invalid, Result};
use crate::estimators::{clb_ipw, crossfit_aipw, meta_ipw, wls_outcome_fitter, AipwFlavor, AipwOptions, MetaWeighting};
use crate::nuisance::{fit_propensity, Eta, PropensitySet};
use crate::ratio::{FeatureMap, KnnOptions, RatioBackend, TiltingOptions};
use crate::report::{EstimateReport, EstimatorKind};
use crate::synth::{covariate_shift_oracle, gen_with_means, oracle_meta_precisions, place_site_means, ShiftConfig};

/// A cell is aborted when more than this share of its replications fail.
pub const MAX_FAIL_RATE: f64 = 0.1;

/// How selection propensities are obtained when the PS is correctly specified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    #[default]
    Oracle,
    TiltingFit,
    KnnFit,
}

impl NuisanceMode {
    pub fn name(self) -> &'static str {
        match self {
            NuisanceMode::Oracle => "oracle",
            NuisanceMode::TiltingFit => "tilting_fit",
            NuisanceMode::KnnFit => "knn_fit",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specification {
    #[default]
    Correct,
    Wrong,
}

impl fmt::Display for Specification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Specification::Correct => "correct",
            Specification::Wrong => "wrong",
        })
    }
}

/// One propensity/outcome specification pair.
///
/// A wrong PS is an exponential-tilting fit on misspecified features
/// whatever the nuisance mode; a wrong OM is a weighted least-squares fit on
/// the same misspecified features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpecCell {
    pub ps: Specification,
    pub om: Specification,
}

impl SpecCell {
    pub const BOTH_CORRECT: SpecCell = SpecCell { ps: Specification::Correct, om: Specification::Correct };

    pub fn all() -> Vec<SpecCell> {
        let both = [Specification::Correct, Specification::Wrong];
        both.iter().flat_map(|&ps| both.iter().map(move |&om| SpecCell { ps, om })).collect()
    }

    fn om_psi(self) -> FeatureMap {
        match self.om {
            Specification::Correct => FeatureMap::IdentityPlusIntercept,
            Specification::Wrong => FeatureMap::MisspecifiedPlusIntercept,
        }
    }
}

/// Where Meta-IPW's inverse-variance weights come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaWeightSource {
    /// Closed-form asymptotic precisions of the design.
    #[default]
    Oracle,
    /// Each site's plug-in variance.
    Estimated,
}

fn default_mean_redraws() -> usize {
    4
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}
fn default_spec_grid() -> Vec<SpecCell> {
    vec![SpecCell::BOTH_CORRECT]
}
fn default_folds() -> usize {
    2
}
fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// The design; its `d_kl` and `site_means` are overridden per cell.
    #[serde(default)]
    pub design: ShiftConfig,
    pub d_kl: Vec<f64>,
    pub replications: usize,
    /// Number of distinct site-mean placements, cycled over replications.
    #[serde(default = "default_mean_redraws")]
    pub mean_redraws: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub nuisance_mode: NuisanceMode,
    #[serde(default = "default_spec_grid")]
    pub spec_grid: Vec<SpecCell>,
    #[serde(default)]
    pub meta_weighting: MetaWeightSource,
    /// Cross-fitting folds for the AIPW estimators.
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub tilting: TiltingOptions,
    #[serde(default)]
    pub knn: KnnOptions,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl SweepSpec {
    pub fn new(d_kl: Vec<f64>, replications: usize) -> Self {
        Self {
            design: ShiftConfig::default(),
            d_kl,
            replications,
            mean_redraws: default_mean_redraws(),
            estimators: default_estimators(),
            nuisance_mode: NuisanceMode::Oracle,
            spec_grid: default_spec_grid(),
            meta_weighting: MetaWeightSource::Oracle,
            folds: default_folds(),
            tilting: TiltingOptions::default(),
            knn: KnnOptions::default(),
            level: default_level(),
        }
    }

    /// MSE against heterogeneity, `d_kl ∈ {0, …, 4}`, oracle nuisances.
    pub fn heterogeneity_sweep(replications: usize) -> Self {
        Self::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], replications)
    }

    /// The four PS/OM specification cells at `d_kl = 3`.
    pub fn specification_grid(replications: usize) -> Self {
        Self { spec_grid: SpecCell::all(), ..Self::new(vec![3.0], replications) }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.replications == 0 {
            return invalid("replications must be at least 1");
        }
        if self.d_kl.is_empty() || self.spec_grid.is_empty() {
            return invalid("the d_kl grid and the spec grid must be non-empty");
        }
        if let Some(v) = self.d_kl.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return invalid(format!("d_kl must be finite and non-negative, got {v}"));
        }
        if self.mean_redraws == 0 || self.folds == 0 {
            return invalid("mean_redraws and folds must be at least 1");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return invalid("level must lie in (0, 1)");
        }
        if self.design.site_means.is_some() {
            return invalid("site means are drawn per d_kl; remove `design.site_means`");
        }
        Ok(())
    }
}

/// Summary of one `(d_kl, estimator, spec cell)` over all replications.
/// Statistics are `NaN` when the cell is aborted or has no successes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub d_kl: f64,
    pub estimator: EstimatorKind,
    pub nuisance_mode: NuisanceMode,
    pub ps_spec: Specification,
    pub om_spec: Specification,
    pub true_tau: f64,
    pub replications: usize,
    pub failures: usize,
    pub aborted: bool,
    pub mean_tau: f64,
    pub bias: f64,
    /// Empirical variance of `τ̂` (divisor `n`), so `mse = bias² + var`.
    pub var: f64,
    pub mse: f64,
    /// Mean squared plug-in standard error.
    pub mean_var_hat: f64,
    pub coverage: f64,
    pub mean_half_width: f64,
}

impl CellSummary {
    pub fn fail_rate(&self) -> f64 {
        self.failures as f64 / self.replications as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    /// Up to a few failure messages per cell, for diagnosis.
    pub failure_samples: BTreeMap<String, Vec<String>>,
}

impl SweepResult {
    pub fn cell(&self, d_kl: f64, estimator: EstimatorKind, spec: SpecCell) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.d_kl == d_kl && c.estimator == estimator && c.ps_spec == spec.ps && c.om_spec == spec.om)
    }
}

#[derive(Debug, Clone)]
struct Draw {
    tau: f64,
    se2: f64,
    covers: bool,
    half_width: f64,
}

type Outcome = std::result::Result<Draw, String>;

fn draw_of(r: Result<EstimateReport>, truth: f64) -> Outcome {
    match r {
        Ok(rep) if rep.tau_hat.is_finite() && rep.var_hat.is_finite() => {
            let se = rep.std_error();
            Ok(Draw { tau: rep.tau_hat, se2: se * se, covers: rep.covers(truth), half_width: rep.half_width() })
        }
        Ok(rep) => Err(format!("non-finite estimate {} / {}", rep.tau_hat, rep.var_hat)),
        Err(e) => Err(e.to_string()),
    }
}

fn propensity(
    spec: &SweepSpec,
    cell: SpecCell,
    design: &ShiftConfig,
    means: &[f64],
    sites: &[SiteDataset],
    target: &TargetCovariates,
) -> Result<PropensitySet> {
    let tilting = |psi| RatioBackend::Tilting { psi, options: spec.tilting };
    match (cell.ps, spec.nuisance_mode) {
        (Specification::Wrong, _) => fit_propensity(sites, target, &tilting(FeatureMap::MisspecifiedPlusIntercept)),
        (Specification::Correct, NuisanceMode::Oracle) => Ok(covariate_shift_oracle(design, means)),
        (Specification::Correct, NuisanceMode::TiltingFit) => fit_propensity(sites, target, &tilting(FeatureMap::IdentityPlusIntercept)),
        (Specification::Correct, NuisanceMode::KnnFit) => fit_propensity(sites, target, &RatioBackend::Knn { options: spec.knn.clone() }),
    }
}

/// Site means for one `(d_kl, redraw)` pair. The same redraw index gives the
/// same underlying uniforms at every `d_kl`.
fn site_means(spec: &SweepSpec, seeds: &SeedSpec, d_kl: f64, redraw: usize) -> Result<Vec<f64>> {
    let mut rng = seeds.rng(redraw as u64, SeedSpec::MEANS_STREAM);
    let cfg = &spec.design;
    place_site_means(d_kl, cfg.n_sites(), cfg.sigma, cfg.mu_target, &mut rng)
}

/// All estimator outcomes of one replication, indexed `[cell][estimator]`.
fn replicate(spec: &SweepSpec, seeds: &SeedSpec, d_kl: f64, means: &[f64], r: usize) -> Vec<Vec<Outcome>> {
    let design = spec.design.clone().with_d_kl(d_kl);
    let truth = design.true_tau();
    let fail_all = |msg: String| vec![vec![Err(msg); spec.estimators.len()]; spec.spec_grid.len()];
    let draw = match gen_with_means(&design, means, seeds, r as u64) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    let (sites, target) = (&draw.sites, &draw.target);
    let meta_weights = match spec.meta_weighting {
        MetaWeightSource::Estimated => MetaWeighting::InverseVariance,
        MetaWeightSource::Oracle => {
            let prec = oracle_meta_precisions(&design, means);
            MetaWeighting::Fixed(sites.iter().map(|s| s.site_id).zip(prec).collect())
        }
    };
    let fold_seed = seeds.child_seed(r as u64, SeedSpec::FOLD_STREAM);

    let mut by_ps: BTreeMap<Specification, Result<PropensitySet>> = BTreeMap::new();
    spec.spec_grid
        .iter()
        .map(|&cell| {
            let p = by_ps.entry(cell.ps).or_insert_with(|| propensity(spec, cell, &design, means, sites, target));
            let p = match p {
                Ok(p) => p,
                Err(e) => return vec![Err(format!("propensity fit: {e}")); spec.estimators.len()],
            };
            spec.estimators
                .iter()
                .map(|&kind| {
                    let aipw = |flavor| {
                        let opts = AipwOptions {
                            flavor,
                            folds: spec.folds,
                            fold_seed,
                            psi: cell.om_psi(),
                            eta: Eta::vanilla(),
                            meta_weighting: MetaWeighting::InverseVariance,
                            level: spec.level,
                        };
                        crossfit_aipw(sites, target, p, &opts, &wls_outcome_fitter)
                    };
                    let report = match kind {
                        EstimatorKind::MetaIPW => meta_ipw(sites, p, Some(target), &meta_weights, spec.level),
                        EstimatorKind::ClbIPW => clb_ipw(sites, p, &Eta::vanilla(), spec.level),
                        EstimatorKind::MetaAIPW => aipw(AipwFlavor::Meta),
                        EstimatorKind::ClbAIPW => aipw(AipwFlavor::Clb),
                    };
                    draw_of(report, truth)
                })
                .collect()
        })
        .collect()
}

fn summarise(
    spec: &SweepSpec,
    d_kl: f64,
    kind: EstimatorKind,
    cell: SpecCell,
    truth: f64,
    outcomes: &[&Outcome],
) -> CellSummary {
    let ok: Vec<&Draw> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let failures = outcomes.len() - ok.len();
    let aborted = failures as f64 > MAX_FAIL_RATE * outcomes.len() as f64;
    let nan = f64::NAN;
    let mut out = CellSummary {
        d_kl,
        estimator: kind,
        nuisance_mode: spec.nuisance_mode,
        ps_spec: cell.ps,
        om_spec: cell.om,
        true_tau: truth,
        replications: outcomes.len(),
        failures,
        aborted,
        mean_tau: nan,
        bias: nan,
        var: nan,
        mse: nan,
        mean_var_hat: nan,
        coverage: nan,
        mean_half_width: nan,
    };
    if aborted || ok.is_empty() {
        return out;
    }
    let n = ok.len() as f64;
    let mean = |f: &dyn Fn(&Draw) -> f64| ok.iter().map(|d| f(d)).sum::<f64>() / n;
    out.mean_tau = mean(&|d| d.tau);
    out.bias = out.mean_tau - truth;
    let m = out.mean_tau;
    out.var = mean(&|d| (d.tau - m) * (d.tau - m));
    out.mse = mean(&|d| (d.tau - truth) * (d.tau - truth));
    out.mean_var_hat = mean(&|d| d.se2);
    out.coverage = mean(&|d| f64::from(u8::from(d.covers)));
    out.mean_half_width = mean(&|d| d.half_width);
    out
}

/// Runs every replication of every cell. Replications run in parallel on
/// the current rayon pool and are reduced in index order, so the result
/// depends only on `spec` and `seed`.
pub fn run_monte_carlo(spec: &SweepSpec, seed: u64) -> Result<SweepResult> {
    spec.validate()?;
    let seeds = SeedSpec::new(seed);
    let mut means = Vec::with_capacity(spec.d_kl.len());
    for &d_kl in &spec.d_kl {
        let per_redraw = (0..spec.mean_redraws).map(|j| site_means(spec, &seeds, d_kl, j)).collect::<Result<Vec<_>>>()?;
        means.push(per_redraw);
    }
    let tasks: Vec<(usize, usize)> = (0..spec.d_kl.len()).flat_map(|g| (0..spec.replications).map(move |r| (g, r))).collect();
    let outcomes: Vec<Vec<Vec<Outcome>>> = tasks
        .par_iter()
        .map(|&(g, r)| replicate(spec, &seeds, spec.d_kl[g], &means[g][r % spec.mean_redraws], r))
        .collect();

    let mut cells = Vec::new();
    let mut failure_samples = BTreeMap::new();
    for (g, &d_kl) in spec.d_kl.iter().enumerate() {
        let truth = spec.design.clone().with_d_kl(d_kl).true_tau();
        let block = &outcomes[g * spec.replications..(g + 1) * spec.replications];
        for (c, &cell) in spec.spec_grid.iter().enumerate() {
            for (e, &kind) in spec.estimators.iter().enumerate() {
                let column: Vec<&Outcome> = block.iter().map(|rep| &rep[c][e]).collect();
                let summary = summarise(spec, d_kl, kind, cell, truth, &column);
                if summary.failures > 0 {
                    let key = format!("d_kl={d_kl} {kind} ps={} om={}", cell.ps, cell.om);
                    let msgs: Vec<String> = column.iter().filter_map(|o| o.as_ref().err().cloned()).take(3).collect();
                    failure_samples.insert(key, msgs);
                }
                cells.push(summary);
            }
        }
    }
    Ok(SweepResult { seed, cells, failure_samples })
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub const SWEEP_HEADER: [&str; 10] =
    ["d_kl", "estimator", "nuisance_mode", "ps_spec", "om_spec", "mse", "bias", "var", "coverage", "fail_rate"];

pub fn write_sweep_csv<W: Write>(out: W, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for c in &result.cells {
        w.write_record([
            num(c.d_kl),
            c.estimator.to_string(),
            c.nuisance_mode.name().to_string(),
            c.ps_spec.to_string(),
            c.om_spec.to_string(),
            num(c.mse),
            num(c.bias),
            num(c.var),
            num(c.coverage),
            num(c.fail_rate()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const CI_GRID_HEADER: [&str; 9] =
    ["estimator", "ps_spec", "om_spec", "mean_tau_hat", "bias", "mean_half_width", "coverage", "mean_var_hat", "fail_rate"];

pub fn write_ci_grid_csv<W: Write>(out: W, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CI_GRID_HEADER)?;
    for c in &result.cells {
        w.write_record([
            c.estimator.to_string(),
            c.ps_spec.to_string(),
            c.om_spec.to_string(),
            num(c.mean_tau),
            num(c.bias),
            num(c.mean_half_width),
            num(c.coverage),
            num(c.mean_var_hat),
            num(c.fail_rate()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the sweep and writes its CSV.
pub fn sweep_kl<W: Write>(spec: &SweepSpec, seed: u64, out: W) -> Result<SweepResult> {
    let result = run_monte_carlo(spec, seed)?;
    write_sweep_csv(out, &result)?;
    Ok(result)
}

/// Confidence-interval comparison at a single heterogeneity level.
pub fn ci_grid<W: Write>(spec: &SweepSpec, seed: u64, out: W) -> Result<SweepResult> {
    if spec.d_kl.len() != 1 {
        return invalid("ci-grid takes exactly one d_kl value");
    }
    let result = run_monte_carlo(spec, seed)?;
    write_ci_grid_csv(out, &result)?;
    Ok(result)
}

//! Decoupled AIPW: the outcome-model contrast is averaged over the public
//! target covariates, and each site contributes IPW-weighted residual
//! corrections in the Meta or the CLB form.

use serde::{Deserialize, Serialize};

use super::clb::{clb_diagnostics, clb_pool, clb_site_aggregates_with, SiteAggregates};
use super::meta::{combine_values, meta_site_with, site_covers_target, MetaSiteResult, MetaWeighting, COVERAGE_PROBES};
use crate::data::{pooled_size, Arm, SiteDataset, TargetCovariates};
use crate::error::{invalid, Result};
use crate::nuisance::{crossfit_split, fit_weighted_least_squares, Eta, OutcomeModel, PropensitySet, WeightedDesign};
use crate::ratio::FeatureMap;
use crate::report::{EstimateReport, EstimatorKind, SiteDiagnostic, DEFAULT_CI_LEVEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AipwFlavor {
    Meta,
    Clb,
}

impl AipwFlavor {
    pub fn kind(self) -> EstimatorKind {
        match self {
            AipwFlavor::Meta => EstimatorKind::MetaAIPW,
            AipwFlavor::Clb => EstimatorKind::ClbAIPW,
        }
    }
}

/// One site's residual corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteCorrection {
    /// Residual sums against the pooled scores.
    Clb(SiteAggregates),
    /// Per-site Hájek residual means `δ̂₁ − δ̂₀` and their variance.
    Meta { site_id: usize, result: MetaSiteResult },
}

impl SiteCorrection {
    pub fn site_id(&self) -> usize {
        match self {
            SiteCorrection::Clb(a) => a.site_id,
            SiteCorrection::Meta { site_id, .. } => *site_id,
        }
    }
}

fn residuals(site: &SiteDataset, m1: &OutcomeModel, m0: &OutcomeModel) -> Vec<f64> {
    site.records
        .iter()
        .map(|r| r.y - if r.arm == Arm::Treated { m1.predict(&r.x) } else { m0.predict(&r.x) })
        .collect()
}

/// Residual corrections of one site: the IPW estimators with `y` replaced by
/// `y − m̂_z(x)`. The control correction uses `(1 − Z)`, `m̂₀` and the control
/// propensity.
pub fn aipw_corrections(
    site: &SiteDataset,
    m1: &OutcomeModel,
    m0: &OutcomeModel,
    p: &PropensitySet,
    flavor: AipwFlavor,
    eta: &Eta,
) -> SiteCorrection {
    let res = residuals(site, m1, m0);
    match flavor {
        AipwFlavor::Clb => SiteCorrection::Clb(clb_site_aggregates_with(site, p, eta, &res)),
        AipwFlavor::Meta => SiteCorrection::Meta { site_id: site.site_id, result: meta_site_with(site, p, &res) },
    }
}

/// Mean and sample variance of `m̂₁(x) − m̂₀(x)` over the target sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTerm {
    pub mean: f64,
    pub variance: f64,
    pub n_target: usize,
}

pub fn target_mean_term(target: &TargetCovariates, m1: &OutcomeModel, m0: &OutcomeModel) -> Result<TargetTerm> {
    if target.is_empty() {
        return invalid("empty target sample");
    }
    let diffs: Vec<f64> = target.xs.iter().map(|x| m1.predict(x) - m0.predict(x)).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let variance = if diffs.len() > 1 { diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(TargetTerm { mean, variance, n_target: diffs.len() })
}

/// Everything the server needs for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwInputs {
    pub target: TargetTerm,
    pub corrections: Vec<SiteCorrection>,
    /// Source units whose residuals enter the corrections.
    pub n_pooled: usize,
}

impl AipwInputs {
    /// `N_t / N_S`.
    pub fn lambda_hat(&self) -> f64 {
        self.target.n_target as f64 / self.n_pooled as f64
    }
}

struct FoldEstimate {
    tau: f64,
    target_se2: f64,
    correction_se2: f64,
    diags: Vec<SiteDiagnostic>,
}

fn fold_estimate(inputs: &AipwInputs, flavor: AipwFlavor, weighting: &MetaWeighting) -> Result<FoldEstimate> {
    if inputs.target.n_target == 0 || inputs.n_pooled == 0 {
        return invalid("AIPW needs a non-empty target and source sample");
    }
    let target_se2 = inputs.target.variance / inputs.target.n_target as f64;
    match flavor {
        AipwFlavor::Clb => {
            let aggs = inputs
                .corrections
                .iter()
                .map(|c| match c {
                    SiteCorrection::Clb(a) => Ok(a.clone()),
                    SiteCorrection::Meta { .. } => invalid("Meta correction passed to CLB-AIPW"),
                })
                .collect::<Result<Vec<_>>>()?;
            let pooled = clb_pool(&aggs)?;
            Ok(FoldEstimate {
                tau: inputs.target.mean + (pooled.mu1 - pooled.mu0),
                target_se2,
                correction_se2: pooled.se2,
                diags: clb_diagnostics(&aggs),
            })
        }
        AipwFlavor::Meta => {
            let results = inputs
                .corrections
                .iter()
                .map(|c| match c {
                    SiteCorrection::Meta { site_id, result } => Ok((*site_id, result.clone())),
                    SiteCorrection::Clb(_) => invalid("CLB correction passed to Meta-AIPW"),
                })
                .collect::<Result<Vec<_>>>()?;
            let (delta, var, diags) = combine_values(&results, weighting)?;
            Ok(FoldEstimate { tau: inputs.target.mean + delta, target_se2, correction_se2: var, diags })
        }
    }
}

/// Combines one [`AipwInputs`] per cross-fitting fold (a single element
/// means no cross-fitting). `τ̂` is the average of the fold estimates; the
/// variance adds the target term (shared target, so averaged) and the
/// correction terms (disjoint units, so independent).
pub fn aipw_combine(folds: &[AipwInputs], flavor: AipwFlavor, weighting: &MetaWeighting, level: f64) -> Result<EstimateReport> {
    if folds.is_empty() {
        return invalid("no folds to combine");
    }
    let estimates = folds.iter().map(|f| fold_estimate(f, flavor, weighting)).collect::<Result<Vec<_>>>()?;
    let nf = estimates.len() as f64;
    let tau = estimates.iter().map(|e| e.tau).sum::<f64>() / nf;
    let se2 = estimates.iter().map(|e| e.target_se2).sum::<f64>() / nf
        + estimates.iter().map(|e| e.correction_se2).sum::<f64>() / (nf * nf);
    let n_s: usize = folds.iter().map(|f| f.n_pooled).sum();
    let n = n_s as f64;
    let diags = merge_diagnostics(estimates.into_iter().map(|e| e.diags).collect());
    let mut report = EstimateReport::new(flavor.kind(), tau, n * se2, n, level, diags)?;
    report.notes.push(format!("{} fold(s), lambda_hat = {:.6}", folds.len(), folds[0].target.n_target as f64 / n));
    Ok(report)
}

fn merge_diagnostics(per_fold: Vec<Vec<SiteDiagnostic>>) -> Vec<SiteDiagnostic> {
    let mut merged: Vec<SiteDiagnostic> = Vec::new();
    for (f, diags) in per_fold.into_iter().enumerate() {
        for d in diags {
            match merged.iter_mut().find(|m| m.site_id == d.site_id) {
                Some(m) => {
                    m.included &= d.included;
                    m.note.push_str(&format!("; fold {f}: {}", d.note));
                }
                None => merged.push(SiteDiagnostic { note: format!("fold {f}: {}", d.note), ..d }),
            }
        }
    }
    merged.sort_by_key(|d| d.site_id);
    merged
}

/// Fits one arm's outcome model from training sites.
pub type OutcomeFitter<'a> = dyn Fn(&[SiteDataset], &PropensitySet, &Eta, Arm, FeatureMap) -> Result<OutcomeModel> + Sync + 'a;

/// Exact minimiser of the pooled inverse-score weighted squared loss.
pub fn wls_outcome_fitter(train: &[SiteDataset], p: &PropensitySet, eta: &Eta, arm: Arm, psi: FeatureMap) -> Result<OutcomeModel> {
    let designs: Vec<WeightedDesign> = train.iter().map(|s| WeightedDesign::build(s, p, eta, arm, psi)).collect();
    fit_weighted_least_squares(&designs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwOptions {
    pub flavor: AipwFlavor,
    /// Number of cross-fitting folds; 1 trains and evaluates on all units.
    pub folds: usize,
    pub fold_seed: u64,
    pub psi: FeatureMap,
    pub eta: Eta,
    pub meta_weighting: MetaWeighting,
    pub level: f64,
}

impl Default for AipwOptions {
    fn default() -> Self {
        Self {
            flavor: AipwFlavor::Clb,
            folds: 2,
            fold_seed: 0,
            psi: FeatureMap::IdentityPlusIntercept,
            eta: Eta::vanilla(),
            meta_weighting: MetaWeighting::InverseVariance,
            level: DEFAULT_CI_LEVEL,
        }
    }
}

/// What a site computes for one fold: its corrections, with Meta sites
/// excluded when their propensities do not cover the target sample.
pub fn site_fold_correction(
    site: &SiteDataset,
    target: &TargetCovariates,
    m1: &OutcomeModel,
    m0: &OutcomeModel,
    p: &PropensitySet,
    flavor: AipwFlavor,
    eta: &Eta,
) -> SiteCorrection {
    let probes = &target.xs[..target.len().min(COVERAGE_PROBES)];
    match flavor {
        AipwFlavor::Meta if !site_covers_target(p, site.site_id, probes) => SiteCorrection::Meta {
            site_id: site.site_id,
            result: MetaSiteResult::Excluded { reason: "propensity vanishes on part of the target support".into() },
        },
        _ => aipw_corrections(site, m1, m0, p, flavor, eta),
    }
}

/// Server inputs for one fold given fitted models and the units to correct.
pub fn aipw_fold_inputs(
    eval_sites: &[SiteDataset],
    target: &TargetCovariates,
    m1: &OutcomeModel,
    m0: &OutcomeModel,
    p: &PropensitySet,
    flavor: AipwFlavor,
    eta: &Eta,
) -> Result<AipwInputs> {
    let corrections = eval_sites.iter().map(|s| site_fold_correction(s, target, m1, m0, p, flavor, eta)).collect();
    Ok(AipwInputs { target: target_mean_term(target, m1, m0)?, corrections, n_pooled: pooled_size(eval_sites) })
}

/// Full cross-fitted AIPW: per fold, fit outcome models on the other folds,
/// correct on this fold, then average.
pub fn crossfit_aipw(
    sites: &[SiteDataset],
    target: &TargetCovariates,
    p: &PropensitySet,
    opts: &AipwOptions,
    fitter: &OutcomeFitter<'_>,
) -> Result<EstimateReport> {
    let folds = if opts.folds <= 1 {
        let m1 = fitter(sites, p, &opts.eta, Arm::Treated, opts.psi)?;
        let m0 = fitter(sites, p, &opts.eta, Arm::Control, opts.psi)?;
        vec![aipw_fold_inputs(sites, target, &m1, &m0, p, opts.flavor, &opts.eta)?]
    } else {
        let plan = crossfit_split(sites, opts.folds, opts.fold_seed)?;
        (0..opts.folds)
            .map(|f| {
                let (train, eval): (Vec<_>, Vec<_>) = sites.iter().map(|s| plan.split(s, f)).unzip();
                let m1 = fitter(&train, p, &opts.eta, Arm::Treated, opts.psi)?;
                let m0 = fitter(&train, p, &opts.eta, Arm::Control, opts.psi)?;
                aipw_fold_inputs(&eval, target, &m1, &m0, p, opts.flavor, &opts.eta)
            })
            .collect::<Result<Vec<_>>>()?
    };
    aipw_combine(&folds, opts.flavor, &opts.meta_weighting, opts.level)
}

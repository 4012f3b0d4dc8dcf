use std::collections::BTreeMap;

use rayon::prelude::*;

use super::fedavg::{fedavg_core, SiteDesigns};
use super::{FedConfig, MessageKind, MessageLog, Party};
use crate::data::{pooled_size, Arm, SiteDataset, TargetCovariates};
use crate::error::{invalid, Result};
use crate::estimators::{
    aipw_combine, aipw_fold_inputs, clb_combine, clb_site_aggregates, site_fold_correction, target_mean_term, AipwFlavor,
    AipwInputs, MetaWeighting, SiteAggregates, SiteCorrection,
};
use crate::nuisance::{assemble_propensity, crossfit_split, fit_site_ratios, site_arm_counts, Eta, OutcomeModel, PropensitySet};
use crate::ratio::{FeatureMap, RatioBackend, RatioModel};
use crate::report::{EstimateReport, DEFAULT_CI_LEVEL};

/// Algorithm 1: each site sends its CLB aggregates, the server combines.
/// The server's result is computed from the log alone.
pub fn run_algorithm1(sites: &[SiteDataset], p: &PropensitySet, eta: &Eta, level: f64) -> Result<(EstimateReport, MessageLog)> {
    let aggs: Vec<SiteAggregates> = sites.par_iter().map(|s| clb_site_aggregates(s, p, eta)).collect();
    let mut log = MessageLog::default();
    for a in aggs {
        log.push(0, Party::Site(a.site_id), Party::Server, MessageKind::Aggregates(a));
    }
    let report = replay_algorithm1(&log, level)?;
    Ok((report, log))
}

/// Recomputes the Algorithm 1 estimate from a message log.
pub fn replay_algorithm1(log: &MessageLog, level: f64) -> Result<EstimateReport> {
    let aggs: Vec<SiteAggregates> = log
        .messages
        .iter()
        .filter_map(|m| match &m.body {
            MessageKind::Aggregates(a) => Some(a.clone()),
            _ => None,
        })
        .collect();
    if aggs.is_empty() {
        return invalid("log carries no aggregates");
    }
    clb_combine(&aggs, level)
}

/// Where the selection propensities come from.
#[derive(Debug, Clone)]
pub enum PropensitySource {
    /// Each site fits its own ratios against the public target sample.
    Fit(RatioBackend),
    /// Supplied directly, e.g. an oracle.
    Given(PropensitySet),
}

/// How the outcome models are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeTraining {
    FedAvg(FedConfig),
    /// Fixed models broadcast once per fold, no training.
    Fixed { m1: OutcomeModel, m0: OutcomeModel },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alg2Config {
    pub outcome: OutcomeTraining,
    pub psi: FeatureMap,
    pub flavor: AipwFlavor,
    pub folds: usize,
    pub fold_seed: u64,
    pub eta: Eta,
    pub meta_weighting: MetaWeighting,
    pub level: f64,
}

impl Default for Alg2Config {
    fn default() -> Self {
        Self {
            outcome: OutcomeTraining::FedAvg(FedConfig::default()),
            psi: FeatureMap::IdentityPlusIntercept,
            flavor: AipwFlavor::Clb,
            folds: 2,
            fold_seed: 0,
            eta: Eta::vanilla(),
            meta_weighting: MetaWeighting::InverseVariance,
            level: DEFAULT_CI_LEVEL,
        }
    }
}

fn resolve_propensity(
    sites: &[SiteDataset],
    target: &TargetCovariates,
    source: &PropensitySource,
) -> Result<(PropensitySet, Vec<BTreeMap<(usize, Arm), RatioModel>>)> {
    match source {
        PropensitySource::Given(p) => Ok((p.clone(), vec![BTreeMap::new(); sites.len()])),
        PropensitySource::Fit(backend) => {
            let per_site = sites.par_iter().map(|s| fit_site_ratios(s, target, backend)).collect::<Result<Vec<_>>>()?;
            let mut all = BTreeMap::new();
            for m in &per_site {
                all.extend(m.iter().map(|(k, v)| (*k, v.clone())));
            }
            let p = assemble_propensity(all, &site_arm_counts(sites), pooled_size(sites))?;
            Ok((p, per_site))
        }
    }
}

fn check(sites: &[SiteDataset], cfg: &Alg2Config) -> Result<()> {
    let Some(first) = sites.first() else {
        return invalid("no sites");
    };
    cfg.psi.check_dim(first.d)?;
    if cfg.folds < 2 {
        return invalid("Algorithm 2 cross-fits with at least two folds");
    }
    Ok(())
}

/// Algorithm 2: published ratio models, federated outcome training per
/// cross-fitting fold, local residual corrections, and the server's target
/// term. The server's result is computed from the log alone.
pub fn run_algorithm2(
    sites: &[SiteDataset],
    target: &TargetCovariates,
    source: &PropensitySource,
    cfg: &Alg2Config,
) -> Result<(EstimateReport, MessageLog)> {
    check(sites, cfg)?;
    let mut log = MessageLog::default();
    let (p, published) = resolve_propensity(sites, target, source)?;
    for (s, models) in sites.iter().zip(&published) {
        let wire = |arm: Arm| models.get(&(s.site_id, arm)).map(RatioModel::to_wire);
        log.push(
            0,
            Party::Site(s.site_id),
            Party::Server,
            MessageKind::PublishRatioModel {
                treated: wire(Arm::Treated),
                control: wire(Arm::Control),
                n_treated: s.arm_count(Arm::Treated),
                n_control: s.arm_count(Arm::Control),
            },
        );
    }

    let plan = crossfit_split(sites, cfg.folds, cfg.fold_seed)?;
    for fold in 0..cfg.folds {
        let (train, eval): (Vec<_>, Vec<_>) = sites.iter().map(|s| plan.split(s, fold)).unzip();
        let (m1, m0) = match &cfg.outcome {
            OutcomeTraining::FedAvg(fed) => {
                let designs: Vec<SiteDesigns> = train.par_iter().map(|s| SiteDesigns::build(s, &p, &cfg.eta, cfg.psi)).collect();
                let r = fedavg_core(&designs, cfg.psi, sites[0].d, fed, fold, &mut Some(&mut log))?;
                (r.m1, r.m0)
            }
            OutcomeTraining::Fixed { m1, m0 } => {
                for s in sites {
                    log.push(
                        0,
                        Party::Server,
                        Party::Site(s.site_id),
                        MessageKind::ModelParams { fold, m1: m1.clone(), m0: m0.clone(), counts: None, loss: None },
                    );
                }
                (m1.clone(), m0.clone())
            }
        };
        let corrections: Vec<SiteCorrection> =
            eval.par_iter().map(|s| site_fold_correction(s, target, &m1, &m0, &p, cfg.flavor, &cfg.eta)).collect();
        for (s, c) in eval.iter().zip(corrections) {
            log.push(fold, Party::Site(s.site_id), Party::Server, MessageKind::Corrections { fold, correction: c, n_units: s.len() });
        }
        let term = target_mean_term(target, &m1, &m0)?;
        log.push(fold, Party::Server, Party::Server, MessageKind::TargetMeanTerm { fold, term });
    }
    let report = replay_algorithm2(&log, cfg.flavor, &cfg.meta_weighting, cfg.level)?;
    Ok((report, log))
}

/// Recomputes the Algorithm 2 estimate from a message log.
pub fn replay_algorithm2(log: &MessageLog, flavor: AipwFlavor, weighting: &MetaWeighting, level: f64) -> Result<EstimateReport> {
    let mut folds: BTreeMap<usize, AipwInputs> = BTreeMap::new();
    let mut pending: BTreeMap<usize, (Vec<SiteCorrection>, usize)> = BTreeMap::new();
    for m in &log.messages {
        match &m.body {
            MessageKind::Corrections { fold, correction, n_units } => {
                let e = pending.entry(*fold).or_default();
                e.0.push(correction.clone());
                e.1 += n_units;
            }
            MessageKind::TargetMeanTerm { fold, term } => {
                let (corrections, n_pooled) = pending.remove(fold).unwrap_or_default();
                folds.insert(*fold, AipwInputs { target: *term, corrections, n_pooled });
            }
            _ => {}
        }
    }
    if folds.is_empty() {
        return invalid("log carries no target terms");
    }
    let folds: Vec<AipwInputs> = folds.into_values().collect();
    aipw_combine(&folds, flavor, weighting, level)
}

/// Centralised reference for Algorithm 2: the same computation on pooled
/// data with no messages.
pub fn algorithm2_reference(
    sites: &[SiteDataset],
    target: &TargetCovariates,
    source: &PropensitySource,
    cfg: &Alg2Config,
) -> Result<EstimateReport> {
    check(sites, cfg)?;
    let (p, _) = resolve_propensity(sites, target, source)?;
    let plan = crossfit_split(sites, cfg.folds, cfg.fold_seed)?;
    let folds = (0..cfg.folds)
        .map(|fold| {
            let (train, eval): (Vec<_>, Vec<_>) = sites.iter().map(|s| plan.split(s, fold)).unzip();
            let (m1, m0) = match &cfg.outcome {
                OutcomeTraining::FedAvg(fed) => {
                    let designs: Vec<SiteDesigns> = train.iter().map(|s| SiteDesigns::build(s, &p, &cfg.eta, cfg.psi)).collect();
                    let r = fedavg_core(&designs, cfg.psi, sites[0].d, fed, fold, &mut None)?;
                    (r.m1, r.m0)
                }
                OutcomeTraining::Fixed { m1, m0 } => (m1.clone(), m0.clone()),
            };
            aipw_fold_inputs(&eval, target, &m1, &m0, &p, cfg.flavor, &cfg.eta)
        })
        .collect::<Result<Vec<_>>>()?;
    aipw_combine(&folds, cfg.flavor, &cfg.meta_weighting, cfg.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeedSpec;
    use crate::estimators::{clb_ipw, clb_pooled_reference};
    use crate::nuisance::crossfit_split;
    use crate::fedsim::{audit_log, LearningRate};
    use crate::synth::{covariate_shift_oracle, gen_covariate_shift, ShiftConfig};

    fn small_draw(seed: u64) -> (Vec<SiteDataset>, TargetCovariates, PropensitySet, ShiftConfig) {
        let cfg = ShiftConfig { site_sizes: vec![60, 90, 120], n_target: 200, ..Default::default() }.with_d_kl(1.0);
        let draw = gen_covariate_shift(&cfg, &SeedSpec::new(seed), 0).unwrap();
        let p = covariate_shift_oracle(&cfg, &draw.site_means);
        (draw.sites, draw.target, p, cfg)
    }

    #[test]
    fn single_site_algorithm1_equals_direct_combination() {
        let (sites, _, p, _) = small_draw(1);
        let one = &sites[..1];
        let (fed, log) = run_algorithm1(one, &p, &Eta::vanilla(), 0.95).unwrap();
        let direct = clb_combine(&[clb_site_aggregates(&one[0], &p, &Eta::vanilla())], 0.95).unwrap();
        assert_eq!(fed, direct);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn algorithm1_is_bitwise_centralised_and_replayable() {
        let (sites, _, p, _) = small_draw(2);
        let (fed, log) = run_algorithm1(&sites, &p, &Eta::vanilla(), 0.95).unwrap();
        let central = clb_pooled_reference(&sites, &p, &Eta::vanilla(), 0.95).unwrap();
        assert_eq!(fed.tau_hat.to_bits(), central.tau_hat.to_bits());
        assert_eq!(fed.var_hat.to_bits(), central.var_hat.to_bits());
        let replayed = replay_algorithm1(&MessageLog::from_lines(&log.to_lines().unwrap()).unwrap(), 0.95).unwrap();
        assert_eq!(replayed, fed);
        assert!(audit_log(&log).unwrap().ok);
    }

    fn fed_cfg(rounds: usize) -> FedConfig {
        FedConfig { rounds, local_steps: 2, learning_rate: LearningRate::Auto { scale: 0.5 }, early_stop_tol: 0.0, ..Default::default() }
    }

    #[test]
    fn algorithm2_message_count_and_audit() {
        let cfg = ShiftConfig { site_sizes: vec![200, 300, 400], n_target: 500, ..Default::default() }.with_d_kl(0.1);
        let draw = gen_covariate_shift(&cfg, &SeedSpec::new(3), 0).unwrap();
        let (sites, target) = (draw.sites, draw.target);
        let rounds = 4;
        let cfg = Alg2Config { outcome: OutcomeTraining::FedAvg(fed_cfg(rounds)), ..Default::default() };
        let source = PropensitySource::Fit(RatioBackend::tilting(FeatureMap::IdentityPlusIntercept));
        let (_, log) = run_algorithm2(&sites, &target, &source, &cfg).unwrap();
        let k = sites.len();
        assert_eq!(log.len(), k * (2 * rounds * cfg.folds + 3) + 2);
        assert!(audit_log(&log).unwrap().ok);
    }

    #[test]
    fn algorithm2_matches_reference_and_replays() {
        let (sites, target, p, _) = small_draw(4);
        for flavor in [AipwFlavor::Clb, AipwFlavor::Meta] {
            let cfg = Alg2Config { outcome: OutcomeTraining::FedAvg(fed_cfg(10)), flavor, fold_seed: 9, ..Default::default() };
            let source = PropensitySource::Given(p.clone());
            let (fed, log) = run_algorithm2(&sites, &target, &source, &cfg).unwrap();
            let central = algorithm2_reference(&sites, &target, &source, &cfg).unwrap();
            assert_eq!(fed.tau_hat.to_bits(), central.tau_hat.to_bits(), "{flavor:?}");
            assert_eq!(fed.var_hat.to_bits(), central.var_hat.to_bits(), "{flavor:?}");
            let back = MessageLog::from_lines(&log.to_lines().unwrap()).unwrap();
            assert_eq!(replay_algorithm2(&back, flavor, &cfg.meta_weighting, cfg.level).unwrap(), fed);
        }
    }

    #[test]
    fn zero_models_reduce_to_algorithm1() {
        let (sites, target, p, _) = small_draw(5);
        let zero = |arm| OutcomeModel::zeros(arm, FeatureMap::IdentityPlusIntercept, 3);
        let cfg = Alg2Config { outcome: OutcomeTraining::Fixed { m1: zero(Arm::Treated), m0: zero(Arm::Control) }, ..Default::default() };
        let (aipw, _) = run_algorithm2(&sites, &target, &PropensitySource::Given(p.clone()), &cfg).unwrap();
        let plan = crossfit_split(&sites, cfg.folds, cfg.fold_seed).unwrap();
        let per_fold: f64 = (0..cfg.folds)
            .map(|f| {
                let eval: Vec<_> = sites.iter().map(|s| plan.split(s, f).1).collect();
                clb_ipw(&eval, &p, &Eta::vanilla(), 0.95).unwrap().tau_hat
            })
            .sum::<f64>()
            / cfg.folds as f64;
        assert!((aipw.tau_hat - per_fold).abs() < 1e-12, "{} vs {per_fold}", aipw.tau_hat);
    }

    #[test]
    fn perfect_models_send_zero_corrections() {
        let (sites, target, p, shift) = small_draw(6);
        let m1 = OutcomeModel { arm: Arm::Treated, psi: FeatureMap::Identity, theta: shift.beta1.clone() };
        let m0 = OutcomeModel { arm: Arm::Control, psi: FeatureMap::Identity, theta: shift.beta0.clone() };
        let cfg = Alg2Config { outcome: OutcomeTraining::Fixed { m1, m0 }, psi: FeatureMap::Identity, ..Default::default() };
        let (report, log) = run_algorithm2(&sites, &target, &PropensitySource::Given(p), &cfg).unwrap();
        for m in &log.messages {
            if let MessageKind::Corrections { correction: SiteCorrection::Clb(a), .. } = &m.body {
                assert!(a.g1().abs() < 1e-9 && a.g0().abs() < 1e-9);
            }
        }
        let truth: f64 = target.xs.iter().map(|x| x.iter().zip([0.6, 1.1, 0.8]).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>() / target.len() as f64;
        assert!((report.tau_hat - truth).abs() < 1e-9);
    }
}

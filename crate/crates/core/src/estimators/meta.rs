use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ArmSums;
use crate::data::{Arm, SiteDataset, TargetCovariates};
use crate::error::{invalid, Error, Result};
use crate::nuisance::PropensitySet;
use crate::report::{EstimateReport, EstimatorKind, SiteDiagnostic};

/// Number of target points used to check that a site's propensities cover
/// the target support.
pub const COVERAGE_PROBES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaSiteEstimate {
    pub tau: f64,
    /// Absolute variance of `tau`.
    pub var: f64,
    pub mu1: f64,
    pub mu0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetaSiteResult {
    Included(MetaSiteEstimate),
    Excluded { reason: String },
}

impl MetaSiteResult {
    pub fn estimate(&self) -> Option<&MetaSiteEstimate> {
        match self {
            MetaSiteResult::Included(e) => Some(e),
            MetaSiteResult::Excluded { .. } => None,
        }
    }
}

/// Per-site Hájek IPW estimate using that site's own propensities.
pub fn meta_ipw_site(site: &SiteDataset, p: &PropensitySet) -> MetaSiteResult {
    let ys: Vec<f64> = site.records.iter().map(|r| r.y).collect();
    meta_site_with(site, p, &ys)
}

/// As [`meta_ipw_site`] with `values[i]` in place of the outcome of unit `i`.
pub fn meta_site_with(site: &SiteDataset, p: &PropensitySet, values: &[f64]) -> MetaSiteResult {
    let mut sums = [ArmSums::default(); 2];
    for (slot, arm) in [Arm::Treated, Arm::Control].into_iter().enumerate() {
        let which = if arm == Arm::Treated { "treated" } else { "control" };
        let mut pairs = Vec::new();
        for (r, &v) in site.records.iter().zip(values) {
            if r.arm != arm {
                continue;
            }
            let e = p.e(site.site_id, arm, &r.x);
            if !(e > 0.0) || !e.is_finite() {
                return MetaSiteResult::Excluded { reason: format!("{which} propensity vanishes on the site's units") };
            }
            pairs.push((1.0 / e, v));
        }
        if pairs.is_empty() {
            return MetaSiteResult::Excluded { reason: format!("no {which} units") };
        }
        sums[slot] = ArmSums::from_pairs(&pairs);
    }
    let [t, c] = sums;
    let (mu1, mu0) = (t.center(), c.center());
    let var = t.c2 / (t.n * t.n) + c.c2 / (c.n * c.n);
    MetaSiteResult::Included(MetaSiteEstimate { tau: mu1 - mu0, var, mu1, mu0 })
}

/// How site estimates are weighted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaWeighting {
    #[default]
    InverseVariance,
    /// Weights per site id, renormalised over included sites.
    Fixed(BTreeMap<usize, f64>),
}

/// Whether both of the site's propensities are positive at every probe.
pub fn site_covers_target(p: &PropensitySet, site_id: usize, probes: &[Vec<f64>]) -> bool {
    probes.iter().all(|x| Arm::BOTH.iter().all(|&arm| p.e(site_id, arm, x) > 0.0))
}

/// Meta-IPW: per-site estimates combined by `mode`. With a target sample,
/// sites whose propensities vanish somewhere on it are excluded.
pub fn meta_ipw(
    sites: &[SiteDataset],
    p: &PropensitySet,
    target: Option<&TargetCovariates>,
    mode: &MetaWeighting,
    level: f64,
) -> Result<EstimateReport> {
    let probes = target.map(|t| &t.xs[..t.len().min(COVERAGE_PROBES)]);
    let results: Vec<(usize, MetaSiteResult)> = sites
        .iter()
        .map(|s| {
            let res = match probes {
                Some(pr) if !site_covers_target(p, s.site_id, pr) => {
                    MetaSiteResult::Excluded { reason: "propensity vanishes on part of the target support".into() }
                }
                _ => meta_ipw_site(s, p),
            };
            (s.site_id, res)
        })
        .collect();
    meta_combine(&results, mode, level)
}

pub fn meta_combine(results: &[(usize, MetaSiteResult)], mode: &MetaWeighting, level: f64) -> Result<EstimateReport> {
    combine(results, mode, level, EstimatorKind::MetaIPW)
}

/// Weighted combination shared by Meta-IPW and Meta-AIPW corrections.
/// Returns the combined value, its variance, and diagnostics.
pub(crate) fn combine_values(
    results: &[(usize, MetaSiteResult)],
    mode: &MetaWeighting,
) -> Result<(f64, f64, Vec<SiteDiagnostic>)> {
    let mut diags = Vec::with_capacity(results.len());
    let mut usable: Vec<(usize, MetaSiteEstimate)> = Vec::new();
    for (k, r) in results {
        match r {
            MetaSiteResult::Included(e) if e.var.is_finite() && e.tau.is_finite() => usable.push((*k, *e)),
            MetaSiteResult::Included(_) => {
                diags.push(SiteDiagnostic { site_id: *k, included: false, note: "infinite variance".into() })
            }
            MetaSiteResult::Excluded { reason } => {
                diags.push(SiteDiagnostic { site_id: *k, included: false, note: reason.clone() })
            }
        }
    }
    if usable.is_empty() {
        let why = diags.iter().map(|d| format!("site {}: {}", d.site_id, d.note)).collect::<Vec<_>>().join("; ");
        return Err(Error::AllSitesExcluded(why));
    }

    let raw: Vec<f64> = match mode {
        MetaWeighting::InverseVariance => {
            if usable.iter().any(|(_, e)| e.var == 0.0) {
                usable.iter().map(|(_, e)| if e.var == 0.0 { 1.0 } else { 0.0 }).collect()
            } else {
                usable.iter().map(|(_, e)| 1.0 / e.var).collect()
            }
        }
        MetaWeighting::Fixed(w) => {
            let raw: Vec<f64> = usable.iter().map(|(k, _)| w.get(k).copied().unwrap_or(0.0)).collect();
            if raw.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return invalid("fixed Meta weights must be finite and non-negative");
            }
            raw
        }
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllSitesExcluded("every included site has zero weight".into()));
    }
    let mut value = 0.0;
    let mut var = 0.0;
    for ((k, e), w) in usable.iter().zip(&raw) {
        let eta = w / total;
        value += eta * e.tau;
        var += eta * eta * e.var;
        diags.push(SiteDiagnostic { site_id: *k, included: true, note: format!("weight {eta:.6}") });
    }
    if let MetaWeighting::InverseVariance = mode {
        if usable.iter().all(|(_, e)| e.var > 0.0) {
            var = 1.0 / raw.iter().sum::<f64>();
        }
    }
    diags.sort_by_key(|d| d.site_id);
    Ok((value, var, diags))
}

fn combine(results: &[(usize, MetaSiteResult)], mode: &MetaWeighting, level: f64, kind: EstimatorKind) -> Result<EstimateReport> {
    let (tau, var, diags) = combine_values(results, mode)?;
    let mut report = EstimateReport::new(kind, tau, var, 1.0, level, diags)?;
    report.notes.push("var_hat is the absolute variance of tau_hat (n_effective = 1)".into());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::nuisance::PropensityKind;
    use approx::assert_abs_diff_eq;

    fn constant_set(v: f64) -> PropensitySet {
        PropensitySet::new(PropensityKind::Oracle)
            .with(1, Arm::Treated, move |_| v)
            .with(1, Arm::Control, move |_| v)
    }

    fn two_unit_site() -> SiteDataset {
        SiteDataset::new(1, vec![UnitRecord::new(vec![0.0], Arm::Treated, 2.0), UnitRecord::new(vec![0.0], Arm::Control, 1.0)]).unwrap()
    }

    fn inc(tau: f64, var: f64) -> MetaSiteResult {
        MetaSiteResult::Included(MetaSiteEstimate { tau, var, mu1: 0.0, mu0: 0.0 })
    }

    #[test]
    fn constant_weights_cancel() {
        let r = meta_ipw_site(&two_unit_site(), &constant_set(0.5));
        assert_eq!(r.estimate().unwrap().tau, 1.0);
    }

    #[test]
    fn all_treated_site_is_excluded() {
        let site = SiteDataset::new(1, vec![UnitRecord::new(vec![0.0], Arm::Treated, 2.0)]).unwrap();
        assert_eq!(meta_ipw_site(&site, &constant_set(0.5)), MetaSiteResult::Excluded { reason: "no control units".into() });
    }

    #[test]
    fn doubling_scores_keeps_estimate() {
        let site = SiteDataset::new(
            1,
            vec![
                UnitRecord::new(vec![0.1], Arm::Treated, 2.0),
                UnitRecord::new(vec![0.9], Arm::Treated, 3.0),
                UnitRecord::new(vec![0.4], Arm::Control, 1.0),
                UnitRecord::new(vec![0.2], Arm::Control, -1.0),
            ],
        )
        .unwrap();
        let p = PropensitySet::new(PropensityKind::Oracle)
            .with(1, Arm::Treated, |x| 0.2 + x[0] / 2.0)
            .with(1, Arm::Control, |x| 0.6 - x[0] / 2.0);
        let a = meta_ipw_site(&site, &p);
        let b = meta_ipw_site(&site, &p.scaled(2.0));
        assert_eq!(a.estimate().unwrap().tau, b.estimate().unwrap().tau);
    }

    #[test]
    fn equal_precision_average() {
        let r = meta_combine(&[(1, inc(1.0, 1.0)), (2, inc(3.0, 1.0))], &MetaWeighting::InverseVariance, 0.95).unwrap();
        assert_eq!(r.tau_hat, 2.0);
        assert_eq!(r.var_hat, 0.5);
    }

    #[test]
    fn infinite_variance_site_drops_out() {
        let r = meta_combine(&[(1, inc(1.0, 1.0)), (2, inc(3.0, f64::INFINITY))], &MetaWeighting::InverseVariance, 0.95).unwrap();
        assert_eq!(r.tau_hat, 1.0);
        assert!(!r.per_site_diagnostics[1].included);
    }

    #[test]
    fn unequal_precision_average() {
        let r = meta_combine(&[(1, inc(0.0, 1.0)), (2, inc(4.0, 3.0))], &MetaWeighting::InverseVariance, 0.95).unwrap();
        assert_abs_diff_eq!(r.tau_hat, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.var_hat, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn fixed_weights_are_renormalised() {
        let w = MetaWeighting::Fixed(BTreeMap::from([(1, 3.0), (2, 1.0), (3, 5.0)]));
        let r = meta_combine(&[(1, inc(0.0, 1.0)), (2, inc(4.0, 3.0)), (3, MetaSiteResult::Excluded { reason: "x".into() })], &w, 0.95).unwrap();
        assert_abs_diff_eq!(r.tau_hat, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.var_hat, 0.5625 + 0.1875, epsilon = 1e-15);
    }

    #[test]
    fn all_excluded_is_an_error() {
        let res = meta_combine(&[(1, MetaSiteResult::Excluded { reason: "no control units".into() })], &MetaWeighting::InverseVariance, 0.95);
        assert!(matches!(res, Err(Error::AllSitesExcluded(_))));
    }

    #[test]
    fn coverage_check_excludes_partial_sites() {
        let p = PropensitySet::new(PropensityKind::Oracle)
            .with(1, Arm::Treated, |x| if x[0] > 0.0 { 0.2 } else { 0.0 })
            .with(1, Arm::Control, |x| if x[0] > 0.0 { 0.2 } else { 0.0 });
        assert!(site_covers_target(&p, 1, &[vec![0.5], vec![1.0]]));
        assert!(!site_covers_target(&p, 1, &[vec![0.5], vec![-1.0]]));
    }
}

use serde::{Deserialize, Serialize};

use super::{pooled_mean, ArmSums};
use crate::data::{Arm, SiteDataset};
use crate::error::{invalid, Error, Result};
use crate::nuisance::{pooled_score, Eta, PropensitySet, SCORE_FLOOR};
use crate::report::{EstimateReport, EstimatorKind, SiteDiagnostic};

/// What one site sends for CLB estimation: per-arm weighted sums against the
/// pooled scores. `G1 = Σ_{z=1} η_k y / s₁(x)`, `N1 = Σ_{z=1} η_k / s₁(x)`,
/// and the control analogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAggregates {
    pub site_id: usize,
    pub treated: ArmSums,
    pub control: ArmSums,
    /// Units whose pooled score was below the division floor.
    pub floored: usize,
}

impl SiteAggregates {
    pub fn arm(&self, arm: Arm) -> &ArmSums {
        match arm {
            Arm::Treated => &self.treated,
            Arm::Control => &self.control,
        }
    }

    pub fn g1(&self) -> f64 {
        self.treated.g
    }

    pub fn n1(&self) -> f64 {
        self.treated.n
    }

    pub fn g0(&self) -> f64 {
        self.control.g
    }

    pub fn n0(&self) -> f64 {
        self.control.n
    }

    pub fn units(&self) -> usize {
        self.treated.count + self.control.count
    }
}

pub fn clb_site_aggregates(site: &SiteDataset, p: &PropensitySet, eta: &Eta) -> SiteAggregates {
    let ys: Vec<f64> = site.records.iter().map(|r| r.y).collect();
    clb_site_aggregates_with(site, p, eta, &ys)
}

/// As [`clb_site_aggregates`] with `values[i]` in place of the outcome of unit `i`.
pub fn clb_site_aggregates_with(site: &SiteDataset, p: &PropensitySet, eta: &Eta, values: &[f64]) -> SiteAggregates {
    let eta_k = eta.get(site.site_id);
    let mut floored = 0;
    let mut pairs: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for (r, &v) in site.records.iter().zip(values) {
        let score = pooled_score(p, eta, &r.x, r.arm);
        let score = if score < SCORE_FLOOR || !score.is_finite() {
            floored += 1;
            SCORE_FLOOR
        } else {
            score
        };
        let slot = usize::from(r.arm == Arm::Control);
        pairs[slot].push((eta_k / score, v));
    }
    SiteAggregates {
        site_id: site.site_id,
        treated: ArmSums::from_pairs(&pairs[0]),
        control: ArmSums::from_pairs(&pairs[1]),
        floored,
    }
}

/// Pooled CLB means and the variance of their difference, from aggregates alone.
pub(crate) struct ClbPooled {
    pub mu1: f64,
    pub mu0: f64,
    /// Squared standard error of `mu1 − mu0`.
    pub se2: f64,
    pub n_pooled: usize,
}

pub(crate) fn clb_pool(aggs: &[SiteAggregates]) -> Result<ClbPooled> {
    let treated: Vec<&ArmSums> = aggs.iter().map(|a| &a.treated).collect();
    let control: Vec<&ArmSums> = aggs.iter().map(|a| &a.control).collect();
    let Some((mu1, v1)) = pooled_mean(&treated) else {
        return Err(Error::OverlapViolation("no treated units at any site".into()));
    };
    let Some((mu0, v0)) = pooled_mean(&control) else {
        return Err(Error::OverlapViolation("no control units at any site".into()));
    };
    Ok(ClbPooled { mu1, mu0, se2: v1 + v0, n_pooled: aggs.iter().map(SiteAggregates::units).sum() })
}

pub(crate) fn clb_diagnostics(aggs: &[SiteAggregates]) -> Vec<SiteDiagnostic> {
    aggs.iter()
        .map(|a| {
            let mut note = format!("treated {}, control {}", a.treated.count, a.control.count);
            if a.floored > 0 {
                note.push_str(&format!(", {} scores floored", a.floored));
            }
            SiteDiagnostic { site_id: a.site_id, included: true, note }
        })
        .collect()
}

/// Server-side CLB-IPW: `μ̂_z = ΣG_z / ΣN_z`, `τ̂ = μ̂₁ − μ̂₀`, with the
/// sandwich variance evaluated from the aggregates' centred second moments.
pub fn clb_combine(aggs: &[SiteAggregates], level: f64) -> Result<EstimateReport> {
    let pooled = clb_pool(aggs)?;
    let n = pooled.n_pooled as f64;
    EstimateReport::new(EstimatorKind::ClbIPW, pooled.mu1 - pooled.mu0, n * pooled.se2, n, level, clb_diagnostics(aggs))
}

/// Aggregates and combination in one call.
pub fn clb_ipw(sites: &[SiteDataset], p: &PropensitySet, eta: &Eta, level: f64) -> Result<EstimateReport> {
    let aggs: Vec<SiteAggregates> = sites.iter().map(|s| clb_site_aggregates(s, p, eta)).collect();
    clb_combine(&aggs, level)
}

/// Horvitz-Thompson counterpart of CLB-IPW: the weighted sums divided by
/// the population size that produced the pooled sample instead of by the
/// realised weight totals. Needs correctly normalised scores, so it is a
/// reference for oracle settings only.
pub fn clb_horvitz_thompson(sites: &[SiteDataset], p: &PropensitySet, eta: &Eta, n_population: usize) -> Result<f64> {
    if n_population == 0 {
        return invalid("population size must be positive");
    }
    let aggs: Vec<SiteAggregates> = sites.iter().map(|s| clb_site_aggregates(s, p, eta)).collect();
    let g1: f64 = aggs.iter().map(SiteAggregates::g1).sum();
    let g0: f64 = aggs.iter().map(SiteAggregates::g0).sum();
    Ok((g1 - g0) / n_population as f64)
}

/// Centralised reference: one pass over the pooled records in site order,
/// with the sums kept per site exactly as the sites would form them.
pub fn clb_pooled_reference(sites: &[SiteDataset], p: &PropensitySet, eta: &Eta, level: f64) -> Result<EstimateReport> {
    let mut per_site: Vec<(usize, [Vec<(f64, f64)>; 2], usize)> = Vec::with_capacity(sites.len());
    for s in sites {
        let mut pairs: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
        let mut floored = 0;
        for r in &s.records {
            let mut score = pooled_score(p, eta, &r.x, r.arm);
            if score < SCORE_FLOOR || !score.is_finite() {
                floored += 1;
                score = SCORE_FLOOR;
            }
            pairs[usize::from(r.arm == Arm::Control)].push((eta.get(s.site_id) / score, r.y));
        }
        per_site.push((s.site_id, pairs, floored));
    }
    let aggs: Vec<SiteAggregates> = per_site
        .into_iter()
        .map(|(site_id, [t, c], floored)| SiteAggregates {
            site_id,
            treated: ArmSums::from_pairs(&t),
            control: ArmSums::from_pairs(&c),
            floored,
        })
        .collect();
    clb_combine(&aggs, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::nuisance::PropensityKind;
    use approx::assert_relative_eq;

    fn half() -> PropensitySet {
        PropensitySet::new(PropensityKind::Oracle)
            .with(1, Arm::Treated, |_| 0.5)
            .with(1, Arm::Control, |_| 0.5)
    }

    fn two_unit_site() -> SiteDataset {
        SiteDataset::new(1, vec![UnitRecord::new(vec![0.0], Arm::Treated, 2.0), UnitRecord::new(vec![0.0], Arm::Control, 1.0)]).unwrap()
    }

    #[test]
    fn constant_score_arithmetic() {
        let a = clb_site_aggregates(&two_unit_site(), &half(), &Eta::vanilla());
        assert_eq!((a.g1(), a.n1(), a.g0(), a.n0()), (4.0, 2.0, 2.0, 2.0));
        let r = clb_combine(&[a], 0.95).unwrap();
        assert_eq!(r.tau_hat, 1.0);
        assert_eq!(r.n_effective, 2.0);
    }

    #[test]
    fn treated_only_site_has_empty_control_sums() {
        let site = SiteDataset::new(1, vec![UnitRecord::new(vec![0.0], Arm::Treated, 2.0)]).unwrap();
        let a = clb_site_aggregates(&site, &half(), &Eta::vanilla());
        assert_eq!((a.g1(), a.n1()), (4.0, 2.0));
        assert_eq!((a.g0(), a.n0()), (0.0, 0.0));
        assert!(matches!(clb_combine(&[a], 0.95), Err(Error::OverlapViolation(_))));
    }

    #[test]
    fn scaling_by_two_halves_aggregates() {
        let a = clb_site_aggregates(&two_unit_site(), &half().scaled(2.0), &Eta::vanilla());
        assert_eq!((a.g1(), a.n1(), a.g0(), a.n0()), (2.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn scaled_scores_leave_report_unchanged() {
        let site = SiteDataset::new(
            1,
            vec![
                UnitRecord::new(vec![0.1], Arm::Treated, 2.0),
                UnitRecord::new(vec![0.9], Arm::Treated, 3.5),
                UnitRecord::new(vec![0.4], Arm::Control, 1.0),
                UnitRecord::new(vec![0.2], Arm::Control, -1.0),
            ],
        )
        .unwrap();
        let p = PropensitySet::new(PropensityKind::Oracle)
            .with(1, Arm::Treated, |x| 0.2 + x[0] / 2.0)
            .with(1, Arm::Control, |x| 0.6 - x[0] / 2.0);
        let a = clb_ipw(std::slice::from_ref(&site), &p, &Eta::vanilla(), 0.95).unwrap();
        let b = clb_ipw(std::slice::from_ref(&site), &p.scaled(123.0), &Eta::vanilla(), 0.95).unwrap();
        assert_relative_eq!(a.tau_hat, b.tau_hat, max_relative = 1e-14);
        assert_relative_eq!(a.var_hat, b.var_hat, max_relative = 1e-12);
    }

    #[test]
    fn federated_sums_equal_pooled_reference_bitwise() {
        let mk = |id: usize, off: f64| {
            SiteDataset::new(
                id,
                (0..7).map(|i| UnitRecord::new(vec![off + i as f64 / 7.0], if i % 3 == 0 { Arm::Control } else { Arm::Treated }, i as f64 * off)).collect(),
            )
            .unwrap()
        };
        let sites = vec![mk(1, 0.3), mk(2, 1.7)];
        let p = PropensitySet::new(PropensityKind::Oracle)
            .with(1, Arm::Treated, |x| 0.3 / (1.0 + x[0]))
            .with(1, Arm::Control, |x| 0.1 + 0.05 * x[0])
            .with(2, Arm::Treated, |x| 0.2 * x[0]);
        let fed = clb_ipw(&sites, &p, &Eta::vanilla(), 0.95).unwrap();
        let central = clb_pooled_reference(&sites, &p, &Eta::vanilla(), 0.95).unwrap();
        assert_eq!(fed.tau_hat.to_bits(), central.tau_hat.to_bits());
        assert_eq!(fed.var_hat.to_bits(), central.var_hat.to_bits());
    }
}

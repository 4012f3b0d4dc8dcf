//! The four estimators of the target average treatment effect, all in Hájek
//! (self-normalised) form so that propensities known only up to a shared
//! constant suffice.
//!
//! Reported variances follow one convention: `var_hat / n_effective` is the
//! squared standard error. CLB and AIPW estimators use `n_effective = N_S`;
//! Meta combinations report the absolute variance with `n_effective = 1`.

mod aipw;
mod clb;
mod meta;

use serde::{Deserialize, Serialize};

pub use aipw::{
    aipw_combine, aipw_corrections, aipw_fold_inputs, crossfit_aipw, site_fold_correction, target_mean_term, wls_outcome_fitter, AipwFlavor,
    AipwInputs, AipwOptions, OutcomeFitter, SiteCorrection, TargetTerm,
};
pub use clb::{clb_combine, clb_horvitz_thompson, clb_ipw, clb_pooled_reference, clb_site_aggregates, clb_site_aggregates_with, SiteAggregates};
pub use meta::{
    meta_combine, meta_ipw, meta_ipw_site, meta_site_with, site_covers_target, MetaSiteEstimate, MetaSiteResult,
    MetaWeighting, COVERAGE_PROBES,
};

/// Weighted sums for one arm of one site.
///
/// Besides the Hájek numerator `g = Σ w·y` and denominator `n = Σ w`, the
/// second moments are kept centred at the local mean `g / n` so that any
/// party holding only these sums can evaluate `Σ w²(y − μ)²` at another `μ`
/// without cancellation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmSums {
    pub g: f64,
    pub n: f64,
    /// `Σ w²(y − g/n)`.
    pub c1: f64,
    /// `Σ w²(y − g/n)²`.
    pub c2: f64,
    /// `Σ w²`.
    pub s: f64,
    pub count: usize,
}

impl ArmSums {
    /// Sums over `(weight, value)` pairs, in order.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut out = ArmSums { count: pairs.len(), ..Default::default() };
        for &(w, y) in pairs {
            out.g += w * y;
            out.n += w;
        }
        let m = out.center();
        for &(w, y) in pairs {
            let r = y - m;
            let w2 = w * w;
            out.c1 += w2 * r;
            out.c2 += w2 * r * r;
            out.s += w2;
        }
        out
    }

    /// Local Hájek mean, zero for an empty arm.
    pub fn center(&self) -> f64 {
        if self.n > 0.0 { self.g / self.n } else { 0.0 }
    }

    /// `Σ w²(y − mu)²`.
    pub fn sq_dev(&self, mu: f64) -> f64 {
        let d = self.center() - mu;
        (self.c2 + 2.0 * d * self.c1 + d * d * self.s).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Pooled Hájek mean of one arm across sites, with its sandwich variance.
pub(crate) fn pooled_mean(parts: &[&ArmSums]) -> Option<(f64, f64)> {
    let g: f64 = parts.iter().map(|a| a.g).sum();
    let n: f64 = parts.iter().map(|a| a.n).sum();
    if !(n > 0.0) {
        return None;
    }
    let mu = g / n;
    let dev: f64 = parts.iter().map(|a| a.sq_dev(mu)).sum();
    Some((mu, dev / (n * n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn centred_moments_shift_exactly() {
        let pairs = [(1.0, 2.0), (0.5, 4.0), (2.0, -1.0)];
        let a = ArmSums::from_pairs(&pairs);
        for mu in [-3.0, 0.0, 0.7, 5.0] {
            let direct: f64 = pairs.iter().map(|(w, y)| w * w * (y - mu) * (y - mu)).sum();
            assert_relative_eq!(a.sq_dev(mu), direct, max_relative = 1e-13);
        }
    }

    #[test]
    fn pooled_mean_over_parts_equals_one_pass() {
        let p1 = [(1.0, 2.0), (0.5, 4.0)];
        let p2 = [(2.0, -1.0), (0.25, 3.0), (1.5, 1.0)];
        let all: Vec<_> = p1.iter().chain(&p2).copied().collect();
        let (mu, var) = pooled_mean(&[&ArmSums::from_pairs(&p1), &ArmSums::from_pairs(&p2)]).unwrap();
        let (mu_all, var_all) = pooled_mean(&[&ArmSums::from_pairs(&all)]).unwrap();
        assert_relative_eq!(mu, mu_all, max_relative = 1e-14);
        assert_relative_eq!(var, var_all, max_relative = 1e-12);
        assert!(pooled_mean(&[&ArmSums::default()]).is_none());
    }
}

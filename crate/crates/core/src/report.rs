use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "meta-ipw")]
    MetaIPW,
    #[serde(rename = "clb-ipw")]
    ClbIPW,
    #[serde(rename = "meta-aipw")]
    MetaAIPW,
    #[serde(rename = "clb-aipw")]
    ClbAIPW,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::MetaIPW,
        EstimatorKind::ClbIPW,
        EstimatorKind::MetaAIPW,
        EstimatorKind::ClbAIPW,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            EstimatorKind::MetaIPW => "meta-ipw",
            EstimatorKind::ClbIPW => "clb-ipw",
            EstimatorKind::MetaAIPW => "meta-aipw",
            EstimatorKind::ClbAIPW => "clb-aipw",
        }
    }

    pub fn is_aipw(self) -> bool {
        matches!(self, EstimatorKind::MetaAIPW | EstimatorKind::ClbAIPW)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.cli_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDiagnostic {
    pub site_id: usize,
    pub included: bool,
    pub note: String,
}

/// Point estimate with its plug-in variance and normal confidence interval.
///
/// `var_hat / n_effective` is the squared standard error of `tau_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub tau_hat: f64,
    pub var_hat: f64,
    pub n_effective: f64,
    pub ci_level: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub per_site_diagnostics: Vec<SiteDiagnostic>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub const DEFAULT_CI_LEVEL: f64 = 0.95;

impl EstimateReport {
    /// Assembles a report and fills in the interval at `level`.
    pub fn new(
        estimator: EstimatorKind,
        tau_hat: f64,
        var_hat: f64,
        n_effective: f64,
        level: f64,
        per_site_diagnostics: Vec<SiteDiagnostic>,
    ) -> Result<Self> {
        let mut report = Self {
            estimator,
            tau_hat,
            var_hat,
            n_effective,
            ci_level: level,
            ci_lo: tau_hat,
            ci_hi: tau_hat,
            per_site_diagnostics,
            notes: Vec::new(),
        };
        report.set_level(level)?;
        Ok(report)
    }

    pub fn std_error(&self) -> f64 {
        (self.var_hat / self.n_effective).sqrt()
    }

    /// Recomputes the interval at a new level.
    pub fn set_level(&mut self, level: f64) -> Result<()> {
        let (lo, hi) = confidence_interval(self, level)?;
        self.ci_level = level;
        self.ci_lo = lo;
        self.ci_hi = hi;
        Ok(())
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

/// Two-sided normal quantile `z_{(1+level)/2}`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("confidence level must lie in (0,1), got {level}"));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 * (1.0 + level)))
}

/// `tau_hat ± z_{(1+level)/2} · sqrt(var_hat / n_effective)`.
pub fn confidence_interval(report: &EstimateReport, level: f64) -> Result<(f64, f64)> {
    let z = normal_quantile(level)?;
    if report.var_hat < 0.0 || report.var_hat.is_nan() {
        return invalid("variance must be non-negative");
    }
    if report.var_hat == 0.0 {
        return Ok((report.tau_hat, report.tau_hat));
    }
    let half = z * report.std_error();
    Ok((report.tau_hat - half, report.tau_hat + half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn report(tau: f64, var: f64, n: f64) -> EstimateReport {
        EstimateReport::new(EstimatorKind::ClbIPW, tau, var, n, 0.95, vec![]).unwrap()
    }

    #[test]
    fn standard_normal_95_interval() {
        let (lo, hi) = confidence_interval(&report(0.0, 1.0, 1.0), 0.95).unwrap();
        assert_abs_diff_eq!(lo, -1.959964, epsilon = 1e-6);
        assert_abs_diff_eq!(hi, 1.959964, epsilon = 1e-6);
    }

    #[test]
    fn fifty_percent_interval_matches_quartile() {
        // Phi^{-1}(0.75) by bisection on erf-based CDF.
        let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()));
        let (mut a, mut b) = (0.0, 2.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if cdf(m) < 0.75 { a = m } else { b = m }
        }
        assert_abs_diff_eq!(a, 0.674490, epsilon = 1e-6);
        let r = report(3.0, 4.0, 16.0);
        let (lo, hi) = confidence_interval(&r, 0.5).unwrap();
        assert_abs_diff_eq!(0.5 * (hi - lo), a * 0.5, epsilon = 1e-9);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let r = report(1.5, 0.0, 10.0);
        assert_eq!((r.ci_lo, r.ci_hi), (1.5, 1.5));
    }

    #[test]
    fn bad_levels_are_rejected() {
        let r = report(0.0, 1.0, 1.0);
        assert!(confidence_interval(&r, 1.0).is_err());
        assert!(confidence_interval(&r, 0.0).is_err());
    }

    #[test]
    fn estimator_names_parse() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.cli_name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("ipw".parse::<EstimatorKind>().is_err());
    }
}

//! Density-ratio estimation `r(x) = p_source(x) / p_target(x)`.
//!
//! Two backends are provided: a parametric exponential-tilting model fitted
//! by moment matching ([`fit_tilting`]) and the nonparametric nearest-neighbour
//! matching estimator ([`fit_knn`]). [`oracle_gaussian_ratio`] gives the exact
//! ratio for equal-variance isotropic Gaussians and is used as a test oracle.

mod knn;
mod tilting;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use knn::{default_knn_m, fit_knn, fit_knn_with, KnnEval, KnnOptions, KnnRatio};
pub use tilting::{fit_tilting, fit_tilting_detailed, TiltingFit, TiltingOptions, TiltingRatio};

/// Representation `ψ(x)` used by tilting ratio models and outcome regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    IdentityPlusIntercept,
    /// `(x1·x2, x2², x3 / max(1, x1·x2))`, defined for `d = 3` only.
    Misspecified,
    /// [`FeatureMap::Misspecified`] with a leading constant.
    MisspecifiedPlusIntercept,
}

impl FeatureMap {
    pub fn has_intercept(self) -> bool {
        matches!(self, FeatureMap::IdentityPlusIntercept | FeatureMap::MisspecifiedPlusIntercept)
    }

    pub fn is_misspecified(self) -> bool {
        matches!(self, FeatureMap::Misspecified | FeatureMap::MisspecifiedPlusIntercept)
    }

    /// Output dimension for covariates of dimension `d`.
    pub fn dim(self, d: usize) -> usize {
        d + usize::from(self.has_intercept())
    }

    /// Fails when the map is undefined for dimension `d`.
    pub fn check_dim(self, d: usize) -> Result<()> {
        if self.is_misspecified() && d != 3 {
            return invalid(format!("misspecified feature map needs d = 3, got {d}"));
        }
        if d == 0 {
            return invalid("covariate dimension must be positive");
        }
        Ok(())
    }

    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim(x.len()));
        self.apply_into(x, &mut out);
        out
    }

    /// Writes `ψ(x)` into `out`, replacing its contents.
    pub fn apply_into(self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.has_intercept() {
            out.push(1.0);
        }
        if self.is_misspecified() {
            let prod = x[0] * x[1];
            out.extend_from_slice(&[prod, x[1] * x[1], x[2] / prod.max(1.0)]);
        } else {
            out.extend_from_slice(x);
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Identity => "identity",
            FeatureMap::IdentityPlusIntercept => "identity_plus_intercept",
            FeatureMap::Misspecified => "misspecified",
            FeatureMap::MisspecifiedPlusIntercept => "misspecified_plus_intercept",
        }
    }
}

/// A fitted density ratio.
#[derive(Debug, Clone)]
pub enum RatioModel {
    Tilting(TiltingRatio),
    Knn(KnnRatio),
}

impl RatioModel {
    /// The fitted function itself: `exp(ψ(x)ᵀγ)` for tilting, the matching
    /// estimate for K-NN.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            RatioModel::Tilting(t) => t.eval(x),
            RatioModel::Knn(k) => k.eval(x),
        }
    }

    /// `p_source(x) / p_target(x)` up to a constant.
    ///
    /// The tilting moment equation reweights the source towards the target,
    /// so its `exp(ψᵀγ)` estimates the reciprocal; K-NN estimates this
    /// ratio directly.
    pub fn density_ratio(&self, x: &[f64]) -> f64 {
        match self {
            RatioModel::Tilting(t) => 1.0 / t.eval(x),
            RatioModel::Knn(k) => k.eval(x),
        }
    }

    pub fn to_wire(&self) -> RatioModelWire {
        match self {
            RatioModel::Tilting(t) => RatioModelWire::Tilting { gamma: t.gamma.clone(), psi: t.psi },
            RatioModel::Knn(k) => RatioModelWire::Knn {
                m: k.m(),
                source_ref: k.source_ref().unwrap_or("unpublished").to_string(),
                n_source: k.n_source(),
                n_target: k.n_target(),
                standardized: k.is_standardized(),
            },
        }
    }
}

/// JSON form of a ratio model. K-NN models reference their source points
/// by name rather than carrying them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum RatioModelWire {
    Tilting {
        gamma: Vec<f64>,
        psi: FeatureMap,
    },
    Knn {
        m: usize,
        source_ref: String,
        n_source: usize,
        n_target: usize,
        standardized: bool,
    },
}

impl TryFrom<RatioModelWire> for RatioModel {
    type Error = Error;

    fn try_from(wire: RatioModelWire) -> Result<Self> {
        match wire {
            RatioModelWire::Tilting { gamma, psi } => Ok(RatioModel::Tilting(TiltingRatio { gamma, psi })),
            RatioModelWire::Knn { source_ref, .. } => invalid(format!(
                "K-NN ratio model `{source_ref}` can only be rebuilt next to its source points"
            )),
        }
    }
}

/// Which estimator to fit a ratio with, and its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum RatioBackend {
    Tilting {
        #[serde(default = "default_psi")]
        psi: FeatureMap,
        #[serde(default)]
        options: TiltingOptions,
    },
    Knn {
        #[serde(default)]
        options: KnnOptions,
    },
}

fn default_psi() -> FeatureMap {
    FeatureMap::IdentityPlusIntercept
}

impl RatioBackend {
    pub fn tilting(psi: FeatureMap) -> Self {
        RatioBackend::Tilting { psi, options: TiltingOptions::default() }
    }

    pub fn knn() -> Self {
        RatioBackend::Knn { options: KnnOptions::default() }
    }

    pub fn fit(&self, source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<RatioModel> {
        match self {
            RatioBackend::Tilting { psi, options } => fit_tilting(source, target, *psi, *options),
            RatioBackend::Knn { options } => fit_knn_with(source, target, options),
        }
    }
}

/// Exact `p_source(x) / p_target(x)` for `N(mu_source, σ²I)` over `N(mu_target, σ²I)`.
pub fn oracle_gaussian_ratio(mu_source: &[f64], mu_target: &[f64], sigma: f64, x: &[f64]) -> f64 {
    let s2 = sigma * sigma;
    let mut lin = 0.0;
    let mut nt = 0.0;
    let mut ns = 0.0;
    for ((ms, mt), xi) in mu_source.iter().zip(mu_target).zip(x) {
        lin += (ms - mt) * xi;
        nt += mt * mt;
        ns += ms * ms;
    }
    (lin / s2 + (nt - ns) / (2.0 * s2)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn normal_pdf(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
        let d = x.len() as f64;
        let q: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
        (-(q) / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).powf(d / 2.0)
    }

    #[test]
    fn oracle_ratio_midpoint_is_one() {
        assert_relative_eq!(oracle_gaussian_ratio(&[1.0], &[0.0], 1.0, &[0.5]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn oracle_ratio_equal_means_is_one() {
        for x in [-3.0, 0.0, 0.7, 12.0] {
            assert_relative_eq!(oracle_gaussian_ratio(&[0.4, -1.0], &[0.4, -1.0], 2.0, &[x, -x]), 1.0);
        }
    }

    #[test]
    fn oracle_ratio_matches_density_quotient() {
        let v = oracle_gaussian_ratio(&[1.0], &[0.0], 1.0, &[1.0]);
        assert_relative_eq!(v, 1.648721, epsilon = 1e-6);
        assert_relative_eq!(v, normal_pdf(&[1.0], &[1.0], 1.0) / normal_pdf(&[1.0], &[0.0], 1.0), epsilon = 1e-12);

        let (ms, mt, x) = ([1.9, 1.9, 1.9], [-0.1, -0.1, -0.1], [0.3, -2.0, 1.1]);
        assert_relative_eq!(
            oracle_gaussian_ratio(&ms, &mt, 2.0, &x),
            normal_pdf(&x, &ms, 2.0) / normal_pdf(&x, &mt, 2.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn feature_maps() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(FeatureMap::Identity.apply(&x), vec![1.0, 2.0, 3.0]);
        assert_eq!(FeatureMap::IdentityPlusIntercept.apply(&x), vec![1.0, 1.0, 2.0, 3.0]);
        assert_eq!(FeatureMap::Misspecified.apply(&x), vec![2.0, 4.0, 1.5]);
        assert_eq!(FeatureMap::MisspecifiedPlusIntercept.apply(&x), vec![1.0, 2.0, 4.0, 1.5]);
        assert!(FeatureMap::Misspecified.check_dim(2).is_err());
        assert_eq!(FeatureMap::IdentityPlusIntercept.dim(3), 4);
    }

    #[test]
    fn tilting_wire_round_trip() {
        let model = RatioModel::Tilting(TiltingRatio { gamma: vec![0.5, -1.0], psi: FeatureMap::IdentityPlusIntercept });
        let json = serde_json::to_string(&model.to_wire()).unwrap();
        assert!(json.contains("\"backend\":\"tilting\""));
        let back: RatioModel = serde_json::from_str::<RatioModelWire>(&json).unwrap().try_into().unwrap();
        assert_eq!(back.eval(&[2.0]), model.eval(&[2.0]));
    }

    #[test]
    fn both_backends_agree_on_ratio_direction() {
        let mut rng = crate::SeedSpec::new(4).rng(0, 0);
        let mut draw = |mu: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| vec![mu + rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)]).collect()
        };
        let (source, target) = (draw(0.5, 4000), draw(0.0, 4000));
        let tilt = fit_tilting(&source, &target, FeatureMap::IdentityPlusIntercept, TiltingOptions::default()).unwrap();
        let knn = fit_knn(&source, &target, 60).unwrap();
        for x in [-0.5, 0.0, 0.5, 1.0] {
            let exact = oracle_gaussian_ratio(&[0.5], &[0.0], 1.0, &[x]);
            assert!((tilt.density_ratio(&[x]) / exact - 1.0).abs() < 0.1, "tilting at {x}");
            assert!((knn.density_ratio(&[x]) / exact - 1.0).abs() < 0.3, "knn at {x}");
        }
    }
}

//! Synthetic multi-site data: the fixed-size Gaussian covariate-shift design
//! and the explicit sampling-selecting process, plus overlap checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Rng, SeedSpec, SiteDataset, TargetCovariates, UnitRecord};
use crate::error::{invalid, Error, Result};
use crate::nuisance::{PropensityKind, PropensitySet};
use crate::ratio::{oracle_gaussian_ratio, FeatureMap};

/// Gaussian covariate-shift design. Site `k` draws `x ~ N(μ_k·1, σ²I)`,
/// the target draws `x ~ N(μ_t·1, σ²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub site_sizes: Vec<usize>,
    pub n_target: usize,
    pub d: usize,
    pub mu_target: f64,
    pub sigma: f64,
    pub d_kl: f64,
    /// Logistic coefficients: `P(Z=1 | x) = 1 / (1 + exp(cᵀx))`.
    pub prop_coef: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta0: Vec<f64>,
    pub noise_sd: f64,
    /// Fixed site means; drawn from `d_kl` when absent.
    pub site_means: Option<Vec<f64>>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            site_sizes: vec![1000, 2000, 3000],
            n_target: 10_000,
            d: 3,
            mu_target: -0.1,
            sigma: 2.0,
            d_kl: 0.0,
            prop_coef: vec![1.2, 0.3, -1.2],
            beta1: vec![1.2, 1.8, 1.4],
            beta0: vec![0.6, 0.7, 0.6],
            noise_sd: 0.0,
            site_means: None,
        }
    }
}

impl ShiftConfig {
    pub fn with_d_kl(mut self, d_kl: f64) -> Self {
        self.d_kl = d_kl;
        self
    }

    pub fn n_sites(&self) -> usize {
        self.site_sizes.len()
    }

    pub fn n_pooled(&self) -> usize {
        self.site_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.site_sizes.is_empty() || self.site_sizes.contains(&0) {
            return invalid("site sizes must be positive and non-empty");
        }
        if self.n_target == 0 || self.d == 0 {
            return invalid("n_target and d must be positive");
        }
        if !(self.sigma > 0.0) {
            return invalid("sigma must be positive");
        }
        if !(self.d_kl >= 0.0) || !(self.noise_sd >= 0.0) {
            return invalid("d_kl and noise_sd must be non-negative");
        }
        for (name, v) in [("prop_coef", &self.prop_coef), ("beta1", &self.beta1), ("beta0", &self.beta0)] {
            if v.len() != self.d {
                return invalid(format!("{name} has length {}, expected d = {}", v.len(), self.d));
            }
        }
        if let Some(m) = &self.site_means {
            if m.len() != self.n_sites() {
                return invalid("site_means must have one entry per site");
            }
        }
        Ok(())
    }

    /// `(β₁ − β₀)ᵀ(μ_t·1)`.
    pub fn true_tau(&self) -> f64 {
        self.beta1.iter().zip(&self.beta0).map(|(a, b)| (a - b) * self.mu_target).sum()
    }

    /// `P(Z = 1 | x)`.
    pub fn treat_prob(&self, x: &[f64]) -> f64 {
        logistic_treat_prob(&self.prop_coef, x)
    }

    pub fn outcome(&self, x: &[f64], arm: Arm) -> f64 {
        let beta = match arm {
            Arm::Treated => &self.beta1,
            Arm::Control => &self.beta0,
        };
        beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

fn logistic_treat_prob(coef: &[f64], x: &[f64]) -> f64 {
    let eta: f64 = coef.iter().zip(x).map(|(c, v)| c * v).sum();
    if eta >= 0.0 {
        let e = (-eta).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + eta.exp())
    }
}

/// Scalar site means with `Σ_k (μ_k − μ_t)² / (2σ²) = d_kl`.
///
/// Squared deviations are uniform on the scaled simplex; one deviation,
/// chosen uniformly, is negative and the rest positive.
pub fn place_site_means(d_kl: f64, k: usize, sigma: f64, mu_target: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if k < 1 {
        return invalid("need at least one site");
    }
    if !(d_kl >= 0.0) || !(sigma > 0.0) {
        return invalid("d_kl must be non-negative and sigma positive");
    }
    if d_kl == 0.0 {
        return Ok(vec![mu_target; k]);
    }
    let total = 2.0 * sigma * sigma * d_kl;
    // Dirichlet(1,..,1) via normalised exponentials.
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let sum: f64 = e.iter().sum();
    let neg = rng.random_range(0..k);
    let mut means: Vec<f64> = e
        .iter()
        .enumerate()
        .map(|(i, ei)| {
            let dev = (total * ei / sum).sqrt();
            if i == neg { mu_target - dev } else { mu_target + dev }
        })
        .collect();
    // Rounding repair so the constraint holds to 1e-12.
    let achieved: f64 = means.iter().map(|m| (m - mu_target).powi(2)).sum();
    if achieved > 0.0 {
        let s = (total / achieved).sqrt();
        for m in &mut means {
            *m = mu_target + (*m - mu_target) * s;
        }
    }
    Ok(means)
}

/// One draw of the covariate-shift design.
#[derive(Debug, Clone)]
pub struct ShiftDraw {
    pub sites: Vec<SiteDataset>,
    pub target: TargetCovariates,
    pub true_tau: f64,
    pub site_means: Vec<f64>,
}

/// Draws replication `replication` of the covariate-shift design.
///
/// Site means come from their own stream, so all replications sharing a
/// `(seed, mean_draw)` pair see the same means.
pub fn gen_covariate_shift(cfg: &ShiftConfig, seed: &SeedSpec, replication: u64) -> Result<ShiftDraw> {
    cfg.validate()?;
    let site_means = match &cfg.site_means {
        Some(m) => m.clone(),
        None => {
            let mut rng = seed.rng(replication, SeedSpec::MEANS_STREAM);
            place_site_means(cfg.d_kl, cfg.n_sites(), cfg.sigma, cfg.mu_target, &mut rng)?
        }
    };
    gen_with_means(cfg, &site_means, seed, replication)
}

/// As [`gen_covariate_shift`] with explicitly supplied site means.
pub fn gen_with_means(cfg: &ShiftConfig, site_means: &[f64], seed: &SeedSpec, replication: u64) -> Result<ShiftDraw> {
    cfg.validate()?;
    if site_means.len() != cfg.n_sites() {
        return invalid("one mean per site required");
    }
    let noise = Normal::new(0.0, 1.0).expect("standard normal");
    let mut sites = Vec::with_capacity(cfg.n_sites());
    for (idx, (&n, &mu)) in cfg.site_sizes.iter().zip(site_means).enumerate() {
        let site_id = idx + 1;
        let mut rng = seed.rng(replication, site_id as u64);
        let records = (0..n)
            .map(|_| {
                let x = gaussian_point(&mut rng, mu, cfg.sigma, cfg.d);
                let arm = if rng.random::<f64>() < cfg.treat_prob(&x) { Arm::Treated } else { Arm::Control };
                let eps = if cfg.noise_sd > 0.0 { cfg.noise_sd * noise.sample(&mut rng) } else { 0.0 };
                let y = cfg.outcome(&x, arm) + eps;
                UnitRecord::new(x, arm, y)
            })
            .collect();
        sites.push(SiteDataset::new(site_id, records)?);
    }
    let mut rng = seed.rng(replication, SeedSpec::TARGET_STREAM);
    let xs = (0..cfg.n_target).map(|_| gaussian_point(&mut rng, cfg.mu_target, cfg.sigma, cfg.d)).collect();
    Ok(ShiftDraw { sites, target: TargetCovariates::new(xs)?, true_tau: cfg.true_tau(), site_means: site_means.to_vec() })
}

fn gaussian_point(rng: &mut Rng, mu: f64, sigma: f64, d: usize) -> Vec<f64> {
    (0..d).map(|_| { let z: f64 = StandardNormal.sample(rng); mu + sigma * z }).collect()
}

/// True selection propensities of the covariate-shift design,
/// `e^(k,z)(x) = (N_k/N_S) · g_k(x) · P(Z=z | x)` with `g_k` the site-to-target
/// Gaussian density ratio. Correct up to one shared constant.
pub fn covariate_shift_oracle(cfg: &ShiftConfig, site_means: &[f64]) -> PropensitySet {
    let n_s = cfg.n_pooled() as f64;
    let mut set = PropensitySet::new(PropensityKind::Assembled { global_constant_unknown: true });
    let mu_t = Arc::new(vec![cfg.mu_target; cfg.d]);
    let coef = Arc::new(cfg.prop_coef.clone());
    for (idx, (&n, &mu)) in cfg.site_sizes.iter().zip(site_means).enumerate() {
        let share = n as f64 / n_s;
        let mu_k = Arc::new(vec![mu; cfg.d]);
        let sigma = cfg.sigma;
        for arm in Arm::BOTH {
            let (mu_k, mu_t, coef) = (Arc::clone(&mu_k), Arc::clone(&mu_t), Arc::clone(&coef));
            set.insert(
                idx + 1,
                arm,
                Arc::new(move |x: &[f64]| {
                    let p1 = logistic_treat_prob(&coef, x);
                    let pz = if arm == Arm::Treated { p1 } else { 1.0 - p1 };
                    share * oracle_gaussian_ratio(&mu_k, &mu_t, sigma, x) * pz
                }),
            );
        }
    }
    set
}

/// Closed-form asymptotic precisions of the per-site Hájek IPW estimators
/// under the covariate-shift design, up to one common factor. Used as
/// oracle inverse-variance weights.
pub fn oracle_meta_precisions(cfg: &ShiftConfig, site_means: &[f64]) -> Vec<f64> {
    let s2 = cfg.sigma * cfg.sigma;
    let mu_t = vec![cfg.mu_target; cfg.d];
    let c = &cfg.prop_coef;
    let n_s = cfg.n_pooled() as f64;
    let noise2 = cfg.noise_sd * cfg.noise_sd;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    // E_t[exp(aᵀx) ((bᵀ(x − μ_t))² + s²)] for x ~ N(μ_t, σ²I).
    let moment = |a: &[f64], b: &[f64]| {
        (dot(a, &mu_t) + 0.5 * s2 * dot(a, a)).exp() * (s2 * dot(b, b) + s2 * s2 * dot(a, b).powi(2) + noise2)
    };
    cfg.site_sizes
        .iter()
        .zip(site_means)
        .map(|(&n, &mu)| {
            let delta: Vec<f64> = mu_t.iter().map(|t| mu - t).collect();
            let a: Vec<f64> = delta.iter().map(|v| -v / s2).collect();
            let shift = (cfg.d as f64) * (mu * mu - cfg.mu_target * cfg.mu_target) / (2.0 * s2);
            let a_plus: Vec<f64> = a.iter().zip(c).map(|(u, v)| u + v).collect();
            let a_minus: Vec<f64> = a.iter().zip(c).map(|(u, v)| u - v).collect();
            // 1/π₁ = 1 + e^{cᵀx}, 1/π₀ = 1 + e^{−cᵀx}.
            let treated = moment(&a, &cfg.beta1) + moment(&a_plus, &cfg.beta1);
            let control = moment(&a, &cfg.beta0) + moment(&a_minus, &cfg.beta0);
            let q = shift.exp() * (treated + control) * n_s / n as f64;
            1.0 / q
        })
        .collect()
}

pub type SelectionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type CovariateSampler = Arc<dyn Fn(&mut Rng) -> Vec<f64> + Send + Sync>;
pub type OutcomeFn = Arc<dyn Fn(&[f64], &mut Rng) -> f64 + Send + Sync>;

/// Explicit sampling-selecting process: each population draw receives one
/// selection label over `{∅} ∪ {(k,z)}`.
#[derive(Clone)]
pub struct SelectConfig {
    pub n_total: usize,
    pub n_target: usize,
    pub selection: BTreeMap<(usize, Arm), SelectionFn>,
    pub drop: SelectionFn,
    pub sampler: CovariateSampler,
}

impl std::fmt::Debug for SelectConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SelectConfig")
            .field("n_total", &self.n_total)
            .field("n_target", &self.n_target)
            .field("pairs", &self.selection.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

/// Potential outcomes `Y(1)`, `Y(0)` given `x`.
#[derive(Clone)]
pub struct PotentialOutcomes {
    pub y1: OutcomeFn,
    pub y0: OutcomeFn,
}

impl PotentialOutcomes {
    pub fn deterministic(y1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, y0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { y1: Arc::new(move |x, _| y1(x)), y0: Arc::new(move |x, _| y0(x)) }
    }
}

#[derive(Debug, Clone)]
pub struct SelectDraw {
    pub sites: Vec<SiteDataset>,
    pub target: TargetCovariates,
    pub dropped: usize,
    pub oracle: PropensitySet,
}

pub const SELECTION_PROBES: usize = 1000;
pub const SELECTION_TOLERANCE: f64 = 1e-9;

const PROBE_STREAM: u64 = u64::MAX - 2;
const UNIT_STREAM: u64 = 1;

/// Checks `e^∅ + Σ e^(k,z) = 1` on random probe points.
pub fn probe_selection(cfg: &SelectConfig, rng: &mut Rng) -> Result<()> {
    for _ in 0..SELECTION_PROBES {
        let x = (cfg.sampler)(rng);
        let mut total = (cfg.drop)(&x);
        let mut negative = total < 0.0;
        for f in cfg.selection.values() {
            let v = f(&x);
            negative |= v < 0.0;
            total += v;
        }
        let deviation = (total - 1.0).abs();
        if negative || !(deviation <= SELECTION_TOLERANCE) {
            return Err(Error::SelectionNotNormalized { deviation: if negative { f64::INFINITY } else { deviation } });
        }
    }
    Ok(())
}

pub fn gen_sampling_selecting(cfg: &SelectConfig, outcomes: &PotentialOutcomes, seed: &SeedSpec, replication: u64) -> Result<SelectDraw> {
    if cfg.selection.keys().any(|(k, _)| *k == 0) {
        return invalid("site ids are 1-based");
    }
    probe_selection(cfg, &mut seed.rng(replication, PROBE_STREAM))?;

    let mut buckets: BTreeMap<usize, Vec<UnitRecord>> = cfg.selection.keys().map(|(k, _)| (*k, Vec::new())).collect();
    let mut dropped = 0;
    let mut rng = seed.rng(replication, UNIT_STREAM);
    for _ in 0..cfg.n_total {
        let x = (cfg.sampler)(&mut rng);
        let y1 = (outcomes.y1)(&x, &mut rng);
        let y0 = (outcomes.y0)(&x, &mut rng);
        let u: f64 = rng.random();
        let mut acc = (cfg.drop)(&x);
        let mut label = None;
        if u >= acc {
            for (&(k, arm), f) in &cfg.selection {
                acc += f(&x);
                if u < acc {
                    label = Some((k, arm));
                    break;
                }
            }
        }
        match label {
            Some((k, arm)) => {
                let y = if arm == Arm::Treated { y1 } else { y0 };
                buckets.get_mut(&k).expect("bucket").push(UnitRecord::new(x, arm, y));
            }
            None => dropped += 1,
        }
    }
    let sites = buckets
        .into_iter()
        .filter(|(_, recs)| !recs.is_empty())
        .map(|(k, recs)| SiteDataset::new(k, recs))
        .collect::<Result<Vec<_>>>()?;

    let mut trng = seed.rng(replication, SeedSpec::TARGET_STREAM);
    let xs = (0..cfg.n_target.max(1)).map(|_| (cfg.sampler)(&mut trng)).collect();

    let mut oracle = PropensitySet::new(PropensityKind::Oracle);
    for (&(k, arm), f) in &cfg.selection {
        oracle.insert(k, arm, Arc::clone(f));
    }
    Ok(SelectDraw { sites, target: TargetCovariates::new(xs)?, dropped, oracle })
}

/// Two sites that split the covariate space: site 1 only selects units with
/// `x₁ > 0`, site 2 only `x₁ ≤ 0`. Covariates are uniform on `[-1, 1]²`,
/// half of all units are selected, treatment follows
/// `P(Z=1 | x) = 1 / (1 + exp(−x₂))`, and `Y(1) = 1 + x₁ + x₂`,
/// `Y(0) = x₁ − x₂ / 2`, so the target effect is exactly 1.
#[derive(Debug, Clone)]
pub struct DisjointFixture {
    pub config: SelectConfig,
    pub outcomes: PotentialOutcomes,
    pub true_tau: f64,
}

impl std::fmt::Debug for PotentialOutcomes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PotentialOutcomes")
    }
}

pub fn disjoint_support_fixture(n_total: usize, n_target: usize) -> DisjointFixture {
    const SELECTED: f64 = 0.5;
    let treat = |x: &[f64]| 1.0 / (1.0 + (-x[1]).exp());
    let region = |site: usize, x: &[f64]| if (x[0] > 0.0) == (site == 1) { 1.0 } else { 0.0 };
    let mut selection: BTreeMap<(usize, Arm), SelectionFn> = BTreeMap::new();
    for site in [1, 2] {
        selection.insert((site, Arm::Treated), Arc::new(move |x: &[f64]| SELECTED * region(site, x) * treat(x)));
        selection.insert((site, Arm::Control), Arc::new(move |x: &[f64]| SELECTED * region(site, x) * (1.0 - treat(x))));
    }
    let config = SelectConfig {
        n_total,
        n_target,
        selection,
        drop: Arc::new(|_: &[f64]| 1.0 - SELECTED),
        sampler: Arc::new(|rng: &mut Rng| (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()),
    };
    let outcomes = PotentialOutcomes::deterministic(|x| 1.0 + x[0] + x[1], |x| x[0] - 0.5 * x[1]);
    DisjointFixture { config, outcomes, true_tau: 1.0 }
}

/// `(x₁x₂, x₂², x₃ / max(1, x₁x₂))`.
pub fn misspecify_features(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != 3 {
        return invalid(format!("misspecification transform needs d = 3, got {}", x.len()));
    }
    Ok(FeatureMap::Misspecified.apply(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub individual_ok: BTreeMap<usize, bool>,
    pub overall_ok: bool,
    /// Per-site minimum of `min(e^(k,1), e^(k,0))` over the probes.
    pub min_individual: BTreeMap<usize, f64>,
    /// Minimum of `min(Σ_k e^(k,1), Σ_k e^(k,0))` over the probes.
    pub min_overall: f64,
}

/// Individual (every site covers every probe) and overall (the union of
/// sites covers every probe) overlap at threshold `c`.
pub fn check_overlap(p: &PropensitySet, probe_xs: &[Vec<f64>], c: f64) -> Result<OverlapReport> {
    if probe_xs.is_empty() {
        return invalid("empty probe set");
    }
    if !(c > 0.0 && c < 1.0) {
        return invalid("threshold must lie in (0,1)");
    }
    let mut min_individual: BTreeMap<usize, f64> = p.site_ids().iter().map(|k| (*k, f64::INFINITY)).collect();
    let mut min_overall = f64::INFINITY;
    for x in probe_xs {
        let mut pooled = [0.0; 2];
        for &k in p.site_ids() {
            let e1 = p.e(k, Arm::Treated, x);
            let e0 = p.e(k, Arm::Control, x);
            pooled[0] += e1;
            pooled[1] += e0;
            let m = min_individual.get_mut(&k).expect("site");
            *m = m.min(e1.min(e0));
        }
        min_overall = min_overall.min(pooled[0].min(pooled[1]));
    }
    Ok(OverlapReport {
        individual_ok: min_individual.iter().map(|(k, v)| (*k, *v > c)).collect(),
        overall_ok: min_overall > c,
        min_individual,
        min_overall,
    })
}

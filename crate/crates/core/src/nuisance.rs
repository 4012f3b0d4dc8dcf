//! Nuisance functions: selection propensities assembled from density ratios,
//! pooled assignment scores, cross-fitting folds, and the inverse-propensity
//! weighted outcome regression.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Rng, SeedSpec, SiteDataset};
use crate::error::{invalid, Result};
use crate::data::TargetCovariates;
use crate::ratio::{FeatureMap, KnnOptions, RatioBackend, RatioModel};

/// Scores below this are floored before division.
pub const SCORE_FLOOR: f64 = 1e-12;

pub type ScoreFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropensityKind {
    /// The generating selection probabilities themselves.
    Oracle,
    /// Known only up to one positive factor shared by every `(site, arm)`.
    Assembled { global_constant_unknown: bool },
}

/// Selection propensities `e^(k,z)(x)` for every site and arm.
///
/// Pairs that were never inserted evaluate to zero (an arm absent at a site).
#[derive(Clone)]
pub struct PropensitySet {
    entries: BTreeMap<(usize, Arm), ScoreFn>,
    sites: Vec<usize>,
    kind: PropensityKind,
}

impl fmt::Debug for PropensitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PropensitySet")
            .field("pairs", &self.entries.keys().collect::<Vec<_>>())
            .field("sites", &self.sites)
            .field("kind", &self.kind)
            .finish()
    }
}

impl PropensitySet {
    pub fn new(kind: PropensityKind) -> Self {
        Self { entries: BTreeMap::new(), sites: Vec::new(), kind }
    }

    pub fn insert(&mut self, site_id: usize, arm: Arm, f: ScoreFn) {
        if let Err(pos) = self.sites.binary_search(&site_id) {
            self.sites.insert(pos, site_id);
        }
        self.entries.insert((site_id, arm), f);
    }

    /// Registers a site even if none of its arms has a score.
    pub fn register_site(&mut self, site_id: usize) {
        if let Err(pos) = self.sites.binary_search(&site_id) {
            self.sites.insert(pos, site_id);
        }
    }

    pub fn with(mut self, site_id: usize, arm: Arm, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.insert(site_id, arm, Arc::new(f));
        self
    }

    pub fn kind(&self) -> PropensityKind {
        self.kind
    }

    pub fn site_ids(&self) -> &[usize] {
        &self.sites
    }

    pub fn has(&self, site_id: usize, arm: Arm) -> bool {
        self.entries.contains_key(&(site_id, arm))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `e^(k,z)(x)`, zero for pairs that are absent.
    pub fn e(&self, site_id: usize, arm: Arm, x: &[f64]) -> f64 {
        self.entries.get(&(site_id, arm)).map_or(0.0, |f| f(x))
    }

    /// Every score multiplied by `c`.
    pub fn scaled(&self, c: f64) -> PropensitySet {
        let entries = self
            .entries
            .iter()
            .map(|(key, f)| {
                let f = Arc::clone(f);
                let g: ScoreFn = Arc::new(move |x: &[f64]| c * f(x));
                (*key, g)
            })
            .collect();
        PropensitySet { entries, sites: self.sites.clone(), kind: self.kind }
    }
}

/// Site weights `η^(k)`; sites without an explicit entry weigh 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    weights: BTreeMap<usize, f64>,
}

impl Eta {
    pub fn vanilla() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self { weights: pairs.into_iter().collect() }
    }

    pub fn get(&self, site_id: usize) -> f64 {
        self.weights.get(&site_id).copied().unwrap_or(1.0)
    }

    pub fn is_vanilla(&self) -> bool {
        self.weights.values().all(|w| *w == 1.0)
    }
}

/// `Σ_k η^(k) e^(k,z)(x)`; with vanilla weights, `P(Z(S) = z | x)` up to the set's constant.
pub fn pooled_score(p: &PropensitySet, eta: &Eta, x: &[f64], arm: Arm) -> f64 {
    p.sites.iter().map(|&k| eta.get(k) * p.e(k, arm, x)).sum()
}

/// `ê^(k,z)(x) = r̂^(k,z)(x) · count(k,z) / N_S` with `r̂` the source-over-target
/// ratio [`RatioModel::density_ratio`].
///
/// The unidentifiable `P(S = ∅)` factor is left out, so the result is known
/// only up to one shared positive constant.
pub fn assemble_propensity(
    ratios: BTreeMap<(usize, Arm), RatioModel>,
    site_arm_counts: &BTreeMap<(usize, Arm), usize>,
    n_pooled: usize,
) -> Result<PropensitySet> {
    if n_pooled == 0 {
        return invalid("pooled sample size N_S is zero");
    }
    let mut set = PropensitySet::new(PropensityKind::Assembled { global_constant_unknown: true });
    for &(k, _) in site_arm_counts.keys() {
        set.register_site(k);
    }
    for ((k, arm), model) in ratios {
        let count = site_arm_counts.get(&(k, arm)).copied().unwrap_or(0);
        if count == 0 {
            return invalid(format!("site {k} has a ratio model for arm {arm:?} but no units in it"));
        }
        let share = count as f64 / n_pooled as f64;
        let model = Arc::new(model);
        set.insert(k, arm, Arc::new(move |x: &[f64]| model.density_ratio(x) * share));
    }
    Ok(set)
}

/// Fits `r^(k,z)` for every arm present at `site`, each arm's covariates
/// against the target sample.
pub fn fit_site_ratios(site: &SiteDataset, target: &TargetCovariates, backend: &RatioBackend) -> Result<BTreeMap<(usize, Arm), RatioModel>> {
    let mut out = BTreeMap::new();
    for arm in Arm::BOTH {
        let xs = site.arm_covariates(arm);
        if xs.is_empty() {
            continue;
        }
        let backend = match backend {
            RatioBackend::Knn { options } if options.source_ref.is_none() => RatioBackend::Knn {
                options: KnnOptions { source_ref: Some(format!("site{}_z{}", site.site_id, arm.z())), ..options.clone() },
            },
            other => other.clone(),
        };
        out.insert((site.site_id, arm), backend.fit(&xs, &target.xs)?);
    }
    Ok(out)
}

/// Fits every site's ratios and assembles the propensity set.
pub fn fit_propensity(sites: &[SiteDataset], target: &TargetCovariates, backend: &RatioBackend) -> Result<PropensitySet> {
    let mut ratios = BTreeMap::new();
    for s in sites {
        ratios.append(&mut fit_site_ratios(s, target, backend)?);
    }
    assemble_propensity(ratios, &site_arm_counts(sites), crate::data::pooled_size(sites))
}

/// `(site, arm) → unit count` over a set of sites.
pub fn site_arm_counts(sites: &[SiteDataset]) -> BTreeMap<(usize, Arm), usize> {
    let mut counts = BTreeMap::new();
    for s in sites {
        for r in &s.records {
            *counts.entry((s.site_id, r.arm)).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-site fold assignment for cross-fitting. The target sample is never split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    assignments: BTreeMap<usize, Vec<usize>>,
}

impl FoldPlan {
    pub fn fold_of(&self, site_id: usize, unit: usize) -> Option<usize> {
        self.assignments.get(&site_id).and_then(|a| a.get(unit)).copied()
    }

    pub fn fold_sizes(&self, site_id: usize) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for f in self.assignments.get(&site_id).into_iter().flatten() {
            sizes[*f] += 1;
        }
        sizes
    }

    /// `(training part, evaluation part)` of a site for `fold`: units in
    /// `fold` are evaluated, the rest train.
    pub fn split(&self, site: &SiteDataset, fold: usize) -> (SiteDataset, SiteDataset) {
        let assign = &self.assignments[&site.site_id];
        (site.subset(|i| assign[i] != fold), site.subset(|i| assign[i] == fold))
    }
}

/// Balanced random partition of every site into `n_folds` folds.
pub fn crossfit_split(sites: &[SiteDataset], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return invalid("cross-fitting needs at least two folds");
    }
    let seeds = SeedSpec::new(seed);
    let mut assignments = BTreeMap::new();
    for s in sites {
        if s.len() < n_folds {
            return invalid(format!("site {} has {} records, fewer than {n_folds} folds", s.site_id, s.len()));
        }
        let mut rng = Rng::seed_from_u64(seeds.child_seed(SeedSpec::FOLD_STREAM, s.site_id as u64));
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.shuffle(&mut rng);
        let mut assign = vec![0; s.len()];
        for (pos, unit) in order.into_iter().enumerate() {
            assign[unit] = pos % n_folds;
        }
        assignments.insert(s.site_id, assign);
    }
    Ok(FoldPlan { n_folds, assignments })
}

/// Linear outcome regression `m_z(x) = ψ(x)ᵀθ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub arm: Arm,
    pub psi: FeatureMap,
    pub theta: Vec<f64>,
}

impl OutcomeModel {
    pub fn zeros(arm: Arm, psi: FeatureMap, d: usize) -> Self {
        Self { arm, psi, theta: vec![0.0; psi.dim(d)] }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.psi.apply(x).iter().zip(&self.theta).map(|(a, b)| a * b).sum()
    }
}

/// Features, outcomes and inverse pooled-score weights of one arm at one
/// site, precomputed so that repeated loss evaluations do not re-score units.
#[derive(Debug, Clone)]
pub struct WeightedDesign {
    pub arm: Arm,
    pub psi: FeatureMap,
    p: usize,
    rows: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    /// Units dropped because their pooled score is zero.
    pub excluded: usize,
}

impl WeightedDesign {
    pub fn build(site: &SiteDataset, p: &PropensitySet, eta: &Eta, arm: Arm, psi: FeatureMap) -> Self {
        let dim = psi.dim(site.d);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut excluded = 0;
        let mut buf = Vec::with_capacity(dim);
        for r in site.records.iter().filter(|r| r.arm == arm) {
            let score = pooled_score(p, eta, &r.x, arm);
            if !(score > 0.0) || !score.is_finite() {
                excluded += 1;
                continue;
            }
            psi.apply_into(&r.x, &mut buf);
            rows.extend_from_slice(&buf);
            y.push(r.y);
            w.push(1.0 / score.max(SCORE_FLOOR));
        }
        Self { arm, psi, p: dim, rows, y, w, excluded }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn max_weight(&self) -> f64 {
        self.w.iter().copied().fold(0.0, f64::max)
    }

    /// Largest eigenvalue bound of the loss Hessian, `2 Σ w ‖ψ‖²`.
    pub fn curvature_bound(&self) -> f64 {
        self.w
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.rows[i * self.p..(i + 1) * self.p].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * 2.0
    }

    /// `Σ w (y − ψᵀθ)²` and its gradient in `θ`.
    pub fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.p];
        for (i, (&y, &w)) in self.y.iter().zip(&self.w).enumerate() {
            let row = &self.rows[i * self.p..(i + 1) * self.p];
            let resid = y - row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            loss += w * resid * resid;
            let c = -2.0 * w * resid;
            for (g, v) in grad.iter_mut().zip(row) {
                *g += c * v;
            }
        }
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub excluded: usize,
}

/// Inverse-propensity weighted squared loss of `m` on one site and its gradient.
pub fn weighted_loss_and_grad(m: &OutcomeModel, site: &SiteDataset, p: &PropensitySet, eta: &Eta) -> LossEval {
    let design = WeightedDesign::build(site, p, eta, m.arm, m.psi);
    let (loss, grad) = design.loss_and_grad(&m.theta);
    LossEval { loss, grad, excluded: design.excluded }
}

/// Exact minimiser of the summed weighted loss over `designs` (all one arm),
/// by QR on the `√w`-scaled design.
pub fn fit_weighted_least_squares(designs: &[WeightedDesign]) -> Result<OutcomeModel> {
    let Some(first) = designs.first() else {
        return invalid("no designs to fit");
    };
    let p = first.p;
    if designs.iter().any(|d| d.p != p || d.arm != first.arm || d.psi != first.psi) {
        return invalid("designs disagree on arm or features");
    }
    let n: usize = designs.iter().map(WeightedDesign::len).sum();
    if n < p {
        return invalid(format!("{n} usable units cannot identify {p} outcome parameters"));
    }
    let mut a = DMatrix::zeros(n, p);
    let mut b = DVector::zeros(n);
    let mut row = 0;
    for d in designs {
        for i in 0..d.len() {
            let s = d.w[i].sqrt();
            for j in 0..p {
                a[(row, j)] = s * d.rows[i * p + j];
            }
            b[row] = s * d.y[i];
            row += 1;
        }
    }
    let (q, r) = a.qr().unpack();
    let qtb = q.transpose() * b;
    let theta = r
        .solve_upper_triangular(&qtb)
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .ok_or_else(|| crate::error::Error::InvalidInput("weighted design is rank deficient".into()))?;
    Ok(OutcomeModel { arm: first.arm, psi: first.psi, theta: theta.iter().copied().collect() })
}

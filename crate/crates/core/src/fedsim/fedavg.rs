use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MessageKind, MessageLog, Party};
use crate::data::{Arm, SiteDataset};
use crate::error::{invalid, Error, Result};
use crate::nuisance::{Eta, OutcomeModel, PropensitySet, WeightedDesign};
use crate::ratio::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Fixed(f64),
    /// `scale` over the largest per-unit curvature bound among the sites.
    Auto { scale: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Sites take local steps and return parameters (FedAvg).
    #[default]
    Params,
    /// Sites return one full-batch gradient; the server steps (FedSGD).
    Gradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub learning_rate: LearningRate,
    pub averaging: Averaging,
    /// Stop once the relative change of the global loss falls below this.
    pub early_stop_tol: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_steps: 5,
            learning_rate: LearningRate::Auto { scale: 1.0 },
            averaging: Averaging::Params,
            early_stop_tol: 1e-10,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 {
            return invalid("rounds and local_steps must be positive");
        }
        let lr = match self.learning_rate {
            LearningRate::Fixed(v) | LearningRate::Auto { scale: v } => v,
        };
        if !(lr > 0.0) || !lr.is_finite() {
            return invalid("learning rate must be positive");
        }
        if !(self.early_stop_tol >= 0.0) {
            return invalid("early_stop_tol must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgResult {
    pub m1: OutcomeModel,
    pub m0: OutcomeModel,
    /// Mean weighted loss over all units at the start of each round.
    pub trace: Vec<f64>,
    pub rounds_run: usize,
}

/// One site's precomputed weighted designs, treated then control.
pub(crate) struct SiteDesigns {
    pub site_id: usize,
    pub arms: [WeightedDesign; 2],
}

impl SiteDesigns {
    pub fn build(site: &SiteDataset, p: &PropensitySet, eta: &Eta, psi: FeatureMap) -> Self {
        Self {
            site_id: site.site_id,
            arms: [
                WeightedDesign::build(site, p, eta, Arm::Treated, psi),
                WeightedDesign::build(site, p, eta, Arm::Control, psi),
            ],
        }
    }

    fn counts(&self) -> [usize; 2] {
        [self.arms[0].len(), self.arms[1].len()]
    }
}

/// Trains both outcome models by federated averaging on the inverse-score
/// weighted squared loss. Each site steps on its per-unit loss and the
/// server averages parameters weighted by site arm counts.
pub fn run_fedavg(sites: &[SiteDataset], p: &PropensitySet, eta: &Eta, psi: FeatureMap, cfg: &FedConfig) -> Result<FedAvgResult> {
    let Some(first) = sites.first() else {
        return invalid("no sites");
    };
    psi.check_dim(first.d)?;
    let designs: Vec<SiteDesigns> = sites.iter().map(|s| SiteDesigns::build(s, p, eta, psi)).collect();
    fedavg_core(&designs, psi, first.d, cfg, 0, &mut None)
}

fn resolve_rates(designs: &[SiteDesigns], lr: LearningRate) -> [f64; 2] {
    match lr {
        LearningRate::Fixed(v) => [v, v],
        LearningRate::Auto { scale } => {
            let mut out = [scale; 2];
            for (slot, rate) in out.iter_mut().enumerate() {
                let worst = designs
                    .iter()
                    .map(|d| &d.arms[slot])
                    .filter(|d| !d.is_empty())
                    .map(|d| d.curvature_bound() / d.len() as f64)
                    .fold(0.0, f64::max);
                if worst > 0.0 {
                    *rate = scale / worst;
                }
            }
            out
        }
    }
}

struct Reply {
    thetas: [Vec<f64>; 2],
    grads: [Vec<f64>; 2],
    counts: [usize; 2],
    loss: f64,
}

fn local_update(site: &SiteDesigns, theta: &[Vec<f64>; 2], rates: [f64; 2], cfg: &FedConfig) -> Reply {
    let mut loss = 0.0;
    let mut thetas = theta.clone();
    let mut grads = [vec![0.0; theta[0].len()], vec![0.0; theta[1].len()]];
    for slot in 0..2 {
        let design = &site.arms[slot];
        if design.is_empty() {
            continue;
        }
        let n = design.len() as f64;
        let steps = if cfg.averaging == Averaging::Params { cfg.local_steps } else { 1 };
        for step in 0..steps {
            let (l, g) = design.loss_and_grad(&thetas[slot]);
            if step == 0 {
                loss += l;
                grads[slot] = g.clone();
            }
            if cfg.averaging == Averaging::Params {
                for (t, gi) in thetas[slot].iter_mut().zip(&g) {
                    *t -= rates[slot] * gi / n;
                }
            }
        }
    }
    Reply { thetas, grads, counts: site.counts(), loss }
}

/// The protocol loop. Messages are appended to `log` when one is given.
pub(crate) fn fedavg_core(
    designs: &[SiteDesigns],
    psi: FeatureMap,
    d: usize,
    cfg: &FedConfig,
    fold: usize,
    log: &mut Option<&mut MessageLog>,
) -> Result<FedAvgResult> {
    cfg.validate()?;
    let dim = psi.dim(d);
    let rates = resolve_rates(designs, cfg.learning_rate);
    let mut theta = [vec![0.0; dim], vec![0.0; dim]];
    let total_units: usize = designs.iter().map(|s| s.counts().iter().sum::<usize>()).sum();
    let mut trace = Vec::with_capacity(cfg.rounds);
    let model = |arm: Arm, t: &Vec<f64>| OutcomeModel { arm, psi, theta: t.clone() };

    let mut rounds_run = 0;
    for round in 0..cfg.rounds {
        rounds_run = round + 1;
        if let Some(log) = log.as_deref_mut() {
            for s in designs {
                log.push(
                    round,
                    Party::Server,
                    Party::Site(s.site_id),
                    MessageKind::ModelParams { fold, m1: model(Arm::Treated, &theta[0]), m0: model(Arm::Control, &theta[1]), counts: None, loss: None },
                );
            }
        }
        let replies: Vec<Reply> = designs.par_iter().map(|s| local_update(s, &theta, rates, cfg)).collect();
        if let Some(log) = log.as_deref_mut() {
            for (s, r) in designs.iter().zip(&replies) {
                let body = match cfg.averaging {
                    Averaging::Params => MessageKind::ModelParams {
                        fold,
                        m1: model(Arm::Treated, &r.thetas[0]),
                        m0: model(Arm::Control, &r.thetas[1]),
                        counts: Some(r.counts),
                        loss: Some(r.loss),
                    },
                    Averaging::Gradients => MessageKind::GradientUpdate {
                        fold,
                        grad1: r.grads[0].clone(),
                        grad0: r.grads[1].clone(),
                        counts: r.counts,
                        loss: r.loss,
                    },
                };
                log.push(round, Party::Site(s.site_id), Party::Server, body);
            }
        }

        let loss = replies.iter().map(|r| r.loss).sum::<f64>() / total_units.max(1) as f64;
        trace.push(loss);
        if !loss.is_finite() || (trace.len() > 5 && loss > 10.0 * trace[trace.len() - 6]) {
            return Err(Error::FedAvgDiverged { rounds: rounds_run, trace });
        }

        for slot in 0..2 {
            let n: usize = replies.iter().map(|r| r.counts[slot]).sum();
            if n == 0 {
                continue;
            }
            match cfg.averaging {
                Averaging::Params => {
                    let mut next = vec![0.0; dim];
                    for r in &replies {
                        let w = r.counts[slot] as f64 / n as f64;
                        for (acc, t) in next.iter_mut().zip(&r.thetas[slot]) {
                            *acc += w * t;
                        }
                    }
                    theta[slot] = next;
                }
                Averaging::Gradients => {
                    let mut g = vec![0.0; dim];
                    for r in &replies {
                        for (acc, gi) in g.iter_mut().zip(&r.grads[slot]) {
                            *acc += gi;
                        }
                    }
                    for (t, gi) in theta[slot].iter_mut().zip(&g) {
                        *t -= rates[slot] * gi / n as f64;
                    }
                }
            }
        }

        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if (loss - prev).abs() <= cfg.early_stop_tol * prev.abs() {
                break;
            }
        }
    }
    Ok(FedAvgResult { m1: model(Arm::Treated, &theta[0]), m0: model(Arm::Control, &theta[1]), trace, rounds_run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::nuisance::PropensityKind;
    use approx::assert_relative_eq;

    fn site(id: usize, n: usize, shift: f64) -> SiteDataset {
        let recs = (0..n)
            .map(|i| {
                let x = vec![(i as f64 * 0.37 + shift).sin() * 2.0, (i as f64 * 0.11).cos()];
                let arm = if i % 3 == 0 { Arm::Control } else { Arm::Treated };
                let y = if arm == Arm::Treated { 1.0 + 2.0 * x[0] - x[1] } else { 0.5 * x[0] + 3.0 * x[1] };
                UnitRecord::new(x, arm, y + 0.1 * (i as f64).sin())
            })
            .collect();
        SiteDataset::new(id, recs).unwrap()
    }

    fn scores() -> PropensitySet {
        let mut p = PropensitySet::new(PropensityKind::Oracle);
        for k in 1..=2 {
            p = p
                .with(k, Arm::Treated, |x: &[f64]| 0.2 + 0.1 / (1.0 + x[0].exp()))
                .with(k, Arm::Control, |x: &[f64]| 0.15 + 0.05 * x[1].abs());
        }
        p
    }

    #[test]
    fn single_site_one_step_is_gradient_descent() {
        let s = site(1, 30, 0.0);
        let p = scores();
        let psi = FeatureMap::IdentityPlusIntercept;
        let cfg = FedConfig { rounds: 25, local_steps: 1, learning_rate: LearningRate::Fixed(0.05), early_stop_tol: 0.0, ..Default::default() };
        let fed = run_fedavg(std::slice::from_ref(&s), &p, &Eta::vanilla(), psi, &cfg).unwrap();
        let design = WeightedDesign::build(&s, &p, &Eta::vanilla(), Arm::Treated, psi);
        let mut theta = vec![0.0; 3];
        for _ in 0..25 {
            let (_, g) = design.loss_and_grad(&theta);
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= 0.05 * gi / design.len() as f64;
            }
        }
        assert_eq!(fed.m1.theta, theta);
        assert_eq!(fed.rounds_run, 25);
    }

    #[test]
    fn identical_sites_match_concatenation() {
        let a = site(1, 24, 0.3);
        let b = SiteDataset { site_id: 2, ..a.clone() };
        let both = SiteDataset::new(1, a.records.iter().chain(&b.records).cloned().collect()).unwrap();
        let p = scores();
        let cfg = FedConfig { rounds: 30, local_steps: 1, learning_rate: LearningRate::Fixed(0.05), early_stop_tol: 0.0, ..Default::default() };
        let split = run_fedavg(&[a, b], &p, &Eta::vanilla(), FeatureMap::IdentityPlusIntercept, &cfg).unwrap();
        let joined = run_fedavg(&[both], &p, &Eta::vanilla(), FeatureMap::IdentityPlusIntercept, &cfg).unwrap();
        for (x, y) in split.m1.theta.iter().zip(&joined.m1.theta).chain(split.m0.theta.iter().zip(&joined.m0.theta)) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn loss_trace_is_non_increasing_for_small_steps() {
        let p = scores();
        // One local step is exact gradient descent on the global loss.
        let cfg = FedConfig { rounds: 100, local_steps: 1, learning_rate: LearningRate::Auto { scale: 0.5 }, early_stop_tol: 0.0, ..Default::default() };
        let r = run_fedavg(&[site(1, 40, 0.0), site(2, 60, 1.0)], &p, &Eta::vanilla(), FeatureMap::IdentityPlusIntercept, &cfg).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10), "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn large_steps_are_reported_as_divergence() {
        let p = scores();
        let cfg = FedConfig { rounds: 50, local_steps: 1, learning_rate: LearningRate::Fixed(100.0), ..Default::default() };
        match run_fedavg(&[site(1, 40, 0.0)], &p, &Eta::vanilla(), FeatureMap::IdentityPlusIntercept, &cfg) {
            Err(Error::FedAvgDiverged { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradient_averaging_converges_to_least_squares() {
        let p = scores();
        let sites = [site(1, 40, 0.0), site(2, 60, 1.0)];
        let psi = FeatureMap::IdentityPlusIntercept;
        let cfg = FedConfig { rounds: 5000, averaging: Averaging::Gradients, learning_rate: LearningRate::Auto { scale: 1.0 }, early_stop_tol: 0.0, ..Default::default() };
        let r = run_fedavg(&sites, &p, &Eta::vanilla(), psi, &cfg).unwrap();
        let designs: Vec<_> = sites.iter().map(|s| WeightedDesign::build(s, &p, &Eta::vanilla(), Arm::Treated, psi)).collect();
        let exact = crate::nuisance::fit_weighted_least_squares(&designs).unwrap();
        for (a, b) in r.m1.theta.iter().zip(&exact.theta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(FedConfig { rounds: 0, ..Default::default() }.validate().is_err());
        assert!(FedConfig { learning_rate: LearningRate::Fixed(-1.0), ..Default::default() }.validate().is_err());
    }
}

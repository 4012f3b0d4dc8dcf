//! Nearest-neighbour matching density ratio.
//!
//! For a query `x`, let `ρ` be the distance to its `M`-th nearest source
//! point and `W` the number of target points in the closed ball of radius
//! `ρ` around `x`. The estimate is `(n_target / n_source) · M / max(W, 1)`.

use serde::{Deserialize, Serialize};

use super::RatioModel;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnOptions {
    /// Neighbour count; `None` selects [`default_knn_m`].
    pub m: Option<usize>,
    /// Rescale coordinates by the pooled standard deviation before measuring distance.
    pub standardize: bool,
    /// Name under which the source points are published.
    pub source_ref: Option<String>,
}

/// `⌈n^{2/(2+d)}⌉`.
pub fn default_knn_m(n_source: usize, d: usize) -> usize {
    ((n_source as f64).powf(2.0 / (2.0 + d as f64)).ceil() as usize).clamp(1, n_source.max(1))
}

#[derive(Debug, Clone)]
pub struct KnnRatio {
    m: usize,
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    inv_scale: Option<Vec<f64>>,
    source_ref: Option<String>,
}

/// Full result of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnEval {
    pub value: f64,
    pub radius: f64,
    pub count: usize,
    /// `W` was zero and has been floored at one.
    pub floored: bool,
}

pub fn fit_knn(source: &[Vec<f64>], target: &[Vec<f64>], m: usize) -> Result<RatioModel> {
    fit_knn_with(source, target, &KnnOptions { m: Some(m), ..Default::default() })
}

pub fn fit_knn_with(source: &[Vec<f64>], target: &[Vec<f64>], opts: &KnnOptions) -> Result<RatioModel> {
    if source.is_empty() || target.is_empty() {
        return invalid("K-NN ratio needs non-empty source and target samples");
    }
    let d = source[0].len();
    if source.iter().chain(target).any(|x| x.len() != d) {
        return invalid("source and target dimensions differ");
    }
    let m = opts.m.unwrap_or_else(|| default_knn_m(source.len(), d));
    if m == 0 {
        return invalid("M must be at least 1");
    }
    if m > source.len() {
        return invalid(format!("M = {m} exceeds the source size {}", source.len()));
    }
    let inv_scale = opts.standardize.then(|| {
        let n = (source.len() + target.len()) as f64;
        (0..d)
            .map(|j| {
                let mean = source.iter().chain(target).map(|x| x[j]).sum::<f64>() / n;
                let var = source.iter().chain(target).map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
                if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 }
            })
            .collect()
    });
    Ok(RatioModel::Knn(KnnRatio {
        m,
        source: source.to_vec(),
        target: target.to_vec(),
        inv_scale,
        source_ref: opts.source_ref.clone(),
    }))
}

impl KnnRatio {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_source(&self) -> usize {
        self.source.len()
    }

    pub fn n_target(&self) -> usize {
        self.target.len()
    }

    pub fn is_standardized(&self) -> bool {
        self.inv_scale.is_some()
    }

    pub fn source_ref(&self) -> Option<&str> {
        self.source_ref.as_deref()
    }

    fn sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.inv_scale {
            None => a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum(),
            Some(s) => a.iter().zip(b).zip(s).map(|((u, v), w)| ((u - v) * w).powi(2)).sum(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_detailed(x).value
    }

    pub fn eval_detailed(&self, x: &[f64]) -> KnnEval {
        let mut dists: Vec<f64> = self.source.iter().map(|s| self.sq_dist(x, s)).collect();
        let (_, &mut rho2, _) = dists.select_nth_unstable_by(self.m - 1, f64::total_cmp);
        let count = self.target.iter().filter(|t| self.sq_dist(x, t) <= rho2).count();
        let floored = count == 0;
        let value = (self.target.len() as f64 / self.source.len() as f64) * self.m as f64 / count.max(1) as f64;
        KnnEval { value, radius: rho2.sqrt(), count, floored }
    }
}

//! Exponential tilting `r(x) = exp(ψ(x)ᵀγ)` fitted by entropy balancing.
//!
//! `γ` solves the moment equation `Σ_source ψ(x) exp(ψ(x)ᵀγ) = Σ_target ψ(x)`.
//! It is the minimiser of the convex dual
//!
//! ```text
//! G(γ) = (1/n_t) Σ_source exp(ψᵀγ) − γᵀ mean_target(ψ)
//! ```
//!
//! whose gradient is the moment residual scaled by `1/n_t`. The solver is a
//! Newton method with step halving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, RatioModel};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltingOptions {
    /// Bound on the Euclidean norm of the per-target-unit moment residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TiltingOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200 }
    }
}

const MAX_HALVINGS: usize = 50;
const GAMMA_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltingRatio {
    pub gamma: Vec<f64>,
    pub psi: FeatureMap,
}

impl TiltingRatio {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let f = self.psi.apply(x);
        f.iter().zip(&self.gamma).map(|(a, b)| a * b).sum::<f64>().exp()
    }
}

/// Solver trace returned by [`fit_tilting_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct TiltingFit {
    pub iterations: usize,
    pub residual_norm: f64,
    /// Dual objective after each accepted step, starting at `γ = 0`.
    pub objective_trace: Vec<f64>,
}

pub fn fit_tilting(source: &[Vec<f64>], target: &[Vec<f64>], psi: FeatureMap, opts: TiltingOptions) -> Result<RatioModel> {
    fit_tilting_detailed(source, target, psi, opts).map(|(m, _)| m)
}

struct Dual {
    features: Vec<f64>,
    p: usize,
    n_source: usize,
    target_mean: DVector<f64>,
    inv_nt: f64,
}

impl Dual {
    fn new(source: &[Vec<f64>], target: &[Vec<f64>], psi: FeatureMap) -> Self {
        let d = source[0].len();
        let p = psi.dim(d);
        let mut features = Vec::with_capacity(source.len() * p);
        let mut buf = Vec::with_capacity(p);
        for x in source {
            psi.apply_into(x, &mut buf);
            features.extend_from_slice(&buf);
        }
        let mut target_mean = DVector::zeros(p);
        for x in target {
            psi.apply_into(x, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                target_mean[j] += v;
            }
        }
        let inv_nt = 1.0 / target.len() as f64;
        target_mean *= inv_nt;
        Self { features, p, n_source: source.len(), target_mean, inv_nt }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    fn exponent(&self, i: usize, gamma: &DVector<f64>) -> f64 {
        self.row(i).iter().zip(gamma.iter()).map(|(a, b)| a * b).sum()
    }

    fn objective(&self, gamma: &DVector<f64>) -> f64 {
        let mass: f64 = (0..self.n_source).map(|i| self.exponent(i, gamma).exp()).sum();
        mass * self.inv_nt - gamma.dot(&self.target_mean)
    }

    fn gradient(&self, gamma: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.p);
        for i in 0..self.n_source {
            let w = self.exponent(i, gamma).exp();
            for (j, v) in self.row(i).iter().enumerate() {
                g[j] += w * v;
            }
        }
        g * self.inv_nt - &self.target_mean
    }

    fn hessian(&self, gamma: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.p, self.p);
        for i in 0..self.n_source {
            let w = self.exponent(i, gamma).exp();
            let r = self.row(i);
            for a in 0..self.p {
                let wa = w * r[a];
                for b in a..self.p {
                    h[(a, b)] += wa * r[b];
                }
            }
        }
        for a in 0..self.p {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h * self.inv_nt
    }
}

fn newton_direction(h: DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut hr = h.clone();
        for j in 0..hr.nrows() {
            hr[(j, j)] += ridge;
        }
        if let Some(chol) = hr.cholesky() {
            let step = -chol.solve(grad);
            if step.iter().all(|v| v.is_finite()) {
                return Some(step);
            }
        }
        ridge = if ridge == 0.0 { scale * 1e-12 } else { ridge * 100.0 };
    }
    None
}

/// Fits `γ` and returns the model with its solver trace.
pub fn fit_tilting_detailed(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    psi: FeatureMap,
    opts: TiltingOptions,
) -> Result<(RatioModel, TiltingFit)> {
    if source.is_empty() || target.is_empty() {
        return invalid("tilting needs non-empty source and target samples");
    }
    let d = source[0].len();
    if source.iter().chain(target).any(|x| x.len() != d) {
        return invalid("source and target dimensions differ");
    }
    psi.check_dim(d)?;

    let dual = Dual::new(source, target, psi);
    let mut gamma = DVector::zeros(dual.p);
    let mut obj = dual.objective(&gamma);
    let mut grad = dual.gradient(&gamma);
    let mut trace = vec![obj];

    for iter in 0..opts.max_iter {
        let gnorm = grad.norm();
        if gnorm <= opts.tol {
            let fit = TiltingFit { iterations: iter, residual_norm: gnorm, objective_trace: trace };
            let model = RatioModel::Tilting(TiltingRatio { gamma: gamma.iter().copied().collect(), psi });
            return Ok((model, fit));
        }
        let step = newton_direction(dual.hessian(&gamma), &grad)
            .ok_or(Error::TiltingSeparation { residual_norm: gnorm })?;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &gamma + &step * t;
            let cand_obj = dual.objective(&cand);
            if cand_obj.is_finite() {
                let slack = 1e-12 * obj.abs().max(1.0);
                if cand_obj < obj {
                    accepted = Some((cand, cand_obj, None));
                    break;
                }
                // Rounding floor of G: accept when the residual still shrinks.
                if cand_obj <= obj + slack {
                    let cand_grad = dual.gradient(&cand);
                    if cand_grad.norm() < gnorm {
                        accepted = Some((cand, cand_obj, Some(cand_grad)));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((cand, cand_obj, cand_grad)) = accepted else {
            return Err(Error::TiltingNotConverged { iterations: iter + 1, residual_norm: gnorm });
        };
        gamma = cand;
        obj = cand_obj;
        grad = cand_grad.unwrap_or_else(|| dual.gradient(&gamma));
        trace.push(obj);
        if gamma.amax() > GAMMA_LIMIT || !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::TiltingSeparation { residual_norm: grad.norm() });
        }
    }
    Err(Error::TiltingNotConverged { iterations: opts.max_iter, residual_norm: grad.norm() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    fn gamma_of(m: &RatioModel) -> Vec<f64> {
        match m {
            RatioModel::Tilting(t) => t.gamma.clone(),
            RatioModel::Knn(_) => unreachable!(),
        }
    }

    #[test]
    fn scalar_moment_equation_gives_ln2() {
        let m = fit_tilting(&scalars(&[0.0, 0.0, 1.0]), &scalars(&[0.0, 1.0, 1.0]), FeatureMap::Identity, TiltingOptions::default())
            .unwrap();
        assert_abs_diff_eq!(gamma_of(&m)[0], std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn identical_samples_give_constant_ratio() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let m = fit_tilting(&pts, &pts, FeatureMap::IdentityPlusIntercept, TiltingOptions::default()).unwrap();
        let vals: Vec<f64> = pts.iter().map(|x| m.eval(x)).collect();
        for v in &vals {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
        let total: f64 = vals.iter().sum();
        for v in &vals {
            assert_abs_diff_eq!(v / total, 1.0 / 20.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn moment_closure_and_monotone_dual() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = Normal::new(0.0, 1.0).unwrap();
        let source: Vec<Vec<f64>> = (0..400).map(|_| vec![n.sample(&mut rng) + 0.5, n.sample(&mut rng)]).collect();
        let target: Vec<Vec<f64>> = (0..300).map(|_| vec![n.sample(&mut rng), n.sample(&mut rng) - 0.3]).collect();
        let psi = FeatureMap::IdentityPlusIntercept;
        let (m, fit) = fit_tilting_detailed(&source, &target, psi, TiltingOptions::default()).unwrap();
        assert!(fit.residual_norm <= 1e-9);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
        let mut lhs = [0.0; 3];
        let mut rhs = [0.0; 3];
        for x in &source {
            let r = m.eval(x);
            for (j, f) in psi.apply(x).iter().enumerate() {
                lhs[j] += f * r;
            }
        }
        for x in &target {
            for (j, f) in psi.apply(x).iter().enumerate() {
                rhs[j] += f;
            }
        }
        for j in 0..3 {
            assert_abs_diff_eq!(lhs[j], rhs[j], epsilon = 1e-9 * target.len() as f64);
        }
    }

    #[test]
    fn gaussian_shift_recovers_log_ratio_slope() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 1.0).unwrap();
        let source: Vec<Vec<f64>> = (0..5000).map(|_| vec![1.0 + n.sample(&mut rng)]).collect();
        let target: Vec<Vec<f64>> = (0..5000).map(|_| vec![n.sample(&mut rng)]).collect();
        let m = fit_tilting(&source, &target, FeatureMap::IdentityPlusIntercept, TiltingOptions::default()).unwrap();
        let g = gamma_of(&m);
        assert!((g[1] + 1.0).abs() < 0.1, "slope {}", g[1]);
    }

    #[test]
    fn separated_samples_are_reported() {
        // Target mean lies outside the source hull: no finite solution.
        let err = fit_tilting(&scalars(&[0.0, 1.0]), &scalars(&[5.0]), FeatureMap::IdentityPlusIntercept, TiltingOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::TiltingSeparation { .. } | Error::TiltingNotConverged { .. }), "{err:?}");
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let opts = TiltingOptions { tol: 1e-9, max_iter: 1 };
        let err = fit_tilting(&scalars(&[0.0, 0.0, 1.0]), &scalars(&[0.0, 1.0, 1.0]), FeatureMap::Identity, opts).unwrap_err();
        match err {
            Error::TiltingNotConverged { iterations, residual_norm } => {
                assert_eq!(iterations, 1);
                assert!(residual_norm > 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

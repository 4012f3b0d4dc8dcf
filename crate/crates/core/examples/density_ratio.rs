//! Exponential tilting and K-NN density ratios against the exact Gaussian
//! ratio on a shifted sample.

use fedcause::ratio::{fit_knn, fit_tilting_detailed, oracle_gaussian_ratio, FeatureMap, TiltingOptions};
use fedcause::SeedSpec;
use rand_distr::{Distribution, StandardNormal};

fn sample(n: usize, mu: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeedSpec::new(seed).rng(0, 0);
    (0..n)
        .map(|_| {
            (0..2)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + z
                })
                .collect()
        })
        .collect()
}

fn main() -> fedcause::Result<()> {
    let (mu_s, mu_t) = (0.5, 0.0);
    let source = sample(2000, mu_s, 1);
    let target = sample(2000, mu_t, 2);

    let (tilt, fit) = fit_tilting_detailed(&source, &target, FeatureMap::IdentityPlusIntercept, TiltingOptions::default())?;
    println!("tilting: {} Newton steps, residual {:.2e}", fit.iterations, fit.residual_norm);
    let knn = fit_knn(&source, &target, 20)?;

    // Source over target. Tilting's own exp(ψᵀγ) is the reciprocal weight.
    println!("{:>14} {:>9} {:>9} {:>9}", "x", "exact", "tilting", "knn");
    for x in [[0.0, 0.0], [0.5, 0.5], [1.0, -0.5], [-1.0, 1.0]] {
        let exact = oracle_gaussian_ratio(&[mu_s; 2], &[mu_t; 2], 1.0, &x);
        println!("{:>14} {exact:>9.3} {:>9.3} {:>9.3}", format!("{x:?}"), tilt.density_ratio(&x), knn.density_ratio(&x));
    }
    Ok(())
}

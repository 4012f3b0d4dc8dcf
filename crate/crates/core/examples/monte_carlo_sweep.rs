//! MSE of the four estimators against heterogeneity, oracle nuisances.
//!
//! `cargo run --release --example monte_carlo_sweep -- [replications] [seed]`

use fedcause::harness::{run_monte_carlo, write_sweep_csv, SweepSpec};
use fedcause::EstimatorKind;

fn main() -> fedcause::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps = args.next().and_then(|a| a.parse().ok()).unwrap_or(40);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    let spec = SweepSpec::heterogeneity_sweep(reps);
    let res = run_monte_carlo(&spec, seed)?;

    println!("{:>5} {:>10} {:>10} {:>10} {:>9} {:>9}", "d_kl", "estimator", "mse", "bias", "var", "coverage");
    for c in &res.cells {
        println!(
            "{:>5} {:>10} {:>10.5} {:>+10.5} {:>9.5} {:>9.3}",
            c.d_kl, c.estimator, c.mse, c.bias, c.var, c.coverage
        );
    }
    for kind in [EstimatorKind::MetaIPW, EstimatorKind::ClbIPW] {
        let mse = |d| res.cells.iter().find(|c| c.d_kl == d && c.estimator == kind).map_or(f64::NAN, |c| c.mse);
        println!("{kind}: mse(4) / mse(0) = {:.2}", mse(4.0) / mse(0.0));
    }

    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &res)?;
    println!("\n{}", String::from_utf8_lossy(&csv).lines().take(3).collect::<Vec<_>>().join("\n"));
    Ok(())
}

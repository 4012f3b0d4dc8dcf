//! Runs both site/server protocols, checks them against the pooled
//! computation, audits the message log and replays it.

use fedcause::estimators::clb_pooled_reference;
use fedcause::fedsim::{
    algorithm2_reference, audit_log, replay_algorithm2, run_algorithm1, run_algorithm2, Alg2Config, FedConfig, OutcomeTraining,
    PropensitySource,
};
use fedcause::nuisance::Eta;
use fedcause::ratio::{FeatureMap, RatioBackend};
use fedcause::synth::{covariate_shift_oracle, gen_covariate_shift, ShiftConfig};
use fedcause::SeedSpec;

fn main() -> fedcause::Result<()> {
    let cfg = ShiftConfig { site_sizes: vec![400, 600, 800], n_target: 2000, ..ShiftConfig::default() }.with_d_kl(1.0);
    let draw = gen_covariate_shift(&cfg, &SeedSpec::new(3), 0)?;

    let p = covariate_shift_oracle(&cfg, &draw.site_means);
    let (alg1, log1) = run_algorithm1(&draw.sites, &p, &Eta::vanilla(), 0.95)?;
    let pooled = clb_pooled_reference(&draw.sites, &p, &Eta::vanilla(), 0.95)?;
    println!("algorithm 1: {:+.6} in {} messages, pooled {:+.6}, bitwise equal: {}", alg1.tau_hat, log1.len(), pooled.tau_hat, alg1 == pooled);

    let source = PropensitySource::Fit(RatioBackend::tilting(FeatureMap::IdentityPlusIntercept));
    let alg2_cfg = Alg2Config { outcome: OutcomeTraining::FedAvg(FedConfig { rounds: 50, ..FedConfig::default() }), ..Alg2Config::default() };
    let (alg2, log2) = run_algorithm2(&draw.sites, &draw.target, &source, &alg2_cfg)?;
    let central = algorithm2_reference(&draw.sites, &draw.target, &source, &alg2_cfg)?;
    println!("algorithm 2: {:+.6} in {} messages, centralised {:+.6}", alg2.tau_hat, log2.len(), central.tau_hat);
    for kind in ["publish_ratio_model", "model_params", "corrections", "target_mean_term"] {
        println!("  {kind}: {}", log2.count(kind));
    }

    let audit = audit_log(&log2)?;
    println!("audit ok: {} ({} violations)", audit.ok, audit.violations.len());
    let replayed = replay_algorithm2(&log2, alg2_cfg.flavor, &alg2_cfg.meta_weighting, alg2_cfg.level)?;
    println!("replayed from log: {:+.6}", replayed.tau_hat);
    Ok(())
}

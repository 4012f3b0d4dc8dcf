//! Observational data model shared by every other module: unit records,
//! per-site datasets, the public target covariates, and deterministic seeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// The random generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Treatment arm of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treated, Arm::Control];

    pub fn from_z(z: u8) -> Option<Arm> {
        match z {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    pub fn z(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }
}

/// One observed individual `(x, z, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub x: Vec<f64>,
    pub arm: Arm,
    pub y: f64,
}

impl UnitRecord {
    pub fn new(x: Vec<f64>, arm: Arm, y: f64) -> Self {
        Self { x, arm, y }
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

/// The dataset held by one site. Site ids are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDataset {
    pub site_id: usize,
    pub d: usize,
    pub records: Vec<UnitRecord>,
}

impl SiteDataset {
    /// Builds a site, rejecting empty data, id 0 and ragged covariates.
    pub fn new(site_id: usize, records: Vec<UnitRecord>) -> Result<Self> {
        if site_id == 0 {
            return invalid("site ids are 1-based");
        }
        let Some(first) = records.first() else {
            return invalid(format!("site {site_id} has no records"));
        };
        let d = first.x.len();
        if let Some(bad) = records.iter().position(|r| r.x.len() != d) {
            return invalid(format!("dimension mismatch site {site_id} (record {bad})"));
        }
        Ok(Self { site_id, d, records })
    }

    /// Builds a site without checks; [`validate_dataset`] reports problems later.
    pub fn new_unchecked(site_id: usize, d: usize, records: Vec<UnitRecord>) -> Self {
        Self { site_id, d, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.records.iter().filter(|r| r.arm == arm).count()
    }

    /// Covariates of the units in `arm`.
    pub fn arm_covariates(&self, arm: Arm) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.x.clone())
            .collect()
    }

    /// Copy of the site keeping only the records selected by `keep`.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> SiteDataset {
        let records = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, r)| r.clone())
            .collect();
        SiteDataset { site_id: self.site_id, d: self.d, records }
    }
}

/// Covariates of the public target sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCovariates {
    pub d: usize,
    pub xs: Vec<Vec<f64>>,
}

impl TargetCovariates {
    pub fn new(xs: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = xs.first() else {
            return invalid("target sample is empty");
        };
        let d = first.len();
        if xs.iter().any(|x| x.len() != d) {
            return invalid("dimension mismatch in target sample");
        }
        Ok(Self { d, xs })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Selection label drawn in the sampling-selecting process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionLabel {
    Selected { site_id: usize, arm: Arm },
    Dropped,
}

impl SelectionLabel {
    pub fn arm(&self) -> Option<Arm> {
        match self {
            SelectionLabel::Selected { arm, .. } => Some(*arm),
            SelectionLabel::Dropped => None,
        }
    }
}

/// Pooled source size `N_S`.
pub fn pooled_size(sites: &[SiteDataset]) -> usize {
    sites.iter().map(SiteDataset::len).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks data shapes. Missing arms are warnings, everything else an error.
pub fn validate_dataset(sites: &[SiteDataset], target: &TargetCovariates) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let d = target.d;

    if target.xs.is_empty() {
        errors.push("target sample is empty".to_string());
    }
    if target.xs.iter().any(|x| x.len() != d) {
        errors.push("dimension mismatch in target sample".to_string());
    }
    if target.xs.iter().flatten().any(|v| !v.is_finite()) {
        errors.push("non-finite value in target sample".to_string());
    }
    if sites.is_empty() {
        errors.push("no sites".to_string());
    }

    for site in sites {
        let k = site.site_id;
        if k == 0 {
            errors.push("site id 0 is invalid (ids are 1-based)".to_string());
        }
        if site.records.is_empty() {
            errors.push(format!("site {k} is empty"));
            continue;
        }
        if site.d != d || site.records.iter().any(|r| r.x.len() != d) {
            errors.push(format!("dimension mismatch site {k}"));
        }
        if site.records.iter().any(|r| !r.is_finite()) {
            errors.push(format!("non-finite value in site {k}"));
        }
        if site.arm_count(Arm::Control) == 0 {
            warnings.push(format!("site {k} lacks control units; Meta-IPW will exclude it"));
        }
        if site.arm_count(Arm::Treated) == 0 {
            warnings.push(format!("site {k} lacks treated units; Meta-IPW will exclude it"));
        }
    }
    let mut ids: Vec<usize> = sites.iter().map(|s| s.site_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        errors.push("duplicate site ids".to_string());
    }

    ValidationReport { errors, warnings }
}

/// Master seed plus the rule that derives one independent stream per
/// `(replication, stream)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    /// Stream id reserved for the target sample.
    pub const TARGET_STREAM: u64 = 0;
    /// Stream id reserved for site-mean placement.
    pub const MEANS_STREAM: u64 = u64::MAX;
    /// Stream id reserved for fold assignment.
    pub const FOLD_STREAM: u64 = u64::MAX - 1;

    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Child seed for replication `r` and stream `k` (sites use `k = site_id`).
    pub fn child_seed(&self, r: u64, k: u64) -> u64 {
        let mut h = splitmix64(self.master_seed);
        h = splitmix64(h ^ r.wrapping_mul(0xA24B_AED4_963E_E407));
        splitmix64(h ^ k.wrapping_mul(0x9FB2_1C65_1E98_DF25))
    }

    pub fn rng(&self, r: u64, k: u64) -> Rng {
        Rng::seed_from_u64(self.child_seed(r, k))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

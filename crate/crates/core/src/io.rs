//! CSV persistence for site datasets and target covariates.
//!
//! Dataset files carry the header `site_id,z,y,x1,...,xd`, target files
//! `x1,...,xd`. Reals are written with 17 significant digits so that a
//! read-back reproduces every `f64` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{Arm, SiteDataset, TargetCovariates, UnitRecord};
use crate::error::{invalid, Error, Result};

pub const TARGET_FILE: &str = "target.csv";

pub fn site_file_name(site_id: usize) -> String {
    format!("site_{site_id}.csv")
}

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn covariate_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Writes any number of sites into one CSV stream.
pub fn write_sites<W: Write>(out: W, sites: &[SiteDataset]) -> Result<()> {
    let d = sites.first().map_or(0, |s| s.d);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site_id".to_string(), "z".to_string(), "y".to_string()];
    header.extend(covariate_header(d));
    w.write_record(&header)?;
    for site in sites {
        if site.d != d {
            return invalid(format!("dimension mismatch site {}", site.site_id));
        }
        for r in &site.records {
            let mut row = vec![site.site_id.to_string(), r.arm.z().to_string(), format_real(r.y)];
            row.extend(r.x.iter().map(|v| format_real(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads sites from a CSV stream, grouping rows by `site_id` in ascending order.
pub fn read_sites<R: Read>(input: R) -> Result<Vec<SiteDataset>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.len() < 4 || &header[0] != "site_id" || &header[1] != "z" || &header[2] != "y" {
        return invalid("dataset header must be site_id,z,y,x1,...,xd");
    }
    let d = header.len() - 3;
    let mut grouped: BTreeMap<usize, Vec<UnitRecord>> = BTreeMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let parse = |i: usize| -> Result<f64> {
            row[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("row {}: {e}", line + 2)))
        };
        let site_id: usize = row[0]
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("row {}: {e}", line + 2)))?;
        let z: u8 = row[1]
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("row {}: {e}", line + 2)))?;
        let arm = Arm::from_z(z)
            .ok_or_else(|| Error::InvalidInput(format!("row {}: z must be 0 or 1", line + 2)))?;
        let y = parse(2)?;
        let x = (3..3 + d).map(parse).collect::<Result<Vec<_>>>()?;
        grouped.entry(site_id).or_default().push(UnitRecord::new(x, arm, y));
    }
    grouped
        .into_iter()
        .map(|(k, records)| SiteDataset::new(k, records))
        .collect()
}

pub fn write_target<W: Write>(out: W, target: &TargetCovariates) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(covariate_header(target.d))?;
    for x in &target.xs {
        w.write_record(x.iter().map(|v| format_real(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_target<R: Read>(input: R) -> Result<TargetCovariates> {
    let mut rdr = csv::Reader::from_reader(input);
    let d = rdr.headers()?.len();
    let mut xs = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != d {
            return invalid("ragged target row");
        }
        let x = row
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidInput(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        xs.push(x);
    }
    TargetCovariates::new(xs)
}

/// Writes `site_<k>.csv` per site and `target.csv` into `dir`.
pub fn write_dataset_dir(dir: &Path, sites: &[SiteDataset], target: &TargetCovariates) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for site in sites {
        let path = dir.join(site_file_name(site.site_id));
        write_sites(fs::File::create(&path)?, std::slice::from_ref(site))?;
        written.push(path);
    }
    let path = dir.join(TARGET_FILE);
    write_target(fs::File::create(&path)?, target)?;
    written.push(path);
    Ok(written)
}

/// Loads every `site_*.csv` plus `target.csv` from `dir`.
pub fn read_dataset_dir(dir: &Path) -> Result<(Vec<SiteDataset>, TargetCovariates)> {
    let mut sites = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("site_") && n.ends_with(".csv"))
        })
        .collect();
    entries.sort();
    for path in entries {
        sites.extend(read_sites(fs::File::open(&path)?)?);
    }
    if sites.is_empty() {
        return invalid(format!("no site_*.csv files in {}", dir.display()));
    }
    sites.sort_by_key(|s| s.site_id);
    let target = read_target(fs::File::open(dir.join(TARGET_FILE))?)?;
    Ok((sites, target))
}

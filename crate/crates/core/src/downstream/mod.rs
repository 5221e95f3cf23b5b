//! Downstream adaptation: feature extraction, probes, MIL heads and
//! retrieval.
//!
//! Bag storage: one feature file per slide plus a `bags.csv` manifest with
//! `slide_id,path,label` rows.

mod features;
mod mil;
pub mod probe;
mod retrieval;

pub use features::{extract_features, read_features, write_features, FeatureMatrix};
pub use mil::{
    abmil_forward, mil_predict, mil_train, simlp_forward, Bag, MilConfig, MilModel,
    MilModelParams, MilOutcome,
};
pub use probe::{
    probe_predict, probe_train, FeatureSource, ProbeConfig, ProbeMode, ProbeModel, ProbeOutcome,
};
pub use retrieval::{
    leave_one_out_sweep, relevant_counts, retrieval_metrics, retrieve, RetrievalMetrics,
};

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Writes bags as per-slide feature files plus the `bags.csv` manifest.
pub fn write_bags(dir: &Path, bags: &[Bag]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("bags.csv"))?);
    manifest.write_all(b"slide_id,path,label\n")?;
    for bag in bags {
        let rel = format!("{}.stnf", bag.slide_id);
        let ids = (0..bag.instances())
            .map(|i| format!("{}-{i}", bag.slide_id))
            .collect();
        let fm = FeatureMatrix::new(ids, bag.x.clone(), None)?;
        write_features(&dir.join(&rel), &fm)?;
        writeln!(manifest, "{},{},{}", bag.slide_id, rel, bag.label)?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads bags back from a `bags.csv` manifest directory.
pub fn read_bags(dir: &Path) -> Result<Vec<Bag>> {
    let path = dir.join("bags.csv");
    let text = std::fs::read_to_string(&path)?;
    let mut bags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "slide_id,path,label" {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    reason: "bad bags manifest header".into(),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: i as u64,
                reason: format!("line {}: expected 3 fields", i + 1),
            });
        }
        let fm = read_features(&dir.join(fields[1]))?;
        let label: i32 = fields[2].parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            offset: i as u64,
            reason: format!("line {}: bad label `{}`", i + 1, fields[2]),
        })?;
        bags.push(Bag::new(fields[0].to_string(), fm.x, label)?);
    }
    Ok(bags)
}

use std::io::Write;

use serde::Serialize;

use crate::{Error, Result};

use super::{ms3_plan, SimilarityMatrix};

/// Mean thresholded retention at one `τ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub tau: f64,
    pub mean_retention: f64,
    pub n_samples: usize,
}

/// Mean retained fraction `k_b / N` over the samples for each threshold.
pub fn calibrate_threshold(sims: &[SimilarityMatrix], taus: &[f64]) -> Result<Vec<CalibrationRow>> {
    if sims.is_empty() {
        return Err(Error::EmptyDataset("threshold calibration needs at least one sample".into()));
    }
    taus.iter()
        .map(|&tau| {
            let total = sims
                .iter()
                .map(|s| ms3_plan(s, tau).map(|p| p.retention()))
                .sum::<Result<f64>>()?;
            Ok(CalibrationRow {
                tau,
                mean_retention: total / sims.len() as f64,
                n_samples: sims.len(),
            })
        })
        .collect()
}

pub fn write_calibration_csv<W: Write>(mut out: W, rows: &[CalibrationRow]) -> std::io::Result<()> {
    writeln!(out, "tau,mean_retention,n_samples")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.tau, r.mean_retention, r.n_samples)?;
    }
    Ok(())
}

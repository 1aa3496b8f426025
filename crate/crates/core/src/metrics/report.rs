use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores of one study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub study_id: String,
    pub dice: f64,
    pub nsd: f64,
    #[serde(rename = "gt_voxels")]
    pub gt_positive_voxels: u64,
    #[serde(rename = "pred_voxels")]
    pub pred_positive_voxels: u64,
}

/// Unweighted summary of one metric over patients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Summary {
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_name: String,
    pub n_scans: usize,
    pub nsd_tolerance_mm: f64,
    pub dice: Summary,
    pub nsd: Summary,
    pub rows: Vec<PatientScore>,
}

/// Macro average: every patient weighs the same.
pub fn macro_average(
    dataset_name: &str,
    rows: Vec<PatientScore>,
    nsd_tolerance_mm: f64,
) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("macro average of zero patients".into()));
    }
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let nsd: Vec<f64> = rows.iter().map(|r| r.nsd).collect();
    Ok(MetricsReport {
        dataset_name: dataset_name.to_string(),
        n_scans: rows.len(),
        nsd_tolerance_mm,
        dice: Summary::of(&dice)?,
        nsd: Summary::of(&nsd)?,
        rows,
    })
}

impl MetricsReport {
    /// Per-patient rows: `study_id,dice,nsd,gt_voxels,pred_voxels`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<PatientScore>> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<PatientScore>, _>>()?;
        Ok(rows)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Which metric a results table shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMetric {
    Dice,
    Nsd,
}

/// Results table with one line per dataset: scan count, mean ± std,
/// lowest and highest score, three decimals.
pub fn format_table(reports: &[MetricsReport], metric: TableMetric) -> String {
    let (title, label) = match metric {
        TableMetric::Dice => ("Volumetric Dice scores", "Dice score"),
        TableMetric::Nsd => ("Normalized surface Dice scores", "NSD"),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    if metric == TableMetric::Nsd {
        if let Some(r) = reports.first() {
            let _ = writeln!(out, "tolerance: {} mm", r.nsd_tolerance_mm);
        }
    }
    let _ = writeln!(
        out,
        "| Dataset | CT scans (n) | {label} Mean and std. | {label} Lowest | {label} Highest |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|");
    for r in reports {
        let s = match metric {
            TableMetric::Dice => r.dice,
            TableMetric::Nsd => r.nsd,
        };
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} ± {:.3} | {:.3} | {:.3} |",
            r.dataset_name, r.n_scans, s.mean, s.std, s.min, s.max
        );
    }
    out
}

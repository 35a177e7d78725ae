//! Per-patient metric tables, cohort summaries, and regime comparisons.
//!
//! The row table serializes to CSV with the fixed schema
//! `patient_id,region,dsc,hd95_mm,abd_mm,rvd`; metrics that were
//! undefined for a patient (empty masks) appear as empty fields and are
//! excluded from summaries, which report how many values were missing.

use super::regions::Region;
use super::stats::{bootstrap_mean, mann_whitney_u, mean, sample_sd, welch_t, BootstrapSummary};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Two-sided significance threshold used in reports.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// The four reported metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dsc,
    Hd95,
    Abd,
    Rvd,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dsc, Metric::Hd95, Metric::Abd, Metric::Rvd];

    /// Column name in the CSV schema.
    pub fn column(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Hd95 => "hd95_mm",
            Metric::Abd => "abd_mm",
            Metric::Rvd => "rvd",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.column())
    }
}

/// One patient evaluated in one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub patient_id: String,
    pub region: Region,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub abd_mm: Option<f64>,
    pub rvd: Option<f64>,
}

impl MetricRow {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Dsc => Some(self.dsc),
            Metric::Hd95 => self.hd95_mm,
            Metric::Abd => self.abd_mm,
            Metric::Rvd => self.rvd,
        }
    }
}

/// The full patient x region table for one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        Self { rows }
    }

    /// Defined values of one metric in one region, in row order.
    pub fn values(&self, region: Region, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.region == region)
            .filter_map(|r| r.value(metric))
            .collect()
    }

    /// Serialize as CSV with the fixed column schema.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv flush: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv utf-8: {e}")))
    }

    /// Parse a CSV produced by [`MetricReport::to_csv_string`].
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows: std::result::Result<Vec<MetricRow>, csv::Error> = r.deserialize().collect();
        Ok(Self { rows: rows.map_err(csv_err)? })
    }

    /// Cohort summary per region and metric, with bootstrap aggregation.
    pub fn summarize(&self, replicates: usize, seed: u64) -> Result<ReportSummary> {
        let mut regions = Vec::new();
        for region in Region::ALL {
            let total = self.rows.iter().filter(|r| r.region == region).count();
            if total == 0 {
                continue;
            }
            let mut metrics = Vec::new();
            for metric in Metric::ALL {
                let values = self.values(region, metric);
                if values.is_empty() {
                    continue;
                }
                metrics.push(MetricSummary {
                    metric: metric.column().to_string(),
                    n_defined: values.len(),
                    n_missing: total - values.len(),
                    mean: mean(&values)?,
                    sd: sample_sd(&values)?,
                    bootstrap: bootstrap_mean(&values, replicates, seed)?,
                });
            }
            regions.push(RegionSummary { region, metrics });
        }
        Ok(ReportSummary { bootstrap_replicates: replicates, bootstrap_seed: seed, regions })
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Summary of one metric over the cohort: patient-level mean and SD
/// plus the bootstrap estimate (both spreads are reported and labeled
/// since they answer different questions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub n_defined: usize,
    pub n_missing: usize,
    pub mean: f64,
    pub sd: f64,
    pub bootstrap: BootstrapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub bootstrap_replicates: usize,
    pub bootstrap_seed: u64,
    pub regions: Vec<RegionSummary>,
}

/// Two-regime hypothesis test on one metric in one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub metric: String,
    pub region: Region,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub welch_t: f64,
    pub welch_p: f64,
    pub welch_significant: bool,
    pub mwu_u: f64,
    pub mwu_p: f64,
    pub mwu_significant: bool,
}

/// Compare the same metric/region between two runs with both tests.
pub fn compare_reports(
    a: &MetricReport,
    b: &MetricReport,
    region: Region,
    metric: Metric,
) -> Result<ComparisonEntry> {
    let va = a.values(region, metric);
    let vb = b.values(region, metric);
    if va.is_empty() || vb.is_empty() {
        return Err(Error::Stats(format!(
            "no defined {metric} values in region {region} for one of the runs"
        )));
    }
    let (t, welch_p) = welch_t(&va, &vb)?;
    let (u, mwu_p) = mann_whitney_u(&va, &vb)?;
    Ok(ComparisonEntry {
        metric: metric.column().to_string(),
        region,
        n_a: va.len(),
        n_b: vb.len(),
        mean_a: mean(&va)?,
        mean_b: mean(&vb)?,
        welch_t: t,
        welch_p,
        welch_significant: welch_p < SIGNIFICANCE_LEVEL,
        mwu_u: u,
        mwu_p,
        mwu_significant: mwu_p < SIGNIFICANCE_LEVEL,
    })
}

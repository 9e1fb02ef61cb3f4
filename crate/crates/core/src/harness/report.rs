//! Per-subimage report records and their Table-style aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;

/// Whether a reconstruction covers area the library was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    InSample,
    OutOfSample,
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sample::InSample => "in_sample",
            Sample::OutOfSample => "out_of_sample",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubimageReport {
    pub pair_id: String,
    pub subimage: usize,
    pub sample: Sample,
    pub report: EvaluationReport,
}

/// Flat CSV row of a [`SubimageReport`].
#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    pair_id: String,
    subimage: usize,
    sample: Sample,
    psnr_sr: f64,
    psnr_bicubic: f64,
    delta_psnr: f64,
    ssim_sr: f64,
    ssim_bicubic: f64,
    delta_ssim: f64,
    fg_delta_psnr: Option<f64>,
    bg_delta_psnr: Option<f64>,
    sim_sr: f64,
    sim_bicubic: f64,
    failure: bool,
}

impl From<&SubimageReport> for ReportRow {
    fn from(s: &SubimageReport) -> Self {
        let r = &s.report;
        Self {
            pair_id: s.pair_id.clone(),
            subimage: s.subimage,
            sample: s.sample,
            psnr_sr: r.psnr_sr,
            psnr_bicubic: r.psnr_bicubic,
            delta_psnr: r.delta_psnr,
            ssim_sr: r.ssim_sr,
            ssim_bicubic: r.ssim_bicubic,
            delta_ssim: r.delta_ssim,
            fg_delta_psnr: r.fg_delta_psnr,
            bg_delta_psnr: r.bg_delta_psnr,
            sim_sr: r.sim_sr,
            sim_bicubic: r.sim_bicubic,
            failure: r.failure,
        }
    }
}

impl From<ReportRow> for SubimageReport {
    fn from(r: ReportRow) -> Self {
        Self {
            pair_id: r.pair_id,
            subimage: r.subimage,
            sample: r.sample,
            report: EvaluationReport {
                psnr_sr: r.psnr_sr,
                psnr_bicubic: r.psnr_bicubic,
                delta_psnr: r.delta_psnr,
                ssim_sr: r.ssim_sr,
                ssim_bicubic: r.ssim_bicubic,
                delta_ssim: r.delta_ssim,
                fg_delta_psnr: r.fg_delta_psnr,
                bg_delta_psnr: r.bg_delta_psnr,
                sim_sr: r.sim_sr,
                sim_bicubic: r.sim_bicubic,
                failure: r.failure,
            },
        }
    }
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// One CSV line per report, with a header.
pub fn reports_csv(reports: &[SubimageReport]) -> String {
    csv_string(reports.iter().map(ReportRow::from))
}

pub fn parse_reports_csv(text: &str) -> Result<Vec<SubimageReport>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize::<ReportRow>()
        .map(|row| row.map(SubimageReport::from).map_err(|e| Error::Record(e.to_string())))
        .collect()
}

/// Aggregate of one sample class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sample: Sample,
    pub count: usize,
    pub mean_delta_psnr: f64,
    pub mean_delta_ssim: f64,
    /// Percentage of reports with a negative PSNR delta.
    pub failure_pct: f64,
    pub mean_sim_sr: f64,
    pub mean_sim_bicubic: f64,
    /// Mean over reports with a non-empty foreground.
    pub mean_fg_delta_psnr: Option<f64>,
    /// Mean over reports with a non-empty background.
    pub mean_bg_delta_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// In-sample row first when present.
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, sample: Sample) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.sample == sample)
    }

    pub fn to_csv(&self) -> String {
        csv_string(&self.rows)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:+.3}"))
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>5} {:>10} {:>10} {:>9} {:>7} {:>7} {:>10} {:>10}",
            "sample", "n", "dPSNR(dB)", "dSSIM", "failures", "sim_sr", "sim_bic", "fg dPSNR", "bg dPSNR"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>5} {:>+10.3} {:>+10.4} {:>8.1}% {:>7.3} {:>7.3} {:>10} {:>10}",
                r.sample.to_string(),
                r.count,
                r.mean_delta_psnr,
                r.mean_delta_ssim,
                r.failure_pct,
                r.mean_sim_sr,
                r.mean_sim_bicubic,
                fmt_opt(r.mean_fg_delta_psnr),
                fmt_opt(r.mean_bg_delta_psnr),
            )?;
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean deltas, failure percentage and mean edge similarity per sample class.
pub fn aggregate_reports(reports: &[SubimageReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no reports to aggregate".into()));
    }
    let rows = [Sample::InSample, Sample::OutOfSample]
        .into_iter()
        .filter_map(|sample| {
            let group: Vec<&EvaluationReport> = reports
                .iter()
                .filter(|r| r.sample == sample)
                .map(|r| &r.report)
                .collect();
            if group.is_empty() {
                return None;
            }
            let failures = group.iter().filter(|r| r.delta_psnr < 0.0).count();
            Some(SummaryRow {
                sample,
                count: group.len(),
                mean_delta_psnr: mean(group.iter().map(|r| r.delta_psnr)).expect("non-empty"),
                mean_delta_ssim: mean(group.iter().map(|r| r.delta_ssim)).expect("non-empty"),
                failure_pct: 100.0 * failures as f64 / group.len() as f64,
                mean_sim_sr: mean(group.iter().map(|r| r.sim_sr)).expect("non-empty"),
                mean_sim_bicubic: mean(group.iter().map(|r| r.sim_bicubic)).expect("non-empty"),
                mean_fg_delta_psnr: mean(group.iter().filter_map(|r| r.fg_delta_psnr)),
                mean_bg_delta_psnr: mean(group.iter().filter_map(|r| r.bg_delta_psnr)),
            })
        })
        .collect();
    Ok(Summary { rows })
}

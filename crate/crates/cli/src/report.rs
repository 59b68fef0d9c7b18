//! Run reports: JSON as the canonical format, CSV and text tables derived
//! from it.

use std::fmt::Write as _;
use std::path::Path;

use pob_core::abw::LadderOutcome;
use pob_core::netsim::DropStats;
use pob_core::roles::PoBOutput;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a run report ({message})")]
    Schema { path: String, message: String },
    #[error("{path}: report version {found}, expected {REPORT_VERSION}")]
    Version { path: String, found: u32 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengerRow {
    pub id: u32,
    pub corrupt: bool,
    pub delta_ns: Option<u64>,
    /// cnt·b·8/Δ_i, what this challenger alone would conclude.
    pub implied_bps: Option<f64>,
    /// Packets the verifier credited to this challenger.
    pub acknowledged: Option<u32>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repetition {
    pub index: u32,
    pub seed: u64,
    pub terminated: bool,
    pub output: Option<PoBOutput>,
    pub challengers: Vec<ChallengerRow>,
    pub drops: DropStats,
    pub challenge_bytes_sent: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub runs: u32,
    pub terminated: u32,
    pub measured_mean_bps: Option<f64>,
    /// Sample standard deviation; absent with fewer than two outputs.
    pub measured_std_bps: Option<f64>,
    pub guaranteed_mean_bps: Option<f64>,
    pub guaranteed_std_bps: Option<f64>,
    /// |mean measured − backhaul| / backhaul, in percent.
    pub error_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub version: u32,
    pub scenario: String,
    pub backhaul_bps: f64,
    pub theta_claimed_bps: f64,
    /// θ0, each challenger's send rate.
    pub challenger_bps: f64,
    pub challenge_bytes: u64,
    pub attack: String,
    pub n: u32,
    pub f: u32,
    pub k: u32,
    pub duration_ns: u64,
    pub repetitions: Vec<Repetition>,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderOutcome>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

impl Summary {
    pub fn from_repetitions(reps: &[Repetition], backhaul_bps: f64) -> Self {
        let outputs: Vec<&PoBOutput> = reps.iter().filter_map(|r| r.output.as_ref()).collect();
        let measured: Vec<f64> = outputs.iter().map(|o| o.measured_bw).collect();
        let guaranteed: Vec<f64> = outputs.iter().map(|o| o.guaranteed_bw).collect();
        let (measured_mean_bps, measured_std_bps) = mean_std(&measured);
        let (guaranteed_mean_bps, guaranteed_std_bps) = mean_std(&guaranteed);
        Summary {
            runs: reps.len() as u32,
            terminated: reps.iter().filter(|r| r.terminated).count() as u32,
            measured_mean_bps,
            measured_std_bps,
            guaranteed_mean_bps,
            guaranteed_std_bps,
            error_pct: measured_mean_bps.map(|m| (m - backhaul_bps).abs() / backhaul_bps * 100.0),
        }
    }
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// The estimate this report stands for: the ladder estimate when there
    /// is one, otherwise the mean measured bandwidth.
    pub fn headline_bps(&self) -> Option<f64> {
        match &self.ladder {
            Some(l) => Some(l.estimate_bps),
            None => self.summary.measured_mean_bps,
        }
    }

    /// Per-challenger rows: repetition, challenger, delta_ns, measured_bps,
    /// guaranteed_bps.
    pub fn challenger_csv(&self) -> Result<String, ReportError> {
        let alpha = f64::from(self.n - 2 * self.f.min(self.n / 2)) / f64::from(self.n - self.f);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["repetition", "challenger", "delta_ns", "measured_bps", "guaranteed_bps"])?;
        for rep in &self.repetitions {
            for c in &rep.challengers {
                let implied = c.implied_bps;
                w.write_record([
                    rep.index.to_string(),
                    c.id.to_string(),
                    c.delta_ns.map(|d| d.to_string()).unwrap_or_default(),
                    implied.map(|b| format!("{b:.0}")).unwrap_or_default(),
                    implied.map(|b| format!("{:.0}", b * alpha)).unwrap_or_default(),
                ])?;
            }
        }
        Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8"))
    }
}

/// Reads one report or a JSON array of reports.
pub fn load_reports(path: &Path) -> Result<Vec<RunReport>, ReportError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io { path: display.clone(), source })?;
    parse_reports(&text).map_err(|e| match e {
        ReportError::Schema { message, .. } => ReportError::Schema { path: display.clone(), message },
        ReportError::Version { found, .. } => ReportError::Version { path: display.clone(), found },
        other => other,
    })
}

pub fn parse_reports(text: &str) -> Result<Vec<RunReport>, ReportError> {
    let schema = |e: serde_json::Error| ReportError::Schema { path: "<input>".into(), message: e.to_string() };
    let value: serde_json::Value = serde_json::from_str(text).map_err(schema)?;
    let reports: Vec<RunReport> = if value.is_array() {
        serde_json::from_value(value).map_err(schema)?
    } else {
        vec![serde_json::from_value(value).map_err(schema)?]
    };
    if let Some(r) = reports.iter().find(|r| r.version != REPORT_VERSION) {
        return Err(ReportError::Version { path: "<input>".into(), found: r.version });
    }
    Ok(reports)
}

pub const TABLE_HEADER: [&str; 6] = [
    "Backhaul BW (Mbps)",
    "Challenger BW (Mbps)",
    "Challenge Data (MB)",
    "Attack",
    "Measured BW (Error %)",
    "Guaranteed BW (Mbps)",
];

fn table_cells(r: &RunReport) -> [String; 6] {
    let measured = match (r.headline_bps(), r.summary.error_pct) {
        (Some(m), Some(e)) if r.ladder.is_none() => format!("{:.1} ({e:.1}%)", m / 1e6),
        (Some(m), _) => format!("{:.1}", m / 1e6),
        (None, _) => "no output".into(),
    };
    let guaranteed = r.summary.guaranteed_mean_bps.filter(|_| r.ladder.is_none());
    [
        format!("{:.0}", r.backhaul_bps / 1e6),
        format!("{:.1}", r.challenger_bps / 1e6),
        format!("{:.2}", r.challenge_bytes as f64 / 1e6),
        r.attack.clone(),
        measured,
        guaranteed.map(|g| format!("{:.1}", g / 1e6)).unwrap_or_else(|| "--".into()),
    ]
}

/// One row per report under the six column headings.
pub fn render_table(reports: &[RunReport]) -> String {
    let rows: Vec<[String; 6]> = reports.iter().map(table_cells).collect();
    let mut widths: Vec<usize> = TABLE_HEADER.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", parts.join(" | ").trim_end()).unwrap();
    };
    line(&mut out, &TABLE_HEADER);
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")).unwrap();
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}

/// The table as CSV, one record per report.
pub fn summary_csv(reports: &[RunReport]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER)?;
    for r in reports {
        w.write_record(table_cells(r))?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8"))
}

//! Report files: JSON with a separated non-deterministic header, plus flat
//! CSV tables whose column order is pinned (summary columns follow the
//! retain/forget layout; continual columns follow R, NF, AF, CUS).

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{ContinualLog, EvalReport};
use crate::error::Result;

/// Timestamps and wall-clock live here so payload bytes stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportHeader {
    pub created_unix: u64,
    pub tool_version: String,
}

impl ReportHeader {
    pub fn now() -> Self {
        ReportHeader {
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport<T> {
    pub header: ReportHeader,
    pub payload: T,
}

/// Serialize a payload under a fresh header.
pub fn write_json<T: Serialize, P: AsRef<Path>>(path: P, payload: &T) -> Result<()> {
    let report = RunReport {
        header: ReportHeader::now(),
        payload,
    };
    fs::write(path, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

/// Deterministic JSON bytes of the payload alone (reproducibility checks).
pub fn payload_bytes<T: Serialize>(payload: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(payload)?)
}

impl From<serde_json::Error> for crate::DampError {
    fn from(e: serde_json::Error) -> Self {
        crate::DampError::Format(format!("json: {e}"))
    }
}

pub const SUMMARY_COLUMNS: &str = "method,retain_acc,forget_acc";
pub const SUMMARY_ADVERSARIAL_COLUMNS: &str =
    "method,retain_acc,forget_acc,fgsm_retain,fgsm_forget,pgd_retain,pgd_forget";
pub const CONTINUAL_COLUMNS: &str = "round,class,R,NF,AF,CUS";
pub const BIAS_SWEEP_COLUMNS: &str = "offset,retain_acc,forget_acc";
pub const SELECTIVITY_COLUMNS: &str = "method,stage,selectivity_pp";

/// One row per method, column order matching the accuracy tables.
pub fn summary_csv(reports: &[EvalReport], adversarial: bool) -> String {
    let mut out = String::new();
    if adversarial {
        out.push_str(SUMMARY_ADVERSARIAL_COLUMNS);
    } else {
        out.push_str(SUMMARY_COLUMNS);
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{:.2},{:.2}",
            r.method, r.retain_acc_pct, r.forget_acc_pct
        ));
        if adversarial {
            let (fr, ff) = r.fgsm.unwrap_or((f64::NAN, f64::NAN));
            let (pr, pf) = r.pgd.unwrap_or((f64::NAN, f64::NAN));
            out.push_str(&format!(",{fr:.2},{ff:.2},{pr:.2},{pf:.2}"));
        }
        out.push('\n');
    }
    out
}

/// One row per round, column order R, NF, AF, CUS at one decimal.
pub fn continual_csv(log: &ContinualLog) -> String {
    let mut out = String::from(CONTINUAL_COLUMNS);
    out.push('\n');
    for (i, r) in log.rounds.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{:.1},{:.1},{:.1},{:.1}\n",
            i + 1,
            r.forgotten_class,
            r.r_pct,
            r.nf_pct,
            r.af_pct,
            r.cus
        ));
    }
    out
}

/// Plot data for the bias sweep.
pub fn bias_sweep_csv(curve: &[(f64, f64, f64)]) -> String {
    let mut out = String::from(BIAS_SWEEP_COLUMNS);
    out.push('\n');
    for (offset, retain, forget) in curve {
        out.push_str(&format!("{offset},{retain:.2},{forget:.2}\n"));
    }
    out
}

/// Per-layer selectivity plot data.
pub fn selectivity_csv(rows: &[(String, usize, f64)]) -> String {
    let mut out = String::from(SELECTIVITY_COLUMNS);
    out.push('\n');
    for (method, stage, pp) in rows {
        out.push_str(&format!("{method},{stage},{pp:.2}\n"));
    }
    out
}

pub fn write_text<P: AsRef<Path>>(path: P, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

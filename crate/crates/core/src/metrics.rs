//! CSV output of training reports.
//!
//! ```text
//! round,loss,accuracy,duration_ms
//! 0,0.693147180560,0.512000,3.125
//! # params_digest 5f1c…
//! ```
//!
//! Loss and accuracy use fixed decimals so files from runs that should
//! agree can be compared byte for byte outside the duration column. An
//! aborted run ends with `# ABORT <code>` instead of the digest line.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::orchestration::TrainReport;

pub const CSV_HEADER: &str = "round,loss,accuracy,duration_ms";

pub fn metrics_csv(report: &TrainReport, abort_code: Option<u16>) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in &report.rounds {
        let _ = writeln!(out, "{},{:.12},{:.6},{:.3}", m.round, m.loss, m.accuracy, m.duration_us as f64 / 1000.0);
    }
    match (abort_code, report.final_digest) {
        (Some(code), _) => {
            let _ = writeln!(out, "# ABORT {code}");
        }
        (None, Some(d)) => {
            let _ = writeln!(out, "# params_digest {}", hex::encode(d));
        }
        (None, None) => {}
    }
    out
}

pub fn emit_metrics(report: &TrainReport, abort_code: Option<u16>, path: &Path) -> io::Result<()> {
    fs::write(path, metrics_csv(report, abort_code))
}

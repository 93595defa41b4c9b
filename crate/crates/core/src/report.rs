//! Report and trace emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Result, TtsoError};
use crate::evalbench::LodoReport;
use crate::sla::SolverTrace;

/// Write to a sibling temp file and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| TtsoError::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| TtsoError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| TtsoError::io(&tmp, e))?;
    f.sync_all().map_err(|e| TtsoError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| TtsoError::io(path, e))
}

/// Paths written by [`write_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
    pub trace_csv: PathBuf,
    pub config_echo: PathBuf,
}

fn json_bytes(v: &serde_json::Value) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| TtsoError::Input(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// The JSON object of a set of leave-one-domain-out reports. Keys are
/// sorted, so the layout is stable.
pub fn lodo_json(reports: &[LodoReport]) -> serde_json::Value {
    let methods: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            let mut acc = serde_json::Map::new();
            for (d, v) in r.domains.iter().zip(&r.mean_per_domain) {
                acc.insert(d.clone(), json!(v));
            }
            acc.insert("AVG".into(), json!(r.mean));
            json!({
                "method": r.method.name(),
                "accuracy": acc,
                "mean": r.mean,
                "std": r.std,
                "detail": r,
            })
        })
        .collect();
    json!({
        "config_hash": reports.first().map(|r| r.config_hash.clone()),
        "reports": methods,
    })
}

/// Write `report.csv`, `report.json`, `trace.csv` and `config.echo.toml`
/// into `out_dir`, each atomically.
pub fn write_report(
    out_dir: &Path,
    reports: &[LodoReport],
    trace_csv: &str,
    config: &RunConfig,
) -> Result<ReportPaths> {
    fs::create_dir_all(out_dir).map_err(|e| TtsoError::io(out_dir, e))?;
    let mut csv = String::new();
    if let Some(first) = reports.first() {
        csv.push_str(&first.csv_header());
    }
    for r in reports {
        csv.push_str(&r.csv_rows());
    }
    let paths = ReportPaths {
        report_csv: out_dir.join("report.csv"),
        report_json: out_dir.join("report.json"),
        trace_csv: out_dir.join("trace.csv"),
        config_echo: out_dir.join("config.echo.toml"),
    };
    write_atomic(&paths.report_csv, csv.as_bytes())?;
    write_atomic(&paths.report_json, &json_bytes(&lodo_json(reports))?)?;
    write_atomic(&paths.trace_csv, trace_csv.as_bytes())?;
    write_atomic(&paths.config_echo, config.to_toml()?.as_bytes())?;
    Ok(paths)
}

/// Write a JSON value with a trailing newline.
pub fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write_atomic(path, &json_bytes(v)?)
}

/// Concatenate solver traces, prefixing each row with its labels.
pub fn labelled_traces(parts: &[(String, &SolverTrace)]) -> String {
    let mut out = String::from("run,");
    let mut header_done = false;
    for (label, tr) in parts {
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if !header_done {
            out.push_str(header);
            out.push('\n');
            header_done = true;
        }
        for l in lines {
            out.push_str(label);
            out.push(',');
            out.push_str(l);
            out.push('\n');
        }
    }
    if !header_done {
        out.push_str(SolverTrace::CSV_HEADER);
    }
    out
}

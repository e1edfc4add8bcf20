//! Trace rows and their CSV form.
//!
//! Every run writes one CSV per trial.  The file starts with `#` comment
//! lines carrying a schema tag and a digest of the generating config, then a
//! header row, then one record per round starting at round 0.  Floats are
//! printed with Rust's shortest round-trip formatting, so re-reading a file
//! reproduces the values bit-for-bit; empty cells stand for values that do
//! not exist (no oracle supplied).  Wall-clock nanoseconds sit in the last
//! column so tooling can strip timing before hashing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One TRADES round.
#[derive(Clone, Debug, Serialize)]
pub struct TradesRow {
    pub iter: u64,
    pub err_to_oracle: Option<f64>,
    pub step_norm: f64,
    pub tracking_err_max: f64,
    pub mean_z_norm: f64,
    pub wall_ns: u64,
}

/// One TRADES-C round.
#[derive(Clone, Debug, Serialize)]
pub struct TradesCRow {
    pub iter: u64,
    pub err_to_oracle: Option<f64>,
    pub step_norm: f64,
    pub tracking_err_max: f64,
    pub mean_z_norm: f64,
    pub mean_y_norm: f64,
    pub cons_violation_inf: f64,
    pub dual_consensus_err: f64,
    pub kkt_primal_res: f64,
    pub kkt_dual_res: f64,
    pub lambda_min: f64,
    pub wall_ns: u64,
}

/// Column names and cell rendering for a row type.
pub trait TraceRow {
    /// Column names after `trial` and `normalized_err`; `wall_ns` must be
    /// last.
    fn columns() -> &'static [&'static str];
    fn cells(&self) -> Vec<String>;
    fn iter(&self) -> u64;
    fn err_to_oracle(&self) -> Option<f64>;
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl TraceRow for TradesRow {
    fn columns() -> &'static [&'static str] {
        &[
            "iter",
            "err_to_oracle",
            "step_norm",
            "tracking_err_max",
            "mean_z_norm",
            "wall_ns",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.iter.to_string(),
            fmt_opt(self.err_to_oracle),
            fmt_f64(self.step_norm),
            fmt_f64(self.tracking_err_max),
            fmt_f64(self.mean_z_norm),
            self.wall_ns.to_string(),
        ]
    }

    fn iter(&self) -> u64 {
        self.iter
    }

    fn err_to_oracle(&self) -> Option<f64> {
        self.err_to_oracle
    }
}

impl TraceRow for TradesCRow {
    fn columns() -> &'static [&'static str] {
        &[
            "iter",
            "err_to_oracle",
            "step_norm",
            "tracking_err_max",
            "mean_z_norm",
            "mean_y_norm",
            "cons_violation_inf",
            "dual_consensus_err",
            "kkt_primal_res",
            "kkt_dual_res",
            "lambda_min",
            "wall_ns",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.iter.to_string(),
            fmt_opt(self.err_to_oracle),
            fmt_f64(self.step_norm),
            fmt_f64(self.tracking_err_max),
            fmt_f64(self.mean_z_norm),
            fmt_f64(self.mean_y_norm),
            fmt_f64(self.cons_violation_inf),
            fmt_f64(self.dual_consensus_err),
            fmt_f64(self.kkt_primal_res),
            fmt_f64(self.kkt_dual_res),
            fmt_f64(self.lambda_min),
            self.wall_ns.to_string(),
        ]
    }

    fn iter(&self) -> u64 {
        self.iter
    }

    fn err_to_oracle(&self) -> Option<f64> {
        self.err_to_oracle
    }
}

pub const SCHEMA_TAG: &str = "nashtrack-trace-v1";

/// SHA-256 of a JSON value in canonical form (object keys sorted, which
/// serde_json's default map already guarantees), rendered as lowercase hex.
pub fn config_sha256(value: &serde_json::Value) -> String {
    let canonical = value.to_string();
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write one trial's rows.  `oracle_norm` is ‖x*‖ and turns `err_to_oracle`
/// into the normalized-error column; pass `None` when no oracle exists.
pub fn write_trial_csv<R: TraceRow>(
    path: &Path,
    config_digest: &str,
    trial: u64,
    oracle_norm: Option<f64>,
    rows: &[R],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# schema: {SCHEMA_TAG}")?;
    writeln!(w, "# config-sha256: {config_digest}")?;
    write!(w, "trial,iter,normalized_err")?;
    for c in R::columns().iter().skip(1) {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    for row in rows {
        let normalized = match (row.err_to_oracle(), oracle_norm) {
            (Some(e), Some(n)) if n > 0.0 => Some(e / n),
            _ => None,
        };
        let cells = row.cells();
        write!(w, "{trial},{},{}", cells[0], fmt_opt(normalized))?;
        for c in &cells[1..] {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed trace file: metadata comments, header, and raw cells.
#[derive(Clone, Debug)]
pub struct TraceFile {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<String>>,
}

impl TraceFile {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut meta = Vec::new();
        let mut columns: Vec<String> = Vec::new();
        let mut cells = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                match rest.split_once(':') {
                    Some((k, v)) => meta.push((k.trim().to_string(), v.trim().to_string())),
                    None => meta.push((rest.to_string(), String::new())),
                }
                continue;
            }
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            if columns.is_empty() {
                columns = fields;
            } else {
                if fields.len() != columns.len() {
                    return Err(Error::Config(format!(
                        "ragged trace row in {}: {} cells, header has {}",
                        path.display(),
                        fields.len(),
                        columns.len()
                    )));
                }
                cells.push(fields);
            }
        }
        if columns.is_empty() {
            return Err(Error::Config(format!(
                "trace file {} has no header row",
                path.display()
            )));
        }
        Ok(TraceFile {
            meta,
            columns,
            cells,
        })
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("trace has no column named {name:?}")))
    }

    /// Parse one column; empty cells become NaN.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        self.cells
            .iter()
            .map(|row| {
                let cell = &row[idx];
                if cell.is_empty() {
                    Ok(f64::NAN)
                } else {
                    cell.parse::<f64>().map_err(|_| {
                        Error::Config(format!("cell {cell:?} in column {name:?} is not a number"))
                    })
                }
            })
            .collect()
    }

    /// SHA-256 over header and raw cells with the named columns removed —
    /// the determinism fingerprint (timing columns go in `exclude`).
    pub fn digest_excluding(&self, exclude: &[&str]) -> String {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&i| !exclude.contains(&self.columns[i].as_str()))
            .collect();
        let mut h = Sha256::new();
        for &i in &keep {
            h.update(self.columns[i].as_bytes());
            h.update(b",");
        }
        h.update(b"\n");
        for row in &self.cells {
            for &i in &keep {
                h.update(row[i].as_bytes());
                h.update(b",");
            }
            h.update(b"\n");
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

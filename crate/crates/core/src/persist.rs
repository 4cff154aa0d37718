//! Boundary table files.
//!
//! A table is stored as two files: a CSV with a commented header and one
//! record per step, and a JSON sidecar (`<csv>.state.json`) carrying the
//! alive mass so a loaded table can be extended further. Floats in the CSV
//! are written with 17 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryRow, BoundaryTable};
use crate::error::{Error, Result};
use crate::spending::SpendingSequence;

pub const FORMAT_VERSION: u32 = 1;

const CSV_COLUMNS: &str = "n,lower,upper,eps_n,hit_lower_cum,hit_upper_cum";

/// Steps re-derived from the header parameters when a table is loaded.
const RECHECK_STEPS: u64 = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    alpha: f64,
    spending: SpendingSequence,
    n_max: u64,
    alive_start: i64,
    alive_mass: Vec<f64>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the header and per-step records.
pub fn write_csv<W: Write>(table: &BoundaryTable, out: W) -> Result<()> {
    write_csv_head(table, table.n_max(), out)
}

/// CSV of the first `n` rows, as if the table ended at `n`.
pub fn write_csv_head<W: Write>(table: &BoundaryTable, n: u64, mut out: W) -> Result<()> {
    let n = n.min(table.n_max());
    writeln!(out, "# mcpval boundary table")?;
    writeln!(out, "# format_version={FORMAT_VERSION}")?;
    writeln!(out, "# alpha={}", fmt_f64(table.alpha()))?;
    writeln!(out, "# epsilon={}", fmt_f64(table.epsilon()))?;
    writeln!(out, "# spending={}", table.spending().descriptor())?;
    writeln!(out, "# n_max={n}")?;
    writeln!(out, "{CSV_COLUMNS}")?;
    for r in table.rows().take(n as usize) {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n,
            r.lower,
            r.upper,
            fmt_f64(r.eps),
            fmt_f64(r.hit_lower),
            fmt_f64(r.hit_upper)
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

/// Writes `path` and its sidecar.
pub fn save(table: &BoundaryTable, path: &Path) -> Result<()> {
    write_csv(table, BufWriter::new(File::create(path)?))?;
    let (alive_start, alive) = table.alive();
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        alpha: table.alpha(),
        spending: table.spending().clone(),
        n_max: table.n_max(),
        alive_start,
        alive_mass: alive.to_vec(),
    };
    let mut w = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer(&mut w, &sidecar)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Default)]
struct Header {
    version: Option<u32>,
    alpha: Option<f64>,
    epsilon: Option<f64>,
    spending: Option<String>,
    n_max: Option<u64>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_field<T: std::str::FromStr>(value: &str, what: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| format_err(format!("line {line}: cannot parse {what} from {value:?}")))
}

fn read_csv<R: Read>(input: R) -> Result<(Header, Vec<BoundaryRow>)> {
    let mut header = Header::default();
    let mut rows = Vec::new();
    let mut seen_columns = false;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.trim().split_once('=') {
                match key.trim() {
                    "format_version" => header.version = Some(parse_field(value, key, lineno)?),
                    "alpha" => header.alpha = Some(parse_field(value, key, lineno)?),
                    "epsilon" => header.epsilon = Some(parse_field(value, key, lineno)?),
                    "spending" => header.spending = Some(value.trim().to_string()),
                    "n_max" => header.n_max = Some(parse_field(value, key, lineno)?),
                    _ => {}
                }
            }
            continue;
        }
        if !seen_columns {
            if line != CSV_COLUMNS {
                return Err(format_err(format!("line {lineno}: unexpected column header {line:?}")));
            }
            seen_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format_err(format!("line {lineno}: expected 6 fields, got {}", fields.len())));
        }
        rows.push(BoundaryRow {
            n: parse_field(fields[0], "n", lineno)?,
            lower: parse_field(fields[1], "lower", lineno)?,
            upper: parse_field(fields[2], "upper", lineno)?,
            eps: parse_field(fields[3], "eps_n", lineno)?,
            hit_lower: parse_field(fields[4], "hit_lower_cum", lineno)?,
            hit_upper: parse_field(fields[5], "hit_upper_cum", lineno)?,
        });
    }
    Ok((header, rows))
}

/// Loads a table written by [`save`], checking the header against the
/// sidecar, re-deriving the first steps from the stored parameters, and
/// checking mass conservation.
pub fn load(path: &Path) -> Result<BoundaryTable> {
    let (header, rows) = read_csv(File::open(path)?)?;
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;

    let version = header.version.ok_or_else(|| format_err("missing format_version"))?;
    if version != FORMAT_VERSION || sidecar.format_version != FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported format version {version} (sidecar {}), expected {FORMAT_VERSION}",
            sidecar.format_version
        )));
    }
    let alpha = header.alpha.ok_or_else(|| format_err("missing alpha"))?;
    let epsilon = header.epsilon.ok_or_else(|| format_err("missing epsilon"))?;
    let spending = header.spending.ok_or_else(|| format_err("missing spending"))?;
    let n_max = header.n_max.ok_or_else(|| format_err("missing n_max"))?;

    if alpha != sidecar.alpha {
        return Err(Error::ParameterMismatch(format!(
            "alpha is {alpha} in the CSV header but {} in the state file",
            sidecar.alpha
        )));
    }
    if epsilon != sidecar.spending.epsilon() || spending != sidecar.spending.descriptor() {
        return Err(Error::ParameterMismatch(format!(
            "spending ({spending}, epsilon {epsilon}) differs from the state file ({}, epsilon {})",
            sidecar.spending.descriptor(),
            sidecar.spending.epsilon()
        )));
    }
    if n_max != sidecar.n_max || rows.len() as u64 != n_max {
        return Err(format_err(format!(
            "n_max {n_max} disagrees with {} records / state n_max {}",
            rows.len(),
            sidecar.n_max
        )));
    }
    if let Some(bad) = rows.iter().enumerate().find(|(i, r)| r.n != *i as u64 + 1) {
        return Err(format_err(format!("record {} carries n = {}", bad.0 + 1, bad.1.n)));
    }
    let last = rows.last().ok_or_else(|| format_err("no records"))?;
    if sidecar.alive_start != last.lower + 1 || sidecar.alive_mass.len() as i64 != last.upper - last.lower - 1 {
        return Err(format_err("alive mass window does not match the last boundaries"));
    }

    let check = BoundaryTable::build(alpha, sidecar.spending.clone(), n_max.min(RECHECK_STEPS))?;
    for (stored, fresh) in rows.iter().zip(check.rows()) {
        if stored.lower != fresh.lower || stored.upper != fresh.upper {
            return Err(Error::ParameterMismatch(format!(
                "stored boundaries at n = {} are ({}, {}) but alpha = {alpha} with {spending} \
                 gives ({}, {})",
                stored.n, stored.lower, stored.upper, fresh.lower, fresh.upper
            )));
        }
    }

    let table = BoundaryTable::from_parts(alpha, sidecar.spending, rows, sidecar.alive_start, sidecar.alive_mass);
    let defect = table.mass_defect();
    if defect.is_nan() || defect > conservation_tolerance(n_max) {
        return Err(Error::MassDefect { defect });
    }
    Ok(table)
}

/// Allowed drift in `sum(alive) + hits = 1`: `1e-10` per `1e4` steps.
pub fn conservation_tolerance(n: u64) -> f64 {
    1e-10 * (n as f64 / 1e4).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> BoundaryTable {
        BoundaryTable::build(0.05, SpendingSequence::new_default(1e-3, 1000).unwrap(), 500).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let t = table();
        save(&t, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn loaded_table_extends_like_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        save(&table(), &path).unwrap();
        let mut back = load(&path).unwrap();
        back.extend_to(900).unwrap();
        let fresh = BoundaryTable::build(0.05, SpendingSequence::new_default(1e-3, 1000).unwrap(), 900).unwrap();
        assert_eq!(back, fresh);
    }

    #[test]
    fn tampered_alpha_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        save(&table(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("# alpha=5.0000000000000003e-2", "# alpha=6.0000000000000003e-2");
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load(&path), Err(Error::ParameterMismatch(_))));

        // Consistent tampering of both files is caught by re-derivation.
        save(&table(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("# alpha=5.0000000000000003e-2", "# alpha=2.0000000000000001e-1")).unwrap();
        let side = sidecar_path(&path);
        let state = std::fs::read_to_string(&side).unwrap();
        std::fs::write(&side, state.replace("\"alpha\":0.05", "\"alpha\":0.2")).unwrap();
        assert!(matches!(load(&path), Err(Error::ParameterMismatch(_))));
    }

    #[test]
    fn corrupt_mass_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        save(&table(), &path).unwrap();
        let side = sidecar_path(&path);
        let mut state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&side).unwrap()).unwrap();
        state["alive_mass"][3] = serde_json::json!(0.5);
        std::fs::write(&side, state.to_string()).unwrap();
        assert!(matches!(load(&path), Err(Error::MassDefect { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        save(&table(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("format_version=1", "format_version=7")).unwrap();
        match load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("version 7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_uses_seventeen_digits() {
        let mut buf = Vec::new();
        write_csv(&table(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row2 = text.lines().find(|l| l.starts_with("2,")).unwrap();
        let eps = row2.split(',').nth(3).unwrap();
        let mantissa = eps.split('e').next().unwrap().replace('.', "");
        assert_eq!(mantissa.len(), 17, "{eps}");
    }
}

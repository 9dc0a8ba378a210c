//! CSV writing and reading for bundles.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same bits (`{:?}` formatting), so equal runs give equal bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kinwealth_core::Agent;

use crate::CliError;

/// Shortest round-trip decimal form of `v`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Empty field for `None`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator,
    I::Item: IntoIterator,
    <I::Item as IntoIterator>::Item: AsRef<[u8]>,
{
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(CliError::io(ctx()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| CliError::Io {
        context: ctx(),
        source: e.into(),
    };
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row).map_err(wrap)?;
    }
    w.flush().map_err(CliError::io(ctx()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(CliError::io(format!("writing {}", path.display())))?;
    f.write_all(text.as_bytes())
        .map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn write_agents(path: &Path, agents: &[Agent]) -> Result<(), CliError> {
    write_csv(
        path,
        &["x", "v"],
        agents.iter().map(|a| [fmt_f64(a.x), fmt_f64(a.v)]),
    )
}

fn parse_field(path: &Path, line: u64, name: &str, field: Option<&str>) -> Result<f64, CliError> {
    let raw = field.ok_or_else(|| {
        CliError::Input(format!("{}:{line}: missing column '{name}'", path.display()))
    })?;
    raw.trim().parse::<f64>().map_err(|_| {
        CliError::Input(format!(
            "{}:{line}: '{raw}' in column '{name}' is not a number",
            path.display()
        ))
    })
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn column(headers: &csv::StringRecord, path: &Path, name: &str) -> Result<usize, CliError> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
        CliError::Input(format!("{}: no '{name}' column in header", path.display()))
    })
}

/// Read an `x,v` snapshot; every value must be a finite nonnegative number.
pub fn read_agents(path: &Path) -> Result<Vec<Agent>, CliError> {
    let mut r = open_reader(path)?;
    let headers = r
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    let (ix, iv) = (column(&headers, path, "x")?, column(&headers, path, "v")?);
    let mut agents = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let x = parse_field(path, line, "x", rec.get(ix))?;
        let v = parse_field(path, line, "v", rec.get(iv))?;
        if !(x.is_finite() && v.is_finite() && x >= 0.0 && v >= 0.0) {
            return Err(CliError::Input(format!(
                "{}:{line}: state ({x}, {v}) must be finite and nonnegative",
                path.display()
            )));
        }
        agents.push(Agent::new(x, v));
    }
    Ok(agents)
}

/// Read the named numeric columns of a CSV; empty fields become `None`.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<Option<f64>>>, CliError> {
    let mut r = open_reader(path)?;
    let headers = r
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    let idx = names
        .iter()
        .map(|n| column(&headers, path, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        for (k, (&j, name)) in idx.iter().zip(names).enumerate() {
            let cell = rec.get(j).map(str::trim).unwrap_or("");
            cols[k].push(if cell.is_empty() {
                None
            } else {
                Some(parse_field(path, line, name, Some(cell))?)
            });
        }
    }
    Ok(cols)
}

/// Read a `key,value` CSV into ordered pairs.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let mut r = open_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let key = rec.get(0).unwrap_or("").to_string();
        let cell = rec.get(1).map(str::trim).unwrap_or("");
        let value = if cell.is_empty() {
            None
        } else {
            Some(parse_field(path, i as u64 + 2, &key, Some(cell))?)
        };
        out.push((key, value));
    }
    Ok(out)
}

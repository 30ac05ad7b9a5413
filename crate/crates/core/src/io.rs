//! CSV ingestion and emission, number formatting and flat config files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, IngestError, Result};

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRoles {
    pub treatment: String,
    pub outcome: Option<String>,
    pub id: Option<String>,
    /// `None` takes every remaining column, in file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self {
            treatment: "t".into(),
            outcome: Some("y".into()),
            id: Some("id".into()),
            covariates: None,
        }
    }
}

/// Formats `x` like C's `%.17g`: 17 significant digits, trailing zeros
/// dropped, exponent form outside `1e-5 <= |x| < 1e17`.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    if !(-5..17).contains(&exp) {
        let m = trim_fraction(&format!("{}.{}", &digits[..1], &digits[1..]));
        let esign = if exp < 0 { '-' } else { '+' };
        return format!("{sign}{m}e{esign}{:02}", exp.abs());
    }
    let body = if exp >= 0 {
        let int_len = exp as usize + 1;
        format!("{}.{}", &digits[..int_len], &digits[int_len..])
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    format!("{sign}{}", trim_fraction(&body))
}

fn trim_fraction(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?)))
}

/// Writes `rows` under `header` as an LF-terminated CSV.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `data` with columns `id, t, [y,] covariates...`.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut header = vec!["id".to_string(), "t".to_string()];
    if data.outcome().is_some() {
        header.push("y".into());
    }
    header.extend(data.covariate_names().iter().cloned());
    let rows: Vec<Vec<String>> = (0..data.n())
        .map(|i| {
            let mut row = vec![data.ids()[i].clone(), data.treatment()[i].to_string()];
            if let Some(y) = data.outcome() {
                row.push(fmt_f64(y[i]));
            }
            row.extend((1..data.dim()).map(|c| fmt_f64(data.design()[(i, c)])));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn find_column(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()).into())
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = field.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() && !trimmed.is_empty() => Ok(v),
        _ => Err(IngestError::MissingValue {
            row,
            column: column.to_string(),
        }
        .into()),
    }
}

fn parse_treatment(field: &str, row: usize, column: &str) -> Result<u8> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Err(IngestError::MissingValue {
            row,
            column: column.to_string(),
        }
        .into());
    }
    match trimmed.parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(IngestError::NonBinaryTreatment {
            row,
            value: trimmed.to_string(),
        }
        .into()),
    }
}

/// Reads a header-row CSV into a validated [`Dataset`]. Rows are numbered
/// from 1 for the first data row.
pub fn ingest_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| malformed(&e))?
        .clone();
    let t_col = find_column(&header, &roles.treatment)?;
    let y_col = roles.outcome.as_deref().map(|n| find_column(&header, n)).transpose()?;
    let id_col = match roles.id.as_deref() {
        Some(n) => header.iter().position(|h| h == n),
        None => None,
    };
    let cov_names: Vec<String> = match &roles.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t_col && Some(*i) != y_col && Some(*i) != id_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    if cov_names.is_empty() {
        return Err(Error::domain("no covariate columns"));
    }
    let cov_cols = cov_names
        .iter()
        .map(|n| find_column(&header, n))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(&e))?;
        let row = r + 1;
        t.push(parse_treatment(&record[t_col], row, &roles.treatment)?);
        if let (Some(c), Some(name)) = (y_col, roles.outcome.as_deref()) {
            y.push(parse_number(&record[c], row, name)?);
        }
        ids.push(match id_col {
            Some(c) => record[c].to_string(),
            None => row.to_string(),
        });
        for (&c, name) in cov_cols.iter().zip(&cov_names) {
            values.push(parse_number(&record[c], row, name)?);
        }
    }
    if t.is_empty() {
        return Err(Error::domain("file has no data rows"));
    }
    let covariates = DMatrix::from_row_slice(t.len(), cov_names.len(), &values);
    Dataset::with_ids(ids, cov_names, &covariates, t, y_col.map(|_| y))
}

fn malformed(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    IngestError::Malformed {
        line,
        message: e.to_string(),
    }
    .into()
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::domain(format!("config line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::domain(format!("config line {}: empty key", i + 1)));
        }
        out.insert(key.replace('_', "-"), value.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes fitted scores as `id, t, score`.
pub fn write_scores_csv(path: &Path, data: &Dataset, scores: &[f64]) -> Result<()> {
    if scores.len() != data.n() {
        return Err(Error::domain("score count does not match subjects"));
    }
    let header = ["id", "t", "score"].map(String::from);
    let rows: Vec<Vec<String>> = (0..data.n())
        .map(|i| vec![data.ids()[i].clone(), data.treatment()[i].to_string(), fmt_f64(scores[i])])
        .collect();
    write_csv(path, &header, &rows)
}

/// Reads the `score` column of a score file and checks its `id` column, when
/// present, against `data`.
pub fn read_scores_csv(path: &Path, data: &Dataset) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(File::open(path)?);
    let header = reader.headers().map_err(|e| malformed(&e))?.clone();
    let s_col = find_column(&header, "score")?;
    let id_col = header.iter().position(|h| h == "id");
    let mut scores = Vec::with_capacity(data.n());
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(&e))?;
        let row = r + 1;
        if let Some(c) = id_col {
            if data.ids().get(r).map(String::as_str) != Some(&record[c]) {
                return Err(Error::domain(format!(
                    "score file row {row}: id `{}` does not match the data",
                    &record[c]
                )));
            }
        }
        let p = parse_number(&record[s_col], row, "score")?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("score file row {row}: score {p} outside (0, 1)")));
        }
        scores.push(p);
    }
    if scores.len() != data.n() {
        return Err(Error::domain(format!(
            "score file has {} rows, data has {}",
            scores.len(),
            data.n()
        )));
    }
    Ok(scores)
}

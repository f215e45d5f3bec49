//! Dataset CSV files: a header row, one sample per row.

use std::collections::BTreeMap;
use std::path::Path;

use acdc_core::{Dataset, Matrix, Vector};
use anyhow::{anyhow, Context};

use crate::error::{CliError, CliResult};

/// Class names in index order.
pub type LabelMapping = Vec<String>;

fn read_table(path: &Path, column: &str) -> CliResult<(Vec<String>, Vec<Vec<String>>, usize)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::field("column", format!("`{column}` not found in header of {}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows, col))
}

fn parse_features(path: &Path, header: &[String], rows: &[Vec<String>], skip: usize) -> CliResult<Matrix> {
    let cols = header.len() - 1;
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate().filter(|(c, _)| *c != skip) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                CliError::field(
                    "data",
                    format!("{}: row {}, column `{}`: `{cell}` is not a number", path.display(), r + 1, header[c]),
                )
            })?;
            data.push(v);
        }
    }
    Matrix::new(rows.len(), cols, data).map_err(|e| CliError::Other(e.into()))
}

/// Sorted-unique label mapping. Labels that all parse as integers sort
/// numerically so `"10"` comes after `"9"`; anything else sorts as text.
pub fn label_mapping<'a>(labels: impl Iterator<Item = &'a str>) -> LabelMapping {
    let mut uniq: Vec<String> = labels.map(str::to_string).collect();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.iter().all(|l| l.parse::<i64>().is_ok()) {
        uniq.sort_by_key(|l| l.parse::<i64>().expect("checked above"));
    }
    uniq
}

/// Reads a classification CSV. Every column except `label_column` is a
/// feature.
pub fn ingest_csv(path: &Path, label_column: &str) -> CliResult<(Dataset, LabelMapping)> {
    let (header, rows, col) = read_table(path, label_column)?;
    if rows.is_empty() {
        return Err(CliError::field("data", format!("{} has no rows", path.display())));
    }
    let mapping = label_mapping(rows.iter().map(|r| r[col].as_str()));
    if mapping.len() < 2 {
        return Err(CliError::field("data", format!("{} has fewer than two classes", path.display())));
    }
    let index: BTreeMap<&str, usize> = mapping.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let labels = rows.iter().map(|r| index[r[col].as_str()]).collect();
    let x = parse_features(path, &header, &rows, col)?;
    let data = Dataset::new(x, labels, mapping.len()).map_err(|e| CliError::Other(e.into()))?;
    Ok((data, mapping))
}

/// Writes features as `x0..x{d-1}` followed by a `label` column holding
/// the class name from `mapping`.
pub fn export_csv(data: &Dataset, mapping: &[String], path: &Path) -> anyhow::Result<()> {
    if mapping.len() != data.classes() {
        return Err(anyhow!("mapping has {} names for {} classes", mapping.len(), data.classes()));
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = (0..data.feature_dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x(i).iter().map(|v| v.to_string()).collect();
        row.push(mapping[data.label(i)].clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a regression CSV with the response in `target`.
pub fn ingest_regression_csv(path: &Path, target: &str) -> CliResult<(Matrix, Vector)> {
    let (header, rows, col) = read_table(path, target)?;
    if rows.is_empty() {
        return Err(CliError::field("data", format!("{} has no rows", path.display())));
    }
    let b = rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row[col].trim().parse::<f64>().map_err(|_| {
                CliError::field(
                    "data",
                    format!("{}: row {}, column `{target}`: `{}` is not a number", path.display(), r + 1, row[col]),
                )
            })
        })
        .collect::<CliResult<Vector>>()?;
    Ok((parse_features(path, &header, &rows, col)?, b))
}

pub fn export_regression_csv(a: &Matrix, b: &[f64], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = (0..a.cols()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (i, y) in b.iter().enumerate() {
        let mut row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

//! CSV ingestion/serialization and the JSON schema manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Column, ColumnKind, ColumnSpec, Dataset, Schema, MAX_DISCRETE_LEVELS};
use crate::error::{Error, Result};

/// Outcome of loading a CSV file: the complete-case dataset plus how many
/// rows were dropped for missing or unparseable cells.
#[derive(Debug)]
pub struct CsvLoad {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

/// Reads a schema manifest: a JSON array of `{name, kind, role}` objects.
pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let specs: Vec<ColumnSpec> = serde_json::from_str(&text)?;
    Schema::new(specs)
}

/// Writes a schema manifest as pretty-printed JSON.
pub fn save_schema(schema: &Schema, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(schema.columns())?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a CSV file against `schema`. The header must contain exactly the
/// schema's column names (any order). Rows with a missing or unparseable
/// cell are dropped and counted; at least one row must survive.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<CsvLoad> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let missing: Vec<String> = schema
        .columns()
        .iter()
        .filter(|s| !headers.iter().any(|h| *h == s.name))
        .map(|s| s.name.clone())
        .collect();
    let unexpected: Vec<String> = headers
        .iter()
        .filter(|h| schema.columns().iter().all(|s| s.name != **h))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::HeaderMismatch {
            missing,
            unexpected,
        });
    }
    // Position of each schema column in the file.
    let positions: Vec<usize> = schema
        .columns()
        .iter()
        .map(|s| headers.iter().position(|h| *h == s.name).unwrap())
        .collect();

    enum Raw {
        Continuous(Vec<f64>),
        Discrete(Vec<String>),
    }
    let mut raw: Vec<Raw> = schema
        .columns()
        .iter()
        .map(|s| match s.kind {
            ColumnKind::Continuous => Raw::Continuous(Vec::new()),
            ColumnKind::Discrete => Raw::Discrete(Vec::new()),
        })
        .collect();

    let mut dropped = 0usize;
    let mut parsed_row: Vec<Option<f64>> = Vec::new();
    let mut label_row: Vec<Option<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        parsed_row.clear();
        label_row.clear();
        let mut ok = true;
        for (spec, &pos) in schema.columns().iter().zip(&positions) {
            let cell = record.get(pos).map(str::trim).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
            {
                ok = false;
                break;
            }
            match spec.kind {
                ColumnKind::Continuous => match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        parsed_row.push(Some(v));
                        label_row.push(None);
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                },
                ColumnKind::Discrete => {
                    parsed_row.push(None);
                    label_row.push(Some(cell.to_string()));
                }
            }
        }
        if !ok {
            dropped += 1;
            continue;
        }
        for (i, raw_col) in raw.iter_mut().enumerate() {
            match raw_col {
                Raw::Continuous(v) => v.push(parsed_row[i].unwrap()),
                Raw::Discrete(v) => v.push(label_row[i].take().unwrap()),
            }
        }
    }

    let n = raw
        .first()
        .map(|c| match c {
            Raw::Continuous(v) => v.len(),
            Raw::Discrete(v) => v.len(),
        })
        .unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid(format!(
            "no complete rows in {} ({dropped} dropped)",
            path.display()
        )));
    }

    let mut columns = Vec::with_capacity(raw.len());
    for (spec, raw_col) in schema.columns().iter().zip(raw) {
        match raw_col {
            Raw::Continuous(values) => columns.push(Column::Continuous(values)),
            Raw::Discrete(labels) => {
                let mut level_ids: BTreeMap<String, u32> = BTreeMap::new();
                for label in &labels {
                    let next = level_ids.len() as u32;
                    level_ids.entry(label.clone()).or_insert(next);
                }
                if level_ids.len() > MAX_DISCRETE_LEVELS {
                    return Err(Error::TooManyLevels {
                        column: spec.name.clone(),
                        count: level_ids.len(),
                        cap: MAX_DISCRETE_LEVELS,
                    });
                }
                // Re-code against the sorted level table.
                let levels: Vec<String> = level_ids.keys().cloned().collect();
                for (i, level) in levels.iter().enumerate() {
                    level_ids.insert(level.clone(), i as u32);
                }
                let codes = labels.iter().map(|l| level_ids[l]).collect();
                columns.push(Column::Discrete { levels, codes });
            }
        }
    }

    Ok(CsvLoad {
        dataset: Dataset::new(schema.clone(), columns)?,
        dropped_rows: dropped,
    })
}

/// Writes a dataset as CSV in schema column order. Continuous cells use the
/// shortest representation that round-trips through `f64`.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(ds.schema().columns().iter().map(|s| s.name.as_str()))?;
    let mut record = Vec::with_capacity(ds.schema().len());
    for row in 0..ds.n() {
        record.clear();
        for spec in ds.schema().columns() {
            let cell = match ds.column(&spec.name)? {
                Column::Continuous(v) => super::format_value(v[row]),
                Column::Discrete { levels, codes } => levels[codes[row] as usize].clone(),
            };
            record.push(cell);
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

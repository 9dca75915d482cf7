//! Dataset loading: a directory of molecule JSON files, or one JSON-lines file.
//!
//! Molecule ids are the file stem (directory form) or the 0-based line number among
//! non-blank lines (JSON-lines form). Finetuning labels come from a CSV with header
//! `id,label`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TrainError;
use crate::molio::{parse_json, parse_molfile, Molecule};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub molecule: Molecule,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn data_err(path: &Path, id: &str, e: impl std::fmt::Display) -> TrainError {
    TrainError::Data(format!("{} [{id}]: {e}", path.display()))
}

/// Loads every `*.json` (and `*.mol`) file of a directory, sorted by file name, or each
/// line of a JSON-lines file.
pub fn load_dataset(path: &Path) -> Result<Vec<Record>, TrainError> {
    let meta = fs::metadata(path).map_err(|e| io_err(path, e))?;
    let records = if meta.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "mol")))
            .collect();
        files.sort();
        files
            .iter()
            .map(|file| {
                let id = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                let text = fs::read_to_string(file).map_err(|e| io_err(file, e))?;
                let molecule = if file.extension().is_some_and(|e| e == "mol") {
                    parse_molfile(&text)
                } else {
                    parse_json(&text)
                }
                .map_err(|e| data_err(file, &id, e))?;
                Ok(Record { id, molecule })
            })
            .collect::<Result<Vec<_>, TrainError>>()?
    } else {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        parse_jsonl(&text).map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?
    };
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(records)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Record>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, line)| {
            parse_json(line)
                .map(|molecule| Record {
                    id: k.to_string(),
                    molecule,
                })
                .map_err(|e| format!("record {k}: {e}"))
        })
        .collect()
}

#[derive(serde::Deserialize)]
struct LabelRow {
    id: String,
    label: f64,
}

/// Reads a headed `id,label` CSV and pairs each record with its label, in dataset order.
pub fn attach_labels(records: &[Record], csv_text: &str) -> Result<Vec<(Record, f64)>, TrainError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let mut labels = HashMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| TrainError::Data(format!("labels: {e}")))?;
        if labels.insert(row.id.clone(), row.label).is_some() {
            return Err(TrainError::Data(format!(
                "labels: duplicate id `{}`",
                row.id
            )));
        }
    }
    if labels.len() != records.len() {
        return Err(TrainError::Data(format!(
            "{} labels for {} molecules",
            labels.len(),
            records.len()
        )));
    }
    records
        .iter()
        .map(|r| {
            labels
                .get(&r.id)
                .map(|&y| (r.clone(), y))
                .ok_or_else(|| TrainError::Data(format!("no label for molecule `{}`", r.id)))
        })
        .collect()
}

//! Report rows, CSV/JSON emission and schema validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Schema shipped with the crate; emitted CSVs must match it.
pub const SCHEMA: &str = include_str!("../schema/report_schema.json");

/// One cell of the undefended attack grid (batch size × inference budget).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub config_hash: String,
    pub seed: u64,
    pub bits: u8,
    pub batch_size: usize,
    pub inference_budget: usize,
    pub hamming_distance: usize,
    pub run: usize,
    pub clean_acc: f64,
    pub attacked_acc: f64,
    pub gradient_flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub config_hash: String,
    pub seed: u64,
    pub bits: u8,
    pub noise_std: f64,
    pub noise_samples: usize,
    pub inference_budget: usize,
    pub run: usize,
    pub clean_acc: f64,
    pub attacked_acc: f64,
    pub gradient_flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub alpha: f64,
    pub m_tcu: f64,
    pub inference_budget: usize,
    pub run: usize,
    pub attacked_acc: f64,
    pub flips_on_protected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockPruneRow {
    pub config_hash: String,
    pub seed: u64,
    pub group: usize,
    pub clusters: usize,
    pub m_l: f64,
    pub inference_budget: usize,
    pub run: usize,
    pub attacked_acc: f64,
    pub locked_acc: f64,
    pub pruned_acc: f64,
    pub flagged_groups: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub config_hash: String,
    pub seed: u64,
    pub alpha: f64,
    pub eta: Option<f64>,
    pub m_tcu: f64,
    pub m_l: f64,
    pub total_overhead: f64,
    pub mean_acc: f64,
    pub worst_acc: f64,
    pub meets_target: bool,
    pub pareto: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCsvRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub hamming_distance: usize,
    pub inference_budget: usize,
    pub batch_size: usize,
    pub run: usize,
    pub attacked_acc: f64,
    pub resumed_acc: f64,
    pub gradient_flips: usize,
    pub flips_on_protected: usize,
    pub flagged_groups: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCsvRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub bits: u8,
    pub prior_acc: f64,
    pub best_acc: f64,
    pub worst_acc: f64,
    pub mean_acc: f64,
    pub pre_overhead: f64,
    pub post_overhead: f64,
    pub total_overhead: f64,
}

/// Plot data: mean accuracy against the attacker's inference budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub inference_budget: usize,
    pub mean_attacked_acc: f64,
    pub mean_resumed_acc: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => HarnessError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        HarnessError::Config(format!("{}: {e}", path.display()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path.to_owned()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    String,
    OptionalString,
    Integer,
    Number,
    OptionalNumber,
    Boolean,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ColumnType,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReportSchema {
    pub version: u32,
    /// CSV file name (relative to the output directory) to its columns.
    pub files: BTreeMap<String, Vec<Column>>,
}

impl ReportSchema {
    pub fn bundled() -> Self {
        serde_json::from_str(SCHEMA).expect("bundled schema parses")
    }

    /// Check header and every cell of `path` against the schema entry `name`.
    pub fn validate(&self, name: &str, path: &Path) -> Result<usize> {
        let columns = self
            .files
            .get(name)
            .ok_or_else(|| HarnessError::Config(format!("{name} is not described by the schema")))?;
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
        let expected: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        if header != expected {
            return Err(HarnessError::Config(format!("{name}: header {header:?} != schema {expected:?}")));
        }
        let mut rows = 0;
        for record in r.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            for (cell, col) in record.iter().zip(columns) {
                if !cell_ok(cell, col.kind) {
                    return Err(HarnessError::Config(format!(
                        "{name} row {rows}: {:?} is not a valid {:?} for column {}",
                        cell, col.kind, col.name
                    )));
                }
            }
            rows += 1;
        }
        Ok(rows)
    }
}

fn cell_ok(cell: &str, kind: ColumnType) -> bool {
    match kind {
        ColumnType::String => !cell.is_empty(),
        ColumnType::OptionalString => true,
        ColumnType::Integer => cell.parse::<i64>().is_ok(),
        ColumnType::Number => cell.parse::<f64>().is_ok(),
        ColumnType::OptionalNumber => cell.is_empty() || cell.parse::<f64>().is_ok(),
        ColumnType::Boolean => matches!(cell, "true" | "false"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_checks_cells() {
        assert!(cell_ok("NaN", ColumnType::Number));
        assert!(cell_ok("", ColumnType::OptionalNumber));
        assert!(!cell_ok("", ColumnType::Number));
        assert!(!cell_ok("1.5", ColumnType::Integer));
        assert!(!cell_ok("yes", ColumnType::Boolean));
    }

    #[test]
    fn bundled_schema_matches_row_types() {
        let schema = ReportSchema::bundled();
        assert_eq!(schema.version, 1);
        let dir = std::env::temp_dir().join(format!("bitlock-schema-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lock_vs_prune.csv");
        let row = LockPruneRow {
            config_hash: "ab".into(),
            seed: 1,
            group: 4,
            clusters: 16,
            m_l: 0.1,
            inference_budget: 20,
            run: 0,
            attacked_acc: 0.1,
            locked_acc: 0.5,
            pruned_acc: 0.4,
            flagged_groups: 3,
            precision: None,
            recall: Some(1.0),
        };
        write_csv(&path, std::slice::from_ref(&row)).unwrap();
        assert_eq!(schema.validate("lock_vs_prune.csv", &path).unwrap(), 1);
        assert_eq!(read_csv::<LockPruneRow>(&path).unwrap(), vec![row]);
        assert!(schema.validate("attack_grid.csv", &path).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}

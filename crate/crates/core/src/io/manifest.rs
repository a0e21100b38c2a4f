use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One dataset sample: paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub id: String,
    pub image_path: PathBuf,
    pub depth_path: PathBuf,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One prediction/ground-truth pair for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub pred_path: PathBuf,
    pub gt_path: PathBuf,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| CoreError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) => CoreError::io(path, std::io::Error::new(io.kind(), io.to_string())),
            _ => CoreError::format(path, e.to_string()),
        })?;
    r.deserialize()
        .map(|row| row.map_err(|e| CoreError::format(path, e.to_string())))
        .collect()
}

pub fn write_dataset_manifest(path: &Path, rows: &[DatasetRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_dataset_manifest(path: &Path) -> Result<Vec<DatasetRow>> {
    read_rows(path)
}

pub fn write_eval_manifest(path: &Path, rows: &[EvalRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalRow>> {
    read_rows(path)
}

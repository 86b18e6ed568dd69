//! metrics.csv writer. Column layout is fixed:
//! `epoch,step,train_loss,lr,wd,test_accuracy,ema_active,wall_time_s`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{AppError, AppResult};

pub const HEADER: &str = "epoch,step,train_loss,lr,wd,test_accuracy,ema_active,wall_time_s";

pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub test_accuracy: Option<f64>,
    pub ema_active: bool,
    pub wall_time_s: f64,
}

pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    /// Create (truncate) a new metrics file with the header.
    pub fn create(path: &Path) -> AppResult<MetricsWriter> {
        let mut file = File::create(path)
            .map_err(|e| AppError::Io(format!("cannot create {}: {e}", path.display())))?;
        writeln!(file, "{HEADER}").map_err(|e| AppError::Io(e.to_string()))?;
        Ok(MetricsWriter { file })
    }

    /// Append to an existing metrics file (resume).
    pub fn append(path: &Path) -> AppResult<MetricsWriter> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| AppError::Io(format!("cannot open {}: {e}", path.display())))?;
        Ok(MetricsWriter { file })
    }

    pub fn write(&mut self, row: &MetricsRow) -> AppResult<()> {
        let acc = row
            .test_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{}",
            row.epoch,
            row.step,
            row.train_loss,
            row.lr,
            row.wd,
            acc,
            row.ema_active,
            row.wall_time_s
        )
        .map_err(|e| AppError::Io(e.to_string()))
    }
}

/// Extract one named column from a metrics file (test helper and eval
/// reporting).
pub fn read_column(path: &Path, column: &str) -> AppResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| AppError::Format("empty metrics file".into()))?;
    let idx = header
        .split(',')
        .position(|c| c == column)
        .ok_or_else(|| AppError::Format(format!("no column {column}")))?;
    Ok(lines
        .map(|l| l.split(',').nth(idx).unwrap_or_default().to_string())
        .collect())
}

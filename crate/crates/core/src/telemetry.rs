//! Append-only CSV persistence of per-epoch metrics.
//!
//! One row per (epoch, split). Values are rendered in full-precision
//! scientific notation so the file round-trips bit-exactly and downstream
//! detection is stable across analysis runs.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER: &str = "epoch,split,total_loss,positive_term,negative_term,wall_time_s";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed metrics row: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: header mismatch, expected '{HEADER}', found '{found}'")]
    HeaderMismatch { path: PathBuf, found: String },
    #[error("{path}: duplicate row for epoch {epoch} split {split}")]
    DuplicateRow { path: PathBuf, epoch: i64, split: Split },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Metric column selector for [`read_series`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricColumn {
    TotalLoss,
    PositiveTerm,
    NegativeTerm,
}

impl FromStr for MetricColumn {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total_loss" => Ok(MetricColumn::TotalLoss),
            "positive_term" => Ok(MetricColumn::PositiveTerm),
            "negative_term" => Ok(MetricColumn::NegativeTerm),
            other => Err(format!("unknown metric column '{other}'")),
        }
    }
}

/// One row of the telemetry table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: i64,
    pub split: Split,
    pub total_loss: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub fn column(&self, column: MetricColumn) -> f64 {
        match column {
            MetricColumn::TotalLoss => self.total_loss,
            MetricColumn::PositiveTerm => self.positive_term,
            MetricColumn::NegativeTerm => self.negative_term,
        }
    }
}

/// Renders a double with 18 significant digits; reparses to the same bits.
fn render(v: f64) -> String {
    format!("{v:.17e}")
}

/// Single-writer, flush-per-row metrics file.
pub struct MetricsWriter {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Creates the file (truncating any previous content) and writes the header.
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let file = File::create(path).map_err(|source| TelemetryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = Self {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.write_line(HEADER)?;
        Ok(w)
    }

    /// Opens an existing file for appending, verifying the header.
    pub fn append_to(path: &Path) -> Result<Self, TelemetryError> {
        let existing = read_rows(path)?;
        drop(existing);
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|source| TelemetryError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    fn write_line(&mut self, line: &str) -> Result<(), TelemetryError> {
        let io_err = |source| TelemetryError::Io {
            path: self.path.clone(),
            source,
        };
        writeln!(self.writer, "{line}").map_err(io_err)?;
        self.writer.flush().map_err(io_err)
    }

    /// Appends one row and flushes it; a crash loses at most the in-flight row.
    pub fn append(&mut self, row: &EpochMetrics) -> Result<(), TelemetryError> {
        let line = format!(
            "{},{},{},{},{},{}",
            row.epoch,
            row.split,
            render(row.total_loss),
            render(row.positive_term),
            render(row.negative_term),
            render(row.wall_time_s),
        );
        self.write_line(&line)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn parse_row(path: &Path, line_no: usize, line: &str) -> Result<EpochMetrics, TelemetryError> {
    let malformed = |reason: String| TelemetryError::Malformed {
        path: path.to_path_buf(),
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(malformed(format!("expected 6 fields, found {}", fields.len())));
    }
    let epoch: i64 = fields[0]
        .parse()
        .map_err(|e| malformed(format!("bad epoch '{}': {e}", fields[0])))?;
    let split: Split = fields[1].parse().map_err(|e| malformed(e))?;
    let mut nums = [0.0f64; 4];
    for (slot, raw) in nums.iter_mut().zip(&fields[2..]) {
        *slot = raw
            .parse()
            .map_err(|e| malformed(format!("bad value '{raw}': {e}")))?;
    }
    Ok(EpochMetrics {
        epoch,
        split,
        total_loss: nums[0],
        positive_term: nums[1],
        negative_term: nums[2],
        wall_time_s: nums[3],
    })
}

/// Reads every row, validating the header and rejecting duplicate
/// (epoch, split) rows.
pub fn read_rows(path: &Path) -> Result<Vec<EpochMetrics>, TelemetryError> {
    let file = File::open(path).map_err(|source| TelemetryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut lines = reader.lines().enumerate();

    match lines.next() {
        Some((_, Ok(header))) if header == HEADER => {}
        Some((_, Ok(header))) => {
            return Err(TelemetryError::HeaderMismatch {
                path: path.to_path_buf(),
                found: header,
            })
        }
        Some((_, Err(source))) => {
            return Err(TelemetryError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
        None => {
            return Err(TelemetryError::HeaderMismatch {
                path: path.to_path_buf(),
                found: String::new(),
            })
        }
    }

    for (idx, line) in lines {
        let line = line.map_err(|source| TelemetryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let row = parse_row(path, idx + 1, &line)?;
        if !seen.insert((row.epoch, row.split)) {
            return Err(TelemetryError::DuplicateRow {
                path: path.to_path_buf(),
                epoch: row.epoch,
                split: row.split,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Extracts one (epoch, value) series for a split and column, sorted by epoch.
pub fn read_series(
    path: &Path,
    split: Split,
    column: MetricColumn,
) -> Result<Vec<(i64, f64)>, TelemetryError> {
    let mut series: Vec<(i64, f64)> = read_rows(path)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch, r.column(column)))
        .collect();
    series.sort_by_key(|&(e, _)| e);
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn row(epoch: i64, split: Split, v: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            split,
            total_loss: v,
            positive_term: -v,
            negative_term: 2.0 * v,
            wall_time_s: 0.25,
        }
    }

    #[test]
    fn append_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let r = row(1, Split::Train, 1.0 / 3.0);
        w.append(&r).unwrap();
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows, vec![r]);
    }

    #[test]
    fn one_third_renders_with_17_plus_digits_and_reparses() {
        let s = render(1.0 / 3.0);
        let digits = s.chars().filter(|c| c.is_ascii_digit()).count();
        assert!(digits >= 17, "rendered as {s}");
        assert_eq!(s.parse::<f64>().unwrap().to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn ten_appends_preserve_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for e in 1..=10 {
            w.append(&row(e, Split::Val, e as f64)).unwrap();
        }
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.windows(2).all(|w| w[0].epoch < w[1].epoch));
    }

    #[test]
    fn read_series_filters_split_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for e in 1..=3 {
            w.append(&row(e, Split::Train, e as f64)).unwrap();
            w.append(&row(e, Split::Val, 10.0 * e as f64)).unwrap();
        }
        let s = read_series(&path, Split::Val, MetricColumn::TotalLoss).unwrap();
        assert_eq!(s, vec![(1, 10.0), (2, 20.0), (3, 30.0)]);
    }

    #[test]
    fn empty_file_with_header_gives_empty_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        MetricsWriter::create(&path).unwrap();
        let s = read_series(&path, Split::Train, MetricColumn::PositiveTerm).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn duplicate_epoch_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&row(5, Split::Val, 1.0)).unwrap();
        w.append(&row(5, Split::Val, 2.0)).unwrap();
        assert!(matches!(
            read_rows(&path),
            Err(TelemetryError::DuplicateRow { epoch: 5, .. })
        ));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "{HEADER}").unwrap();
        writeln!(f, "1,train,0.0,0.0,0.0,0.0").unwrap();
        writeln!(f, "not,a,row").unwrap();
        match read_rows(&path) {
            Err(TelemetryError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, "epoch,loss\n").unwrap();
        assert!(matches!(
            read_rows(&path),
            Err(TelemetryError::HeaderMismatch { .. })
        ));
    }
}

//! Metric streams on disk: CSV with a fixed column order, or JSON lines.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use clap::ValueEnum;
use fedhub_core::MetricRecord;
use thiserror::Error;

pub const CSV_HEADER: &str = "timestamp,entity,kind,value";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

/// Appends `records` to `path`, writing the CSV header only into a new or
/// empty file.
pub fn export_metrics(records: &[MetricRecord], format: Format, path: &Path) -> Result<(), MetricsError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = BufWriter::new(file);
    match format {
        Format::Csv => {
            if fresh {
                writeln!(out, "{CSV_HEADER}")?;
            }
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            for r in records {
                w.serialize((r.timestamp, &r.entity, &r.kind, r.value))?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

pub fn read_metrics(format: Format, path: &Path) -> Result<Vec<MetricRecord>, MetricsError> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            r.deserialize::<(f64, String, String, f64)>()
                .map(|row| {
                    let (timestamp, entity, kind, value) = row?;
                    Ok(MetricRecord { timestamp, entity, kind, value })
                })
                .collect()
        }
        Format::Jsonl => BufReader::new(File::open(path)?)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect(),
    }
}

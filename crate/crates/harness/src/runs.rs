//! Run directory layout.

use std::fs;
use std::path::Path;

use fedhub_core::MetricRecord;

use crate::metrics::{export_metrics, Format};
use crate::utilization::UtilizationReport;
use crate::Error;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const UTILIZATION_CSV: &str = "utilization.csv";
pub const GANTT_CSV: &str = "gantt.csv";
pub const CONFIG_SNAPSHOT: &str = "config.yaml";

/// Writes metrics, the resolved config and, when given, the utilization
/// tables. Existing metric files are replaced rather than appended to.
pub fn write_run_dir(
    dir: &Path,
    snapshot: &str,
    records: &[MetricRecord],
    utilization: Option<&UtilizationReport>,
) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_SNAPSHOT), snapshot)?;
    for (name, format) in [(METRICS_CSV, Format::Csv), (METRICS_JSONL, Format::Jsonl)] {
        let path = dir.join(name);
        if path.exists() {
            fs::remove_file(&path)?;
        }
        export_metrics(records, format, &path)?;
    }
    if let Some(u) = utilization.filter(|u| !u.clients.is_empty()) {
        u.write_summary_csv(&dir.join(UTILIZATION_CSV))?;
        u.write_gantt_csv(&dir.join(GANTT_CSV))?;
    }
    Ok(())
}

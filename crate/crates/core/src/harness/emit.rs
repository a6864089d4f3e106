//! Curve and summary files. Every file is written to a temporary sibling
//! and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::protocol::Method;

use super::config::{ExperimentConfig, ThresholdMetric};
use super::run::{summarize, MethodSummary, RunRecord};

pub const CURVE_HEADER: &str = "step,virtual_seconds,val_loss,val_ppl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn curve_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CURVE_HEADER.split(','))
        .map_err(|e| Error::Serialize(e.to_string()))?;
    for p in &record.curve {
        w.serialize((p.step, p.virtual_seconds, p.val_loss, p.val_ppl))
            .map_err(|e| Error::Serialize(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
}

#[derive(Debug, Serialize)]
struct RunEntry<'a> {
    method: Method,
    seed: u64,
    failed: bool,
    failure: Option<&'a str>,
    #[serde(flatten)]
    summary: &'a super::run::RunSummary,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    name: &'a str,
    label: &'a str,
    threshold: f64,
    threshold_metric: ThresholdMetric,
    fragment_bytes: Vec<u64>,
    methods: Vec<MethodSummary>,
    runs: Vec<RunEntry<'a>>,
}

pub fn curve_file_name(record: &RunRecord) -> String {
    format!("{}_seed{}.csv", record.method, record.seed)
}

/// Writes the per-run curves, the experiment summary and a copy of the
/// resolved config into `dir`. Returns the paths written.
pub fn emit(
    dir: &Path,
    label: &str,
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    formats: &[OutputFormat],
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::internal("no run records to emit"));
    }
    let mut written = Vec::new();
    if formats.contains(&OutputFormat::Csv) {
        for r in records {
            let path = dir.join(curve_file_name(r));
            write_atomic(&path, &curve_csv(r)?)?;
            written.push(path);
        }
    }
    if formats.contains(&OutputFormat::Json) {
        let mut methods: Vec<Method> = Vec::new();
        for r in records {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let fragment_bytes = fragment_bytes(cfg);
        let summary = Summary {
            name: &cfg.name,
            label,
            threshold: cfg.threshold,
            threshold_metric: cfg.threshold_metric,
            fragment_bytes,
            methods: methods.iter().map(|&m| summarize(records, m)).collect(),
            runs: records
                .iter()
                .map(|r| RunEntry {
                    method: r.method,
                    seed: r.seed,
                    failed: r.failed,
                    failure: r.failure.as_deref(),
                    summary: &r.summary,
                })
                .collect(),
        };
        let mut json =
            serde_json::to_vec_pretty(&summary).map_err(|e| Error::Serialize(e.to_string()))?;
        json.push(b'\n');
        let path = dir.join("summary.json");
        write_atomic(&path, &json)?;
        written.push(path);
    }
    let path = dir.join("config.resolved.toml");
    write_atomic(&path, cfg.to_toml_string()?.as_bytes())?;
    written.push(path);
    Ok(written)
}

fn fragment_bytes(cfg: &ExperimentConfig) -> Vec<u64> {
    let fragments = cfg.protocol_config(Method::StreamingDiloco).effective().fragments;
    crate::tasks::make_task(&cfg.task_config(cfg.seeds[0]), cfg.workers, fragments)
        .and_then(|t| crate::param::partition(t.layer_sizes(), fragments, cfg.bytes_per_element))
        .map(|spec| spec.fragments().iter().map(|f| f.byte_size).collect())
        .unwrap_or_default()
}

//! WAV, CSV and manifest files.

use std::fs;
use std::path::{Path, PathBuf};

use rarenet::metrics::{DecayCurve, MetricsReport, NedTrace};
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const METRICS_HEADER: [&str; 9] = ["file", "scene", "design", "K", "spread", "M", "band", "metric", "value"];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

/// Mono 32-bit float WAV, unnormalized.
pub fn write_wav(path: &Path, samples: &[f64], fs: f64) -> Result<(), CliError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: fs as u32,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| io_err(path, e))?;
    for &x in samples {
        writer.write_sample(x as f32).map_err(|e| io_err(path, e))?;
    }
    writer.finalize().map_err(|e| io_err(path, e))
}

/// First channel of a WAV as `f64`, with its sample rate. Integer formats
/// are scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, f64), CliError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| io_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let all: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| io_err(path, e))?
        }
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| io_err(path, e))?
        }
    };
    Ok((all.into_iter().step_by(channels).collect(), spec.sample_rate as f64))
}

/// Run identity carried on each metrics row.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunLabel {
    pub file: String,
    pub scene: String,
    pub design: String,
    pub k: String,
    pub spread: String,
    pub m: String,
}

impl RunLabel {
    /// Label from a run manifest's `run` object.
    pub fn from_manifest(file: String, manifest: &Value) -> Self {
        let run = &manifest["run"];
        let field = |key: &str| match &run[key] {
            Value::Null => String::new(),
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        Self { file, scene: field("scene"), design: field("design"), k: field("K"), spread: field("spread"), m: field("M") }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: RunLabel,
    pub band: String,
    pub metric: String,
    pub value: String,
}

/// Rows of one report, restricted to `bands` unless it is empty.
pub fn report_rows(label: &RunLabel, report: &MetricsReport, bands: &[String]) -> Vec<MetricsRow> {
    report
        .rows()
        .into_iter()
        .filter(|(band, _, _)| bands.is_empty() || bands.iter().any(|b| b == band))
        .map(|(band, metric, value)| MetricsRow { label: label.clone(), band, metric: metric.into(), value: value.to_string() })
        .collect()
}

pub fn error_row(label: &RunLabel, message: &str) -> MetricsRow {
    MetricsRow { label: label.clone(), band: String::new(), metric: "error".into(), value: message.into() }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| io_err(path, e))?;
    for r in rows {
        let l = &r.label;
        w.write_record([&l.file, &l.scene, &l.design, &l.k, &l.spread, &l.m, &r.band, &r.metric, &r.value])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// `time_s,value` trace.
pub fn write_trace_csv(path: &Path, times: impl Iterator<Item = f64>, values: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["time_s", "value"]).map_err(|e| io_err(path, e))?;
    for (t, v) in times.zip(values) {
        w.write_record([t.to_string(), v.to_string()]).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Energy decay curve in dB, one point per millisecond.
pub fn write_edc_csv(path: &Path, edc: &DecayCurve) -> Result<(), CliError> {
    let step = ((edc.fs / 1000.0).round() as usize).max(1);
    let db: Vec<f64> = edc.db().into_iter().step_by(step).collect();
    write_trace_csv(path, (0..db.len()).map(|i| (i * step) as f64 / edc.fs), &db)
}

pub fn write_ned_csv(path: &Path, ned: &NedTrace) -> Result<(), CliError> {
    write_trace_csv(path, ned.times.iter().copied(), &ned.values)
}

/// `dir/<stem><suffix>`.
pub fn sibling(dir: &Path, stem: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{stem}{suffix}"))
}

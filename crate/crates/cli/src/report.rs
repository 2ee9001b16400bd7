//! Fixed-column CSV rows and JSON summaries.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use servesim::engine::Request;
use servesim::sweep::SweepPoint;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub model: String,
    pub tp_degree: u64,
    pub replicas: u64,
    pub seq_len: u64,
    pub weights_bytes: u64,
    pub kv_bytes_per_token: u64,
    pub pool_bytes: Option<f64>,
    pub kv_per_request_bytes: Option<f64>,
    pub exact_batch: Option<f64>,
    pub pow2_batch: Option<u64>,
    pub cap: u64,
    /// `ok`, or the reason the configuration cannot serve.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub id: u64,
    pub arrival: f64,
    pub t_first_sched: Option<f64>,
    pub t_done: Option<f64>,
    pub input_len: u64,
    pub output_len: u64,
    pub preemptions: u64,
}

impl From<&Request> for RequestRow {
    fn from(r: &Request) -> Self {
        Self {
            id: r.id,
            arrival: r.arrival,
            t_first_sched: r.t_first_sched,
            t_done: r.t_done,
            input_len: r.input_len,
            output_len: r.output_len,
            preemptions: r.preemptions,
        }
    }
}

/// sweep.csv / frontier.csv columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_label: String,
    pub batch_cap: u64,
    pub tp_degree: u64,
    pub throughput_rps: f64,
    pub tokens_per_s: f64,
    pub latency_mean_s: f64,
    pub latency_max_s: f64,
    pub bound_fraction: f64,
}

impl From<&SweepPoint> for SweepRow {
    fn from(p: &SweepPoint) -> Self {
        Self {
            config_label: p.config_label.clone(),
            batch_cap: p.batch_cap,
            tp_degree: p.tp_degree,
            throughput_rps: p.throughput_rps,
            tokens_per_s: p.tokens_per_s,
            latency_mean_s: p.latency_mean,
            latency_max_s: p.latency_max,
            bound_fraction: p.bound_fraction,
        }
    }
}

impl From<SweepRow> for SweepPoint {
    fn from(r: SweepRow) -> Self {
        Self {
            config_label: r.config_label,
            batch_cap: r.batch_cap,
            tp_degree: r.tp_degree,
            throughput_rps: r.throughput_rps,
            tokens_per_s: r.tokens_per_s,
            latency_mean: r.latency_mean_s,
            latency_max: r.latency_max_s,
            bound_fraction: r.bound_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaCsvRow {
    pub n_replicas: u64,
    pub per_replica_cap: Option<u64>,
    pub per_replica_pool_bytes: Option<f64>,
    pub throughput_rps: Option<f64>,
    pub tokens_per_s: Option<f64>,
    /// Largest per-replica mean latency.
    pub latency_mean_s: Option<f64>,
    pub latency_mean_of_means_s: Option<f64>,
    pub latency_max_s: Option<f64>,
    pub makespan_s: Option<f64>,
    pub busy_fraction: Option<f64>,
    pub preemptions: Option<u64>,
    pub status: String,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes the header even when there are no rows.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    if !rows.is_empty() {
        return write_csv(path, rows);
    }
    std::fs::write(path, format!("{}\n", header.join(","))).map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::config(path, format!("cannot read CSV: {e}")))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| CliError::config(path, format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub const SWEEP_HEADER: [&str; 8] = [
    "config_label",
    "batch_cap",
    "tp_degree",
    "throughput_rps",
    "tokens_per_s",
    "latency_mean_s",
    "latency_max_s",
    "bound_fraction",
];

pub const REQUEST_HEADER: [&str; 7] = [
    "id",
    "arrival",
    "t_first_sched",
    "t_done",
    "input_len",
    "output_len",
    "preemptions",
];

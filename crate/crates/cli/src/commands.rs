//! Subcommand implementations. Each returns a one-paragraph summary.

use std::path::{Path, PathBuf};

use serde::Serialize;
use servesim::capacity::{max_batch, replica_partition, CapacityPlan};
use servesim::engine::{self, EngineConfig, RunMetrics};
use servesim::hardware::{DeviceSpec, ParallelSpec};
use servesim::model_catalog::ModelSpec;
use servesim::replication::{calibrate_host_overhead, replication_sweep, single_device_batch};
use servesim::sweep::{self, batch_sweep, default_caps, pareto_frontier, saturation_point, SweepFailure, SweepPoint};

use crate::config::{Config, Format, WorkloadSource};
use crate::report::{
    self, PlanRow, ReplicaCsvRow, RequestRow, SweepRow, REQUEST_HEADER, SWEEP_HEADER,
};
use crate::{svg, CliError, Command, SCHEMA_VERSION};

pub fn execute(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Plan { config } => plan(&Config::load(config)?),
        Command::Simulate { config } => simulate(&Config::load(config)?),
        Command::Sweep { config } => sweep(&Config::load(config)?),
        Command::Replicate { config } => replicate(&Config::load(config)?),
        Command::Pareto { input, output } => pareto(input, output.as_deref()),
    }
}

fn output_dir(cfg: &Config) -> Result<PathBuf, CliError> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn core_err(cfg: &Config) -> impl Fn(servesim::Error) -> CliError + '_ {
    move |e| CliError::from_core(&cfg.path, e)
}

fn with_degree(par: &ParallelSpec, tp_degree: u64) -> ParallelSpec {
    ParallelSpec {
        tp_degree,
        ..par.clone()
    }
}

fn gb(bytes: f64) -> String {
    format!("{:.2} GB", bytes / 1e9)
}

#[derive(Serialize)]
struct PlanSummary<'a> {
    schema_version: u32,
    device: &'a DeviceSpec,
    seq_len: u64,
    cap: u64,
    rows: &'a [PlanRow],
}

fn plan_row(
    model: &ModelSpec,
    tp_degree: u64,
    replicas: u64,
    seq_len: u64,
    cap: u64,
    outcome: Result<CapacityPlan, String>,
) -> PlanRow {
    let ok = outcome.as_ref().ok();
    PlanRow {
        model: model.name.clone(),
        tp_degree,
        replicas,
        seq_len,
        weights_bytes: model.weights_bytes(),
        kv_bytes_per_token: model.kv_bytes_per_token(),
        pool_bytes: ok.map(|p| p.pool),
        kv_per_request_bytes: ok.map(|p| p.kv_per_request),
        exact_batch: ok.map(|p| p.exact_batch),
        pow2_batch: ok.map(|p| p.pow2_batch),
        cap: ok.map_or(cap, |p| p.cap),
        status: outcome.map_or_else(|e| e, |_| "ok".into()),
    }
}

pub fn plan(cfg: &Config) -> Result<String, CliError> {
    let seq_len = match cfg.plan.seq_len {
        Some(s) => s,
        None => {
            let trace = match cfg.workload {
                WorkloadSource::Trace(_) => Some(cfg.trace()?),
                WorkloadSource::Synthetic(_) => None,
            };
            cfg.seq_len(trace.as_deref())
        }
    };
    let models: Vec<&ModelSpec> = match &cfg.plan.models {
        Some(names) => names.iter().map(|n| cfg.catalog.get(n).expect("validated")).collect(),
        None => cfg.catalog.iter().collect(),
    };
    let cap = cfg.plan.cap;

    let mut rows = Vec::new();
    for model in &models {
        for &tp in &cfg.plan.tp_degrees {
            for &r in &cfg.plan.replicas {
                let outcome = if r == 1 {
                    max_batch(model, &cfg.device, &with_degree(&cfg.parallel, tp), seq_len, cap)
                        .map_err(|e| e.to_string())
                } else if tp != 1 {
                    Err("replication is modeled on a single device only".to_string())
                } else {
                    max_batch(model, &cfg.device, &ParallelSpec::single(), seq_len, cap)
                        .and_then(|single| replica_partition(model, &cfg.device, r, seq_len, single.pow2_batch))
                        .map(|plans| plans[0].clone())
                        .map_err(|e| e.to_string())
                };
                rows.push(plan_row(model, tp, r, seq_len, cap, outcome));
            }
        }
    }

    let dir = output_dir(cfg)?;
    if cfg.wants(Format::Csv) {
        report::write_csv(&dir.join("plan.csv"), &rows)?;
    }
    if cfg.wants(Format::Json) {
        let summary = PlanSummary {
            schema_version: SCHEMA_VERSION,
            device: &cfg.device,
            seq_len,
            cap,
            rows: &rows,
        };
        report::write_json(&dir.join("plan.json"), &summary)?;
    }

    let described: Vec<String> = rows
        .iter()
        .map(|r| match (r.pow2_batch, r.exact_batch) {
            (Some(b), Some(x)) => format!(
                "{} (tp{}, x{}) batch {b} (exact {x:.1})",
                r.model, r.tp_degree, r.replicas
            ),
            _ => format!("{} (tp{}, x{}) does not serve: {}", r.model, r.tp_degree, r.replicas, r.status),
        })
        .collect();
    Ok(format!(
        "Planned {} configurations for {seq_len}-token requests on a {} device at {:.0}% usable memory, capped at {cap}: {}. Wrote {}.",
        rows.len(),
        gb(cfg.device.hbm_bytes),
        cfg.device.usable_fraction * 100.0,
        described.join("; "),
        dir.display()
    ))
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    schema_version: u32,
    model: &'a str,
    device: &'a DeviceSpec,
    parallel: &'a ParallelSpec,
    engine: &'a EngineConfig,
    n_requests: usize,
    metrics: &'a RunMetrics,
}

pub fn simulate(cfg: &Config) -> Result<String, CliError> {
    let model = cfg.require_model()?;
    let trace = cfg.trace()?;
    let n = trace.len();
    let result = engine::run(model, &cfg.device, &cfg.parallel, &cfg.engine, trace).map_err(core_err(cfg))?;

    let dir = output_dir(cfg)?;
    if cfg.wants(Format::Csv) {
        let rows: Vec<RequestRow> = result.records.iter().map(RequestRow::from).collect();
        report::write_csv_with_header(&dir.join("requests.csv"), &REQUEST_HEADER, &rows)?;
    }
    if cfg.wants(Format::Json) {
        let summary = SimulateSummary {
            schema_version: SCHEMA_VERSION,
            model: &model.name,
            device: &cfg.device,
            parallel: &cfg.parallel,
            engine: &cfg.engine,
            n_requests: n,
            metrics: &result.metrics,
        };
        report::write_json(&dir.join("metrics.json"), &summary)?;
    }
    let m = &result.metrics;
    Ok(format!(
        "Simulated {n} requests on {} (tp{}, {} scheduler, max batch {}): {:.3} req/s, {:.0} tokens/s, mean latency {:.3} s, max {:.3} s over a {:.3} s makespan with {} preemptions and peak {} of {} KV blocks. Wrote {}.",
        model.name,
        cfg.parallel.tp_degree,
        cfg.engine.mode,
        cfg.engine.max_batch,
        m.throughput_rps,
        m.throughput_tps,
        m.latency_mean,
        m.latency_max,
        m.makespan,
        m.preemption_count,
        m.peak_blocks,
        m.capacity_blocks,
        dir.display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Saturation {
    pub tp_degree: u64,
    pub batch_cap: Option<u64>,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    schema_version: u32,
    model: &'a str,
    epsilon: f64,
    points: Vec<SweepRow>,
    frontier: Vec<SweepRow>,
    saturation: &'a [Saturation],
    failures: &'a [SweepFailure],
}

pub fn sweep(cfg: &Config) -> Result<String, CliError> {
    let model = cfg.require_model()?;
    let trace = cfg.trace()?;
    let seq_len = cfg.seq_len(Some(&trace));
    let degrees = cfg
        .sweep
        .tp_degrees
        .clone()
        .unwrap_or_else(|| vec![cfg.parallel.tp_degree]);

    let mut points: Vec<SweepPoint> = Vec::new();
    let mut failures = Vec::new();
    let mut saturation = Vec::new();
    for &tp in &degrees {
        let par = with_degree(&cfg.parallel, tp);
        let caps = match &cfg.sweep.caps {
            Some(caps) => caps.clone(),
            None => {
                let plan = max_batch(model, &cfg.device, &par, seq_len, cfg.plan.cap).map_err(core_err(cfg))?;
                default_caps(plan.pow2_batch)
            }
        };
        let result = batch_sweep(model, &cfg.device, &par, &trace, &cfg.engine, &caps).map_err(core_err(cfg))?;
        saturation.push(Saturation {
            tp_degree: tp,
            batch_cap: saturation_point(&result.points, cfg.sweep.epsilon).ok().flatten(),
        });
        points.extend(result.points);
        failures.extend(result.failures);
    }
    let frontier = pareto_frontier(&points);

    let dir = output_dir(cfg)?;
    let rows: Vec<SweepRow> = points.iter().map(SweepRow::from).collect();
    let frontier_rows: Vec<SweepRow> = frontier.points.iter().map(SweepRow::from).collect();
    if cfg.wants(Format::Csv) {
        report::write_csv_with_header(&dir.join("sweep.csv"), &SWEEP_HEADER, &rows)?;
    }
    if cfg.wants(Format::Json) {
        let summary = SweepSummary {
            schema_version: SCHEMA_VERSION,
            model: &model.name,
            epsilon: cfg.sweep.epsilon,
            points: rows,
            frontier: frontier_rows,
            saturation: &saturation,
            failures: &failures,
        };
        report::write_json(&dir.join("sweep.json"), &summary)?;
    }
    if cfg.wants(Format::Svg) {
        let title = format!("{}: throughput vs latency", model.name);
        let path = dir.join("sweep.svg");
        std::fs::write(&path, svg::scatter(&title, &points, &frontier.points)).map_err(|e| CliError::io(&path, e))?;
    }

    let best = points
        .iter()
        .max_by(|a, b| a.throughput_rps.total_cmp(&b.throughput_rps));
    let sat: Vec<String> = saturation
        .iter()
        .map(|s| match s.batch_cap {
            Some(b) => format!("tp{} saturates at batch {b}", s.tp_degree),
            None => format!("tp{} does not saturate within the sweep", s.tp_degree),
        })
        .collect();
    Ok(format!(
        "Swept {} points for {} ({} failed); the Pareto frontier holds {} of them{}. With epsilon {}: {}. Wrote {}.",
        points.len(),
        model.name,
        failures.len(),
        frontier.points.len(),
        best.map_or(String::new(), |b| format!(
            ", peak throughput {:.3} req/s at {}",
            b.throughput_rps, b.config_label
        )),
        cfg.sweep.epsilon,
        sat.join("; "),
        dir.display()
    ))
}

#[derive(Serialize)]
struct ReplicateSummary<'a> {
    schema_version: u32,
    model: &'a str,
    host_overhead: f64,
    single_device_batch: u64,
    rows: &'a [ReplicaCsvRow],
    replicas: Vec<Option<&'a [RunMetrics]>>,
}

pub fn replicate(cfg: &Config) -> Result<String, CliError> {
    let model = cfg.require_model()?;
    let trace = cfg.trace()?;
    let mut device = cfg.device.clone();
    if let Some(fraction) = cfg.replication.host_overhead_fraction {
        let h = calibrate_host_overhead(model, &device, &trace, &cfg.engine, fraction).map_err(core_err(cfg))?;
        device.host_overhead = h;
    }
    let base_batch = single_device_batch(model, &device, &trace).map_err(core_err(cfg))?;
    let results = replication_sweep(model, &device, &trace, &cfg.engine, cfg.replication.r_max).map_err(core_err(cfg))?;

    let rows: Vec<ReplicaCsvRow> = results
        .iter()
        .map(|row| match &row.outcome {
            Ok(run) => {
                let a = &run.aggregate;
                ReplicaCsvRow {
                    n_replicas: row.n_replicas,
                    per_replica_cap: Some(run.deployment.per_replica.cap),
                    per_replica_pool_bytes: Some(run.deployment.per_replica.pool),
                    throughput_rps: Some(a.throughput_rps),
                    tokens_per_s: Some(a.throughput_tps),
                    latency_mean_s: Some(a.latency_mean),
                    latency_mean_of_means_s: Some(run.latency_mean_of_means),
                    latency_max_s: Some(a.latency_max),
                    makespan_s: Some(a.makespan),
                    busy_fraction: Some(a.busy_fraction),
                    preemptions: Some(a.preemption_count),
                    status: "ok".into(),
                }
            }
            Err(reason) => ReplicaCsvRow {
                n_replicas: row.n_replicas,
                per_replica_cap: None,
                per_replica_pool_bytes: None,
                throughput_rps: None,
                tokens_per_s: None,
                latency_mean_s: None,
                latency_mean_of_means_s: None,
                latency_max_s: None,
                makespan_s: None,
                busy_fraction: None,
                preemptions: None,
                status: reason.clone(),
            },
        })
        .collect();

    let dir = output_dir(cfg)?;
    if cfg.wants(Format::Csv) {
        report::write_csv(&dir.join("replicate.csv"), &rows)?;
    }
    if cfg.wants(Format::Json) {
        let summary = ReplicateSummary {
            schema_version: SCHEMA_VERSION,
            model: &model.name,
            host_overhead: device.host_overhead,
            single_device_batch: base_batch,
            rows: &rows,
            replicas: results
                .iter()
                .map(|r| r.outcome.as_ref().ok().map(|run| run.replicas.as_slice()))
                .collect(),
        };
        report::write_json(&dir.join("replicate.json"), &summary)?;
    }

    let base = rows.first().and_then(|r| r.throughput_rps).unwrap_or(0.0);
    let described: Vec<String> = rows
        .iter()
        .map(|r| match (r.throughput_rps, r.latency_mean_s) {
            (Some(t), Some(l)) if base > 0.0 => format!("R={} {t:.3} req/s ({:.2}x), latency {l:.3} s", r.n_replicas, t / base),
            (Some(t), Some(l)) => format!("R={} {t:.3} req/s, latency {l:.3} s", r.n_replicas),
            _ => format!("R={} does not fit", r.n_replicas),
        })
        .collect();
    Ok(format!(
        "Replicated {} on one device with host overhead {:.3} ms per iteration and a single-device batch of {base_batch}: {}. Wrote {}.",
        model.name,
        device.host_overhead * 1e3,
        described.join("; "),
        dir.display()
    ))
}

pub fn pareto(input: &Path, output: Option<&Path>) -> Result<String, CliError> {
    let rows: Vec<SweepRow> = report::read_csv(input)?;
    let points: Vec<SweepPoint> = rows.into_iter().map(SweepPoint::from).collect();
    let frontier = sweep::pareto_frontier(&points);
    let output = output.map_or_else(
        || input.parent().unwrap_or(Path::new(".")).join("frontier.csv"),
        Path::to_path_buf,
    );
    let rows: Vec<SweepRow> = frontier.points.iter().map(SweepRow::from).collect();
    report::write_csv_with_header(&output, &SWEEP_HEADER, &rows)?;
    let labels: Vec<&str> = frontier.points.iter().map(|p| p.config_label.as_str()).collect();
    Ok(format!(
        "{} of {} sweep points are Pareto-optimal (max throughput, min latency): {}. Wrote {}.",
        frontier.points.len(),
        points.len(),
        labels.join(", "),
        output.display()
    ))
}

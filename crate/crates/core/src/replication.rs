//! Several independent engine instances co-located on one accelerator.
//!
//! Memory is partitioned evenly (each replica keeps its own weights), the
//! requests are dealt round-robin, and device phases are multiplexed FCFS
//! while host phases overlap.

use serde::Serialize;

use crate::capacity::{max_batch, replica_partition, CapacityPlan, DEFAULT_BATCH_CAP};
use crate::engine::{
    simulate_shared, BlockPool, DevicePhase, EngineConfig, Hardware, Instance, Request, RunMetrics,
    SchedulerRegistry,
};
use crate::error::Result;
use crate::hardware::{DeviceSpec, ParallelSpec};
use crate::model_catalog::ModelSpec;
use crate::workload::sort_by_arrival;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaDeployment {
    pub n_replicas: u64,
    pub per_replica: CapacityPlan,
    /// Request ids assigned to each replica.
    pub assignment: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicatedRun {
    pub deployment: ReplicaDeployment,
    /// Throughput summed over replicas against the global makespan; latency
    /// is the largest per-replica mean.
    pub aggregate: RunMetrics,
    /// Mean of the per-replica mean latencies.
    pub latency_mean_of_means: f64,
    pub replicas: Vec<RunMetrics>,
    pub timeline: Vec<DevicePhase>,
}

/// Longest request in the trace, the per-request KV budget for planning.
pub fn trace_seq_len(trace: &[Request]) -> u64 {
    trace
        .iter()
        .map(|r| r.input_len + r.output_len)
        .max()
        .unwrap_or(1)
}

/// Deals requests round-robin in FCFS order.
pub fn round_robin(mut trace: Vec<Request>, n_replicas: usize) -> Vec<Vec<Request>> {
    sort_by_arrival(&mut trace);
    let mut split = vec![Vec::new(); n_replicas];
    for (i, r) in trace.into_iter().enumerate() {
        split[i % n_replicas].push(r);
    }
    split
}

/// Single-device batch size at the trace's sequence budget, capped at 512.
pub fn single_device_batch(model: &ModelSpec, device: &DeviceSpec, trace: &[Request]) -> Result<u64> {
    Ok(max_batch(
        model,
        device,
        &ParallelSpec::single(),
        trace_seq_len(trace),
        DEFAULT_BATCH_CAP,
    )?
    .pow2_batch)
}

/// Simulates `n_replicas` engines sharing `device`. Each replica's batch cap
/// is `base_batch / n_replicas`; `engine.max_batch` is ignored.
pub fn simulate_replicated(
    model: &ModelSpec,
    device: &DeviceSpec,
    n_replicas: u64,
    trace: Vec<Request>,
    engine: &EngineConfig,
    base_batch: u64,
) -> Result<ReplicatedRun> {
    model.validate()?;
    device.validate()?;
    let plans = replica_partition(model, device, n_replicas, trace_seq_len(&trace), base_batch)?;
    let plan = plans[0].clone();
    let config = EngineConfig {
        max_batch: plan.cap,
        ..engine.clone()
    };
    let blocks = BlockPool::capacity_for(plan.pool, config.block_size, model.kv_bytes_per_token());

    let split = round_robin(trace, n_replicas as usize);
    let assignment = split
        .iter()
        .map(|reqs| reqs.iter().map(|r| r.id).collect())
        .collect();
    let registry = SchedulerRegistry::default();
    let instances = split
        .into_iter()
        .map(|reqs| Instance::new(reqs, blocks, &config, &registry))
        .collect::<Result<Vec<_>>>()?;

    let par = ParallelSpec::single();
    let shared = simulate_shared(
        Hardware {
            model,
            device,
            par: &par,
        },
        instances,
    )?;

    let replicas: Vec<RunMetrics> = shared.instances.iter().map(|r| r.metrics.clone()).collect();
    let mut aggregate = RunMetrics {
        makespan: shared.makespan,
        capacity_blocks: blocks * n_replicas,
        ..RunMetrics::default()
    };
    for m in &replicas {
        aggregate.completed += m.completed;
        aggregate.generated_tokens += m.generated_tokens;
        aggregate.preemption_count += m.preemption_count;
        aggregate.prefill_iterations += m.prefill_iterations;
        aggregate.decode_iterations += m.decode_iterations;
        aggregate.peak_blocks += m.peak_blocks;
        aggregate.latency_mean = aggregate.latency_mean.max(m.latency_mean);
        aggregate.latency_max = aggregate.latency_max.max(m.latency_max);
    }
    if shared.makespan > 0.0 {
        aggregate.throughput_rps = aggregate.completed as f64 / shared.makespan;
        aggregate.throughput_tps = aggregate.generated_tokens as f64 / shared.makespan;
        aggregate.busy_fraction = shared.device_time / shared.makespan;
    }
    let decode_time: f64 = replicas
        .iter()
        .filter(|m| m.decode_tps > 0.0)
        .map(|m| m.generated_tokens as f64 / m.decode_tps)
        .sum();
    if decode_time > 0.0 {
        aggregate.decode_tps = aggregate.generated_tokens as f64 / decode_time;
    }
    if shared.device_time > 0.0 {
        let compute_time: f64 = shared
            .timeline
            .iter()
            .filter(|p| p.compute_bound)
            .map(|p| p.end - p.start)
            .sum();
        aggregate.compute_bound_fraction = compute_time / shared.device_time;
    }
    let latency_mean_of_means = if replicas.is_empty() {
        0.0
    } else {
        replicas.iter().map(|m| m.latency_mean).sum::<f64>() / replicas.len() as f64
    };

    Ok(ReplicatedRun {
        deployment: ReplicaDeployment {
            n_replicas,
            per_replica: plan,
            assignment,
        },
        aggregate,
        latency_mean_of_means,
        replicas,
        timeline: shared.timeline,
    })
}

/// Host overhead making the host phase `fraction` of an average single
/// replica iteration: `fraction / (1 - fraction)` times the mean device time
/// per iteration of an overhead-free run.
pub fn calibrate_host_overhead(
    model: &ModelSpec,
    device: &DeviceSpec,
    trace: &[Request],
    engine: &EngineConfig,
    fraction: f64,
) -> Result<f64> {
    assert!((0.0..1.0).contains(&fraction), "fraction must lie in [0, 1)");
    let device = device.clone().with_host_overhead(0.0);
    let base_batch = single_device_batch(model, &device, trace)?;
    let run = simulate_replicated(model, &device, 1, trace.to_vec(), engine, base_batch)?;
    let iterations: u64 = run.timeline.len() as u64;
    if iterations == 0 {
        return Ok(0.0);
    }
    let device_time: f64 = run.timeline.iter().map(|p| p.end - p.start).sum();
    Ok(fraction / (1.0 - fraction) * device_time / iterations as f64)
}

/// One row of a replica-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaRow {
    pub n_replicas: u64,
    pub outcome: std::result::Result<ReplicatedRun, String>,
}

/// Simulates R = 1..=r_max; deployments that do not fit are kept as errors.
pub fn replication_sweep(
    model: &ModelSpec,
    device: &DeviceSpec,
    trace: &[Request],
    engine: &EngineConfig,
    r_max: u64,
) -> Result<Vec<ReplicaRow>> {
    let base_batch = single_device_batch(model, device, trace)?;
    Ok((1..=r_max)
        .map(|r| ReplicaRow {
            n_replicas: r,
            outcome: simulate_replicated(model, device, r, trace.to_vec(), engine, base_batch)
                .map_err(|e| e.to_string()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run;
    use crate::model_catalog::ModelCatalog;
    use crate::workload::{synthetic, WorkloadSpec};

    #[test]
    fn round_robin_balanced() {
        let trace = synthetic(&WorkloadSpec::closed_loop(7, 4, 4)).unwrap();
        let split = round_robin(trace, 3);
        let sizes: Vec<usize> = split.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(split[1].iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 4]);
    }

    #[test]
    fn one_replica_is_a_plain_run() {
        let c = ModelCatalog::new();
        let m = c.get("OPT-1.3B").unwrap();
        let dev = DeviceSpec::a100_40gb().with_host_overhead(2e-3);
        let trace = synthetic(&WorkloadSpec::closed_loop(60, 512, 64)).unwrap();
        let base_batch = single_device_batch(m, &dev, &trace).unwrap();
        let rep = simulate_replicated(m, &dev, 1, trace.clone(), &EngineConfig::default(), base_batch).unwrap();
        let plain = run(m, &dev, &ParallelSpec::single(), &EngineConfig::continuous(base_batch), trace).unwrap();
        assert_eq!(rep.aggregate.throughput_rps, plain.metrics.throughput_rps);
        assert_eq!(rep.aggregate.latency_mean, plain.metrics.latency_mean);
        assert_eq!(rep.aggregate.makespan, plain.metrics.makespan);
        assert_eq!(rep.replicas[0], plain.metrics);
    }

    #[test]
    fn too_many_replicas_do_not_fit() {
        let c = ModelCatalog::new();
        let m = c.get("OPT-13B").unwrap();
        let trace = synthetic(&WorkloadSpec::closed_loop(4, 512, 256)).unwrap();
        let rows = replication_sweep(m, &DeviceSpec::a100_40gb(), &trace, &EngineConfig::default(), 2).unwrap();
        assert!(rows[0].outcome.is_ok());
        assert!(rows[1].outcome.is_err());
    }
}

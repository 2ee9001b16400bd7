//! Deterministic discrete-event simulation of serving instances.
//!
//! Each instance alternates a host phase (fixed `host_overhead`) and a
//! device phase (the roofline iteration time). Device phases of all
//! instances sharing an accelerator are serialized through one FCFS queue;
//! host phases overlap freely. A single instance is the special case used by
//! [`run`].

mod instance;
mod pool;
mod request;
mod scheduler;

pub use instance::InstanceState;
pub use pool::{BlockPool, DEFAULT_BLOCK_SIZE};
pub use request::{Request, RequestState};
pub use scheduler::{BatchScheduler, ContinuousScheduler, DynamicScheduler, SchedulerRegistry, Step};

use serde::{Deserialize, Serialize};

use crate::costmodel::{decode_iter_cost, prefill_group_cost, Bound, IterationCost};
use crate::error::{Error, Result};
use crate::hardware::{usable_kv_bytes, DeviceSpec, ParallelSpec};
use crate::model_catalog::ModelSpec;
use crate::workload::sort_by_arrival;

/// Upper bound on total iterations before a run is declared livelocked.
pub const MAX_ITERATIONS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Scheduler name in the [`SchedulerRegistry`]: `continuous` or `dynamic`.
    pub mode: String,
    pub max_batch: u64,
    /// Dynamic mode: seconds to wait after the oldest queued arrival.
    pub dynamic_window: f64,
    /// Continuous mode: free blocks required beyond the prompt to admit.
    pub admission_watermark_blocks: u64,
    pub block_size: u64,
    /// Verify block-pool invariants after every event.
    pub checked: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: "continuous".into(),
            max_batch: 256,
            dynamic_window: 0.0,
            admission_watermark_blocks: 1,
            block_size: DEFAULT_BLOCK_SIZE,
            checked: false,
        }
    }
}

impl EngineConfig {
    pub fn continuous(max_batch: u64) -> Self {
        Self {
            max_batch,
            ..Self::default()
        }
    }

    pub fn dynamic(max_batch: u64, window: f64) -> Self {
        Self {
            mode: "dynamic".into(),
            max_batch,
            dynamic_window: window,
            ..Self::default()
        }
    }

    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(Error::Config("engine.max_batch must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("engine.block_size must be at least 1".into()));
        }
        if !(self.dynamic_window.is_finite() && self.dynamic_window >= 0.0) {
            return Err(Error::Config("engine.dynamic_window must be non-negative".into()));
        }
        Ok(())
    }
}

/// Headline metrics of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub completed: u64,
    pub throughput_rps: f64,
    pub throughput_tps: f64,
    /// Generated tokens per second of decode-iteration time.
    pub decode_tps: f64,
    pub latency_mean: f64,
    pub latency_max: f64,
    pub makespan: f64,
    /// Device-phase time over makespan.
    pub busy_fraction: f64,
    /// Share of device time spent in compute-bound iterations.
    pub compute_bound_fraction: f64,
    pub preemption_count: u64,
    pub prefill_iterations: u64,
    pub decode_iterations: u64,
    pub generated_tokens: u64,
    pub peak_blocks: u64,
    pub capacity_blocks: u64,
}

/// One instance's outcome: metrics plus final per-request records (id order).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub records: Vec<Request>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PhaseKind {
    Prefill,
    Decode,
}

/// A device phase as it occupied the accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DevicePhase {
    pub instance: usize,
    pub kind: PhaseKind,
    /// When the host phase ended and the instance joined the device queue.
    pub ready: f64,
    pub start: f64,
    pub end: f64,
    pub batch: usize,
    pub compute_bound: bool,
}

#[derive(Debug, Clone, Default)]
struct InstanceStats {
    device_time: f64,
    decode_time: f64,
    compute_bound_time: f64,
    prefill_iterations: u64,
    decode_iterations: u64,
}

/// A serving instance ready to simulate: its requests, block pool and policy.
pub struct Instance {
    pub state: InstanceState,
    scheduler: Box<dyn BatchScheduler>,
    checked: bool,
    stats: InstanceStats,
}

impl Instance {
    pub fn new(
        mut requests: Vec<Request>,
        capacity_blocks: u64,
        config: &EngineConfig,
        registry: &SchedulerRegistry,
    ) -> Result<Self> {
        config.validate()?;
        sort_by_arrival(&mut requests);
        Ok(Self {
            state: InstanceState::new(requests, capacity_blocks, config.block_size, config.max_batch)?,
            scheduler: registry.create(config)?,
            checked: config.checked,
            stats: InstanceStats::default(),
        })
    }

    fn metrics(&self) -> RunMetrics {
        let reqs = &self.state.requests;
        let stats = &self.stats;
        let mut m = RunMetrics {
            preemption_count: self.state.preemption_count,
            prefill_iterations: stats.prefill_iterations,
            decode_iterations: stats.decode_iterations,
            peak_blocks: self.state.pool.peak(),
            capacity_blocks: self.state.pool.capacity(),
            ..RunMetrics::default()
        };
        let done: Vec<&Request> = reqs.iter().filter(|r| r.is_done()).collect();
        m.completed = done.len() as u64;
        m.generated_tokens = reqs.iter().map(|r| r.generated).sum();
        if done.is_empty() {
            return m;
        }
        let first_arrival = reqs.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let last_done = done.iter().filter_map(|r| r.t_done).fold(f64::NEG_INFINITY, f64::max);
        m.makespan = last_done - first_arrival;
        let latencies = || done.iter().filter_map(|r| r.latency());
        m.latency_mean = latencies().sum::<f64>() / done.len() as f64;
        m.latency_max = latencies().fold(0.0, f64::max);
        if m.makespan > 0.0 {
            m.throughput_rps = m.completed as f64 / m.makespan;
            m.throughput_tps = m.generated_tokens as f64 / m.makespan;
            m.busy_fraction = stats.device_time / m.makespan;
        }
        if stats.decode_time > 0.0 {
            m.decode_tps = m.generated_tokens as f64 / stats.decode_time;
        }
        if stats.device_time > 0.0 {
            m.compute_bound_fraction = stats.compute_bound_time / stats.device_time;
        }
        m
    }

    fn into_result(self) -> RunResult {
        let metrics = self.metrics();
        let mut records = self.state.requests;
        records.sort_by_key(|r| r.id);
        RunResult { metrics, records }
    }
}

/// Cost context shared by the instances on one accelerator.
#[derive(Debug, Clone, Copy)]
pub struct Hardware<'a> {
    pub model: &'a ModelSpec,
    pub device: &'a DeviceSpec,
    pub par: &'a ParallelSpec,
}

impl Hardware<'_> {
    fn cost(&self, state: &InstanceState, step: &Step) -> Result<(PhaseKind, IterationCost)> {
        match step {
            Step::Prefill(slots) => {
                let lens: Vec<u64> = slots.iter().map(|&s| state.requests[s].context_len()).collect();
                Ok((PhaseKind::Prefill, prefill_group_cost(self.model, self.device, self.par, &lens)?))
            }
            Step::Decode(slots) => {
                let cached: u64 = slots.iter().map(|&s| state.requests[s].context_len() + 1).sum();
                let cost = decode_iter_cost(self.model, self.device, self.par, slots.len() as u64, cached)?;
                Ok((PhaseKind::Decode, cost))
            }
            Step::WaitUntil(_) | Step::Finished => unreachable!("only work steps are costed"),
        }
    }
}

#[derive(Debug)]
enum Slot {
    Wake(f64),
    Ready {
        at: f64,
        step: Step,
        kind: PhaseKind,
        cost: IterationCost,
    },
    Busy {
        end: f64,
        step: Step,
    },
    Finished,
}

/// Outcome of simulating instances that share one device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedRun {
    pub instances: Vec<RunResult>,
    /// Last completion minus first arrival across all instances.
    pub makespan: f64,
    pub device_time: f64,
    pub timeline: Vec<DevicePhase>,
}

/// Runs all instances to completion on one accelerator. Ties between
/// instances are broken by index.
pub fn simulate_shared(hw: Hardware<'_>, mut instances: Vec<Instance>) -> Result<SharedRun> {
    let mut slots: Vec<Slot> = instances
        .iter()
        .map(|inst| {
            let first = inst.state.requests.first().map_or(0.0, |r| r.arrival);
            Slot::Wake(first)
        })
        .collect();
    let mut device_free = f64::NEG_INFINITY;
    let mut timeline = Vec::new();
    let mut iterations = 0u64;

    loop {
        // Candidates, earliest first: a device completion, then wake-ups,
        // then the next device start. Same-time events keep that order.
        let busy = slots.iter().enumerate().find_map(|(i, s)| match s {
            Slot::Busy { end, .. } => Some((*end, i)),
            _ => None,
        });
        let wake = slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Slot::Wake(t) => Some((*t, i)),
                _ => None,
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ready = if busy.is_none() {
            slots
                .iter()
                .enumerate()
                .filter_map(|(i, s)| match s {
                    Slot::Ready { at, .. } => Some((*at, i)),
                    _ => None,
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(at, i)| (at.max(device_free), i))
        } else {
            None
        };

        let earliest = [busy, wake, ready]
            .into_iter()
            .flatten()
            .map(|(t, _)| t)
            .fold(f64::INFINITY, f64::min);
        if earliest == f64::INFINITY {
            break;
        }

        if let Some((end, i)) = busy.filter(|&(t, _)| t <= earliest) {
            let Slot::Busy { step, .. } = std::mem::replace(&mut slots[i], Slot::Wake(end)) else {
                unreachable!()
            };
            let inst = &mut instances[i];
            match &step {
                Step::Prefill(s) => inst.state.finish_prefill(s),
                Step::Decode(s) => inst.state.finish_decode(s, end),
                _ => unreachable!(),
            }
            if inst.checked {
                inst.state.check()?;
            }
        } else if let Some((now, i)) = wake.filter(|&(t, _)| t <= earliest) {
            iterations += 1;
            if iterations > MAX_ITERATIONS {
                return Err(Error::Livelock(MAX_ITERATIONS));
            }
            let inst = &mut instances[i];
            let step = inst.scheduler.schedule(&mut inst.state, now);
            slots[i] = match step {
                Step::Finished => Slot::Finished,
                Step::WaitUntil(t) => {
                    if t <= now {
                        return Err(Error::Livelock(iterations));
                    }
                    Slot::Wake(t)
                }
                Step::Prefill(ref s) | Step::Decode(ref s) if s.is_empty() => {
                    return Err(Error::Livelock(iterations));
                }
                step => {
                    let (kind, cost) = hw.cost(&inst.state, &step)?;
                    Slot::Ready {
                        at: now + cost.t_host,
                        step,
                        kind,
                        cost,
                    }
                }
            };
        } else if let Some((start, i)) = ready {
            let Slot::Ready { at, step, kind, cost } = std::mem::replace(&mut slots[i], Slot::Finished)
            else {
                unreachable!()
            };
            let device_time = cost.device_time();
            let end = start + device_time;
            let batch = match &step {
                Step::Prefill(s) | Step::Decode(s) => s.len(),
                _ => 0,
            };
            let stats = &mut instances[i].stats;
            stats.device_time += device_time;
            if cost.bound == Bound::Compute {
                stats.compute_bound_time += device_time;
            }
            match kind {
                PhaseKind::Prefill => stats.prefill_iterations += 1,
                PhaseKind::Decode => {
                    stats.decode_iterations += 1;
                    stats.decode_time += cost.t_total;
                }
            }
            timeline.push(DevicePhase {
                instance: i,
                kind,
                ready: at,
                start,
                end,
                batch,
                compute_bound: cost.bound == Bound::Compute,
            });
            device_free = end;
            slots[i] = Slot::Busy { end, step };
        }
    }

    let device_time = instances.iter().map(|i| i.stats.device_time).sum();
    let results: Vec<RunResult> = instances.into_iter().map(Instance::into_result).collect();
    let all = || results.iter().flat_map(|r| r.records.iter());
    let makespan = if all().any(|r| r.is_done()) {
        let first = all().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let last = all().filter_map(|r| r.t_done).fold(f64::NEG_INFINITY, f64::max);
        last - first
    } else {
        0.0
    };
    Ok(SharedRun {
        instances: results,
        makespan,
        device_time,
        timeline,
    })
}

/// KV blocks available to a single engine on a TP group.
pub fn capacity_blocks(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    block_size: u64,
) -> Result<u64> {
    let pool = usable_kv_bytes(model, device, par)?;
    Ok(BlockPool::capacity_for(pool, block_size, model.kv_bytes_per_token()))
}

/// Simulates one serving instance over `trace`, with the pool sized from the
/// device's usable memory.
pub fn run(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    config: &EngineConfig,
    trace: Vec<Request>,
) -> Result<RunResult> {
    let blocks = capacity_blocks(model, device, par, config.block_size)?;
    run_with_blocks(model, device, par, config, trace, blocks)
}

/// Like [`run`] with an explicit block-pool size.
pub fn run_with_blocks(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    config: &EngineConfig,
    trace: Vec<Request>,
    capacity_blocks: u64,
) -> Result<RunResult> {
    model.validate()?;
    device.validate()?;
    par.validate()?;
    let registry = SchedulerRegistry::default();
    let instance = Instance::new(trace, capacity_blocks, config, &registry)?;
    let hw = Hardware { model, device, par };
    let mut shared = simulate_shared(hw, vec![instance])?;
    Ok(shared.instances.pop().expect("one instance"))
}

use servesim::engine::{run, run_with_blocks, EngineConfig, Request, RequestState};
use servesim::hardware::{DeviceSpec, ParallelSpec};
use servesim::model_catalog::{ModelCatalog, ModelSpec};
use servesim::workload::{synthetic, WorkloadSpec};
use servesim::Error;

fn model(name: &str) -> ModelSpec {
    ModelCatalog::new().get(name).unwrap().clone()
}

/// Roofline time written out from the raw formulas.
fn roofline(dev: &DeviceSpec, flops: f64, bytes: f64) -> f64 {
    (flops / dev.peak_flops).max(bytes / dev.mem_bw) + dev.host_overhead
}

fn hand_prefill(m: &ModelSpec, dev: &DeviceSpec, batch: u64, prompt: u64) -> f64 {
    let n = m.n_params as f64;
    let lhq = (m.n_layers * m.n_heads * m.head_dim) as f64;
    let kv = (2 * 2 * m.hidden * m.n_layers) as f64;
    let tokens = (batch * prompt) as f64;
    let flops = tokens * (2.0 * n + 6.0 * lhq * prompt as f64);
    let bytes = 2.0 * n + tokens * kv;
    roofline(dev, flops, bytes)
}

fn hand_decode(m: &ModelSpec, dev: &DeviceSpec, contexts: &[u64]) -> f64 {
    let n = m.n_params as f64;
    let lhq = (m.n_layers * m.n_heads * m.head_dim) as f64;
    let kv = (2 * 2 * m.hidden * m.n_layers) as f64;
    let flops: f64 = contexts.iter().map(|&t| 2.0 * n + 6.0 * lhq * t as f64).sum();
    let bytes = 2.0 * n + contexts.iter().sum::<u64>() as f64 * kv;
    roofline(dev, flops, bytes)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1e-12)
}

#[test]
fn empty_trace() {
    let r = run(
        &model("OPT-125M"),
        &DeviceSpec::a100_40gb(),
        &ParallelSpec::single(),
        &EngineConfig::default(),
        vec![],
    )
    .unwrap();
    assert_eq!(r.metrics.throughput_rps, 0.0);
    assert_eq!(r.metrics.makespan, 0.0);
    assert!(r.records.is_empty());
}

#[test]
fn two_requests_match_hand_event_list() {
    let m = model("OPT-125M");
    let dev = DeviceSpec::a100_40gb();
    let trace = vec![Request::new(0, 0.0, 16, 16), Request::new(1, 0.0, 16, 16)];
    let r = run(&m, &dev, &ParallelSpec::single(), &EngineConfig::continuous(2).checked(), trace).unwrap();

    // one prefill of both prompts, then 16 decode steps; step k writes
    // token 17 + k of both sequences
    let mut expect = hand_prefill(&m, &dev, 2, 16);
    for k in 0..16 {
        expect += hand_decode(&m, &dev, &[17 + k, 17 + k]);
    }
    assert!(close(r.metrics.makespan, expect), "{} vs {expect}", r.metrics.makespan);
    assert_eq!(r.metrics.prefill_iterations, 1);
    assert_eq!(r.metrics.decode_iterations, 16);
    assert_eq!(r.records[0].t_done, r.records[1].t_done);
    assert_eq!(r.records[0].t_first_sched, Some(0.0));
    assert!(close(r.metrics.latency_mean, expect));
}

#[test]
fn host_overhead_adds_per_iteration() {
    let m = model("OPT-125M");
    let base = DeviceSpec::a100_40gb();
    let slow = base.clone().with_host_overhead(1e-3);
    let trace = vec![Request::new(0, 0.0, 16, 16), Request::new(1, 0.0, 16, 16)];
    let p = ParallelSpec::single();
    let a = run(&m, &base, &p, &EngineConfig::continuous(2), trace.clone()).unwrap();
    let b = run(&m, &slow, &p, &EngineConfig::continuous(2), trace).unwrap();
    assert!(close(b.metrics.makespan - a.metrics.makespan, 17e-3));
}

#[test]
fn single_slot_latency_is_analytic() {
    let m = model("OPT-1.3B");
    let dev = DeviceSpec::a100_40gb();
    let (input, output) = (64, 32);
    let single: f64 = hand_prefill(&m, &dev, 1, input)
        + (0..output).map(|k| hand_decode(&m, &dev, &[input + k + 1])).sum::<f64>();

    let one = vec![Request::new(0, 0.0, input, output)];
    let r = run(&m, &dev, &ParallelSpec::single(), &EngineConfig::continuous(1), one).unwrap();
    assert!(close(r.metrics.latency_mean, single));

    // arrivals spaced wider than one service time never queue
    let spaced: Vec<Request> = (0..5)
        .map(|i| Request::new(i, i as f64 * 2.0 * single, input, output))
        .collect();
    let r = run(&m, &dev, &ParallelSpec::single(), &EngineConfig::continuous(1).checked(), spaced).unwrap();
    assert!(close(r.metrics.latency_mean, single));
    assert!(close(r.metrics.latency_max, single));

    // closed loop: the i-th request waits for i predecessors
    let closed = synthetic(&WorkloadSpec::closed_loop(5, input, output)).unwrap();
    let r = run(&m, &dev, &ParallelSpec::single(), &EngineConfig::continuous(1), closed).unwrap();
    assert!((r.metrics.latency_mean - 3.0 * single).abs() < 1e-9 * single);
}

#[test]
fn default_workload_conserves_tokens() {
    let m = model("OPT-1.3B");
    let trace = synthetic(&WorkloadSpec::default()).unwrap();
    let r = run(
        &m,
        &DeviceSpec::a100_40gb(),
        &ParallelSpec::single(),
        &EngineConfig::continuous(256).checked(),
        trace,
    )
    .unwrap();
    assert_eq!(r.metrics.generated_tokens, 128_000);
    assert_eq!(r.metrics.completed, 500);
    assert!(r.metrics.peak_blocks <= r.metrics.capacity_blocks);
    assert!(r.records.iter().all(|q| q.state == RequestState::Done && q.generated == 256));
    // 256 full-length requests need 12288 blocks; the pool has 10617
    assert_eq!(r.metrics.capacity_blocks, 10_617);
    assert!(r.metrics.preemption_count > 0);
    let pre: u64 = r.records.iter().map(|q| q.preemptions).sum();
    assert_eq!(pre, r.metrics.preemption_count);
}

#[test]
fn makespan_shrinks_with_batch_cap() {
    let m = model("OPT-125M");
    let trace = synthetic(&WorkloadSpec::closed_loop(200, 128, 64)).unwrap();
    let mut prev = f64::INFINITY;
    for cap in [1, 2, 4, 8, 16, 32, 64, 128, 256] {
        let r = run(
            &m,
            &DeviceSpec::a100_40gb(),
            &ParallelSpec::single(),
            &EngineConfig::continuous(cap),
            trace.clone(),
        )
        .unwrap();
        assert!(r.metrics.makespan <= prev, "cap {cap}");
        prev = r.metrics.makespan;
    }
}

#[test]
fn deterministic_across_runs_and_threads() {
    let m = model("OPT-2.7B");
    let spec = WorkloadSpec {
        n_requests: 120,
        arrival_rate: servesim::workload::ArrivalRate::PerSecond(20.0),
        seed: 3,
        ..WorkloadSpec::default()
    };
    let go = || {
        run(
            &m,
            &DeviceSpec::a100_40gb(),
            &ParallelSpec::single(),
            &EngineConfig::continuous(64).checked(),
            synthetic(&spec).unwrap(),
        )
        .unwrap()
    };
    let first = go();
    let concurrent: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(go)).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for h in concurrent {
        assert_eq!(h, first);
        assert_eq!(h.metrics.throughput_rps.to_bits(), first.metrics.throughput_rps.to_bits());
    }
}

#[test]
fn oversized_request_is_config_error() {
    let m = model("OPT-13B");
    let trace = vec![Request::new(0, 0.0, 20_000, 10)];
    let err = run(
        &m,
        &DeviceSpec::a100_40gb(),
        &ParallelSpec::single(),
        &EngineConfig::default(),
        trace,
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn prompt_filling_the_pool_still_runs() {
    // 4 blocks of 16: a 60-token prompt plus 4 outputs uses all of them
    let m = model("OPT-125M");
    let trace = vec![Request::new(0, 0.0, 60, 4), Request::new(1, 0.0, 60, 4)];
    let r = run_with_blocks(
        &m,
        &DeviceSpec::a100_40gb(),
        &ParallelSpec::single(),
        &EngineConfig::continuous(4).checked(),
        trace,
        4,
    )
    .unwrap();
    assert_eq!(r.metrics.completed, 2);
}

#[test]
fn dynamic_groups_run_to_completion() {
    let m = model("OPT-125M");
    let trace = vec![
        Request::new(0, 0.0, 16, 4),
        Request::new(1, 0.0, 16, 40),
        Request::new(2, 0.0, 16, 4),
    ];
    let p = ParallelSpec::single();
    let dev = DeviceSpec::a100_40gb();
    let r = run(&m, &dev, &p, &EngineConfig::dynamic(2, 0.0).checked(), trace.clone()).unwrap();
    // request 2 waits for the whole first group, including the long request 1
    assert!(r.records[2].t_first_sched.unwrap() >= r.records[1].t_done.unwrap());
    let c = run(&m, &dev, &p, &EngineConfig::continuous(2).checked(), trace).unwrap();
    assert!(c.records[2].t_first_sched.unwrap() < c.records[1].t_done.unwrap());
    assert!(c.metrics.throughput_rps >= r.metrics.throughput_rps);
}

//! Batch-cap sweeps, Pareto-frontier extraction and saturation detection.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{self, EngineConfig, Request, RunResult};
use crate::error::{Error, Result};
use crate::hardware::{DeviceSpec, ParallelSpec};
use crate::model_catalog::ModelSpec;

pub const DEFAULT_SATURATION_EPSILON: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub config_label: String,
    pub batch_cap: u64,
    pub tp_degree: u64,
    pub throughput_rps: f64,
    pub tokens_per_s: f64,
    pub latency_mean: f64,
    pub latency_max: f64,
    /// Share of device time spent compute-bound.
    pub bound_fraction: f64,
}

impl SweepPoint {
    pub fn from_run(label: impl Into<String>, batch_cap: u64, tp_degree: u64, run: &RunResult) -> Self {
        let m = &run.metrics;
        Self {
            config_label: label.into(),
            batch_cap,
            tp_degree,
            throughput_rps: m.throughput_rps,
            tokens_per_s: m.throughput_tps,
            latency_mean: m.latency_mean,
            latency_max: m.latency_max,
            bound_fraction: m.compute_bound_fraction,
        }
    }
}

/// A sweep point whose simulation failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFailure {
    pub config_label: String,
    pub batch_cap: u64,
    pub tp_degree: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub failures: Vec<SweepFailure>,
}

pub fn sweep_label(model: &ModelSpec, tp_degree: u64, batch_cap: u64) -> String {
    format!("{}/tp{}/b{}", model.name, tp_degree, batch_cap)
}

/// Powers of two from 1 up to `max_cap`.
pub fn default_caps(max_cap: u64) -> Vec<u64> {
    std::iter::successors(Some(1u64), |c| c.checked_mul(2))
        .take_while(|&c| c <= max_cap)
        .collect()
}

/// One full simulation per cap, evaluated in parallel; results are ordered
/// by cap exactly as a sequential sweep would produce them.
pub fn batch_sweep(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    trace: &[Request],
    base: &EngineConfig,
    caps: &[u64],
) -> Result<SweepResult> {
    if caps.is_empty() || caps.contains(&0) {
        return Err(Error::Config("sweep caps must be a nonempty list of positive counts".into()));
    }
    let outcomes: Vec<(u64, Result<RunResult>)> = caps
        .par_iter()
        .map(|&cap| {
            let config = EngineConfig {
                max_batch: cap,
                ..base.clone()
            };
            (cap, engine::run(model, device, par, &config, trace.to_vec()))
        })
        .collect();

    let mut result = SweepResult::default();
    for (cap, outcome) in outcomes {
        let label = sweep_label(model, par.tp_degree, cap);
        match outcome {
            Ok(run) => result.points.push(SweepPoint::from_run(label, cap, par.tp_degree, &run)),
            Err(e) => result.failures.push(SweepFailure {
                config_label: label,
                batch_cap: cap,
                tp_degree: par.tp_degree,
                reason: e.to_string(),
            }),
        }
    }
    Ok(result)
}

/// Non-dominated subset: maximize throughput, minimize latency.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParetoSet {
    pub points: Vec<SweepPoint>,
}

/// `a` dominates `b` if it is at least as good on both axes and strictly
/// better on one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    let (tput_a, lat_a) = a;
    let (tput_b, lat_b) = b;
    tput_a >= tput_b && lat_a <= lat_b && (tput_a > tput_b || lat_a < lat_b)
}

/// Indices of the non-dominated `(throughput, latency)` pairs, ordered by
/// latency ascending (input order among equal latencies). Identical points
/// do not dominate each other, so duplicates on the frontier all survive.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .total_cmp(&points[b].1)
            .then(points[b].0.total_cmp(&points[a].0))
    });

    let mut keep = Vec::new();
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let latency = points[order[i]].1;
        let group_best = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].1 == latency {
            if points[order[j]].0 == group_best && group_best > best_before {
                keep.push(order[j]);
            }
            j += 1;
        }
        best_before = best_before.max(group_best);
        i = j;
    }
    keep.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1).then(a.cmp(&b)));
    keep
}

pub fn pareto_frontier(points: &[SweepPoint]) -> ParetoSet {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.throughput_rps, p.latency_mean)).collect();
    ParetoSet {
        points: pareto_indices(&pairs)
            .into_iter()
            .map(|i| points[i].clone())
            .collect(),
    }
}

/// Smallest cap `B` whose doubling gains less than `epsilon` relative
/// throughput. `points` must be ordered by successively doubling caps.
pub fn saturation_point(points: &[SweepPoint], epsilon: f64) -> Result<Option<u64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    for (i, w) in points.windows(2).enumerate() {
        if w[1].batch_cap != w[0].batch_cap * 2 {
            return Err(Error::Order(i + 1));
        }
    }
    Ok(points
        .windows(2)
        .find(|w| w[1].throughput_rps < w[0].throughput_rps * (1.0 + epsilon))
        .map(|w| w[0].batch_cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(cap: u64, tput: f64, lat: f64) -> SweepPoint {
        SweepPoint {
            config_label: format!("b{cap}"),
            batch_cap: cap,
            tp_degree: 1,
            throughput_rps: tput,
            tokens_per_s: 0.0,
            latency_mean: lat,
            latency_max: lat,
            bound_fraction: 0.0,
        }
    }

    #[test]
    fn frontier_basics() {
        let one = vec![pt(1, 3.0, 4.0)];
        assert_eq!(pareto_frontier(&one).points, one);
        let f = pareto_frontier(&[pt(1, 10.0, 1.0), pt(2, 9.0, 2.0)]);
        assert_eq!(f.points, vec![pt(1, 10.0, 1.0)]);
        assert!(pareto_frontier(&[]).points.is_empty());
    }

    #[test]
    fn ties_survive() {
        let pts = [pt(1, 5.0, 1.0), pt(2, 5.0, 1.0), pt(3, 5.0, 2.0), pt(4, 4.0, 1.0)];
        let caps: Vec<u64> = pareto_frontier(&pts).points.iter().map(|p| p.batch_cap).collect();
        assert_eq!(caps, vec![1, 2]);
    }

    #[test]
    fn saturation() {
        let doubling: Vec<SweepPoint> = (0..6).map(|k| pt(1 << k, (1u64 << k) as f64, 1.0)).collect();
        assert_eq!(saturation_point(&doubling, 0.1).unwrap(), None);
        let curve = [pt(64, 10.0, 1.0), pt(128, 19.0, 1.0), pt(256, 19.5, 1.0)];
        assert_eq!(saturation_point(&curve, 0.10).unwrap(), Some(128));
        let bad = [pt(64, 10.0, 1.0), pt(100, 19.0, 1.0)];
        assert!(matches!(saturation_point(&bad, 0.1), Err(Error::Order(1))));
        assert_eq!(saturation_point(&[], 0.1).unwrap(), None);
    }

    #[test]
    fn caps_are_powers_of_two() {
        assert_eq!(default_caps(256), vec![1, 2, 4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(default_caps(1), vec![1]);
    }

    fn brute_force(points: &[(f64, f64)]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| !points.iter().any(|&q| dominates(q, points[i])))
            .collect()
    }

    fn arb_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        // coarse grid values force ties
        prop::collection::vec((0u32..20, 0u32..20), 0..60)
            .prop_map(|v| v.into_iter().map(|(a, b)| (a as f64, b as f64 * 0.5)).collect())
    }

    proptest! {
        #[test]
        fn matches_brute_force(points in arb_points()) {
            let mut fast = pareto_indices(&points);
            fast.sort();
            prop_assert_eq!(fast, brute_force(&points));
        }

        #[test]
        fn idempotent_and_scale_free(points in arb_points(), sx in 0.01f64..100.0, sy in 0.01f64..100.0) {
            let pts: Vec<SweepPoint> = points.iter().enumerate().map(|(i, &(t, l))| pt(i as u64, t, l)).collect();
            let f = pareto_frontier(&pts);
            prop_assert_eq!(&pareto_frontier(&f.points), &f);
            let scaled: Vec<(f64, f64)> = points.iter().map(|&(t, l)| (t * sx, l * sy)).collect();
            let mut a = pareto_indices(&points);
            let mut b = pareto_indices(&scaled);
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn saturation_monotone_in_epsilon(gains in prop::collection::vec(1.0f64..2.5, 1..10), e1 in 0.01f64..1.0, e2 in 0.01f64..1.0) {
            let mut t = 1.0;
            let mut pts = vec![pt(1, t, 1.0)];
            for (k, g) in gains.iter().enumerate() {
                t *= g;
                pts.push(pt(1 << (k + 1), t, 1.0));
            }
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            let cap_lo = saturation_point(&pts, lo).unwrap().unwrap_or(u64::MAX);
            let cap_hi = saturation_point(&pts, hi).unwrap().unwrap_or(u64::MAX);
            prop_assert!(cap_hi <= cap_lo);
        }
    }
}

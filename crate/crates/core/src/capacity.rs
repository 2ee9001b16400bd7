//! Analytic capacity planning: how many full-length requests fit in the
//! KV-cache pool, reported both exactly and as a power of two.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hardware::{usable_kv_bytes, DeviceSpec, ParallelSpec};
use crate::model_catalog::ModelSpec;

pub const DEFAULT_BATCH_CAP: u64 = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityPlan {
    /// `pool / kv_per_request`, unrounded.
    pub exact_batch: f64,
    /// Nearest power of two on a log scale, clamped to `cap`.
    pub pow2_batch: u64,
    /// KV bytes of one request at the full sequence budget.
    pub kv_per_request: f64,
    pub pool: f64,
    pub cap: u64,
}

impl CapacityPlan {
    fn from_pool(model: &ModelSpec, pool: f64, seq_len: u64, cap: u64) -> Result<Self> {
        let kv_per_request = (seq_len * model.kv_bytes_per_token()) as f64;
        let exact_batch = pool / kv_per_request;
        if !(exact_batch >= 1.0) || cap == 0 {
            return Err(Error::ZeroCapacity {
                model: model.name.clone(),
                seq_len,
                exact_batch,
            });
        }
        Ok(Self {
            exact_batch,
            pow2_batch: round_pow2_geometric(exact_batch).min(prev_power_of_two(cap)),
            kv_per_request,
            pool,
            cap,
        })
    }
}

/// Largest power of two `<= n`, for `n >= 1`.
pub fn prev_power_of_two(n: u64) -> u64 {
    debug_assert!(n >= 1);
    1 << (63 - n.leading_zeros())
}

/// Rounds `x >= 1` to the nearest power of two in log space: with
/// `2^k <= x < 2^(k+1)`, rounds up iff `x > 2^k * sqrt(2)`.
pub fn round_pow2_geometric(x: f64) -> u64 {
    assert!(x >= 1.0, "geometric rounding needs x >= 1, got {x}");
    let lo = if x >= u64::MAX as f64 {
        1 << 63
    } else {
        prev_power_of_two(x as u64)
    };
    if lo < (1 << 63) && x > lo as f64 * std::f64::consts::SQRT_2 {
        lo * 2
    } else {
        lo
    }
}

/// Maximum batch for requests of `seq_len` tokens on one TP group.
pub fn max_batch(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    seq_len: u64,
    cap: u64,
) -> Result<CapacityPlan> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    let pool = usable_kv_bytes(model, device, par)?;
    CapacityPlan::from_pool(model, pool, seq_len, cap)
}

/// Splits the usable memory of one device evenly across `n_replicas`
/// independent engine instances, each holding its own copy of the weights.
/// Each replica's batch cap is `base_batch / n_replicas`.
pub fn replica_partition(
    model: &ModelSpec,
    device: &DeviceSpec,
    n_replicas: u64,
    seq_len: u64,
    base_batch: u64,
) -> Result<Vec<CapacityPlan>> {
    if n_replicas == 0 {
        return Err(Error::Config("number of replicas must be at least 1".into()));
    }
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    let share = device.usable_bytes() / n_replicas as f64;
    let weights = model.weights_bytes();
    if weights as f64 > share {
        return Err(Error::NonFitting {
            model: model.name.clone(),
            weights_bytes: weights,
            available_bytes: share,
        });
    }
    let plan = CapacityPlan::from_pool(
        model,
        share - weights as f64,
        seq_len,
        base_batch / n_replicas,
    )?;
    Ok(vec![plan; n_replicas as usize])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_catalog::ModelCatalog;

    fn plan(name: &str) -> CapacityPlan {
        let c = ModelCatalog::new();
        max_batch(
            c.get(name).unwrap(),
            &DeviceSpec::a100_40gb(),
            &ParallelSpec::single(),
            768,
            DEFAULT_BATCH_CAP,
        )
        .unwrap()
    }

    #[test]
    fn reproduces_batch_table() {
        let p = plan("OPT-13B");
        assert!((p.exact_batch - 15.894).abs() < 1e-3, "{}", p.exact_batch);
        assert_eq!(p.pow2_batch, 16);
        let p = plan("OPT-6.7B");
        assert!((p.exact_batch - 56.127).abs() < 1e-3, "{}", p.exact_batch);
        assert_eq!(p.pow2_batch, 64);
        let p = plan("OPT-125M");
        assert!((p.exact_batch - 1262.7).abs() < 0.1, "{}", p.exact_batch);
        assert_eq!(p.pow2_batch, 512);
        assert_eq!(plan("OPT-2.7B").pow2_batch, 128);
        assert_eq!(plan("OPT-1.3B").pow2_batch, 256);
    }

    #[test]
    fn geometric_rounding() {
        assert_eq!(round_pow2_geometric(1.0), 1);
        assert_eq!(round_pow2_geometric(1.41), 1);
        assert_eq!(round_pow2_geometric(1.42), 2);
        assert_eq!(round_pow2_geometric(15.89), 16);
        assert_eq!(round_pow2_geometric(45.0), 32);
        assert_eq!(round_pow2_geometric(46.0), 64);
        assert_eq!(round_pow2_geometric(1024.0), 1024);
        assert_eq!(prev_power_of_two(170), 128);
    }

    #[test]
    fn zero_capacity() {
        let c = ModelCatalog::new();
        let err = max_batch(
            c.get("OPT-13B").unwrap(),
            &DeviceSpec::a100_40gb(),
            &ParallelSpec::single(),
            20_000,
            512,
        );
        assert!(matches!(err, Err(Error::ZeroCapacity { .. })));
    }

    #[test]
    fn replica_partitions() {
        let c = ModelCatalog::new();
        let dev = DeviceSpec::a100_40gb();
        let m = c.get("OPT-1.3B").unwrap();
        let plans = replica_partition(m, &dev, 2, 768, 256).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].cap, 128);
        assert!((plans[0].pool - (18e9 - 2.6e9)).abs() < 1.0);
        assert_eq!(plans[0], plans[1]);

        let single = replica_partition(m, &dev, 1, 768, 256).unwrap();
        let direct = max_batch(m, &dev, &ParallelSpec::single(), 768, 256).unwrap();
        assert_eq!(single, vec![direct]);

        let err = replica_partition(c.get("OPT-13B").unwrap(), &dev, 2, 768, 16);
        assert!(matches!(err, Err(Error::NonFitting { .. })));
    }

    #[test]
    fn partitions_never_exceed_usable_memory() {
        let c = ModelCatalog::new();
        let dev = DeviceSpec::a100_40gb();
        for m in c.iter() {
            for r in 1..=8 {
                if let Ok(plans) = replica_partition(m, &dev, r, 768, 512) {
                    let used: f64 = plans.iter().map(|p| p.pool + m.weights_bytes() as f64).sum();
                    assert!(used <= dev.usable_bytes() * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn exact_batch_monotone() {
        let c = ModelCatalog::new();
        let dev = DeviceSpec::a100_40gb();
        for m in c.iter() {
            let mut prev = f64::INFINITY;
            for seq in [128, 256, 512, 768, 1024, 2048] {
                let p = max_batch(m, &dev, &ParallelSpec::single(), seq, 512).unwrap();
                assert!(p.exact_batch <= prev);
                prev = p.exact_batch;
            }
            let mut prev = 0.0;
            for d in 1..=4 {
                let p = max_batch(m, &dev, &ParallelSpec::tensor_parallel(d), 768, 512).unwrap();
                assert!(p.exact_batch >= prev);
                prev = p.exact_batch;
            }
        }
    }
}

//! Accelerator envelope and tensor-parallel deployment shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_catalog::ModelSpec;

/// Memory, bandwidth and compute limits of one accelerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub hbm_bytes: f64,
    /// Bytes per second.
    pub mem_bw: f64,
    /// FLOPs per second.
    pub peak_flops: f64,
    /// Share of HBM the engine may allocate for weights and KV cache.
    pub usable_fraction: f64,
    /// Fixed host-side cost per engine iteration, seconds.
    #[serde(default)]
    pub host_overhead: f64,
}

impl DeviceSpec {
    /// 40 GB A100: 1555 GB/s, 312 TFLOP/s FP16 dense, 90% usable.
    pub fn a100_40gb() -> Self {
        Self {
            hbm_bytes: 40e9,
            mem_bw: 1.555e12,
            peak_flops: 312e12,
            usable_fraction: 0.9,
            host_overhead: 0.0,
        }
    }

    pub fn with_host_overhead(mut self, seconds: f64) -> Self {
        self.host_overhead = seconds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hbm_bytes", self.hbm_bytes),
            ("mem_bw", self.mem_bw),
            ("peak_flops", self.peak_flops),
            ("usable_fraction", self.usable_fraction),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidDevice(format!("{name} must be positive, got {v}")));
            }
        }
        if self.usable_fraction > 1.0 {
            return Err(Error::InvalidDevice(format!(
                "usable_fraction must be at most 1, got {}",
                self.usable_fraction
            )));
        }
        if !(self.host_overhead.is_finite() && self.host_overhead >= 0.0) {
            return Err(Error::InvalidDevice(format!(
                "host_overhead must be non-negative, got {}",
                self.host_overhead
            )));
        }
        Ok(())
    }

    /// Bytes available to the engine on one device.
    pub fn usable_bytes(&self) -> f64 {
        self.hbm_bytes * self.usable_fraction
    }

    /// Arithmetic intensity (FLOPs/byte) where memory and compute time meet.
    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.mem_bw
    }
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self::a100_40gb()
    }
}

/// Tensor-parallel group: `tp_degree` devices joined by collectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelSpec {
    pub tp_degree: u64,
    /// Bytes per second per collective.
    #[serde(default = "default_link_bw")]
    pub link_bw: f64,
    /// Fixed cost of one collective, seconds.
    #[serde(default = "default_comm_base_latency")]
    pub comm_base_latency: f64,
}

fn default_link_bw() -> f64 {
    ParallelSpec::DEFAULT_LINK_BW
}

fn default_comm_base_latency() -> f64 {
    ParallelSpec::DEFAULT_COMM_BASE_LATENCY
}

impl ParallelSpec {
    /// Uncalibrated. 300 GB/s is one direction of A100 NVLink.
    pub const DEFAULT_LINK_BW: f64 = 300e9;
    /// Uncalibrated. Per-collective cost including the worker
    /// synchronisation of a multi-process engine, not just NCCL latency.
    pub const DEFAULT_COMM_BASE_LATENCY: f64 = 200e-6;

    pub fn single() -> Self {
        Self::tensor_parallel(1)
    }

    pub fn tensor_parallel(tp_degree: u64) -> Self {
        Self {
            tp_degree,
            link_bw: Self::DEFAULT_LINK_BW,
            comm_base_latency: Self::DEFAULT_COMM_BASE_LATENCY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tp_degree == 0 {
            return Err(Error::InvalidDevice("tp_degree must be at least 1".into()));
        }
        if self.tp_degree > 1
            && !(self.link_bw.is_finite()
                && self.link_bw > 0.0
                && self.comm_base_latency.is_finite()
                && self.comm_base_latency >= 0.0)
        {
            return Err(Error::InvalidDevice(
                "link_bw must be positive and comm_base_latency non-negative when tp_degree > 1"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn degree(&self) -> f64 {
        self.tp_degree as f64
    }
}

impl Default for ParallelSpec {
    fn default() -> Self {
        Self::single()
    }
}

/// KV-cache bytes across the whole TP group once the (sharded) weights are
/// resident: `D * hbm * usable_fraction - weights`.
pub fn usable_kv_bytes(model: &ModelSpec, device: &DeviceSpec, par: &ParallelSpec) -> Result<f64> {
    let available = par.degree() * device.usable_bytes();
    let weights = model.weights_bytes();
    if weights as f64 > available {
        return Err(Error::NonFitting {
            model: model.name.clone(),
            weights_bytes: weights,
            available_bytes: available,
        });
    }
    Ok(available - weights as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_catalog::ModelCatalog;

    #[test]
    fn single_device_pools() {
        let c = ModelCatalog::new();
        let dev = DeviceSpec::a100_40gb();
        let p = ParallelSpec::single();
        let pool = usable_kv_bytes(c.get("OPT-13B").unwrap(), &dev, &p).unwrap();
        assert!((pool - 10.0e9).abs() < 1.0);
        let pool = usable_kv_bytes(c.get("OPT-125M").unwrap(), &dev, &p).unwrap();
        assert!((pool - 35.75e9).abs() < 1.0);
        assert!((dev.usable_bytes() - 36e9).abs() < 1.0);
    }

    #[test]
    fn oversized_model_does_not_fit() {
        let huge = ModelSpec::new("huge", 40_000_000_000, 1, 1, 1, 1);
        let err = usable_kv_bytes(&huge, &DeviceSpec::a100_40gb(), &ParallelSpec::single());
        assert!(matches!(err, Err(Error::NonFitting { .. })));
        // two devices host it
        let ok = usable_kv_bytes(&huge, &DeviceSpec::a100_40gb(), &ParallelSpec::tensor_parallel(3));
        assert!(ok.is_ok());
    }

    #[test]
    fn pool_grows_with_tp_degree() {
        let c = ModelCatalog::new();
        let dev = DeviceSpec::a100_40gb();
        for m in c.iter() {
            let mut last = f64::NEG_INFINITY;
            for d in 1..=8 {
                let pool = usable_kv_bytes(m, &dev, &ParallelSpec::tensor_parallel(d)).unwrap();
                assert!(pool > last);
                last = pool;
            }
        }
    }

    #[test]
    fn validation() {
        assert!(DeviceSpec::a100_40gb().validate().is_ok());
        let mut d = DeviceSpec::a100_40gb();
        d.usable_fraction = 1.2;
        assert!(d.validate().is_err());
        d.usable_fraction = 0.0;
        assert!(d.validate().is_err());
        let d = DeviceSpec::a100_40gb().with_host_overhead(-1.0);
        assert!(d.validate().is_err());
        assert!(ParallelSpec::tensor_parallel(0).validate().is_err());
        let mut p = ParallelSpec::tensor_parallel(2);
        p.link_bw = 0.0;
        assert!(p.validate().is_err());
        p.tp_degree = 1;
        assert!(p.validate().is_ok());
    }
}

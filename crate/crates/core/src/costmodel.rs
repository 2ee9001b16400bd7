//! Roofline iteration-time model.
//!
//! An iteration moves `bytes` through device memory and performs `flops`
//! add-multiplies; it takes as long as the slower of the two, plus tensor
//! parallel collectives and a fixed host-side overhead.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hardware::{DeviceSpec, ParallelSpec};
use crate::model_catalog::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bound {
    MemoryIO,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationCost {
    pub t_mem: f64,
    pub t_comp: f64,
    pub t_comm: f64,
    pub t_host: f64,
    pub t_total: f64,
    pub bound: Bound,
    /// FLOPs per byte moved.
    pub arithmetic_intensity: f64,
    pub flops: f64,
    pub bytes: f64,
}

impl IterationCost {
    /// Time the accelerator is occupied: everything except the host phase.
    pub fn device_time(&self) -> f64 {
        self.t_mem.max(self.t_comp) + self.t_comm
    }
}

/// Two collectives per layer, each carrying `tokens * hidden` activations.
pub fn comm_time(model: &ModelSpec, par: &ParallelSpec, tokens: u64) -> f64 {
    if par.tp_degree <= 1 {
        return 0.0;
    }
    let payload = (tokens * model.hidden * model.bytes_per_value) as f64;
    2.0 * model.n_layers as f64 * (par.comm_base_latency + payload / par.link_bw)
}

fn compose(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    flops: f64,
    bytes: f64,
    tokens: u64,
) -> IterationCost {
    let d = par.degree();
    let t_mem = bytes / (d * device.mem_bw);
    let t_comp = flops / (d * device.peak_flops);
    let t_comm = comm_time(model, par, tokens);
    let t_host = device.host_overhead;
    IterationCost {
        t_mem,
        t_comp,
        t_comm,
        t_host,
        t_total: t_mem.max(t_comp) + t_comm + t_host,
        bound: if t_comp > t_mem {
            Bound::Compute
        } else {
            Bound::MemoryIO
        },
        arithmetic_intensity: flops / bytes,
        flops,
        bytes,
    }
}

/// One decode step for `batch` requests holding `cached_tokens` tokens in
/// total (including the token being written this step). Weights are read
/// once; every cached token's KV is read.
pub fn decode_iter_cost(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    batch: u64,
    cached_tokens: u64,
) -> Result<IterationCost> {
    if batch == 0 {
        return Err(Error::InvalidBatch);
    }
    let avg_seq = cached_tokens as f64 / batch as f64;
    let flops = batch as f64
        * (2.0 * model.n_params as f64
            + 6.0 * (model.n_layers * model.n_heads * model.head_dim) as f64 * avg_seq);
    let bytes = model.weights_bytes() as f64 + (cached_tokens * model.kv_bytes_per_token()) as f64;
    Ok(compose(model, device, par, flops, bytes, batch))
}

/// Prefill of `batch` prompts of `prompt_len` tokens each.
pub fn prefill_cost(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    batch: u64,
    prompt_len: u64,
) -> Result<IterationCost> {
    if batch == 0 {
        return Err(Error::InvalidBatch);
    }
    prefill_group_cost(model, device, par, &vec![prompt_len; batch as usize])
}

/// Prefill of a group of prompts with individual lengths. Each prompt token
/// is charged `flops_per_token(prompt_len)`; the KV of every token is written.
pub fn prefill_group_cost(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    prompt_lens: &[u64],
) -> Result<IterationCost> {
    if prompt_lens.is_empty() {
        return Err(Error::InvalidBatch);
    }
    let tokens: u64 = prompt_lens.iter().sum();
    let flops: f64 = prompt_lens
        .iter()
        .map(|&len| len as f64 * model.flops_per_token(len) as f64)
        .sum();
    let bytes = model.weights_bytes() as f64 + (tokens * model.kv_bytes_per_token()) as f64;
    Ok(compose(model, device, par, flops, bytes, tokens))
}

/// Decode token-throughput ceiling as the batch grows without bound: the
/// KV read of every token dominates, so tokens/s approaches
/// `D * mem_bw / (seq_len * kv_bytes_per_token)`, unless compute binds first.
pub fn asymptotic_token_throughput(
    model: &ModelSpec,
    device: &DeviceSpec,
    par: &ParallelSpec,
    seq_len: u64,
) -> f64 {
    let d = par.degree();
    let bandwidth = d * device.mem_bw / (seq_len.max(1) * model.kv_bytes_per_token()) as f64;
    let compute = d * device.peak_flops / model.flops_per_token(seq_len.max(1)) as f64;
    bandwidth.min(compute)
}

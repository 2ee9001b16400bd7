//! Mutable state of one serving instance, and the admission/preemption
//! primitives scheduling policies are built from.

use std::collections::VecDeque;

use super::pool::BlockPool;
use super::request::{Request, RequestState};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct InstanceState {
    /// FCFS-ordered requests; indices into this vector are the pool slots.
    pub requests: Vec<Request>,
    pub pool: BlockPool,
    pub max_batch: u64,
    /// Arrived requests not currently holding blocks.
    pub queue: VecDeque<usize>,
    /// Admitted requests in admission order.
    pub running: Vec<usize>,
    next_arrival: usize,
    pub preemption_count: u64,
}

impl InstanceState {
    /// `requests` must already be sorted by arrival then id.
    pub fn new(requests: Vec<Request>, pool_blocks: u64, block_size: u64, max_batch: u64) -> Result<Self> {
        let pool = BlockPool::new(block_size, pool_blocks, requests.len());
        if let Some(r) = requests
            .iter()
            .find(|r| pool.blocks_for(r.input_len + r.output_len) > pool_blocks)
        {
            return Err(Error::Config(format!(
                "request {} needs {} blocks for {} tokens but the pool holds {pool_blocks}",
                r.id,
                pool.blocks_for(r.input_len + r.output_len),
                r.input_len + r.output_len
            )));
        }
        Ok(Self {
            requests,
            pool,
            max_batch,
            queue: VecDeque::new(),
            running: Vec::new(),
            next_arrival: 0,
            preemption_count: 0,
        })
    }

    /// Moves every request that has arrived by `now` onto the queue.
    pub fn enqueue_arrivals(&mut self, now: f64) {
        while let Some(r) = self.requests.get(self.next_arrival) {
            if r.arrival > now {
                break;
            }
            self.queue.push_back(self.next_arrival);
            self.next_arrival += 1;
        }
    }

    pub fn next_arrival_time(&self) -> Option<f64> {
        self.requests.get(self.next_arrival).map(|r| r.arrival)
    }

    pub fn all_arrived(&self) -> bool {
        self.next_arrival == self.requests.len()
    }

    pub fn is_finished(&self) -> bool {
        self.all_arrived() && self.queue.is_empty() && self.running.is_empty()
    }

    pub fn batch_full(&self) -> bool {
        self.running.len() as u64 >= self.max_batch
    }

    /// Admits the queue head if at least `reserve_blocks` blocks are free,
    /// allocating the blocks of its current context. Returns its slot.
    pub fn admit_head(&mut self, reserve_blocks: u64, now: f64) -> Option<usize> {
        let &slot = self.queue.front()?;
        if self.batch_full() || self.pool.free() < reserve_blocks {
            return None;
        }
        let context = self.requests[slot].context_len();
        let blocks = self.pool.blocks_for(context);
        if !self.pool.grow_to(slot, blocks) {
            return None;
        }
        self.queue.pop_front();
        self.running.push(slot);
        let r = &mut self.requests[slot];
        r.state = RequestState::Prefilling;
        r.t_first_sched.get_or_insert(now);
        Some(slot)
    }

    /// Blocks the queue head needs for its prompt (the full context if it
    /// is being recomputed after preemption).
    pub fn head_prompt_blocks(&self) -> Option<u64> {
        self.queue
            .front()
            .map(|&slot| self.pool.blocks_for(self.requests[slot].context_len()))
    }

    /// Reserves one more token of KV for every running request. When the
    /// pool runs dry, the most recently admitted request is preempted (its
    /// blocks freed, put back at the queue head for recomputation) until the
    /// rest fit. Returns the requests that decode this step.
    pub fn prepare_decode(&mut self) -> Vec<usize> {
        loop {
            let needed: u64 = self
                .running
                .iter()
                .map(|&slot| {
                    let target = self.pool.blocks_for(self.requests[slot].context_len() + 1);
                    target.saturating_sub(self.pool.held(slot))
                })
                .sum();
            if needed <= self.pool.free() {
                break;
            }
            let victim = self.running.pop().expect("one running request always fits");
            self.preempt(victim);
        }
        for &slot in &self.running {
            let target = self.pool.blocks_for(self.requests[slot].context_len() + 1);
            let ok = self.pool.grow_to(slot, target);
            debug_assert!(ok);
        }
        self.running.clone()
    }

    fn preempt(&mut self, slot: usize) {
        self.pool.release(slot);
        let r = &mut self.requests[slot];
        r.state = RequestState::Preempted;
        r.preemptions += 1;
        self.preemption_count += 1;
        self.queue.push_front(slot);
    }

    pub fn finish_prefill(&mut self, slots: &[usize]) {
        for &slot in slots {
            self.requests[slot].state = RequestState::Running;
        }
    }

    /// Advances every decoded request by one token at time `now`; finished
    /// requests release their blocks.
    pub fn finish_decode(&mut self, slots: &[usize], now: f64) {
        let mut finished = false;
        for &slot in slots {
            let r = &mut self.requests[slot];
            r.generated += 1;
            if r.generated == r.output_len {
                r.state = RequestState::Done;
                r.t_done = Some(now);
                self.pool.release(slot);
                finished = true;
            }
        }
        if finished {
            let requests = &self.requests;
            self.running.retain(|&slot| !requests[slot].is_done());
        }
    }

    /// Block-pool invariants for a quiescent instance (no step in flight).
    pub fn check(&self) -> Result<()> {
        self.pool.check()?;
        for (slot, r) in self.requests.iter().enumerate() {
            let held = self.pool.held(slot);
            let expect = match r.state {
                RequestState::Running | RequestState::Prefilling => {
                    self.pool.blocks_for(r.context_len())
                }
                RequestState::Done | RequestState::Queued | RequestState::Preempted => 0,
            };
            if held != expect {
                return Err(Error::Invariant(format!(
                    "request {} in state {:?} holds {held} blocks, expected {expect}",
                    r.id, r.state
                )));
            }
            if r.generated > r.output_len || (r.state == RequestState::Done) != (r.generated == r.output_len) {
                return Err(Error::Invariant(format!(
                    "request {} generated {} of {} tokens in state {:?}",
                    r.id, r.generated, r.output_len, r.state
                )));
            }
        }
        Ok(())
    }
}

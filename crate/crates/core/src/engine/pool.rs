use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: u64 = 16;

/// Paged KV-cache accounting: fixed-size token blocks handed out on demand.
#[derive(Debug, Clone)]
pub struct BlockPool {
    block_size: u64,
    capacity_blocks: u64,
    allocated: Vec<u64>,
    used: u64,
    peak: u64,
}

impl BlockPool {
    /// `slots` is the number of requests that may ever hold blocks.
    pub fn new(block_size: u64, capacity_blocks: u64, slots: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        Self {
            block_size,
            capacity_blocks,
            allocated: vec![0; slots],
            used: 0,
            peak: 0,
        }
    }

    /// Blocks that fit in `pool_bytes` when one token costs `kv_bytes_per_token`.
    pub fn capacity_for(pool_bytes: f64, block_size: u64, kv_bytes_per_token: u64) -> u64 {
        (pool_bytes / (block_size * kv_bytes_per_token) as f64).floor() as u64
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn capacity(&self) -> u64 {
        self.capacity_blocks
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free(&self) -> u64 {
        self.capacity_blocks - self.used
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn held(&self, slot: usize) -> u64 {
        self.allocated[slot]
    }

    /// Grows `slot` to `blocks` in total. Returns false (and allocates
    /// nothing) if the pool cannot cover the difference.
    pub fn grow_to(&mut self, slot: usize, blocks: u64) -> bool {
        let held = self.allocated[slot];
        if blocks <= held {
            return true;
        }
        let extra = blocks - held;
        if extra > self.free() {
            return false;
        }
        self.allocated[slot] = blocks;
        self.used += extra;
        self.peak = self.peak.max(self.used);
        true
    }

    pub fn release(&mut self, slot: usize) -> u64 {
        let held = std::mem::take(&mut self.allocated[slot]);
        self.used -= held;
        held
    }

    /// Recomputes the total from per-slot counts and checks it against the
    /// running sum and the capacity.
    pub fn check(&self) -> Result<()> {
        let total: u64 = self.allocated.iter().sum();
        if total != self.used {
            return Err(Error::Invariant(format!(
                "allocated blocks sum to {total} but the pool counts {}",
                self.used
            )));
        }
        if total > self.capacity_blocks {
            return Err(Error::Invariant(format!(
                "{total} blocks allocated exceeds capacity {}",
                self.capacity_blocks
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grows_and_releases() {
        let mut pool = BlockPool::new(16, 10, 3);
        assert_eq!(pool.blocks_for(0), 0);
        assert_eq!(pool.blocks_for(16), 1);
        assert_eq!(pool.blocks_for(17), 2);
        assert!(pool.grow_to(0, pool.blocks_for(100)));
        assert_eq!(pool.held(0), 7);
        assert!(!pool.grow_to(1, 4));
        assert_eq!(pool.held(1), 0);
        assert!(pool.grow_to(1, 3));
        assert_eq!(pool.free(), 0);
        assert!(pool.grow_to(1, 2));
        assert_eq!(pool.release(0), 7);
        assert_eq!(pool.free(), 7);
        assert_eq!(pool.peak(), 10);
        pool.check().unwrap();
    }

    #[test]
    fn capacity_from_bytes() {
        // 33.4 GB pool, 16-token blocks of 196608 B/token
        assert_eq!(BlockPool::capacity_for(33.4e9, 16, 196_608), 10_617);
    }
}

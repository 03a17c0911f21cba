//! Paged KV-cache block accounting.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Residency {
    pub tokens: u64,
    pub blocks: u64,
}

/// Block pool shared by all requests on one engine. Requests hold
/// `ceil(tokens / block_size)` blocks, including any look-ahead slots.
#[derive(Debug, Clone, Serialize)]
pub struct KvCacheState {
    block_size: u64,
    total_blocks: u64,
    free_blocks: u64,
    residency: BTreeMap<u64, Residency>,
}

impl KvCacheState {
    pub fn new(block_size: u32, total_blocks: u64) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("KV block size must be positive"));
        }
        Ok(KvCacheState {
            block_size: u64::from(block_size),
            total_blocks,
            free_blocks: total_blocks,
            residency: BTreeMap::new(),
        })
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_blocks
    }

    pub fn capacity_tokens(&self) -> u64 {
        self.total_blocks * self.block_size
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }

    pub fn residency(&self, id: u64) -> Option<Residency> {
        self.residency.get(&id).copied()
    }

    pub fn holds(&self, id: u64) -> bool {
        self.residency.contains_key(&id)
    }

    pub fn resident_count(&self) -> usize {
        self.residency.len()
    }

    /// Whether `tokens` more tokens for `id` (resident or not) would fit.
    pub fn can_fit(&self, id: u64, tokens: u64) -> bool {
        self.extra_blocks(id, tokens) <= self.free_blocks
    }

    /// Blocks `id` would need on top of what it holds to grow by `tokens`.
    pub fn extra_blocks(&self, id: u64, tokens: u64) -> u64 {
        let held = self.residency.get(&id).copied().unwrap_or(Residency {
            tokens: 0,
            blocks: 0,
        });
        self.blocks_for(held.tokens + tokens) - held.blocks
    }

    /// Starts holding `tokens` for a new request. Returns `false` without
    /// changing state when the pool is too small.
    pub fn admit(&mut self, id: u64, tokens: u64) -> Result<bool> {
        if self.holds(id) {
            return Err(Error::Internal(format!("request {id} admitted twice")));
        }
        let blocks = self.blocks_for(tokens);
        if blocks > self.free_blocks {
            return Ok(false);
        }
        self.free_blocks -= blocks;
        self.residency.insert(id, Residency { tokens, blocks });
        Ok(true)
    }

    /// Grows a resident request by `tokens`. Returns `false` on shortage.
    pub fn extend(&mut self, id: u64, tokens: u64) -> Result<bool> {
        if !self.holds(id) {
            return Err(Error::Internal(format!("extend of unknown request {id}")));
        }
        let extra = self.extra_blocks(id, tokens);
        if extra > self.free_blocks {
            return Ok(false);
        }
        self.free_blocks -= extra;
        let r = self.residency.get_mut(&id).expect("checked above");
        r.tokens += tokens;
        r.blocks += extra;
        Ok(true)
    }

    /// Admits or extends, whichever applies.
    pub fn reserve(&mut self, id: u64, tokens: u64) -> Result<bool> {
        if self.holds(id) {
            self.extend(id, tokens)
        } else {
            self.admit(id, tokens)
        }
    }

    /// Shrinks a request to exactly `tokens`, returning surplus blocks.
    pub fn trim(&mut self, id: u64, tokens: u64) -> Result<()> {
        let block_size = self.block_size;
        let r = self
            .residency
            .get_mut(&id)
            .ok_or_else(|| Error::Internal(format!("trim of unknown request {id}")))?;
        if tokens > r.tokens {
            return Err(Error::Internal(format!(
                "trim of request {id} to {tokens} tokens exceeds held {}",
                r.tokens
            )));
        }
        let blocks = tokens.div_ceil(block_size);
        self.free_blocks += r.blocks - blocks;
        r.tokens = tokens;
        r.blocks = blocks;
        Ok(())
    }

    /// Frees every block held by `id` and returns how many there were.
    pub fn release(&mut self, id: u64) -> Result<u64> {
        let r = self
            .residency
            .remove(&id)
            .ok_or_else(|| Error::Internal(format!("release of unknown request {id}")))?;
        self.free_blocks += r.blocks;
        Ok(r.blocks)
    }

    pub fn check_conservation(&self) -> Result<()> {
        let held: u64 = self.residency.values().map(|r| r.blocks).sum();
        if held + self.free_blocks != self.total_blocks {
            return Err(Error::Internal(format!(
                "KV blocks leaked: free {} + held {held} != total {}",
                self.free_blocks, self.total_blocks
            )));
        }
        for (id, r) in &self.residency {
            if r.blocks != r.tokens.div_ceil(self.block_size) {
                return Err(Error::Internal(format!(
                    "request {id} holds {} blocks for {} tokens",
                    r.blocks, r.tokens
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn admit_rounds_up() {
        let mut kv = KvCacheState::new(16, 10).unwrap();
        assert!(kv.admit(1, 17).unwrap());
        assert_eq!(kv.residency(1).unwrap().blocks, 2);
        assert_eq!(kv.free_blocks(), 8);
    }

    #[test]
    fn extend_by_zero_is_noop() {
        let mut kv = KvCacheState::new(16, 10).unwrap();
        kv.admit(1, 5).unwrap();
        let before = kv.clone();
        assert!(kv.extend(1, 0).unwrap());
        assert_eq!(kv.residency(1), before.residency(1));
        assert_eq!(kv.free_blocks(), before.free_blocks());
    }

    #[test]
    fn release_returns_held_blocks() {
        let mut kv = KvCacheState::new(16, 10).unwrap();
        kv.admit(1, 40).unwrap();
        assert_eq!(kv.release(1).unwrap(), 3);
        assert_eq!(kv.free_blocks(), 10);
    }

    #[test]
    fn shortage_is_refusal_not_error() {
        let mut kv = KvCacheState::new(16, 2).unwrap();
        assert!(!kv.admit(1, 33).unwrap());
        assert_eq!(kv.free_blocks(), 2);
        assert!(kv.admit(1, 20).unwrap());
        assert!(!kv.extend(1, 13).unwrap());
        assert!(kv.extend(1, 12).unwrap());
        assert_eq!(kv.free_blocks(), 0);
    }

    #[test]
    fn unknown_request_is_a_bug() {
        let mut kv = KvCacheState::new(16, 2).unwrap();
        assert!(matches!(kv.release(9), Err(Error::Internal(_))));
        assert!(matches!(kv.extend(9, 1), Err(Error::Internal(_))));
        kv.admit(9, 1).unwrap();
        assert!(matches!(kv.admit(9, 1), Err(Error::Internal(_))));
    }

    #[test]
    fn trim_returns_lookahead_blocks() {
        let mut kv = KvCacheState::new(4, 10).unwrap();
        kv.admit(1, 8).unwrap();
        kv.extend(1, 8).unwrap();
        assert_eq!(kv.free_blocks(), 6);
        kv.trim(1, 9).unwrap();
        assert_eq!(kv.residency(1).unwrap().blocks, 3);
        assert_eq!(kv.free_blocks(), 7);
        assert!(kv.trim(1, 10).is_err());
    }

    proptest! {
        #[test]
        fn blocks_are_conserved(ops in proptest::collection::vec((0u8..4, 0u64..6, 0u64..40), 1..200)) {
            let mut kv = KvCacheState::new(8, 64).unwrap();
            for (op, id, tokens) in ops {
                match op {
                    0 => { let _ = kv.reserve(id, tokens).unwrap(); }
                    1 => { if kv.holds(id) { kv.release(id).unwrap(); } }
                    2 => {
                        if let Some(r) = kv.residency(id) {
                            kv.trim(id, r.tokens.min(tokens)).unwrap();
                        }
                    }
                    _ => { if kv.holds(id) { let _ = kv.extend(id, tokens).unwrap(); } }
                }
                kv.check_conservation().unwrap();
            }
        }
    }
}

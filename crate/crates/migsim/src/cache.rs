//! Generic set-associative cache with LRU replacement and optional
//! sub-block dirty bits. Timing and energy are charged by the caller; this
//! module only tracks tags, recency, and dirtiness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagPolicy {
    /// Tag probe followed by data access of the matching way only.
    Sequential,
    /// All ways probed in parallel.
    Parallel,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
    pub block_bytes: u64,
    pub associativity: usize,
    /// Dirty-bit granularity; `None` tracks one dirty bit per block.
    pub subblock_bytes: Option<u64>,
    pub tag_policy: TagPolicy,
    pub hit_latency_mem_cycles: u64,
    pub access_nj: f64,
}

impl CacheConfig {
    /// SRAM L3 used by the PCM-base scheme: 24 MB, 1 KB blocks, 16-way.
    /// Hit latency and per-access energy are model placeholders, not device
    /// datasheet values.
    pub fn sram_l3() -> Self {
        CacheConfig {
            capacity_bytes: 24 << 20,
            block_bytes: 1024,
            associativity: 16,
            subblock_bytes: Some(64),
            tag_policy: TagPolicy::None,
            hit_latency_mem_cycles: 8,
            access_nj: 5.0,
        }
    }

    /// Hardware DRAM cache tags: 128 MB, page-size blocks, 16-way, 512-byte
    /// sub-blocks.
    pub fn hw_cache(sequential: bool) -> Self {
        CacheConfig {
            capacity_bytes: 128 << 20,
            block_bytes: 8192,
            associativity: 16,
            subblock_bytes: Some(512),
            tag_policy: if sequential {
                TagPolicy::Sequential
            } else {
                TagPolicy::Parallel
            },
            hit_latency_mem_cycles: 0,
            access_nj: 0.0,
        }
    }

    pub fn subblocks_per_block(&self) -> u32 {
        (self.block_bytes / self.subblock_bytes.unwrap_or(self.block_bytes)) as u32
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let way_bytes = self.block_bytes * self.associativity as u64;
        if way_bytes == 0 || !self.capacity_bytes.is_multiple_of(way_bytes) {
            return Err(CacheError::BadConfig(format!(
                "capacity {} not divisible by block_bytes*associativity {}",
                self.capacity_bytes, way_bytes
            )));
        }
        if let Some(sb) = self.subblock_bytes {
            if sb == 0 || !self.block_bytes.is_multiple_of(sb) {
                return Err(CacheError::BadConfig(
                    "subblock_bytes must divide block_bytes".into(),
                ));
            }
            if self.block_bytes / sb > 64 {
                return Err(CacheError::BadConfig(
                    "at most 64 sub-blocks per block supported".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("bad cache config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Default)]
struct Line {
    tag: u64,
    valid: bool,
    dirty_mask: u64,
    /// 0 = most recently used; ranks form a permutation within each set.
    lru_rank: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit { way: usize },
    Miss { victim_way: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub base_addr: u64,
    pub dirty_mask: u64,
}

#[derive(Debug, Clone)]
pub struct SetAssocCache {
    pub cfg: CacheConfig,
    sets: Vec<Vec<Line>>,
    num_sets: u64,
}

impl SetAssocCache {
    pub fn new(cfg: CacheConfig) -> Result<Self, CacheError> {
        cfg.validate()?;
        let num_sets = cfg.capacity_bytes / (cfg.block_bytes * cfg.associativity as u64);
        let sets = (0..num_sets)
            .map(|_| {
                (0..cfg.associativity)
                    .map(|w| Line {
                        lru_rank: w as u32,
                        ..Line::default()
                    })
                    .collect()
            })
            .collect();
        Ok(SetAssocCache {
            cfg,
            sets,
            num_sets,
        })
    }

    fn addr_parts(&self, addr: u64) -> (usize, u64) {
        let block = addr / self.cfg.block_bytes;
        ((block % self.num_sets) as usize, block / self.num_sets)
    }

    fn base_addr(&self, set: usize, tag: u64) -> u64 {
        (tag * self.num_sets + set as u64) * self.cfg.block_bytes
    }

    fn victim_way(set: &[Line]) -> usize {
        if let Some(w) = set.iter().position(|l| !l.valid) {
            return w;
        }
        set.iter()
            .enumerate()
            .max_by_key(|(_, l)| l.lru_rank)
            .map(|(w, _)| w)
            .unwrap()
    }

    fn touch(set: &mut [Line], way: usize) {
        let old = set[way].lru_rank;
        for l in set.iter_mut() {
            if l.lru_rank < old {
                l.lru_rank += 1;
            }
        }
        set[way].lru_rank = 0;
    }

    /// Probes the cache. A hit refreshes recency; a miss reports the LRU
    /// victim way without modifying state.
    pub fn lookup(&mut self, addr: u64) -> Lookup {
        let (set_idx, tag) = self.addr_parts(addr);
        let set = &mut self.sets[set_idx];
        if let Some(way) = set.iter().position(|l| l.valid && l.tag == tag) {
            Self::touch(set, way);
            return Lookup::Hit { way };
        }
        Lookup::Miss {
            victim_way: Self::victim_way(set),
        }
    }

    /// Installs the block after a miss, returning the way it landed in and
    /// the evicted line (with its dirty mask) if a valid one was displaced.
    /// The new line is clean and most-recently used.
    pub fn fill(&mut self, addr: u64) -> (usize, Option<Evicted>) {
        let (set_idx, tag) = self.addr_parts(addr);
        let base = {
            let set = &self.sets[set_idx];
            let way = Self::victim_way(set);
            let line = &set[way];
            let evicted = line.valid.then(|| Evicted {
                base_addr: self.base_addr(set_idx, line.tag),
                dirty_mask: line.dirty_mask,
            });
            (way, evicted)
        };
        let (way, evicted) = base;
        let set = &mut self.sets[set_idx];
        set[way] = Line {
            tag,
            valid: true,
            dirty_mask: 0,
            lru_rank: set[way].lru_rank,
        };
        Self::touch(set, way);
        (way, evicted)
    }

    /// Marks the sub-block containing `addr` dirty. The block must be
    /// resident.
    pub fn write_hit(&mut self, addr: u64) {
        let (set_idx, tag) = self.addr_parts(addr);
        let sb = self.cfg.subblock_bytes.unwrap_or(self.cfg.block_bytes);
        let bit = (addr % self.cfg.block_bytes) / sb;
        let set = &mut self.sets[set_idx];
        let way = set
            .iter()
            .position(|l| l.valid && l.tag == tag)
            .expect("write_hit on non-resident block");
        set[way].dirty_mask |= 1 << bit;
    }

    /// Way index -> stable data-frame index, used to place cached blocks in
    /// a backing DRAM device.
    pub fn frame_index(&self, addr: u64, way: usize) -> u64 {
        let (set_idx, _) = self.addr_parts(addr);
        set_idx as u64 * self.cfg.associativity as u64 + way as u64
    }

    pub fn num_sets(&self) -> u64 {
        self.num_sets
    }

    #[cfg(test)]
    fn ranks(&self, set: usize) -> Vec<u32> {
        self.sets[set].iter().map(|l| l.lru_rank).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(assoc: usize, subblock: Option<u64>) -> SetAssocCache {
        SetAssocCache::new(CacheConfig {
            capacity_bytes: 8192 * assoc as u64 * 4, // 4 sets
            block_bytes: 8192,
            associativity: assoc,
            subblock_bytes: subblock,
            tag_policy: TagPolicy::Sequential,
            hit_latency_mem_cycles: 0,
            access_nj: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn repeated_access_hits() {
        let mut c = tiny(2, Some(512));
        assert!(matches!(c.lookup(0x4000), Lookup::Miss { .. }));
        c.fill(0x4000);
        assert!(matches!(c.lookup(0x4000), Lookup::Hit { .. }));
    }

    #[test]
    fn first_inserted_is_lru_victim_after_overflow() {
        let mut c = tiny(2, None);
        // three conflicting blocks in set 0 (4 sets, 8 KB blocks)
        let conflict = |i: u64| i * 4 * 8192;
        c.fill(conflict(0));
        c.fill(conflict(1));
        match c.lookup(conflict(2)) {
            Lookup::Miss { victim_way } => {
                let (_, evicted) = c.fill(conflict(2));
                let evicted = evicted.unwrap();
                assert_eq!(evicted.base_addr, conflict(0));
                let _ = victim_way;
            }
            _ => panic!("expected miss"),
        }
    }

    #[test]
    fn lru_stack_follows_access_order() {
        // A B A C into a 2-way set: C must evict B
        let mut c = tiny(2, None);
        let (a, b, x) = (0u64, 4 * 8192, 8 * 8192);
        c.fill(a);
        c.fill(b);
        assert!(matches!(c.lookup(a), Lookup::Hit { .. }));
        let evicted = c.fill(x).1.unwrap();
        assert_eq!(evicted.base_addr, b);
    }

    #[test]
    fn fill_into_invalid_way_evicts_nothing() {
        let mut c = tiny(2, None);
        assert!(c.fill(0).1.is_none());
    }

    #[test]
    fn clean_eviction_reports_empty_mask() {
        let mut c = tiny(1, Some(512));
        c.fill(0);
        let evicted = c.fill(4 * 8192).1.unwrap();
        assert_eq!(evicted.dirty_mask, 0);
    }

    #[test]
    fn dirty_subblock_count_matches_distinct_writes() {
        let mut c = tiny(1, Some(512));
        c.fill(0);
        c.write_hit(0); // sub-block 0
        c.write_hit(600); // sub-block 1 (600/512)
        c.write_hit(700); // still sub-block 1
        c.write_hit(4096); // sub-block 8
        let evicted = c.fill(4 * 8192).1.unwrap();
        assert_eq!(evicted.dirty_mask.count_ones(), 3);
        assert_eq!(evicted.dirty_mask, (1 << 0) | (1 << 1) | (1 << 8));
    }

    #[test]
    fn write_offsets_map_to_subblock_bits() {
        let mut c = tiny(1, Some(512));
        c.fill(0);
        c.write_hit(0);
        c.write_hit(600);
        let e = c.fill(4 * 8192).1.unwrap();
        assert_eq!(e.dirty_mask & 0b11, 0b11);
    }

    #[test]
    fn ranks_stay_a_permutation() {
        let mut c = tiny(4, None);
        let conflict = |i: u64| i * 4 * 8192;
        for i in 0..20u64 {
            match c.lookup(conflict(i % 6)) {
                Lookup::Miss { .. } => {
                    c.fill(conflict(i % 6));
                }
                Lookup::Hit { .. } => {}
            }
            let mut ranks = c.ranks(0);
            ranks.sort_unstable();
            assert_eq!(ranks, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn matches_reference_list_lru() {
        // replay a pseudo-random access string against a per-set
        // move-to-front list oracle
        use rand::{Rng, SeedableRng};
        let mut c = tiny(4, None);
        let mut oracle: Vec<Vec<u64>> = vec![Vec::new(); 4]; // MRU-first tag lists
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4000 {
            let block: u64 = rng.gen_range(0..32);
            let addr = block * 8192;
            let set = (block % 4) as usize;
            let tag = block / 4;
            let lst = &mut oracle[set];
            let oracle_hit = lst.iter().any(|&t| t == tag);
            let model_hit = matches!(c.lookup(addr), Lookup::Hit { .. });
            assert_eq!(model_hit, oracle_hit);
            if oracle_hit {
                let pos = lst.iter().position(|&t| t == tag).unwrap();
                lst.remove(pos);
                lst.insert(0, tag);
            } else {
                let (_, evicted) = c.fill(addr);
                if lst.len() == 4 {
                    let victim = lst.pop().unwrap();
                    let base = (victim * 4 + set as u64) * 8192;
                    assert_eq!(evicted.unwrap().base_addr, base);
                } else {
                    assert!(evicted.is_none());
                }
                lst.insert(0, tag);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = CacheConfig::sram_l3();
        assert!(cfg.validate().is_ok());
        cfg.subblock_bytes = Some(48);
        assert!(cfg.validate().is_err());
        let mut cfg = CacheConfig::hw_cache(true);
        cfg.capacity_bytes = 100;
        assert!(cfg.validate().is_err());
    }
}

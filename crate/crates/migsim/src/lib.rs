//! Trace-driven simulator for hybrid DRAM-PCM main memories.
//!
//! A post-L2 access trace (read misses and writebacks) is replayed against
//! several memory-system organizations — plain PCM, plain DRAM, an SRAM L3
//! over PCM, DRAM hardware caches, enhanced PCM row buffers, OS-quantum page
//! copying, and an OS-managed migration store with hysteresis-gated placement
//! — and each run reports per-core timing, an energy ledger, bank-occupancy
//! statistics, and per-block PCM wear.

pub mod cache;
pub mod config;
pub mod devices;
pub mod metrics;
pub mod migrant;
pub mod runner;
pub mod schemes;
pub mod trace;

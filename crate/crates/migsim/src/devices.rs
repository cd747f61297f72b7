//! Cycle-level timing and energy model for banked PCM and DRAM devices with
//! open-page row buffers, bounded per-bank request queues, and a shared
//! memory bus.
//!
//! All latencies are stated in memory cycles (1 memory cycle = 10 CPU
//! cycles); the scheduler works in CPU cycles throughout.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CPU cycles per memory cycle.
pub const MEM_CYCLE_CPU_CYCLES: u64 = 10;
/// Bus width: 256 bits total, one beat per memory cycle.
pub const BUS_WIDTH_BYTES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    /// 64-byte cache-block write (selective update on PCM).
    WriteBlock,
    /// Sub-block write used for dirty-page writebacks; occupies the bank
    /// like a block write, energy is charged per sub-block by the caller.
    WriteSubblock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTable {
    pub read_row_miss_nj: f64,
    pub read_row_hit_nj: f64,
    pub write_block_row_miss_nj: f64,
    /// Energy of a 512-byte sub-block write at row miss; scaled linearly for
    /// other sub-block sizes.
    pub write_subblock_row_miss_nj: f64,
    pub write_row_hit_nj: f64,
}

/// Reference size for the sub-block write energy entry.
pub const SUBBLOCK_ENERGY_REF_BYTES: u64 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceGeometry {
    pub capacity_bytes: u64,
    pub num_banks: u32,
    pub interleave_bytes: u64,
    pub row_bytes: u64,
    pub queue_depth: usize,
    pub read_latency_mem_cycles: u64,
    pub write_latency_mem_cycles: u64,
    /// Row-hit latency as a fraction of the row-miss latency.
    pub row_hit_fraction: f64,
    pub energy: EnergyTable,
    pub leakage_mw: f64,
}

impl DeviceGeometry {
    /// Base PCM: 8 GB, 64 banks, 55/143 memory-cycle read/write.
    pub fn pcm() -> Self {
        DeviceGeometry {
            capacity_bytes: 8 << 30,
            num_banks: 64,
            interleave_bytes: 64,
            row_bytes: 8192,
            queue_depth: 32,
            read_latency_mem_cycles: 55,
            write_latency_mem_cycles: 143,
            row_hit_fraction: 0.4,
            energy: EnergyTable {
                read_row_miss_nj: 33.0,
                read_row_hit_nj: 16.0,
                write_block_row_miss_nj: 36.0,
                write_subblock_row_miss_nj: 170.0,
                write_row_hit_nj: 16.0,
            },
            leakage_mw: 6.4,
        }
    }

    /// Base DRAM: 8 GB, 64 banks, 22 memory cycles.
    pub fn dram_base() -> Self {
        DeviceGeometry {
            capacity_bytes: 8 << 30,
            num_banks: 64,
            interleave_bytes: 64,
            row_bytes: 8192,
            queue_depth: 32,
            read_latency_mem_cycles: 22,
            write_latency_mem_cycles: 22,
            row_hit_fraction: 0.4,
            energy: EnergyTable {
                read_row_miss_nj: 33.0,
                read_row_hit_nj: 16.0,
                write_block_row_miss_nj: 33.0,
                write_subblock_row_miss_nj: 264.0,
                write_row_hit_nj: 16.0,
            },
            leakage_mw: 64.0,
        }
    }

    /// Migration-store DRAM: 128 MB, 16 banks, 16 memory cycles.
    pub fn dram_migrant() -> Self {
        DeviceGeometry {
            capacity_bytes: 128 << 20,
            num_banks: 16,
            interleave_bytes: 64,
            row_bytes: 8192,
            queue_depth: 32,
            read_latency_mem_cycles: 16,
            write_latency_mem_cycles: 16,
            row_hit_fraction: 0.4,
            energy: EnergyTable {
                read_row_miss_nj: 15.0,
                read_row_hit_nj: 4.0,
                write_block_row_miss_nj: 15.0,
                write_subblock_row_miss_nj: 120.0,
                write_row_hit_nj: 4.0,
            },
            leakage_mw: 8.0,
        }
    }

    /// Hardware-cache DRAM, sequential tag-then-data access: 25 cycles.
    pub fn hw_cache_seq() -> Self {
        let mut g = Self::dram_migrant();
        g.read_latency_mem_cycles = 25;
        g.write_latency_mem_cycles = 25;
        g
    }

    /// Hardware-cache DRAM, parallel tag-data access: 19 cycles, higher
    /// energy from probing all ways.
    pub fn hw_cache_par() -> Self {
        let mut g = Self::dram_migrant();
        g.read_latency_mem_cycles = 19;
        g.write_latency_mem_cycles = 19;
        g.energy = EnergyTable {
            read_row_miss_nj: 29.0,
            read_row_hit_nj: 8.0,
            write_block_row_miss_nj: 29.0,
            write_subblock_row_miss_nj: 232.0,
            write_row_hit_nj: 8.0,
        };
        g
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let stripe = self.num_banks as u64 * self.row_bytes;
        if stripe == 0 || !self.capacity_bytes.is_multiple_of(stripe) {
            return Err(DeviceError::BadGeometry(format!(
                "capacity {} not divisible by num_banks*row_bytes {}",
                self.capacity_bytes, stripe
            )));
        }
        if self.interleave_bytes == 0 || !self.row_bytes.is_multiple_of(self.interleave_bytes) {
            return Err(DeviceError::BadGeometry(
                "row_bytes must be a multiple of interleave_bytes".into(),
            ));
        }
        if self.read_latency_mem_cycles == 0 || self.write_latency_mem_cycles == 0 {
            return Err(DeviceError::BadGeometry("latencies must be > 0".into()));
        }
        if self.queue_depth < 1 {
            return Err(DeviceError::BadGeometry("queue_depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.row_hit_fraction) || self.row_hit_fraction <= 0.0 {
            return Err(DeviceError::BadGeometry(
                "row_hit_fraction must be in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("address {addr:#x} out of range (capacity {capacity:#x})")]
    AddressOutOfRange { addr: u64, capacity: u64 },
    #[error("bad device geometry: {0}")]
    BadGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedAddr {
    pub bank: usize,
    pub row: u64,
    /// Column in interleave units within the row.
    pub col: u64,
}

/// Energy of one access per the device's table.
pub fn access_energy_nj(geom: &DeviceGeometry, kind: AccessKind, row_hit: bool) -> f64 {
    match (kind, row_hit) {
        (AccessKind::Read, false) => geom.energy.read_row_miss_nj,
        (AccessKind::Read, true) => geom.energy.read_row_hit_nj,
        (AccessKind::WriteBlock, false) => geom.energy.write_block_row_miss_nj,
        (AccessKind::WriteSubblock, false) => geom.energy.write_subblock_row_miss_nj,
        (AccessKind::WriteBlock | AccessKind::WriteSubblock, true) => geom.energy.write_row_hit_nj,
    }
}

/// Sub-block writeback energy, linear in bytes around the 512-byte table
/// entry.
pub fn subblock_write_nj(geom: &DeviceGeometry, bytes: u64) -> f64 {
    geom.energy.write_subblock_row_miss_nj * bytes as f64 / SUBBLOCK_ENERGY_REF_BYTES as f64
}

/// Leakage over an elapsed CPU-cycle window: mW * seconds * 1e6 = nJ.
pub fn leakage_energy_nj(leakage_mw: f64, elapsed_cycles: u64, cpu_hz: u64) -> f64 {
    leakage_mw * (elapsed_cycles as f64 / cpu_hz as f64) * 1e6
}

/// Bus occupancy of a transfer in CPU cycles.
pub fn bus_transfer_cpu_cycles(bytes: u64) -> u64 {
    bytes.div_ceil(BUS_WIDTH_BYTES) * MEM_CYCLE_CPU_CYCLES
}

/// Energy of writing a full row expressed as selective 64-byte block writes.
pub fn full_row_write_nj(geom: &DeviceGeometry) -> f64 {
    (geom.row_bytes / geom.interleave_bytes) as f64 * geom.energy.write_block_row_miss_nj
}

/// Full-row vs single-block write ratio; 128 for 8 KB rows of 64 B blocks.
pub fn selective_update_ratio(geom: &DeviceGeometry) -> f64 {
    full_row_write_nj(geom) / geom.energy.write_block_row_miss_nj
}

#[derive(Debug, Clone, Default)]
struct Bank {
    open_row: Option<u64>,
    busy_until: u64,
    /// Start times of scheduled-but-not-yet-started requests (FIFO, sorted).
    pending_starts: VecDeque<u64>,
}

impl Bank {
    fn prune(&mut self, now: u64) {
        while let Some(&front) = self.pending_starts.front() {
            if front <= now {
                self.pending_starts.pop_front();
            } else {
                break;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Access {
    /// Cycles the issuer waited for a queue slot (backpressure).
    pub queue_wait: u64,
    pub start: u64,
    pub done: u64,
    pub row_hit: bool,
}

#[derive(Debug, Clone)]
pub struct Device {
    pub geom: DeviceGeometry,
    banks: Vec<Bank>,
    /// Sum of device-busy cycles over all banks.
    pub busy_bank_cycles: u64,
}

impl Device {
    pub fn new(geom: DeviceGeometry) -> Result<Self, DeviceError> {
        geom.validate()?;
        let banks = vec![Bank::default(); geom.num_banks as usize];
        Ok(Device {
            geom,
            banks,
            busy_bank_cycles: 0,
        })
    }

    /// Bank/row/column decomposition under low-order interleaving.
    pub fn map_address(&self, addr: u64) -> Result<MappedAddr, DeviceError> {
        if addr >= self.geom.capacity_bytes {
            return Err(DeviceError::AddressOutOfRange {
                addr,
                capacity: self.geom.capacity_bytes,
            });
        }
        let bank = (addr / self.geom.interleave_bytes) % self.geom.num_banks as u64;
        let stripe = addr / (self.geom.interleave_bytes * self.geom.num_banks as u64);
        let stripes_per_row = self.geom.row_bytes / self.geom.interleave_bytes;
        Ok(MappedAddr {
            bank: bank as usize,
            row: stripe / stripes_per_row,
            col: stripe % stripes_per_row,
        })
    }

    /// Schedules one access against the bank's queue and row buffer. `now`
    /// is the request arrival; `queue_wait` reports time spent waiting for a
    /// queue slot (the issuer stalls that long, the request is never
    /// dropped).
    pub fn schedule(&mut self, addr: u64, kind: AccessKind, now: u64) -> Access {
        self.schedule_with_hit(addr, kind, now, None)
    }

    /// Variant with an externally decided row-buffer outcome (used by the
    /// enhanced-row-buffer scheme, which manages its own buffers).
    pub fn schedule_with_hit(
        &mut self,
        addr: u64,
        kind: AccessKind,
        now: u64,
        hit_override: Option<bool>,
    ) -> Access {
        let mapped = self
            .map_address(addr)
            .expect("scheduled address must be in range");
        let depth = self.geom.queue_depth;
        let rhf = self.geom.row_hit_fraction;
        let base_mem = match kind {
            AccessKind::Read => self.geom.read_latency_mem_cycles,
            AccessKind::WriteBlock | AccessKind::WriteSubblock => {
                self.geom.write_latency_mem_cycles
            }
        };
        let bank = &mut self.banks[mapped.bank];
        bank.prune(now);
        let queue_wait = if bank.pending_starts.len() >= depth {
            let free_at = bank.pending_starts[bank.pending_starts.len() - depth];
            let wait = free_at.saturating_sub(now);
            bank.prune(now + wait);
            wait
        } else {
            0
        };
        let arrival = now + queue_wait;
        let row_hit = hit_override.unwrap_or(bank.open_row == Some(mapped.row));
        let device_cycles = if row_hit {
            ((base_mem * MEM_CYCLE_CPU_CYCLES) as f64 * rhf).round() as u64
        } else {
            base_mem * MEM_CYCLE_CPU_CYCLES
        };
        let start = arrival.max(bank.busy_until);
        let done = start + device_cycles;
        bank.busy_until = done;
        bank.open_row = Some(mapped.row);
        bank.pending_starts.push_back(start);
        self.busy_bank_cycles += device_cycles;
        Access {
            queue_wait,
            start,
            done,
            row_hit,
        }
    }

    #[cfg(test)]
    fn unstarted_at(&mut self, bank: usize, now: u64) -> usize {
        self.banks[bank].prune(now);
        self.banks[bank].pending_starts.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Bus {
    pub busy_until: u64,
}

impl Bus {
    /// Serializes a transfer on the shared bus; returns (start, done).
    pub fn transfer(&mut self, bytes: u64, earliest: u64) -> (u64, u64) {
        let start = earliest.max(self.busy_until);
        let done = start + bus_transfer_cpu_cycles(bytes);
        self.busy_until = done;
        (start, done)
    }
}

//! Scheme runners: drive one trace through a memory-system organization.
//!
//! Every run is a strictly single-threaded, deterministic event loop. A core
//! stalls on its read misses until the data returns; writebacks are
//! fire-and-forget unless the target bank queue backpressures. Per-core
//! stalls dilate that core's subsequent trace timestamps.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, Lookup, SetAssocCache};
use crate::devices::{
    subblock_write_nj, Access, AccessKind, Bus, Device, DeviceError, DeviceGeometry,
};
use crate::metrics::{
    EnergyEvent, EnergyLedger, WearMap, MIGRATION_SOFTWARE_CYCLES, MIGRATION_SOFTWARE_NJ,
    RAPID_INSERT_NJ,
};
use crate::migrant::{MigrantConfig, MigrantError, MigrantStore, ReadClass, WriteClass};
use crate::trace::{TraceKind, TraceRecord, BLOCK_BYTES, PAGE_BYTES};

/// CPU cycles charged per DMA burst for the L2 probe that invalidates or
/// writes back stale cached blocks of a migrating page.
pub const FLUSH_PROBE_CYCLES_PER_BURST: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeId {
    PcmOnly,
    DramIdeal,
    PcmBase,
    HwCacheSeq,
    HwCachePar,
    RowBuffers,
    OsQuantaCopy,
    MigrantStore,
}

impl SchemeId {
    pub const ALL: [SchemeId; 8] = [
        SchemeId::PcmBase,
        SchemeId::PcmOnly,
        SchemeId::DramIdeal,
        SchemeId::HwCacheSeq,
        SchemeId::HwCachePar,
        SchemeId::RowBuffers,
        SchemeId::OsQuantaCopy,
        SchemeId::MigrantStore,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeId::PcmOnly => "pcm_only",
            SchemeId::DramIdeal => "dram_ideal",
            SchemeId::PcmBase => "pcm_base",
            SchemeId::HwCacheSeq => "hw_cache_seq",
            SchemeId::HwCachePar => "hw_cache_par",
            SchemeId::RowBuffers => "row_buffers",
            SchemeId::OsQuantaCopy => "os_quanta_copy",
            SchemeId::MigrantStore => "migrant_store",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeId::ALL
            .iter()
            .copied()
            .find(|id| id.name() == s)
            .ok_or_else(|| format!("unknown scheme {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Cache(#[from] crate::cache::CacheError),
    #[error(transparent)]
    Migrant(#[from] MigrantError),
    #[error("invalid run parameters: {0}")]
    BadParams(String),
}

/// Everything one run needs; the config layer resolves this from the
/// experiment file.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub pcm: DeviceGeometry,
    pub dram_base: DeviceGeometry,
    pub dram_migrant: DeviceGeometry,
    pub hw_cache_seq: DeviceGeometry,
    pub hw_cache_par: DeviceGeometry,
    pub l3: CacheConfig,
    pub migrant: MigrantConfig,
    pub migrant_capacity_bytes: u64,
    pub osq_quantum_cycles: u64,
    pub osq_write_threshold: u64,
    pub rb_buffers_per_bank: usize,
    pub rb_buffer_bytes: u64,
    pub cpu_hz: u64,
    pub log_energy: bool,
    pub log_victims: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            pcm: DeviceGeometry::pcm(),
            dram_base: DeviceGeometry::dram_base(),
            dram_migrant: DeviceGeometry::dram_migrant(),
            hw_cache_seq: DeviceGeometry::hw_cache_seq(),
            hw_cache_par: DeviceGeometry::hw_cache_par(),
            l3: CacheConfig::sram_l3(),
            migrant: MigrantConfig::default(),
            migrant_capacity_bytes: 128 << 20,
            osq_quantum_cycles: 20_000_000,
            osq_write_threshold: 16,
            rb_buffers_per_bank: 8,
            rb_buffer_bytes: 2048,
            cpu_hz: 2_000_000_000,
            log_energy: false,
            log_victims: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchemeStats {
    pub scheme: SchemeId,
    pub seed: u64,
    pub per_core_cycles: Vec<u64>,
    pub total_cycles: u64,
    pub read_misses: u64,
    pub writebacks: u64,
    pub layer_misses: u64,
    pub dram_miss_rate: f64,
    pub migrations_or_fills: u64,
    pub busy_bank_cycles_pcm: u64,
    pub busy_bank_cycles_dram: u64,
    pub energy: EnergyLedger,
    pub pcm_writeback_bytes: u64,
    pub wear: WearMap,
    pub dma_count: u64,
    pub dma_cycles_total: u64,
    pub dma_dynamic_nj_total: f64,
    pub victims: Vec<u64>,
    pub energy_log: Option<Vec<EnergyEvent>>,
    pub leakage_mw_total: f64,
    pub sram_access_nj: f64,
    pub cpu_hz: u64,
    pub pcm_geom: Option<DeviceGeometry>,
    pub dram_geom: Option<DeviceGeometry>,
}

// ---------------------------------------------------------------------------
// Machine: devices plus accounting shared by all models
// ---------------------------------------------------------------------------

pub struct Machine {
    pub pcm: Option<Device>,
    pub dram: Option<Device>,
    pub bus: Bus,
    pub ledger: EnergyLedger,
    pub wear: WearMap,
    pub log: Option<Vec<EnergyEvent>>,
    pub sram_access_nj: f64,
    pub pcm_writeback_bytes: u64,
}

impl Machine {
    fn new(
        pcm: Option<DeviceGeometry>,
        dram: Option<DeviceGeometry>,
        sram_access_nj: f64,
        log_energy: bool,
    ) -> Result<Self, SchemeError> {
        Ok(Machine {
            pcm: pcm.map(Device::new).transpose()?,
            dram: dram.map(Device::new).transpose()?,
            bus: Bus::default(),
            ledger: EnergyLedger::default(),
            wear: WearMap::default(),
            log: log_energy.then(Vec::new),
            sram_access_nj,
            pcm_writeback_bytes: 0,
        })
    }

    fn log_event(&mut self, ev: EnergyEvent) {
        if let Some(log) = &mut self.log {
            log.push(ev);
        }
    }

    pub fn dynamic_nj(&self) -> f64 {
        self.ledger.pcm_dynamic_nj + self.ledger.dram_dynamic_nj + self.ledger.sram_dynamic_nj
    }

    pub fn pcm_access(&mut self, addr: u64, kind: AccessKind, now: u64) -> Access {
        let dev = self.pcm.as_mut().expect("scheme has a PCM device");
        let acc = dev.schedule(addr, kind, now);
        let nj = crate::devices::access_energy_nj(&dev.geom, kind, acc.row_hit);
        self.ledger.pcm_dynamic_nj += nj;
        self.log_event(EnergyEvent::Pcm {
            kind,
            row_hit: acc.row_hit,
        });
        acc
    }

    /// PCM occupancy without a per-access charge; sub-block writeback bursts
    /// are charged per sub-block instead.
    pub fn pcm_access_uncharged(
        &mut self,
        addr: u64,
        kind: AccessKind,
        now: u64,
        hit_override: Option<bool>,
    ) -> Access {
        let dev = self.pcm.as_mut().expect("scheme has a PCM device");
        dev.schedule_with_hit(addr, kind, now, hit_override)
    }

    /// PCM access whose row-buffer outcome is decided by the caller (the
    /// enhanced-row-buffer scheme manages its own buffers).
    pub fn pcm_access_forced(
        &mut self,
        addr: u64,
        kind: AccessKind,
        now: u64,
        hit: bool,
    ) -> Access {
        let dev = self.pcm.as_mut().expect("scheme has a PCM device");
        let acc = dev.schedule_with_hit(addr, kind, now, Some(hit));
        let nj = crate::devices::access_energy_nj(&dev.geom, kind, acc.row_hit);
        self.ledger.pcm_dynamic_nj += nj;
        self.log_event(EnergyEvent::Pcm {
            kind,
            row_hit: acc.row_hit,
        });
        acc
    }

    pub fn dram_access(&mut self, addr: u64, kind: AccessKind, now: u64) -> Access {
        let dev = self.dram.as_mut().expect("scheme has a DRAM device");
        let acc = dev.schedule(addr, kind, now);
        let nj = crate::devices::access_energy_nj(&dev.geom, kind, acc.row_hit);
        self.ledger.dram_dynamic_nj += nj;
        self.log_event(EnergyEvent::Dram {
            kind,
            row_hit: acc.row_hit,
        });
        acc
    }

    /// Flat selective-update charge for one dirty sub-block written back to
    /// PCM.
    pub fn charge_pcm_subblock(&mut self, bytes: u64) {
        let geom = &self.pcm.as_ref().expect("scheme has a PCM device").geom;
        self.ledger.pcm_dynamic_nj += subblock_write_nj(geom, bytes);
        self.pcm_writeback_bytes += bytes;
        self.log_event(EnergyEvent::PcmSubblock { bytes });
    }

    pub fn charge_sram(&mut self) {
        self.ledger.sram_dynamic_nj += self.sram_access_nj;
        self.log_event(EnergyEvent::Sram);
    }

    pub fn charge_rapid_insert(&mut self) {
        self.ledger.sram_dynamic_nj += RAPID_INSERT_NJ;
        self.log_event(EnergyEvent::RapidInsert);
    }

    pub fn charge_migration_software(&mut self) {
        self.ledger.software_nj += MIGRATION_SOFTWARE_NJ;
        self.log_event(EnergyEvent::MigrationSoftware);
    }

    pub fn wear_write(&mut self, addr: u64) {
        self.wear.record(addr / BLOCK_BYTES);
    }

    fn read_block_pcm(&mut self, addr: u64, now: u64) -> u64 {
        let a = self.pcm_access(addr, AccessKind::Read, now);
        let (_, done) = self.bus.transfer(BLOCK_BYTES, a.done);
        done
    }

    fn read_block_dram(&mut self, addr: u64, now: u64) -> u64 {
        let a = self.dram_access(addr, AccessKind::Read, now);
        let (_, done) = self.bus.transfer(BLOCK_BYTES, a.done);
        done
    }

    /// Posted 64-byte write: data crosses the bus, then the bank absorbs it.
    /// Returns queue backpressure the issuer must eat.
    fn write_block_pcm(&mut self, addr: u64, now: u64) -> u64 {
        let (_, delivered) = self.bus.transfer(BLOCK_BYTES, now);
        let a = self.pcm_access(addr, AccessKind::WriteBlock, delivered);
        a.queue_wait
    }

    fn write_block_dram(&mut self, addr: u64, now: u64) -> u64 {
        let (_, delivered) = self.bus.transfer(BLOCK_BYTES, now);
        let a = self.dram_access(addr, AccessKind::WriteBlock, delivered);
        a.queue_wait
    }
}

// ---------------------------------------------------------------------------
// Page-sized DMA: migrations, hardware-cache fills, quantum copies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DmaVictim {
    pub dram_src_base: u64,
    pub pcm_dst_base: u64,
    pub dirty_mask: u64,
    pub subblock_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct DmaRequest {
    pub pcm_src_base: u64,
    pub dram_dst_base: u64,
    pub victim: Option<DmaVictim>,
}

#[derive(Debug, Clone, Copy)]
pub struct DmaTiming {
    /// Completion of the demand-page read from PCM (the hardware cache
    /// releases its stalled miss here).
    pub first_op_done: u64,
    /// Completion of all four operations plus the per-burst flush probes.
    pub done: u64,
}

fn subblock_block_addrs(base: u64, sb_index: u32, sb_bytes: u64) -> impl Iterator<Item = u64> {
    let start = base + sb_index as u64 * sb_bytes;
    (start..start + sb_bytes).step_by(BLOCK_BYTES as usize)
}

/// Runs the four-operation page DMA: (1) read the demand page from PCM,
/// (2) read the victim's dirty sub-blocks from DRAM, (3) write the demand
/// page to DRAM, (4) write the dirty sub-blocks to the victim's stale PCM
/// frame with selective updates. Operations serialize; within each, 64-byte
/// bursts stream over the shared bus while banks work in parallel. `drain`
/// runs before every bus grant so queued demand accesses win arbitration
/// over the next burst.
pub fn execute_dma(
    m: &mut Machine,
    req: &DmaRequest,
    start: u64,
    mut drain: impl FnMut(&mut Machine, u64),
) -> DmaTiming {
    let mut bursts: u64 = 0;

    // op 1: demand page out of PCM
    let mut phase_end = start;
    for off in (0..PAGE_BYTES).step_by(BLOCK_BYTES as usize) {
        drain(m, m.bus.busy_until.max(start));
        let a = m.pcm_access(req.pcm_src_base + off, AccessKind::Read, start);
        let (_, bus_done) = m.bus.transfer(BLOCK_BYTES, a.done);
        phase_end = phase_end.max(bus_done);
        bursts += 1;
    }
    let first_op_done = phase_end;

    // op 2: victim dirty sub-blocks out of DRAM
    if let Some(v) = &req.victim {
        let op_start = phase_end;
        for sb in 0..(PAGE_BYTES / v.subblock_bytes) as u32 {
            if v.dirty_mask & (1u64 << sb) == 0 {
                continue;
            }
            for addr in subblock_block_addrs(v.dram_src_base, sb, v.subblock_bytes) {
                drain(m, m.bus.busy_until.max(op_start));
                let a = m.dram_access(addr, AccessKind::Read, op_start);
                let (_, bus_done) = m.bus.transfer(BLOCK_BYTES, a.done);
                phase_end = phase_end.max(bus_done);
                bursts += 1;
            }
        }
    }

    // op 3: demand page into DRAM
    let op_start = phase_end;
    for off in (0..PAGE_BYTES).step_by(BLOCK_BYTES as usize) {
        drain(m, m.bus.busy_until.max(op_start));
        let (_, delivered) = m.bus.transfer(BLOCK_BYTES, op_start);
        let a = m.dram_access(req.dram_dst_base + off, AccessKind::WriteBlock, delivered);
        phase_end = phase_end.max(a.done);
        bursts += 1;
    }

    // op 4: dirty sub-blocks into the stale PCM frame; energy per sub-block,
    // wear per 64-byte block
    if let Some(v) = &req.victim {
        let op_start = phase_end;
        for sb in 0..(PAGE_BYTES / v.subblock_bytes) as u32 {
            if v.dirty_mask & (1u64 << sb) == 0 {
                continue;
            }
            m.charge_pcm_subblock(v.subblock_bytes);
            for addr in subblock_block_addrs(v.pcm_dst_base, sb, v.subblock_bytes) {
                drain(m, m.bus.busy_until.max(op_start));
                let (_, delivered) = m.bus.transfer(BLOCK_BYTES, op_start);
                let a = m.pcm_access_uncharged(addr, AccessKind::WriteSubblock, delivered, None);
                m.wear_write(addr);
                phase_end = phase_end.max(a.done);
                bursts += 1;
            }
        }
    }

    DmaTiming {
        first_op_done,
        done: phase_end + FLUSH_PROBE_CYCLES_PER_BURST * bursts,
    }
}

// ---------------------------------------------------------------------------
// Event-loop driver
// ---------------------------------------------------------------------------

struct DmaFinish {
    resume_at: u64,
    memsys_done: u64,
}

enum ReadOutcome {
    Done(u64),
    /// Migration DMA the driver must run with demand interleaving.
    Dma(DmaRequest),
}

#[derive(Debug, Default, Clone, Copy)]
struct LayerCounters {
    layer_misses: u64,
    migrations_or_fills: u64,
}

trait Model {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, dma_active: bool) -> ReadOutcome;
    /// Returns extra cycles the issuing core stalls (queue backpressure).
    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64;
    fn pre_event(&mut self, _m: &mut Machine, _now: u64) {}
    /// Post-DMA bookkeeping (page-table flip, software charge); reports when
    /// the triggering core resumes and when the memory system went idle.
    fn dma_finished(&mut self, _m: &mut Machine, t: &DmaTiming) -> DmaFinish {
        DmaFinish {
            resume_at: t.first_op_done,
            memsys_done: t.done,
        }
    }
    fn counters(&self) -> LayerCounters;
    fn victim_log(&mut self) -> Vec<u64> {
        Vec::new()
    }
}

struct Driver<'t, M: Model> {
    trace: &'t [TraceRecord],
    per_core: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    stall: Vec<u64>,
    finish: Vec<u64>,
    heap: BinaryHeap<Reverse<(u64, u32, usize)>>,
    model: M,
    read_misses: u64,
    writebacks: u64,
    dma_count: u64,
    dma_cycles_total: u64,
    dma_dynamic_nj_total: f64,
}

impl<'t, M: Model> Driver<'t, M> {
    fn new(trace: &'t [TraceRecord], model: M) -> Self {
        let num_cores = trace.iter().map(|r| r.core + 1).max().unwrap_or(0) as usize;
        let mut per_core = vec![Vec::new(); num_cores];
        for (i, r) in trace.iter().enumerate() {
            per_core[r.core as usize].push(i);
        }
        Driver {
            trace,
            per_core,
            cursor: vec![0; num_cores],
            stall: vec![0; num_cores],
            finish: vec![0; num_cores],
            heap: BinaryHeap::new(),
            model,
            read_misses: 0,
            writebacks: 0,
            dma_count: 0,
            dma_cycles_total: 0,
            dma_dynamic_nj_total: 0.0,
        }
    }

    fn push_next(&mut self, core: usize) {
        let list = &self.per_core[core];
        if self.cursor[core] < list.len() {
            let idx = list[self.cursor[core]];
            self.cursor[core] += 1;
            let eff = self.trace[idx].timestamp + self.stall[core];
            self.heap.push(Reverse((eff, core as u32, idx)));
        }
    }

    /// Services every pending event at or before `clock`; used between DMA
    /// bursts so demand accesses win arbitration.
    fn drain(&mut self, machine: &mut Machine, clock: u64) {
        while let Some(&Reverse((t, core, idx))) = self.heap.peek() {
            if t > clock {
                break;
            }
            self.heap.pop();
            self.service(machine, t, core, idx, true);
        }
    }

    fn service(&mut self, machine: &mut Machine, t: u64, core: u32, idx: usize, dma_active: bool) {
        self.model.pre_event(machine, t);
        let rec = self.trace[idx];
        let core_us = core as usize;
        match rec.kind {
            TraceKind::ReadMiss => {
                self.read_misses += 1;
                match self.model.read(machine, rec.addr, t, dma_active) {
                    ReadOutcome::Done(done) => {
                        self.stall[core_us] += done.saturating_sub(t);
                        self.finish[core_us] = self.finish[core_us].max(done);
                    }
                    ReadOutcome::Dma(req) => {
                        debug_assert!(!dma_active, "nested migrations are serialized");
                        let dyn_before = machine.dynamic_nj();
                        let timing =
                            execute_dma(machine, &req, t, |ma, clock| self.drain(ma, clock));
                        let fin = self.model.dma_finished(machine, &timing);
                        self.dma_count += 1;
                        self.dma_cycles_total += fin.memsys_done - t;
                        let dyn_after = machine.dynamic_nj();
                        self.dma_dynamic_nj_total += dyn_after - dyn_before;
                        self.stall[core_us] += fin.resume_at.saturating_sub(t);
                        self.finish[core_us] = self.finish[core_us].max(fin.resume_at);
                    }
                }
            }
            TraceKind::Writeback => {
                self.writebacks += 1;
                let wait = self.model.writeback(machine, rec.addr, t);
                self.stall[core_us] += wait;
                self.finish[core_us] = self.finish[core_us].max(t + wait);
            }
        }
        self.push_next(core_us);
    }

    fn run(
        mut self,
        mut machine: Machine,
        scheme: SchemeId,
        seed: u64,
        cpu_hz: u64,
    ) -> SchemeStats {
        for core in 0..self.per_core.len() {
            self.push_next(core);
        }
        while let Some(Reverse((t, core, idx))) = self.heap.pop() {
            self.service(&mut machine, t, core, idx, false);
        }
        let total_cycles = self.finish.iter().copied().max().unwrap_or(0);
        let leak_mw = machine.pcm.as_ref().map_or(0.0, |d| d.geom.leakage_mw)
            + machine.dram.as_ref().map_or(0.0, |d| d.geom.leakage_mw);
        machine.ledger.leakage_nj =
            crate::devices::leakage_energy_nj(leak_mw, total_cycles, cpu_hz);
        let counters = self.model.counters();
        let events = self.read_misses + self.writebacks;
        SchemeStats {
            scheme,
            seed,
            per_core_cycles: self.finish.clone(),
            total_cycles,
            read_misses: self.read_misses,
            writebacks: self.writebacks,
            layer_misses: counters.layer_misses,
            dram_miss_rate: if events == 0 {
                0.0
            } else {
                counters.layer_misses as f64 / events as f64
            },
            migrations_or_fills: counters.migrations_or_fills,
            busy_bank_cycles_pcm: machine.pcm.as_ref().map_or(0, |d| d.busy_bank_cycles),
            busy_bank_cycles_dram: machine.dram.as_ref().map_or(0, |d| d.busy_bank_cycles),
            energy: machine.ledger.clone(),
            pcm_writeback_bytes: machine.pcm_writeback_bytes,
            wear: machine.wear.clone(),
            dma_count: self.dma_count,
            dma_cycles_total: self.dma_cycles_total,
            dma_dynamic_nj_total: self.dma_dynamic_nj_total,
            victims: self.model.victim_log(),
            energy_log: machine.log.take(),
            leakage_mw_total: leak_mw,
            sram_access_nj: machine.sram_access_nj,
            cpu_hz,
            pcm_geom: machine.pcm.as_ref().map(|d| d.geom.clone()),
            dram_geom: machine.dram.as_ref().map(|d| d.geom.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Scheme models
// ---------------------------------------------------------------------------

/// Every event goes straight to PCM.
struct PcmOnlyModel {
    counters: LayerCounters,
}

impl Model for PcmOnlyModel {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, _dma: bool) -> ReadOutcome {
        self.counters.layer_misses += 1;
        ReadOutcome::Done(m.read_block_pcm(addr, now))
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        self.counters.layer_misses += 1;
        let wait = m.write_block_pcm(addr, now);
        m.wear_write(addr);
        wait
    }

    fn counters(&self) -> LayerCounters {
        self.counters
    }
}

/// Every event goes to a large conventional DRAM.
struct DramIdealModel;

impl Model for DramIdealModel {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, _dma: bool) -> ReadOutcome {
        ReadOutcome::Done(m.read_block_dram(addr, now))
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        m.write_block_dram(addr, now)
    }

    fn counters(&self) -> LayerCounters {
        LayerCounters::default()
    }
}

/// SRAM L3 in front of PCM; misses fetch the whole L3 block from PCM and
/// dirty evictions issue selective 64-byte writes back.
struct PcmBaseModel {
    l3: SetAssocCache,
    counters: LayerCounters,
}

impl PcmBaseModel {
    fn hit_cycles(&self) -> u64 {
        self.l3.cfg.hit_latency_mem_cycles * crate::devices::MEM_CYCLE_CPU_CYCLES
    }

    /// Fetches the missing L3 block from PCM and posts the victim's dirty
    /// writebacks. Returns the fetch completion.
    fn fill(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        let block_bytes = self.l3.cfg.block_bytes;
        let sub = self.l3.cfg.subblock_bytes.unwrap_or(block_bytes);
        let base = addr / block_bytes * block_bytes;
        let (_, evicted) = self.l3.fill(addr);
        let mut done = now;
        for off in (0..block_bytes).step_by(BLOCK_BYTES as usize) {
            let a = m.pcm_access(base + off, AccessKind::Read, now);
            let (_, bus_done) = m.bus.transfer(BLOCK_BYTES, a.done);
            done = done.max(bus_done);
        }
        if let Some(e) = evicted {
            for sb in 0..(block_bytes / sub) as u32 {
                if e.dirty_mask & (1u64 << sb) == 0 {
                    continue;
                }
                for waddr in subblock_block_addrs(e.base_addr, sb, sub) {
                    m.write_block_pcm(waddr, now);
                    m.wear_write(waddr);
                    m.pcm_writeback_bytes += BLOCK_BYTES;
                }
            }
        }
        done
    }
}

impl Model for PcmBaseModel {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, _dma: bool) -> ReadOutcome {
        m.charge_sram();
        match self.l3.lookup(addr) {
            Lookup::Hit { .. } => ReadOutcome::Done(now + self.hit_cycles()),
            Lookup::Miss { .. } => {
                self.counters.layer_misses += 1;
                ReadOutcome::Done(self.fill(m, addr, now))
            }
        }
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        m.charge_sram();
        match self.l3.lookup(addr) {
            Lookup::Hit { .. } => {
                self.l3.write_hit(addr);
                0
            }
            Lookup::Miss { .. } => {
                // allocate on writeback miss; the fill is posted
                self.counters.layer_misses += 1;
                self.fill(m, addr, now);
                self.l3.write_hit(addr);
                0
            }
        }
    }

    fn counters(&self) -> LayerCounters {
        self.counters
    }
}

/// DRAM hardware cache with page-size blocks: fills on every miss, victim
/// handling overlaps (the miss stalls only for the demand-page read).
struct HwCacheModel {
    tags: SetAssocCache,
    counters: LayerCounters,
}

impl HwCacheModel {
    fn data_addr(&self, addr: u64, way: usize) -> u64 {
        self.tags.frame_index(addr, way) * self.tags.cfg.block_bytes
            + addr % self.tags.cfg.block_bytes
    }

    fn fill_request(&mut self, addr: u64) -> DmaRequest {
        let block_bytes = self.tags.cfg.block_bytes;
        let sub = self.tags.cfg.subblock_bytes.unwrap_or(block_bytes);
        let base = addr / block_bytes * block_bytes;
        let (way, evicted) = self.tags.fill(addr);
        let frame_base = self.tags.frame_index(addr, way) * block_bytes;
        DmaRequest {
            pcm_src_base: base,
            dram_dst_base: frame_base,
            victim: evicted.map(|e| DmaVictim {
                dram_src_base: frame_base,
                pcm_dst_base: e.base_addr,
                dirty_mask: e.dirty_mask,
                subblock_bytes: sub,
            }),
        }
    }
}

impl Model for HwCacheModel {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, _dma: bool) -> ReadOutcome {
        match self.tags.lookup(addr) {
            Lookup::Hit { way } => {
                ReadOutcome::Done(m.read_block_dram(self.data_addr(addr, way), now))
            }
            Lookup::Miss { .. } => {
                self.counters.layer_misses += 1;
                self.counters.migrations_or_fills += 1;
                let req = self.fill_request(addr);
                let timing = execute_dma(m, &req, now, |_, _| {});
                ReadOutcome::Done(timing.first_op_done)
            }
        }
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        match self.tags.lookup(addr) {
            Lookup::Hit { way } => {
                let wait = m.write_block_dram(self.data_addr(addr, way), now);
                self.tags.write_hit(addr);
                wait
            }
            Lookup::Miss { .. } => {
                // allocate on writeback miss; the fill is posted
                self.counters.layer_misses += 1;
                self.counters.migrations_or_fills += 1;
                let req = self.fill_request(addr);
                execute_dma(m, &req, now, |_, _| {});
                self.tags.write_hit(addr);
                0
            }
        }
    }

    fn counters(&self) -> LayerCounters {
        self.counters
    }
}

/// Enhanced per-bank PCM row buffers: fully associative, LRU, write-before-
/// read when the evicted buffer is dirty.
struct RowBuffersModel {
    /// Per bank: (segment id, dirty, last-touch stamp).
    banks: Vec<Vec<(u64, bool, u64)>>,
    buffers_per_bank: usize,
    buffer_bytes: u64,
    stamp: u64,
    counters: LayerCounters,
}

impl RowBuffersModel {
    fn segment(&self, addr: u64, geom: &DeviceGeometry) -> (usize, u64) {
        let stripe = addr / (geom.interleave_bytes * geom.num_banks as u64);
        let bank = ((addr / geom.interleave_bytes) % geom.num_banks as u64) as usize;
        (bank, stripe / (self.buffer_bytes / geom.interleave_bytes))
    }

    /// Byte address of the i-th interleave unit of a bank-local segment.
    fn segment_block_addr(&self, bank: usize, seg: u64, i: u64, geom: &DeviceGeometry) -> u64 {
        let stripe = seg * (self.buffer_bytes / geom.interleave_bytes) + i;
        stripe * geom.interleave_bytes * geom.num_banks as u64 + bank as u64 * geom.interleave_bytes
    }

    /// Brings the segment into a buffer on a miss; returns when the array
    /// read (behind any dirty-victim write) completes.
    fn fetch_on_miss(&mut self, m: &mut Machine, addr: u64, now: u64, dirty: bool) -> u64 {
        let geom = m.pcm.as_ref().expect("row buffers run on PCM").geom.clone();
        let (bank, seg) = self.segment(addr, &geom);
        self.counters.layer_misses += 1;
        if self.banks[bank].len() == self.buffers_per_bank {
            let lru = self.banks[bank]
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.2)
                .map(|(i, _)| i)
                .unwrap();
            let (vseg, vdirty, _) = self.banks[bank].swap_remove(lru);
            if vdirty {
                // the L2 miss waits for the long PCM-array row writeback
                // before the array read can begin
                m.charge_pcm_subblock(self.buffer_bytes);
                let blocks = self.buffer_bytes / geom.interleave_bytes;
                let wb_addr = self.segment_block_addr(bank, vseg, 0, &geom);
                m.pcm_access_uncharged(wb_addr, AccessKind::WriteSubblock, now, Some(false));
                for i in 0..blocks {
                    m.wear_write(self.segment_block_addr(bank, vseg, i, &geom));
                }
            }
        }
        let a = m.pcm_access_forced(addr, AccessKind::Read, now, false);
        self.stamp += 1;
        self.banks[bank].push((seg, dirty, self.stamp));
        a.done
    }

    fn buffer_hit(&mut self, addr: u64, geom: &DeviceGeometry, dirty: bool) -> bool {
        let (bank, seg) = self.segment(addr, geom);
        self.stamp += 1;
        let stamp = self.stamp;
        match self.banks[bank].iter_mut().find(|e| e.0 == seg) {
            Some(e) => {
                e.2 = stamp;
                if dirty {
                    e.1 = true;
                }
                true
            }
            None => false,
        }
    }
}

impl Model for RowBuffersModel {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, _dma: bool) -> ReadOutcome {
        let geom = m.pcm.as_ref().unwrap().geom.clone();
        if self.buffer_hit(addr, &geom, false) {
            let a = m.pcm_access_forced(addr, AccessKind::Read, now, true);
            let (_, done) = m.bus.transfer(BLOCK_BYTES, a.done);
            ReadOutcome::Done(done)
        } else {
            let ready = self.fetch_on_miss(m, addr, now, false);
            let (_, done) = m.bus.transfer(BLOCK_BYTES, ready);
            ReadOutcome::Done(done)
        }
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        let geom = m.pcm.as_ref().unwrap().geom.clone();
        if self.buffer_hit(addr, &geom, true) {
            let (_, delivered) = m.bus.transfer(BLOCK_BYTES, now);
            let a = m.pcm_access_forced(addr, AccessKind::WriteBlock, delivered, true);
            a.queue_wait
        } else {
            // allocate: fetch the segment, the write then lands in the buffer
            self.fetch_on_miss(m, addr, now, true);
            0
        }
    }

    fn counters(&self) -> LayerCounters {
        self.counters
    }
}

/// Copies frequently-written pages into DRAM only at quantum boundaries.
struct OsQuantaModel {
    frames_free: Vec<u32>,
    resident: std::collections::BTreeMap<u64, (u32, u64)>, // page -> (frame, dirty mask)
    last_access: std::collections::BTreeMap<u64, u64>,
    stamp: u64,
    quantum_writes: std::collections::BTreeMap<u64, u64>,
    next_boundary: u64,
    quantum_cycles: u64,
    write_threshold: u64,
    subblock_bytes: u64,
    counters: LayerCounters,
}

impl OsQuantaModel {
    fn touch(&mut self, page: u64) {
        self.stamp += 1;
        self.last_access.insert(page, self.stamp);
    }

    fn quantum_end(&mut self, m: &mut Machine, at: u64) {
        let hot: Vec<u64> = self
            .quantum_writes
            .iter()
            .filter(|(page, &n)| n >= self.write_threshold && !self.resident.contains_key(page))
            .map(|(&page, _)| page)
            .collect();
        self.quantum_writes.clear();
        for page in hot {
            let (frame, victim) = match self.frames_free.pop() {
                Some(f) => (f, None),
                None => {
                    let vpage = self
                        .resident
                        .keys()
                        .copied()
                        .min_by_key(|p| (self.last_access.get(p).copied().unwrap_or(0), *p))
                        .expect("resident set is non-empty when full");
                    let (vframe, vmask) = self.resident.remove(&vpage).unwrap();
                    (vframe, Some((vpage, vframe, vmask)))
                }
            };
            let req = DmaRequest {
                pcm_src_base: page * PAGE_BYTES,
                dram_dst_base: frame as u64 * PAGE_BYTES,
                victim: victim.map(|(vpage, vframe, vmask)| DmaVictim {
                    dram_src_base: vframe as u64 * PAGE_BYTES,
                    pcm_dst_base: vpage * PAGE_BYTES,
                    dirty_mask: vmask,
                    subblock_bytes: self.subblock_bytes,
                }),
            };
            execute_dma(m, &req, at, |_, _| {});
            self.resident.insert(page, (frame, 0));
            self.touch(page);
            self.counters.migrations_or_fills += 1;
        }
    }
}

impl Model for OsQuantaModel {
    fn pre_event(&mut self, m: &mut Machine, now: u64) {
        while now >= self.next_boundary {
            let at = self.next_boundary;
            self.next_boundary += self.quantum_cycles;
            self.quantum_end(m, at);
        }
    }

    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, _dma: bool) -> ReadOutcome {
        let page = addr / PAGE_BYTES;
        if let Some(&(frame, _)) = self.resident.get(&page) {
            self.touch(page);
            ReadOutcome::Done(m.read_block_dram(frame as u64 * PAGE_BYTES + addr % PAGE_BYTES, now))
        } else {
            self.counters.layer_misses += 1;
            ReadOutcome::Done(m.read_block_pcm(addr, now))
        }
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        let page = addr / PAGE_BYTES;
        *self.quantum_writes.entry(page).or_insert(0) += 1;
        if let Some(&(frame, mask)) = self.resident.get(&page) {
            self.touch(page);
            let bit = (addr % PAGE_BYTES) / self.subblock_bytes;
            self.resident.insert(page, (frame, mask | (1 << bit)));
            m.write_block_dram(frame as u64 * PAGE_BYTES + addr % PAGE_BYTES, now)
        } else {
            self.counters.layer_misses += 1;
            let wait = m.write_block_pcm(addr, now);
            m.wear_write(addr);
            wait
        }
    }

    fn counters(&self) -> LayerCounters {
        self.counters
    }
}

/// The migration store: hysteresis-gated on-demand migration with RAPid-fed
/// LRU replacement and sub-block writebacks to stale frames.
struct MigrantModel {
    store: MigrantStore,
    counters: LayerCounters,
    victims: Vec<u64>,
    log_victims: bool,
}

impl MigrantModel {
    fn dram_addr(frame: u32, addr: u64) -> u64 {
        frame as u64 * PAGE_BYTES + addr % PAGE_BYTES
    }
}

impl Model for MigrantModel {
    fn read(&mut self, m: &mut Machine, addr: u64, now: u64, dma_active: bool) -> ReadOutcome {
        match self.store.classify_read(addr, !dma_active) {
            ReadClass::StoreHit { frame } => {
                m.charge_rapid_insert();
                ReadOutcome::Done(m.read_block_dram(Self::dram_addr(frame, addr), now))
            }
            ReadClass::Pcm { migrate: false } => {
                self.counters.layer_misses += 1;
                ReadOutcome::Done(m.read_block_pcm(addr, now))
            }
            ReadClass::Pcm { migrate: true } => {
                self.counters.layer_misses += 1;
                self.counters.migrations_or_fills += 1;
                let page = addr / PAGE_BYTES;
                let plan = self.store.begin_migration(page);
                if self.log_victims {
                    if let Some(v) = plan.victim {
                        self.victims.push(v.page);
                    }
                }
                let sb = self.store.subblock_bytes_effective();
                ReadOutcome::Dma(DmaRequest {
                    pcm_src_base: page * PAGE_BYTES,
                    dram_dst_base: plan.dest_frame as u64 * PAGE_BYTES,
                    victim: plan.victim.map(|v| DmaVictim {
                        dram_src_base: v.frame as u64 * PAGE_BYTES,
                        pcm_dst_base: v.page * PAGE_BYTES,
                        dirty_mask: v.dirty_mask,
                        subblock_bytes: sb,
                    }),
                })
            }
        }
    }

    fn writeback(&mut self, m: &mut Machine, addr: u64, now: u64) -> u64 {
        match self.store.classify_write(addr) {
            WriteClass::StoreWrite { frame } => {
                m.charge_rapid_insert();
                m.write_block_dram(Self::dram_addr(frame, addr), now)
            }
            WriteClass::Pcm => {
                self.counters.layer_misses += 1;
                let wait = m.write_block_pcm(addr, now);
                m.wear_write(addr);
                wait
            }
        }
    }

    fn dma_finished(&mut self, m: &mut Machine, t: &DmaTiming) -> DmaFinish {
        let fin = self.store.finish_migration();
        let mut memsys_done = t.done;
        if fin.late_dirty_mask != 0 {
            // sub-blocks dirtied while the DMA was in flight still need the
            // stale-frame writeback
            let v = fin.plan.victim.expect("late dirty bits imply a victim");
            let sb_bytes = self.store.subblock_bytes_effective();
            for sb in 0..(PAGE_BYTES / sb_bytes) as u32 {
                if fin.late_dirty_mask & (1u64 << sb) == 0 {
                    continue;
                }
                m.charge_pcm_subblock(sb_bytes);
                for addr in subblock_block_addrs(v.page * PAGE_BYTES, sb, sb_bytes) {
                    let (_, delivered) = m.bus.transfer(BLOCK_BYTES, t.done);
                    let a =
                        m.pcm_access_uncharged(addr, AccessKind::WriteSubblock, delivered, None);
                    m.wear_write(addr);
                    memsys_done = memsys_done.max(a.done);
                }
            }
        }
        m.charge_migration_software();
        DmaFinish {
            resume_at: memsys_done + MIGRATION_SOFTWARE_CYCLES,
            memsys_done,
        }
    }

    fn counters(&self) -> LayerCounters {
        self.counters
    }

    fn victim_log(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.victims)
    }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Runs one (scheme, trace, seed) cell and returns its statistics.
pub fn run_scheme(
    scheme: SchemeId,
    trace: &[TraceRecord],
    params: &SimParams,
    seed: u64,
) -> Result<SchemeStats, SchemeError> {
    match scheme {
        SchemeId::PcmOnly => {
            let machine = Machine::new(Some(params.pcm.clone()), None, 0.0, params.log_energy)?;
            let model = PcmOnlyModel {
                counters: LayerCounters::default(),
            };
            Ok(Driver::new(trace, model).run(machine, scheme, seed, params.cpu_hz))
        }
        SchemeId::DramIdeal => {
            let machine =
                Machine::new(None, Some(params.dram_base.clone()), 0.0, params.log_energy)?;
            Ok(Driver::new(trace, DramIdealModel).run(machine, scheme, seed, params.cpu_hz))
        }
        SchemeId::PcmBase => {
            let machine = Machine::new(
                Some(params.pcm.clone()),
                None,
                params.l3.access_nj,
                params.log_energy,
            )?;
            let model = PcmBaseModel {
                l3: SetAssocCache::new(params.l3.clone())?,
                counters: LayerCounters::default(),
            };
            Ok(Driver::new(trace, model).run(machine, scheme, seed, params.cpu_hz))
        }
        SchemeId::HwCacheSeq | SchemeId::HwCachePar => {
            let sequential = scheme == SchemeId::HwCacheSeq;
            let geom = if sequential {
                params.hw_cache_seq.clone()
            } else {
                params.hw_cache_par.clone()
            };
            let mut tags_cfg = CacheConfig::hw_cache(sequential);
            tags_cfg.capacity_bytes = geom.capacity_bytes;
            let machine =
                Machine::new(Some(params.pcm.clone()), Some(geom), 0.0, params.log_energy)?;
            let model = HwCacheModel {
                tags: SetAssocCache::new(tags_cfg)?,
                counters: LayerCounters::default(),
            };
            Ok(Driver::new(trace, model).run(machine, scheme, seed, params.cpu_hz))
        }
        SchemeId::RowBuffers => {
            if params.rb_buffer_bytes == 0
                || !params
                    .rb_buffer_bytes
                    .is_multiple_of(params.pcm.interleave_bytes)
            {
                return Err(SchemeError::BadParams(
                    "row-buffer width must be a positive multiple of the interleave".into(),
                ));
            }
            let machine = Machine::new(Some(params.pcm.clone()), None, 0.0, params.log_energy)?;
            let model = RowBuffersModel {
                banks: vec![Vec::new(); params.pcm.num_banks as usize],
                buffers_per_bank: params.rb_buffers_per_bank,
                buffer_bytes: params.rb_buffer_bytes,
                stamp: 0,
                counters: LayerCounters::default(),
            };
            Ok(Driver::new(trace, model).run(machine, scheme, seed, params.cpu_hz))
        }
        SchemeId::OsQuantaCopy => {
            let mut geom = params.dram_migrant.clone();
            geom.capacity_bytes = params.migrant_capacity_bytes;
            let frames = (params.migrant_capacity_bytes / PAGE_BYTES) as u32;
            let machine =
                Machine::new(Some(params.pcm.clone()), Some(geom), 0.0, params.log_energy)?;
            let model = OsQuantaModel {
                frames_free: (0..frames).rev().collect(),
                resident: Default::default(),
                last_access: Default::default(),
                stamp: 0,
                quantum_writes: Default::default(),
                next_boundary: params.osq_quantum_cycles.max(1),
                quantum_cycles: params.osq_quantum_cycles.max(1),
                write_threshold: params.osq_write_threshold,
                subblock_bytes: params.migrant.subblock_bytes.unwrap_or(PAGE_BYTES),
                counters: LayerCounters::default(),
            };
            Ok(Driver::new(trace, model).run(machine, scheme, seed, params.cpu_hz))
        }
        SchemeId::MigrantStore => {
            let mut geom = params.dram_migrant.clone();
            geom.capacity_bytes = params.migrant_capacity_bytes;
            let machine =
                Machine::new(Some(params.pcm.clone()), Some(geom), 0.0, params.log_energy)?;
            let model = MigrantModel {
                store: MigrantStore::new(
                    params.migrant.clone(),
                    params.migrant_capacity_bytes,
                    seed,
                )?,
                counters: LayerCounters::default(),
                victims: Vec::new(),
                log_victims: params.log_victims,
            };
            Ok(Driver::new(trace, model).run(machine, scheme, seed, params.cpu_hz))
        }
    }
}

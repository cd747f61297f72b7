//! Energy ledger, wear accounting, lifetime projection, and report
//! assembly (CSV + JSON).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{
    access_energy_nj, leakage_energy_nj, subblock_write_nj, AccessKind, DeviceGeometry,
};

pub const SECONDS_PER_YEAR: f64 = 3.156e7;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Software charge per migration: 5000 CPU cycles and 3000 nJ.
pub const MIGRATION_SOFTWARE_CYCLES: u64 = 5000;
pub const MIGRATION_SOFTWARE_NJ: f64 = 3000.0;
/// Energy per insertion into the recently-accessed-page-id buffer.
pub const RAPID_INSERT_NJ: f64 = 0.025;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub pcm_dynamic_nj: f64,
    pub dram_dynamic_nj: f64,
    pub sram_dynamic_nj: f64,
    pub leakage_nj: f64,
    pub software_nj: f64,
}

impl EnergyLedger {
    pub fn total_nj(&self) -> f64 {
        self.pcm_dynamic_nj
            + self.dram_dynamic_nj
            + self.sram_dynamic_nj
            + self.leakage_nj
            + self.software_nj
    }
}

/// Per-64-byte-block PCM write counters.
#[derive(Debug, Clone, Default)]
pub struct WearMap {
    counts: BTreeMap<u64, u64>,
}

impl WearMap {
    pub fn record(&mut self, block: u64) {
        *self.counts.entry(block).or_insert(0) += 1;
    }

    pub fn touched_blocks(&self) -> u64 {
        self.counts.len() as u64
    }

    pub fn total_writes(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn max_writes(&self) -> u64 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// Maximum write count among the lowest `quantile` fraction of touched
    /// blocks.
    pub fn quantile_max(&self, quantile: f64) -> u64 {
        let mut sorted: Vec<u64> = self.counts.values().copied().collect();
        if sorted.is_empty() {
            return 0;
        }
        sorted.sort_unstable();
        let n = sorted.len();
        let idx = ((quantile * n as f64).ceil() as usize).clamp(1, n) - 1;
        sorted[idx]
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("wear map is empty; no blocks were written")]
    EmptyWearMap,
}

/// Cumulative distribution over touched blocks: (writes, fraction of
/// touched blocks with at most that many writes).
pub fn wear_cdf(wear: &WearMap) -> Result<Vec<(u64, f64)>, MetricsError> {
    if wear.is_empty() {
        return Err(MetricsError::EmptyWearMap);
    }
    let mut sorted: Vec<u64> = wear.counts.values().copied().collect();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut points = Vec::new();
    let mut seen = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            i += 1;
            seen += 1;
        }
        points.push((v, seen as f64 / n));
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeProjection {
    /// Quantile-max write count over touched blocks.
    pub max_writes: u64,
    /// Projected years; `None` means no writes were observed (unbounded).
    pub years: Option<f64>,
}

/// Worst-case lifetime at the given quantile, write rates normalized to the
/// baseline's execution time so speed differences do not bias the rates.
pub fn worst_case_lifetime(
    wear: &WearMap,
    base_exec_cycles: u64,
    cpu_hz: u64,
    endurance_writes: u64,
    quantile: f64,
) -> LifetimeProjection {
    let max_writes = wear.quantile_max(quantile);
    if max_writes == 0 {
        return LifetimeProjection {
            max_writes: 0,
            years: None,
        };
    }
    let seconds = base_exec_cycles as f64 / cpu_hz as f64;
    let years = endurance_writes as f64 * seconds / max_writes as f64 / SECONDS_PER_YEAR;
    LifetimeProjection {
        max_writes,
        years: Some(years),
    }
}

/// Busy-bank product averaged over the baseline's execution cycles.
pub fn busy_bank_average(busy_bank_cycles: u64, base_exec_cycles: u64) -> f64 {
    busy_bank_cycles as f64 / base_exec_cycles as f64
}

// ---------------------------------------------------------------------------
// Energy event log: every dynamic charge in issue order, replayable against
// the device tables to reconcile the ledger exactly.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnergyEvent {
    Pcm {
        kind: AccessKind,
        row_hit: bool,
    },
    Dram {
        kind: AccessKind,
        row_hit: bool,
    },
    /// Flat sub-block writeback charge on PCM (selective update).
    PcmSubblock {
        bytes: u64,
    },
    /// One SRAM cache probe at its configured per-access energy.
    Sram,
    RapidInsert,
    MigrationSoftware,
}

pub struct ReplayContext<'a> {
    pub pcm: Option<&'a DeviceGeometry>,
    pub dram: Option<&'a DeviceGeometry>,
    pub sram_access_nj: f64,
    pub leakage_mw_total: f64,
    pub elapsed_cycles: u64,
    pub cpu_hz: u64,
}

/// Recomputes the ledger from the event log with the same arithmetic the
/// simulator used; the result must equal the run's ledger exactly.
pub fn replay_energy(events: &[EnergyEvent], ctx: &ReplayContext) -> EnergyLedger {
    let mut ledger = EnergyLedger::default();
    for ev in events {
        match *ev {
            EnergyEvent::Pcm { kind, row_hit } => {
                let geom = ctx.pcm.expect("pcm event without pcm geometry");
                ledger.pcm_dynamic_nj += access_energy_nj(geom, kind, row_hit);
            }
            EnergyEvent::Dram { kind, row_hit } => {
                let geom = ctx.dram.expect("dram event without dram geometry");
                ledger.dram_dynamic_nj += access_energy_nj(geom, kind, row_hit);
            }
            EnergyEvent::PcmSubblock { bytes } => {
                let geom = ctx.pcm.expect("pcm event without pcm geometry");
                ledger.pcm_dynamic_nj += subblock_write_nj(geom, bytes);
            }
            EnergyEvent::Sram => ledger.sram_dynamic_nj += ctx.sram_access_nj,
            EnergyEvent::RapidInsert => ledger.sram_dynamic_nj += RAPID_INSERT_NJ,
            EnergyEvent::MigrationSoftware => ledger.software_nj += MIGRATION_SOFTWARE_NJ,
        }
    }
    ledger.leakage_nj = leakage_energy_nj(ctx.leakage_mw_total, ctx.elapsed_cycles, ctx.cpu_hz);
    ledger
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Rounds to six significant digits so reports are stable and readable.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: String,
    pub seed: u64,
    pub total_cycles: u64,
    pub read_misses: u64,
    pub writebacks: u64,
    pub layer_misses: u64,
    pub dram_miss_rate: f64,
    pub migrations_or_fills: u64,
    pub busy_bank_cycles_pcm: u64,
    pub busy_bank_cycles_dram: u64,
    pub busy_bank_avg_pcm: Option<f64>,
    pub busy_bank_avg_dram: Option<f64>,
    pub pcm_dynamic_nj: f64,
    pub dram_dynamic_nj: f64,
    pub sram_dynamic_nj: f64,
    pub leakage_nj: f64,
    pub software_nj: f64,
    pub total_energy_nj: f64,
    pub pcm_writeback_bytes: u64,
    pub wear_total_writes: u64,
    pub wear_touched_blocks: u64,
    pub wear_max_writes: u64,
    pub wear_quantile_writes: u64,
    pub lifetime_years: Option<f64>,
    pub norm_perf: Option<f64>,
    pub norm_energy: Option<f64>,
}

impl ReportRow {
    /// Applies the report float precision to every floating field.
    pub fn rounded(mut self) -> Self {
        self.dram_miss_rate = round_sig6(self.dram_miss_rate);
        self.busy_bank_avg_pcm = self.busy_bank_avg_pcm.map(round_sig6);
        self.busy_bank_avg_dram = self.busy_bank_avg_dram.map(round_sig6);
        self.pcm_dynamic_nj = round_sig6(self.pcm_dynamic_nj);
        self.dram_dynamic_nj = round_sig6(self.dram_dynamic_nj);
        self.sram_dynamic_nj = round_sig6(self.sram_dynamic_nj);
        self.leakage_nj = round_sig6(self.leakage_nj);
        self.software_nj = round_sig6(self.software_nj);
        self.total_energy_nj = round_sig6(self.total_energy_nj);
        self.lifetime_years = self.lifetime_years.map(round_sig6);
        self.norm_perf = self.norm_perf.map(round_sig6);
        self.norm_energy = self.norm_energy.map(round_sig6);
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// False when no PCM-base run was available for normalization.
    pub normalized: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Fully resolved configuration, defaults included, for reproducibility.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

const CSV_COLUMNS: &[&str] = &[
    "scheme",
    "seed",
    "total_cycles",
    "read_misses",
    "writebacks",
    "layer_misses",
    "dram_miss_rate",
    "migrations_or_fills",
    "busy_bank_cycles_pcm",
    "busy_bank_cycles_dram",
    "busy_bank_avg_pcm",
    "busy_bank_avg_dram",
    "pcm_dynamic_nj",
    "dram_dynamic_nj",
    "sram_dynamic_nj",
    "leakage_nj",
    "software_nj",
    "total_energy_nj",
    "pcm_writeback_bytes",
    "wear_total_writes",
    "wear_touched_blocks",
    "wear_max_writes",
    "wear_quantile_writes",
    "lifetime_years",
    "norm_perf",
    "norm_energy",
];

fn csv_float(x: f64) -> String {
    if x.is_infinite() {
        return "inf".into();
    }
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn csv_opt(x: Option<f64>) -> String {
    x.map(csv_float).unwrap_or_default()
}

impl Report {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// CSV with a leading `# config=...` provenance line; readers of the
    /// trace format already skip `#` comments.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("# schema_version=");
        out.push_str(&self.schema_version.to_string());
        out.push_str(" config=");
        out.push_str(&serde_json::to_string(&self.config).expect("config serializes"));
        out.push('\n');
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let fields = [
                r.scheme.clone(),
                r.seed.to_string(),
                r.total_cycles.to_string(),
                r.read_misses.to_string(),
                r.writebacks.to_string(),
                r.layer_misses.to_string(),
                csv_float(r.dram_miss_rate),
                r.migrations_or_fills.to_string(),
                r.busy_bank_cycles_pcm.to_string(),
                r.busy_bank_cycles_dram.to_string(),
                csv_opt(r.busy_bank_avg_pcm),
                csv_opt(r.busy_bank_avg_dram),
                csv_float(r.pcm_dynamic_nj),
                csv_float(r.dram_dynamic_nj),
                csv_float(r.sram_dynamic_nj),
                csv_float(r.leakage_nj),
                csv_float(r.software_nj),
                csv_float(r.total_energy_nj),
                r.pcm_writeback_bytes.to_string(),
                r.wear_total_writes.to_string(),
                r.wear_touched_blocks.to_string(),
                r.wear_max_writes.to_string(),
                r.wear_quantile_writes.to_string(),
                csv_opt(r.lifetime_years),
                csv_opt(r.norm_perf),
                csv_opt(r.norm_energy),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wear_from(counts: &[(u64, u64)]) -> WearMap {
        let mut w = WearMap::default();
        for &(block, n) in counts {
            for _ in 0..n {
                w.record(block);
            }
        }
        w
    }

    #[test]
    fn cdf_of_uniform_writes_is_single_step() {
        let w = wear_from(&[(0, 1), (1, 1), (2, 1)]);
        assert_eq!(wear_cdf(&w).unwrap(), vec![(1, 1.0)]);
    }

    #[test]
    fn cdf_matches_hand_computed_points() {
        let w = wear_from(&[(0, 1), (1, 1), (2, 2), (3, 4)]);
        let cdf = wear_cdf(&w).unwrap();
        assert_eq!(cdf, vec![(1, 0.5), (2, 0.75), (4, 1.0)]);
    }

    #[test]
    fn cdf_rejects_empty_map() {
        assert!(matches!(
            wear_cdf(&WearMap::default()),
            Err(MetricsError::EmptyWearMap)
        ));
    }

    #[test]
    fn lifetime_unit_arithmetic() {
        // 10 writes over 1 second of base time, 1e9 endurance:
        // 1e9 / (10 writes/s) = 1e8 s ~ 3.17 years
        let w = wear_from(&[(0, 10), (1, 1)]);
        let p = worst_case_lifetime(&w, 2_000_000_000, 2_000_000_000, 1_000_000_000, 0.9999);
        assert_eq!(p.max_writes, 10);
        let years = p.years.unwrap();
        assert!((years - 1e8 / SECONDS_PER_YEAR).abs() < 1e-9);
        assert!((years - 3.17).abs() < 0.01);
    }

    #[test]
    fn zero_endurance_gives_zero_years() {
        let w = wear_from(&[(0, 5)]);
        let p = worst_case_lifetime(&w, 1000, 2_000_000_000, 0, 0.9999);
        assert_eq!(p.years, Some(0.0));
    }

    #[test]
    fn no_writes_is_unbounded_lifetime() {
        let p = worst_case_lifetime(&WearMap::default(), 1000, 2_000_000_000, 1, 0.9999);
        assert_eq!(p.years, None);
        assert_eq!(p.max_writes, 0);
    }

    #[test]
    fn quantile_excludes_pathological_tail() {
        let mut w = WearMap::default();
        for b in 0..20_000u64 {
            w.record(b);
        }
        for _ in 0..99 {
            w.record(0); // one hot block with 100 writes
        }
        assert_eq!(w.max_writes(), 100);
        assert_eq!(w.quantile_max(0.9999), 1);
    }

    #[test]
    fn busy_bank_average_examples() {
        assert_eq!(busy_bank_average(1000, 1000), 1.0);
        // two banks each busy half the window
        assert_eq!(busy_bank_average(500 + 500, 1000), 1.0);
    }

    #[test]
    fn replay_reproduces_component_sums() {
        let pcm = DeviceGeometry::pcm();
        let dram = DeviceGeometry::dram_migrant();
        let events = vec![
            EnergyEvent::Pcm {
                kind: AccessKind::Read,
                row_hit: false,
            },
            EnergyEvent::Dram {
                kind: AccessKind::WriteBlock,
                row_hit: true,
            },
            EnergyEvent::PcmSubblock { bytes: 512 },
            EnergyEvent::Sram,
            EnergyEvent::RapidInsert,
            EnergyEvent::MigrationSoftware,
        ];
        let ctx = ReplayContext {
            pcm: Some(&pcm),
            dram: Some(&dram),
            sram_access_nj: 5.0,
            leakage_mw_total: 14.4,
            elapsed_cycles: 2000,
            cpu_hz: 2_000_000_000,
        };
        let ledger = replay_energy(&events, &ctx);
        assert_eq!(ledger.pcm_dynamic_nj, 33.0 + 170.0);
        assert_eq!(ledger.dram_dynamic_nj, 4.0);
        assert_eq!(ledger.sram_dynamic_nj, 5.0 + RAPID_INSERT_NJ);
        assert_eq!(ledger.software_nj, 3000.0);
        assert!((ledger.leakage_nj - 14.4).abs() < 1e-12);
    }

    #[test]
    fn rounding_keeps_six_significant_digits() {
        assert_eq!(round_sig6(1234567.0), 1234570.0);
        assert_eq!(round_sig6(0.000123456789), 0.000123457);
        assert_eq!(round_sig6(0.0), 0.0);
    }

    #[test]
    fn csv_has_header_and_one_row_per_scheme() {
        let row = ReportRow {
            scheme: "pcm_only".into(),
            seed: 1,
            total_cycles: 100,
            read_misses: 5,
            writebacks: 2,
            layer_misses: 5,
            dram_miss_rate: 1.0,
            migrations_or_fills: 0,
            busy_bank_cycles_pcm: 50,
            busy_bank_cycles_dram: 0,
            busy_bank_avg_pcm: Some(0.5),
            busy_bank_avg_dram: Some(0.0),
            pcm_dynamic_nj: 33.0,
            dram_dynamic_nj: 0.0,
            sram_dynamic_nj: 0.0,
            leakage_nj: 1.0,
            software_nj: 0.0,
            total_energy_nj: 34.0,
            pcm_writeback_bytes: 0,
            wear_total_writes: 2,
            wear_touched_blocks: 2,
            wear_max_writes: 1,
            wear_quantile_writes: 1,
            lifetime_years: Some(3.17),
            norm_perf: Some(1.0),
            norm_energy: Some(1.0),
        };
        let mut row2 = row.clone();
        row2.scheme = "dram_ideal".into();
        let report = Report {
            schema_version: REPORT_SCHEMA_VERSION,
            normalized: true,
            warning: None,
            config: serde_json::json!({"k": 1}),
            rows: vec![row, row2],
        };
        let csv = report.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# schema_version=1 config="));
        assert_eq!(lines[1].split(',').count(), CSV_COLUMNS.len());
        assert_eq!(lines.len(), 4);
        // JSON document round-trips through the schema
        let parsed: Report = serde_json::from_str(&report.to_json_string()).unwrap();
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[0].scheme, "pcm_only");
    }
}

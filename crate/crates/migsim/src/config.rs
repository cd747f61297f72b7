//! JSON experiment configuration: trace source, scheme list, device
//! overrides, policy knobs, and ablation lists. Unknown keys are rejected;
//! every report embeds the fully resolved values for reproducibility.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::CacheConfig;
use crate::devices::{DeviceGeometry, EnergyTable};
use crate::migrant::{MigrantConfig, MigrateOn, Replacement};
use crate::schemes::{SchemeId, SimParams};
use crate::trace::{SyntheticSpec, PAGE_BYTES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    /// Path to a trace file in the text format.
    File(String),
    Synthetic(SyntheticSpec),
}

/// Partial device override; absent fields keep the per-device defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryOverride {
    pub capacity_bytes: Option<u64>,
    pub num_banks: Option<u32>,
    pub interleave_bytes: Option<u64>,
    pub row_bytes: Option<u64>,
    pub queue_depth: Option<usize>,
    pub read_latency_mem_cycles: Option<u64>,
    pub write_latency_mem_cycles: Option<u64>,
    pub row_hit_fraction: Option<f64>,
    /// Full energy table when given.
    pub energy: Option<EnergyTable>,
    pub leakage_mw: Option<f64>,
}

impl GeometryOverride {
    fn apply(&self, mut g: DeviceGeometry) -> DeviceGeometry {
        if let Some(v) = self.capacity_bytes {
            g.capacity_bytes = v;
        }
        if let Some(v) = self.num_banks {
            g.num_banks = v;
        }
        if let Some(v) = self.interleave_bytes {
            g.interleave_bytes = v;
        }
        if let Some(v) = self.row_bytes {
            g.row_bytes = v;
        }
        if let Some(v) = self.queue_depth {
            g.queue_depth = v;
        }
        if let Some(v) = self.read_latency_mem_cycles {
            g.read_latency_mem_cycles = v;
        }
        if let Some(v) = self.write_latency_mem_cycles {
            g.write_latency_mem_cycles = v;
        }
        if let Some(v) = self.row_hit_fraction {
            g.row_hit_fraction = v;
        }
        if let Some(v) = self.energy {
            g.energy = v;
        }
        if let Some(v) = self.leakage_mw {
            g.leakage_mw = v;
        }
        g
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceOverrides {
    #[serde(default)]
    pub pcm: GeometryOverride,
    #[serde(default)]
    pub dram_base: GeometryOverride,
    #[serde(default)]
    pub dram_migrant: GeometryOverride,
    #[serde(default)]
    pub hw_cache_seq: GeometryOverride,
    #[serde(default)]
    pub hw_cache_par: GeometryOverride,
}

/// SRAM L3 knobs for the PCM-base scheme. Latency and energy defaults are
/// model placeholders, not datasheet values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L3Override {
    pub capacity_bytes: Option<u64>,
    pub block_bytes: Option<u64>,
    pub associativity: Option<usize>,
    pub subblock_bytes: Option<u64>,
    pub hit_latency_mem_cycles: Option<u64>,
    pub access_nj: Option<f64>,
}

impl L3Override {
    fn apply(&self, mut c: CacheConfig) -> CacheConfig {
        if let Some(v) = self.capacity_bytes {
            c.capacity_bytes = v;
        }
        if let Some(v) = self.block_bytes {
            c.block_bytes = v;
        }
        if let Some(v) = self.associativity {
            c.associativity = v;
        }
        if let Some(v) = self.subblock_bytes {
            c.subblock_bytes = Some(v);
        }
        if let Some(v) = self.hit_latency_mem_cycles {
            c.hit_latency_mem_cycles = v;
        }
        if let Some(v) = self.access_nj {
            c.access_nj = v;
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsqConfig {
    /// Quantum length in CPU cycles (10 ms at 2 GHz by default; the cited
    /// scheme's constant is not published, so this is a model knob).
    #[serde(default = "default_quantum")]
    pub quantum_cycles: u64,
    /// Writes within a quantum required before a page is copied.
    #[serde(default = "default_osq_writes")]
    pub write_threshold: u64,
}

fn default_quantum() -> u64 {
    20_000_000
}
fn default_osq_writes() -> u64 {
    16
}

impl Default for OsqConfig {
    fn default() -> Self {
        OsqConfig {
            quantum_cycles: default_quantum(),
            write_threshold: default_osq_writes(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowBuffersConfig {
    #[serde(default = "default_rb_count")]
    pub buffers_per_bank: usize,
    #[serde(default = "default_rb_bytes")]
    pub buffer_bytes: u64,
}

fn default_rb_count() -> usize {
    8
}
fn default_rb_bytes() -> u64 {
    2048
}

impl Default for RowBuffersConfig {
    fn default() -> Self {
        RowBuffersConfig {
            buffers_per_bank: default_rb_count(),
            buffer_bytes: default_rb_bytes(),
        }
    }
}

/// Knob lists expanded into a run per cell by the `ablate` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<u32>,
    /// `null` in the list disables sub-blocking for that cell.
    #[serde(default = "default_subblocks")]
    pub subblocks: Vec<Option<u64>>,
    #[serde(default = "default_replacements")]
    pub replacements: Vec<Replacement>,
    #[serde(default = "default_migrate_on")]
    pub migrate_on: Vec<MigrateOn>,
}

fn default_thresholds() -> Vec<u32> {
    vec![0, 8, 16, 64]
}
fn default_subblocks() -> Vec<Option<u64>> {
    vec![None, Some(128), Some(512)]
}
fn default_replacements() -> Vec<Replacement> {
    vec![
        Replacement::RapidLru,
        Replacement::PerfectLru,
        Replacement::Random,
    ]
}
fn default_migrate_on() -> Vec<MigrateOn> {
    vec![MigrateOn::All, MigrateOn::WritesOnly]
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            thresholds: default_thresholds(),
            subblocks: default_subblocks(),
            replacements: default_replacements(),
            migrate_on: default_migrate_on(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trace: TraceSource,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeId>,
    #[serde(default)]
    pub devices: DeviceOverrides,
    #[serde(default)]
    pub policy: MigrantConfig,
    #[serde(default = "default_migrant_capacity")]
    pub migrantstore_capacity_bytes: u64,
    #[serde(default)]
    pub l3: L3Override,
    #[serde(default)]
    pub osq: OsqConfig,
    #[serde(default)]
    pub row_buffers: RowBuffersConfig,
    #[serde(default = "default_cpu_hz")]
    pub cpu_hz: u64,
    #[serde(default = "default_endurance")]
    pub endurance_writes: u64,
    #[serde(default = "default_quantile")]
    pub lifetime_quantile: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub log_energy_events: bool,
    #[serde(default)]
    pub log_victims: bool,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_schemes() -> Vec<SchemeId> {
    SchemeId::ALL.to_vec()
}
fn default_migrant_capacity() -> u64 {
    128 << 20
}
fn default_cpu_hz() -> u64 {
    2_000_000_000
}
fn default_endurance() -> u64 {
    1_000_000_000
}
fn default_quantile() -> f64 {
    0.9999
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_out_dir() -> String {
    "out".into()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schemes.is_empty() {
            return Err(ConfigError::Invalid("schemes list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds list is empty".into()));
        }
        if self.migrantstore_capacity_bytes == 0
            || !self.migrantstore_capacity_bytes.is_multiple_of(PAGE_BYTES)
        {
            return Err(ConfigError::Invalid(
                "migrantstore_capacity_bytes must be a positive multiple of the page size".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lifetime_quantile) {
            return Err(ConfigError::Invalid(
                "lifetime_quantile must be in [0,1]".into(),
            ));
        }
        if self.cpu_hz == 0 {
            return Err(ConfigError::Invalid("cpu_hz must be > 0".into()));
        }
        let params = self.resolve()?;
        if let TraceSource::Synthetic(spec) = &self.trace {
            spec.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if spec.footprint_bytes() > params.pcm.capacity_bytes {
                return Err(ConfigError::Invalid(format!(
                    "synthetic footprint {} exceeds PCM capacity {}",
                    spec.footprint_bytes(),
                    params.pcm.capacity_bytes
                )));
            }
        }
        Ok(())
    }

    /// Applies the overrides onto the device and policy defaults.
    pub fn resolve(&self) -> Result<SimParams, ConfigError> {
        let params = SimParams {
            pcm: self.devices.pcm.apply(DeviceGeometry::pcm()),
            dram_base: self.devices.dram_base.apply(DeviceGeometry::dram_base()),
            dram_migrant: self
                .devices
                .dram_migrant
                .apply(DeviceGeometry::dram_migrant()),
            hw_cache_seq: self
                .devices
                .hw_cache_seq
                .apply(DeviceGeometry::hw_cache_seq()),
            hw_cache_par: self
                .devices
                .hw_cache_par
                .apply(DeviceGeometry::hw_cache_par()),
            l3: self.l3.apply(CacheConfig::sram_l3()),
            migrant: self.policy.clone(),
            migrant_capacity_bytes: self.migrantstore_capacity_bytes,
            osq_quantum_cycles: self.osq.quantum_cycles,
            osq_write_threshold: self.osq.write_threshold,
            rb_buffers_per_bank: self.row_buffers.buffers_per_bank,
            rb_buffer_bytes: self.row_buffers.buffer_bytes,
            cpu_hz: self.cpu_hz,
            log_energy: self.log_energy_events,
            log_victims: self.log_victims,
        };
        for (name, geom) in [
            ("pcm", &params.pcm),
            ("dram_base", &params.dram_base),
            ("hw_cache_seq", &params.hw_cache_seq),
            ("hw_cache_par", &params.hw_cache_par),
        ] {
            geom.validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        let mut migrant_geom = params.dram_migrant.clone();
        migrant_geom.capacity_bytes = params.migrant_capacity_bytes;
        migrant_geom
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("dram_migrant: {e}")))?;
        params
            .l3
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("l3: {e}")))?;
        Ok(params)
    }

    /// Fully resolved configuration for report provenance: defaults applied
    /// everywhere so the run is reproducible from the report alone.
    pub fn provenance(&self) -> Result<serde_json::Value, ConfigError> {
        let params = self.resolve()?;
        Ok(serde_json::json!({
            "trace": &self.trace,
            "schemes": &self.schemes,
            "seeds": &self.seeds,
            "devices": {
                "pcm": &params.pcm,
                "dram_base": &params.dram_base,
                "dram_migrant": &params.dram_migrant,
                "hw_cache_seq": &params.hw_cache_seq,
                "hw_cache_par": &params.hw_cache_par,
            },
            "l3": &params.l3,
            "policy": &params.migrant,
            "migrantstore_capacity_bytes": self.migrantstore_capacity_bytes,
            "osq": &self.osq,
            "row_buffers": &self.row_buffers,
            "cpu_hz": self.cpu_hz,
            "endurance_writes": self.endurance_writes,
            "lifetime_quantile": self.lifetime_quantile,
            "log_energy_events": self.log_energy_events,
            "log_victims": self.log_victims,
            "ablate": &self.ablate,
        }))
    }
}

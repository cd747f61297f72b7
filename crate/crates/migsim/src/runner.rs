//! Experiment orchestration: trace acquisition, PCM-base-first normalization
//! ordering, and (optionally rayon-parallel) execution of the remaining
//! scheme cells. Cells share nothing; results are reassembled in declaration
//! order so reports do not depend on scheduling.

use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, TraceSource};
use crate::metrics::{
    busy_bank_average, worst_case_lifetime, Report, ReportRow, REPORT_SCHEMA_VERSION,
};
use crate::migrant::MigrantConfig;
use crate::schemes::{run_scheme, SchemeError, SchemeId, SchemeStats, SimParams};
use crate::trace::{self, TraceError, TraceRecord};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("cannot open trace {path}: {source}")]
    TraceIo {
        path: String,
        source: std::io::Error,
    },
}

/// Runs `n` independent cells. `jobs == 1` forces sequential execution;
/// with the `parallel` feature, any other value uses a rayon pool
/// (`jobs == 0` picks the default thread count).
pub fn run_cells<T, F>(jobs: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if jobs != 1 {
            return run_cells_parallel(jobs, n, &f);
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    run_cells_sequential(n, &f)
}

pub fn run_cells_sequential<T, F>(n: usize, f: &F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn run_cells_parallel<T, F>(jobs: usize, n: usize, f: &F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("rayon pool");
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Loads or generates the trace for one seed. File traces are shared across
/// seeds; synthetic traces are regenerated with the seed substituted.
pub fn trace_for_seed(
    cfg: &ExperimentConfig,
    params: &SimParams,
    seed: u64,
    file_cache: &mut Option<Arc<Vec<TraceRecord>>>,
) -> Result<Arc<Vec<TraceRecord>>, RunnerError> {
    match &cfg.trace {
        TraceSource::File(path) => {
            if let Some(t) = file_cache {
                return Ok(t.clone());
            }
            let file = File::open(path).map_err(|source| RunnerError::TraceIo {
                path: path.clone(),
                source,
            })?;
            let records = trace::parse_trace(BufReader::new(file), params.pcm.capacity_bytes)?;
            let arc = Arc::new(records);
            *file_cache = Some(arc.clone());
            Ok(arc)
        }
        TraceSource::Synthetic(spec) => Ok(Arc::new(trace::generate(&spec.with_seed(seed))?)),
    }
}

struct BaseRef {
    total_cycles: u64,
    total_energy_nj: f64,
}

fn stats_to_row(
    stats: &SchemeStats,
    base: Option<&BaseRef>,
    endurance_writes: u64,
    quantile: f64,
) -> ReportRow {
    let total_energy = stats.energy.total_nj();
    let lifetime_years = base.map(|b| {
        let proj = worst_case_lifetime(
            &stats.wear,
            b.total_cycles,
            stats.cpu_hz,
            endurance_writes,
            quantile,
        );
        proj.years.unwrap_or(f64::INFINITY)
    });
    ReportRow {
        scheme: stats.scheme.name().to_string(),
        seed: stats.seed,
        total_cycles: stats.total_cycles,
        read_misses: stats.read_misses,
        writebacks: stats.writebacks,
        layer_misses: stats.layer_misses,
        dram_miss_rate: stats.dram_miss_rate,
        migrations_or_fills: stats.migrations_or_fills,
        busy_bank_cycles_pcm: stats.busy_bank_cycles_pcm,
        busy_bank_cycles_dram: stats.busy_bank_cycles_dram,
        busy_bank_avg_pcm: base
            .filter(|b| b.total_cycles > 0)
            .map(|b| busy_bank_average(stats.busy_bank_cycles_pcm, b.total_cycles)),
        busy_bank_avg_dram: base
            .filter(|b| b.total_cycles > 0)
            .map(|b| busy_bank_average(stats.busy_bank_cycles_dram, b.total_cycles)),
        pcm_dynamic_nj: stats.energy.pcm_dynamic_nj,
        dram_dynamic_nj: stats.energy.dram_dynamic_nj,
        sram_dynamic_nj: stats.energy.sram_dynamic_nj,
        leakage_nj: stats.energy.leakage_nj,
        software_nj: stats.energy.software_nj,
        total_energy_nj: total_energy,
        pcm_writeback_bytes: stats.pcm_writeback_bytes,
        wear_total_writes: stats.wear.total_writes(),
        wear_touched_blocks: stats.wear.touched_blocks(),
        wear_max_writes: stats.wear.max_writes(),
        wear_quantile_writes: stats.wear.quantile_max(quantile),
        lifetime_years,
        norm_perf: base
            .filter(|_| stats.total_cycles > 0)
            .map(|b| b.total_cycles as f64 / stats.total_cycles as f64),
        norm_energy: base
            .filter(|b| b.total_energy_nj > 0.0)
            .map(|b| total_energy / b.total_energy_nj),
    }
    .rounded()
}

pub struct RunOutput {
    pub report: Report,
    /// Raw per-cell statistics in report-row order, for tests and tooling.
    pub stats: Vec<SchemeStats>,
}

/// Runs the configured scheme list over every seed. The PCM-base cell of
/// each seed runs first because normalization, busy-bank averaging, and
/// lifetime rates all reference its execution time.
pub fn execute_run(cfg: &ExperimentConfig, jobs: usize) -> Result<RunOutput, RunnerError> {
    let params = cfg.resolve()?;
    let mut file_cache = None;
    let mut traces = Vec::new();
    for &seed in &cfg.seeds {
        traces.push(trace_for_seed(cfg, &params, seed, &mut file_cache)?);
    }

    let has_base = cfg.schemes.contains(&SchemeId::PcmBase);
    let bases: Vec<Option<SchemeStats>> = if has_base {
        run_cells(jobs, cfg.seeds.len(), |i| {
            run_scheme(SchemeId::PcmBase, &traces[i], &params, cfg.seeds[i])
        })
        .into_iter()
        .map(|r| r.map(Some))
        .collect::<Result<Vec<_>, _>>()?
    } else {
        vec![None; cfg.seeds.len()]
    };

    let rest: Vec<(usize, SchemeId)> = cfg
        .seeds
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            cfg.schemes
                .iter()
                .copied()
                .filter(|&s| s != SchemeId::PcmBase)
                .map(move |s| (i, s))
        })
        .collect();
    let rest_stats: Vec<SchemeStats> = run_cells(jobs, rest.len(), |k| {
        let (i, scheme) = rest[k];
        run_scheme(scheme, &traces[i], &params, cfg.seeds[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    // reassemble in (seed, declared scheme) order
    let mut stats: Vec<SchemeStats> = Vec::new();
    let mut rest_iter = rest_stats.into_iter();
    for (i, base) in bases.iter().enumerate() {
        for &scheme in &cfg.schemes {
            if scheme == SchemeId::PcmBase {
                stats.push(base.clone().expect("base present when listed"));
            } else {
                let s = rest_iter.next().expect("one result per cell");
                debug_assert_eq!((s.seed, s.scheme), (cfg.seeds[i], scheme));
                stats.push(s);
            }
        }
    }

    let rows = stats
        .iter()
        .map(|s| {
            let seed_idx = cfg.seeds.iter().position(|&x| x == s.seed).unwrap_or(0);
            let base = bases[seed_idx].as_ref().map(|b| BaseRef {
                total_cycles: b.total_cycles,
                total_energy_nj: b.energy.total_nj(),
            });
            stats_to_row(
                s,
                base.as_ref(),
                cfg.endurance_writes,
                cfg.lifetime_quantile,
            )
        })
        .collect();

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        normalized: has_base,
        warning: (!has_base).then(|| {
            "pcm_base not in scheme list; normalized columns and lifetimes omitted".to_string()
        }),
        config: cfg.provenance()?,
        rows,
    };
    Ok(RunOutput { report, stats })
}

/// One ablation cell: a migrant-store policy variant plus its label.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub policy: MigrantConfig,
}

pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<AblationCell> {
    let ab = &cfg.ablate;
    let mut cells = Vec::new();
    for &threshold in &ab.thresholds {
        for &subblock in &ab.subblocks {
            for &replacement in &ab.replacements {
                for &migrate_on in &ab.migrate_on {
                    let policy = MigrantConfig {
                        threshold,
                        subblock_bytes: subblock,
                        rapid_capacity: cfg.policy.rapid_capacity,
                        replacement,
                        migrate_on,
                    };
                    let sb = subblock.map_or("none".to_string(), |b| b.to_string());
                    let label = format!(
                        "t{threshold}_s{sb}_{}_{}",
                        match replacement {
                            crate::migrant::Replacement::RapidLru => "rapid_lru",
                            crate::migrant::Replacement::PerfectLru => "perfect_lru",
                            crate::migrant::Replacement::Random => "random",
                        },
                        match migrate_on {
                            crate::migrant::MigrateOn::All => "all",
                            crate::migrant::MigrateOn::WritesOnly => "writes_only",
                        }
                    );
                    cells.push(AblationCell { label, policy });
                }
            }
        }
    }
    cells
}

/// Expands the ablation knob lists into one migrant-store run per cell and
/// emits one report per cell (PCM-base rows included for normalization).
pub fn execute_ablate(
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<Vec<(String, Report)>, RunnerError> {
    let params = cfg.resolve()?;
    let mut file_cache = None;
    let mut traces = Vec::new();
    for &seed in &cfg.seeds {
        traces.push(trace_for_seed(cfg, &params, seed, &mut file_cache)?);
    }

    // normalization dependency: one PCM-base run per seed, first
    let bases: Vec<SchemeStats> = run_cells(jobs, cfg.seeds.len(), |i| {
        run_scheme(SchemeId::PcmBase, &traces[i], &params, cfg.seeds[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let cells = ablation_cells(cfg);
    let n = cells.len() * cfg.seeds.len();
    let results: Vec<Result<SchemeStats, SchemeError>> = run_cells(jobs, n, |k| {
        let cell = &cells[k / cfg.seeds.len()];
        let seed_idx = k % cfg.seeds.len();
        let mut cell_params = params.clone();
        cell_params.migrant = cell.policy.clone();
        run_scheme(
            SchemeId::MigrantStore,
            &traces[seed_idx],
            &cell_params,
            cfg.seeds[seed_idx],
        )
    });

    let provenance = cfg.provenance()?;
    let mut reports = Vec::with_capacity(cells.len());
    let mut it = results.into_iter();
    for cell in &cells {
        let mut rows = Vec::new();
        for base in bases.iter() {
            let base_ref = BaseRef {
                total_cycles: base.total_cycles,
                total_energy_nj: base.energy.total_nj(),
            };
            rows.push(stats_to_row(
                base,
                Some(&base_ref),
                cfg.endurance_writes,
                cfg.lifetime_quantile,
            ));
            let stats = it.next().expect("one result per cell/seed")?;
            let mut row = stats_to_row(
                &stats,
                Some(&base_ref),
                cfg.endurance_writes,
                cfg.lifetime_quantile,
            );
            row.scheme = format!("migrant_store[{}]", cell.label);
            rows.push(row);
        }
        let mut config = provenance.clone();
        config["ablation_cell"] = serde_json::json!(cell.label);
        config["policy"] = serde_json::to_value(&cell.policy).expect("policy serializes");
        reports.push((
            cell.label.clone(),
            Report {
                schema_version: REPORT_SCHEMA_VERSION,
                normalized: true,
                warning: None,
                config,
                rows,
            },
        ));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
            "trace": {"synthetic": {"generator": "zipf", "footprint_pages": 128,
                      "zipf_exponent": 1.0, "write_fraction": 0.3, "records": 2000,
                      "gap_cycles": 150, "num_cores": 2, "seed": 1}},
            "schemes": ["pcm_base", "pcm_only", "dram_ideal", "migrant_store"],
            "migrantstore_capacity_bytes": 262144,
            "seeds": [1, 2]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn run_produces_one_row_per_cell_with_normalization() {
        let cfg = small_cfg();
        let out = execute_run(&cfg, 1).unwrap();
        assert_eq!(out.report.rows.len(), 8); // 4 schemes x 2 seeds
        assert!(out.report.normalized);
        let base_row = &out.report.rows[0];
        assert_eq!(base_row.scheme, "pcm_base");
        assert_eq!(base_row.norm_perf, Some(1.0));
        assert_eq!(base_row.norm_energy, Some(1.0));
        for row in &out.report.rows {
            assert!(row.norm_perf.is_some());
            assert!(row.migrations_or_fills <= row.read_misses + row.writebacks);
        }
    }

    #[test]
    fn missing_base_yields_absolute_report_with_warning() {
        let mut cfg = small_cfg();
        cfg.schemes = vec![SchemeId::PcmOnly, SchemeId::MigrantStore];
        let out = execute_run(&cfg, 1).unwrap();
        assert!(!out.report.normalized);
        assert!(out.report.warning.is_some());
        for row in &out.report.rows {
            assert!(row.norm_perf.is_none());
            assert!(row.lifetime_years.is_none());
        }
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let cfg = small_cfg();
        let seq = execute_run(&cfg, 1).unwrap();
        let par = execute_run(&cfg, 0).unwrap();
        assert_eq!(
            seq.report.to_csv_string(),
            par.report.to_csv_string(),
            "cell scheduling must not affect results"
        );
    }

    #[test]
    fn ablation_expands_the_knob_cross_product() {
        let mut cfg = small_cfg();
        cfg.seeds = vec![1];
        cfg.ablate.thresholds = vec![0, 16];
        cfg.ablate.subblocks = vec![Some(512)];
        cfg.ablate.replacements = vec![crate::migrant::Replacement::RapidLru];
        cfg.ablate.migrate_on = vec![crate::migrant::MigrateOn::All];
        let reports = execute_ablate(&cfg, 1).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].0, "t0_s512_rapid_lru_all");
        assert_eq!(reports[1].0, "t16_s512_rapid_lru_all");
        for (_, r) in &reports {
            assert_eq!(r.rows.len(), 2); // base + variant
            assert!(r.rows[1].scheme.starts_with("migrant_store["));
        }
        // higher gate, fewer migrations
        let m0 = reports[0].1.rows[1].migrations_or_fills;
        let m16 = reports[1].1.rows[1].migrations_or_fills;
        assert!(m16 <= m0, "t16 migrations {m16} vs t0 {m0}");
    }
}

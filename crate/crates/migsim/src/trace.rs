//! Post-L2 trace format, parsing, and synthetic trace generators.
//!
//! One record per line: `<timestamp> <core> <R|W> <addr-hex>`, `#` starts a
//! comment. Records are L2 read misses and L2 writebacks of 64-byte blocks;
//! timestamps are CPU cycles and must be non-decreasing within a core.

use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// L2 block size in bytes; every trace record moves exactly one block.
pub const BLOCK_BYTES: u64 = 64;
/// OS page size in bytes, shared by all schemes.
pub const PAGE_BYTES: u64 = 8192;
/// Blocks per page.
pub const BLOCKS_PER_PAGE: u64 = PAGE_BYTES / BLOCK_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    ReadMiss,
    Writeback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub timestamp: u64,
    pub core: u32,
    pub kind: TraceKind,
    pub addr: u64,
}

impl TraceRecord {
    pub fn page(&self) -> u64 {
        self.addr / PAGE_BYTES
    }

    pub fn block(&self) -> u64 {
        self.addr / BLOCK_BYTES
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: address {addr:#x} is not {BLOCK_BYTES}-byte aligned")]
    Unaligned { line: usize, addr: u64 },
    #[error("line {line}: address {addr:#x} exceeds PCM capacity {capacity:#x}")]
    OutOfRange {
        line: usize,
        addr: u64,
        capacity: u64,
    },
    #[error("line {line}: core {core} timestamp {timestamp} regresses below {previous}")]
    TimestampRegression {
        line: usize,
        core: u32,
        timestamp: u64,
        previous: u64,
    },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parses the text trace format, validating alignment, range, and per-core
/// timestamp monotonicity.
pub fn parse_trace<R: BufRead>(reader: R, capacity: u64) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    let mut last_ts: Vec<Option<u64>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let body = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut fields = body.split_whitespace();
        let Some(ts_str) = fields.next() else {
            continue; // blank or comment-only line
        };
        let (core_str, kind_str, addr_str) = match (fields.next(), fields.next(), fields.next()) {
            (Some(c), Some(k), Some(a)) => (c, k, a),
            _ => {
                return Err(TraceError::Malformed {
                    line: lineno,
                    reason: format!("expected 4 fields, got fewer in {body:?}"),
                })
            }
        };
        if fields.next().is_some() {
            return Err(TraceError::Malformed {
                line: lineno,
                reason: "trailing fields after address".into(),
            });
        }
        let timestamp: u64 = ts_str.parse().map_err(|e| TraceError::Malformed {
            line: lineno,
            reason: format!("bad timestamp {ts_str:?}: {e}"),
        })?;
        let core: u32 = core_str.parse().map_err(|e| TraceError::Malformed {
            line: lineno,
            reason: format!("bad core {core_str:?}: {e}"),
        })?;
        let kind = match kind_str {
            "R" => TraceKind::ReadMiss,
            "W" => TraceKind::Writeback,
            other => {
                return Err(TraceError::Malformed {
                    line: lineno,
                    reason: format!("bad kind {other:?}, expected R or W"),
                })
            }
        };
        let digits = addr_str.strip_prefix("0x").unwrap_or(addr_str);
        let addr = u64::from_str_radix(digits, 16).map_err(|e| TraceError::Malformed {
            line: lineno,
            reason: format!("bad address {addr_str:?}: {e}"),
        })?;
        if addr % BLOCK_BYTES != 0 {
            return Err(TraceError::Unaligned { line: lineno, addr });
        }
        if addr >= capacity {
            return Err(TraceError::OutOfRange {
                line: lineno,
                addr,
                capacity,
            });
        }
        if core as usize >= last_ts.len() {
            last_ts.resize(core as usize + 1, None);
        }
        if let Some(prev) = last_ts[core as usize] {
            if timestamp < prev {
                return Err(TraceError::TimestampRegression {
                    line: lineno,
                    core,
                    timestamp,
                    previous: prev,
                });
            }
        }
        last_ts[core as usize] = Some(timestamp);
        records.push(TraceRecord {
            timestamp,
            core,
            kind,
            addr,
        });
    }
    Ok(records)
}

/// Writes records in the text format accepted by [`parse_trace`].
pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        let k = match r.kind {
            TraceKind::ReadMiss => 'R',
            TraceKind::Writeback => 'W',
        };
        writeln!(w, "{} {} {} 0x{:x}", r.timestamp, r.core, k, r.addr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Zipf,
    Loop,
    Phased,
}

/// Parameters of a synthetic trace. The same spec and seed always produce a
/// bit-identical trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub footprint_pages: u64,
    #[serde(default = "default_exponent")]
    pub zipf_exponent: f64,
    #[serde(default = "default_write_fraction")]
    pub write_fraction: f64,
    pub records: u64,
    #[serde(default = "default_gap")]
    pub gap_cycles: u64,
    #[serde(default = "default_cores")]
    pub num_cores: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Phase count for the phased generator; each phase touches a disjoint
    /// slice of the footprint.
    #[serde(default = "default_phases")]
    pub phases: u32,
}

fn default_exponent() -> f64 {
    1.0
}
fn default_write_fraction() -> f64 {
    0.25
}
fn default_gap() -> u64 {
    200
}
fn default_cores() -> u32 {
    8
}
fn default_seed() -> u64 {
    1
}
fn default_phases() -> u32 {
    4
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.footprint_pages < 1 {
            return Err(TraceError::BadSpec("footprint_pages must be >= 1".into()));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(TraceError::BadSpec(format!(
                "zipf_exponent must be >= 0, got {}",
                self.zipf_exponent
            )));
        }
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return Err(TraceError::BadSpec(format!(
                "write_fraction must be in [0,1], got {}",
                self.write_fraction
            )));
        }
        if self.num_cores < 1 {
            return Err(TraceError::BadSpec("num_cores must be >= 1".into()));
        }
        if self.phases < 1 {
            return Err(TraceError::BadSpec("phases must be >= 1".into()));
        }
        if self.generator == Generator::Phased && self.footprint_pages < self.phases as u64 {
            return Err(TraceError::BadSpec(
                "phased generator needs footprint_pages >= phases".into(),
            ));
        }
        Ok(())
    }

    pub fn footprint_bytes(&self) -> u64 {
        self.footprint_pages * PAGE_BYTES
    }

    /// Spec with the seed replaced, used for multi-seed sweeps.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s
    }
}

/// Generates a synthetic trace from the spec. Per-core event streams are
/// produced independently and merged by (timestamp, core).
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<TraceRecord>, TraceError> {
    spec.validate()?;
    let cores = spec.num_cores as u64;
    let mut merged: Vec<(TraceRecord, u64)> = Vec::with_capacity(spec.records as usize);
    let zipf_cdf = match spec.generator {
        Generator::Zipf => Some(zipf_cdf(spec.footprint_pages, spec.zipf_exponent)),
        _ => None,
    };
    for core in 0..spec.num_cores {
        let n = per_core_records(spec.records, cores, core as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (core as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let mut clock: u64 = 0;
        for i in 0..n {
            clock += sample_gap(&mut rng, spec.gap_cycles);
            let page = match spec.generator {
                Generator::Zipf => sample_cdf(zipf_cdf.as_ref().unwrap(), &mut rng),
                Generator::Loop => {
                    let start = core as u64 * spec.footprint_pages / cores;
                    (start + i) % spec.footprint_pages
                }
                Generator::Phased => {
                    let phases = spec.phases as u64;
                    let phase = (i * phases / n.max(1)).min(phases - 1);
                    let lo = phase * spec.footprint_pages / phases;
                    let hi = (phase + 1) * spec.footprint_pages / phases;
                    rng.gen_range(lo..hi)
                }
            };
            let block = match spec.generator {
                // Loops stream through the footprint; the block offset
                // rotates once per lap so repeated visits touch the page
                // rather than one hot block.
                Generator::Loop => {
                    let start = core as u64 * spec.footprint_pages / cores;
                    ((start + i) / spec.footprint_pages) % BLOCKS_PER_PAGE
                }
                _ => rng.gen_range(0..BLOCKS_PER_PAGE),
            };
            let kind = if spec.write_fraction > 0.0 && rng.gen::<f64>() < spec.write_fraction {
                TraceKind::Writeback
            } else {
                TraceKind::ReadMiss
            };
            merged.push((
                TraceRecord {
                    timestamp: clock,
                    core,
                    kind,
                    addr: page * PAGE_BYTES + block * BLOCK_BYTES,
                },
                i,
            ));
        }
    }
    merged.sort_by_key(|(r, seq)| (r.timestamp, r.core, *seq));
    Ok(merged.into_iter().map(|(r, _)| r).collect())
}

fn per_core_records(total: u64, cores: u64, core: u64) -> u64 {
    total / cores + u64::from(core < total % cores)
}

fn sample_gap(rng: &mut ChaCha8Rng, mean: u64) -> u64 {
    if mean == 0 {
        return 0;
    }
    let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    ((-u.ln()) * mean as f64).round().max(1.0) as u64
}

fn zipf_cdf(n: u64, exponent: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(n as usize);
    let mut sum = 0.0;
    for rank in 1..=n {
        sum += (rank as f64).powf(-exponent);
        cdf.push(sum);
    }
    for c in cdf.iter_mut() {
        *c /= sum;
    }
    cdf
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> u64 {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const CAP: u64 = 8 << 30;

    fn spec(generator: Generator) -> SyntheticSpec {
        SyntheticSpec {
            generator,
            footprint_pages: 16,
            zipf_exponent: 1.0,
            write_fraction: 0.25,
            records: 1000,
            gap_cycles: 100,
            num_cores: 2,
            seed: 7,
            phases: 4,
        }
    }

    #[test]
    fn parses_basic_record() {
        let recs = parse_trace(Cursor::new("100 0 R 0x1000\n"), CAP).unwrap();
        assert_eq!(
            recs,
            vec![TraceRecord {
                timestamp: 100,
                core: 0,
                kind: TraceKind::ReadMiss,
                addr: 0x1000
            }]
        );
    }

    #[test]
    fn empty_stream_is_empty_trace() {
        let recs = parse_trace(Cursor::new(""), CAP).unwrap();
        assert!(recs.is_empty());
        let recs = parse_trace(Cursor::new("# just a comment\n\n"), CAP).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn rejects_unaligned_address() {
        let err = parse_trace(Cursor::new("100 0 R 0x1001\n"), CAP).unwrap_err();
        assert!(matches!(
            err,
            TraceError::Unaligned {
                line: 1,
                addr: 0x1001
            }
        ));
    }

    #[test]
    fn rejects_out_of_range_address() {
        let err = parse_trace(Cursor::new("0 0 W 0x40\n"), 0x40).unwrap_err();
        assert!(matches!(err, TraceError::OutOfRange { .. }));
    }

    #[test]
    fn rejects_timestamp_regression_per_core() {
        let text = "100 0 R 0x0\n50 1 R 0x40\n40 0 R 0x80\n";
        let err = parse_trace(Cursor::new(text), CAP).unwrap_err();
        assert!(matches!(
            err,
            TraceError::TimestampRegression {
                line: 3,
                core: 0,
                ..
            }
        ));
        // different cores may interleave arbitrarily
        let ok = "100 0 R 0x0\n50 1 R 0x40\n100 1 R 0x80\n";
        assert_eq!(parse_trace(Cursor::new(ok), CAP).unwrap().len(), 3);
    }

    #[test]
    fn reports_malformed_line_number() {
        let err = parse_trace(Cursor::new("0 0 R 0x0\n1 0 X 0x40\n"), CAP).unwrap_err();
        match err {
            TraceError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_text() {
        let trace = generate(&spec(Generator::Zipf)).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let back = parse_trace(Cursor::new(buf), CAP).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn identical_seed_identical_trace() {
        let a = generate(&spec(Generator::Zipf)).unwrap();
        let b = generate(&spec(Generator::Zipf)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec(Generator::Zipf).with_seed(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn addresses_stay_aligned_and_in_footprint() {
        for gen in [Generator::Zipf, Generator::Loop, Generator::Phased] {
            let s = spec(gen);
            for r in generate(&s).unwrap() {
                assert_eq!(r.addr % BLOCK_BYTES, 0);
                assert!(r.addr < s.footprint_bytes());
            }
        }
    }

    #[test]
    fn zipf_uniform_when_exponent_zero() {
        let mut s = spec(Generator::Zipf);
        s.footprint_pages = 4;
        s.zipf_exponent = 0.0;
        s.records = 20_000;
        s.num_cores = 1;
        let trace = generate(&s).unwrap();
        let mut counts = [0u64; 4];
        for r in &trace {
            counts[r.page() as usize] += 1;
        }
        // binomial sigma for p=0.25, n=20000
        let sigma = (0.25 * 0.75 / 20_000f64).sqrt();
        for c in counts {
            let freq = c as f64 / 20_000.0;
            assert!(
                (freq - 0.25).abs() < 3.0 * sigma,
                "page frequency {freq} too far from 0.25"
            );
        }
    }

    #[test]
    fn zipf_rank_one_mass_matches_harmonic_sum() {
        // exponent 1, 1000 pages: rank-1 frequency ~ 1/H_1000 ~ 0.1336
        let mut s = spec(Generator::Zipf);
        s.footprint_pages = 1000;
        s.zipf_exponent = 1.0;
        s.records = 200_000;
        s.num_cores = 1;
        s.write_fraction = 0.0;
        let trace = generate(&s).unwrap();
        let rank1 = trace.iter().filter(|r| r.page() == 0).count() as f64 / trace.len() as f64;
        let h1000: f64 = (1..=1000).map(|k| 1.0 / k as f64).sum();
        assert!(
            (rank1 - 1.0 / h1000).abs() < 0.01,
            "rank-1 mass {rank1} vs analytic {}",
            1.0 / h1000
        );
    }

    #[test]
    fn write_fraction_zero_means_no_writebacks() {
        let mut s = spec(Generator::Zipf);
        s.write_fraction = 0.0;
        assert!(generate(&s)
            .unwrap()
            .iter()
            .all(|r| r.kind == TraceKind::ReadMiss));
    }

    #[test]
    fn loop_visits_pages_cyclically() {
        let mut s = spec(Generator::Loop);
        s.footprint_pages = 3;
        s.records = 6;
        s.num_cores = 1;
        s.write_fraction = 0.0;
        let pages: Vec<u64> = generate(&s).unwrap().iter().map(|r| r.page()).collect();
        assert_eq!(pages, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn phased_working_sets_are_disjoint() {
        let mut s = spec(Generator::Phased);
        s.footprint_pages = 4;
        s.phases = 2;
        s.records = 100;
        s.num_cores = 1;
        let trace = generate(&s).unwrap();
        let first: Vec<u64> = trace[..50].iter().map(|r| r.page()).collect();
        let second: Vec<u64> = trace[50..].iter().map(|r| r.page()).collect();
        assert!(first.iter().all(|&p| p < 2));
        assert!(second.iter().all(|&p| p >= 2));
    }

    #[test]
    fn zero_records_is_valid_empty_trace() {
        let mut s = spec(Generator::Zipf);
        s.records = 0;
        assert!(generate(&s).unwrap().is_empty());
    }

    #[test]
    fn negative_exponent_rejected() {
        let mut s = spec(Generator::Zipf);
        s.zipf_exponent = -0.5;
        assert!(matches!(generate(&s), Err(TraceError::BadSpec(_))));
    }

    #[test]
    fn per_core_timestamps_monotone() {
        let trace = generate(&spec(Generator::Phased)).unwrap();
        let mut last = std::collections::BTreeMap::new();
        for r in &trace {
            if let Some(&prev) = last.get(&r.core) {
                assert!(r.timestamp >= prev);
            }
            last.insert(r.core, r.timestamp);
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn record_strategy() -> impl Strategy<Value = (u64, u32, bool, u64)> {
            (0u64..1_000_000, 0u32..8, any::<bool>(), 0u64..(1 << 20))
        }

        proptest! {
            #[test]
            fn text_round_trip_is_identity(
                raw in proptest::collection::vec(record_strategy(), 0..200)
            ) {
                // sort per-core timestamps so the trace is well formed
                let mut by_core: std::collections::BTreeMap<u32, Vec<u64>> = Default::default();
                for (ts, core, _, _) in &raw {
                    by_core.entry(*core).or_default().push(*ts);
                }
                for v in by_core.values_mut() {
                    v.sort_unstable();
                }
                let mut cursor: std::collections::BTreeMap<u32, usize> = Default::default();
                let trace: Vec<TraceRecord> = raw
                    .iter()
                    .map(|(_, core, is_wb, blk)| {
                        let i = cursor.entry(*core).or_insert(0);
                        let ts = by_core[core][*i];
                        *i += 1;
                        TraceRecord {
                            timestamp: ts,
                            core: *core,
                            kind: if *is_wb { TraceKind::Writeback } else { TraceKind::ReadMiss },
                            addr: blk * BLOCK_BYTES,
                        }
                    })
                    .collect();
                let mut buf = Vec::new();
                write_trace(&mut buf, &trace).unwrap();
                let back = parse_trace(std::io::Cursor::new(buf), CAP).unwrap();
                prop_assert_eq!(trace, back);
            }
        }
    }
}

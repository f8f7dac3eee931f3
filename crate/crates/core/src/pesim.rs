//! Cycle-level latency model of a pipelined Schur-elimination accelerator.
//!
//! A processing element (PE) streams points through four stages:
//!
//! 1. block accumulation (`36 * CO` cycles),
//! 2. 3x3 inversion (70 cycles, CO-independent),
//! 3. `-W * inv` products (`36 * CO` cycles),
//! 4. the S/r updates over all camera pairs
//!    (`ceil(18 * (CO^2 + CO) / q)` cycles with `q` parallel S-update
//!    units).
//!
//! Throughput model: the leading point pays its full four-stage latency to
//! fill the pipeline; every point (the leading one included) then
//! contributes its slowest stage to the steady stream, i.e.
//! `total = fill(first) + sum(max stage per point)`. Pipeline re-fill
//! effects when a point's stage pattern grows mid-stream are ignored,
//! which is why only time orderings and ratio bands are meaningful
//! outputs, not absolute milliseconds.
//!
//! Multiple PEs run independently; a workload controller routes each point
//! to a PE whose co-observation range covers it, balancing busy cycles
//! greedily across PEs that share a range overlap. Host/accelerator
//! traffic is modeled as `18 * o + b^2 / 2` words of 32 bits over a fixed
//! DMA bandwidth, overlapping with computation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default accelerator clock, MHz.
pub const DEFAULT_CLOCK_MHZ: f64 = 180.0;
/// Default DMA bandwidth, Mbit/s.
pub const DEFAULT_DMA_MBIT_S: f64 = 6400.0;
/// Transferred words are single-precision floats.
const WORD_BITS: f64 = 32.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("co-observation value {co} is not covered by any processing element")]
    UncoveredCo { co: u32 },
    #[error("configuration has no processing elements")]
    NoProcessingElements,
}

/// One processing element: `q` parallel S-update units and the inclusive
/// co-observation range it accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeDescriptor {
    pub q: u32,
    pub co_range: (u32, u32),
}

/// Accelerator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub pes: Vec<PeDescriptor>,
    #[serde(default = "default_clock")]
    pub clock_mhz: f64,
    #[serde(default = "default_dma")]
    pub dma_mbit_s: f64,
}

fn default_clock() -> f64 {
    DEFAULT_CLOCK_MHZ
}

fn default_dma() -> f64 {
    DEFAULT_DMA_MBIT_S
}

impl PeConfig {
    pub fn new(pes: Vec<PeDescriptor>) -> Self {
        Self {
            pes,
            clock_mhz: DEFAULT_CLOCK_MHZ,
            dma_mbit_s: DEFAULT_DMA_MBIT_S,
        }
    }

    /// One PE, one S-update unit, covering the small-problem CO range.
    pub fn schur_1() -> Self {
        Self::new(vec![PeDescriptor {
            q: 1,
            co_range: (1, 50),
        }])
    }

    /// One PE with a duplicated S-update unit.
    pub fn schur_2() -> Self {
        Self::new(vec![PeDescriptor {
            q: 2,
            co_range: (1, 50),
        }])
    }

    /// Two PEs with two S-update units each: one tuned for the dominant
    /// low-CO points, one covering the tail, with a balancing overlap.
    pub fn schur_3() -> Self {
        Self::new(vec![
            PeDescriptor {
                q: 2,
                co_range: (2, 10),
            },
            PeDescriptor {
                q: 2,
                co_range: (5, 50),
            },
        ])
    }
}

/// Per-stage cycle counts for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageLatencies {
    pub s1: u64,
    pub s2: u64,
    pub s3: u64,
    pub s4: u64,
}

impl StageLatencies {
    pub fn sum(&self) -> u64 {
        self.s1 + self.s2 + self.s3 + self.s4
    }

    pub fn max(&self) -> u64 {
        self.s1.max(self.s2).max(self.s3).max(self.s4)
    }

    /// 1-based index of the slowest stage; ties resolve to the latest
    /// stage, which is the architectural bottleneck.
    pub fn bottleneck_stage(&self) -> u8 {
        let stages = [self.s1, self.s2, self.s3, self.s4];
        let mut best = 0;
        for (i, &s) in stages.iter().enumerate() {
            if s >= stages[best] {
                best = i;
            }
        }
        best as u8 + 1
    }
}

/// Stage latencies for a point with the given co-observation value on a PE
/// with `q` S-update units.
///
/// ```
/// let s = coba::pesim::stage_latencies(2, 1);
/// assert_eq!((s.s1, s.s2, s.s3, s.s4), (72, 70, 72, 108));
/// assert_eq!(coba::pesim::stage_latencies(2, 2).s4, 54);
/// ```
pub fn stage_latencies(co: u32, q: u32) -> StageLatencies {
    assert!(co >= 1 && q >= 1);
    let co = co as u128;
    // Quadratic in co; widen so crafted histograms cannot wrap silently.
    let s4_work = 18 * (co * co + co);
    StageLatencies {
        s1: 36 * co as u64,
        s2: 70,
        s3: 36 * co as u64,
        s4: s4_work.div_ceil(q as u128).min(u64::MAX as u128) as u64,
    }
}

/// Smallest `q` for which the S-update stage stops being the bottleneck:
/// `ceil(18 (CO^2 + CO) / q) <= max(36 CO, 70)`.
pub fn recommend_q(co: u32) -> u32 {
    let target = (36 * co as u64).max(70);
    let mut q = 1;
    while stage_latencies(co, q).s4 > target {
        q += 1;
    }
    q
}

/// Total cycles for a stream of points on one PE: steady-state bottleneck
/// cycles plus the leading point's pipeline fill. Zero for an empty stream.
pub fn pe_time(cos: &[u32], q: u32) -> u64 {
    let Some(&first) = cos.first() else {
        return 0;
    };
    let fill = {
        let s = stage_latencies(first, q);
        s.sum() - s.max()
    };
    fill + cos
        .iter()
        .map(|&co| stage_latencies(co, q).max())
        .sum::<u64>()
}

/// Assigns histogram points to PEs. A CO value covered by exactly one PE
/// goes there; values in a range overlap are dealt out point by point,
/// largest CO first, to the PE with the smaller running busy total. Each
/// returned stream is sorted descending so the pipeline fill is charged on
/// a largest point.
pub fn assign_workload(
    histogram: &BTreeMap<u32, usize>,
    config: &PeConfig,
) -> Result<Vec<Vec<u32>>, SimError> {
    if config.pes.is_empty() {
        return Err(SimError::NoProcessingElements);
    }
    let mut assigned: Vec<Vec<u32>> = vec![Vec::new(); config.pes.len()];
    let mut busy = vec![0u64; config.pes.len()];
    let mut overlap: Vec<(u32, usize)> = Vec::new();

    for (&co, &count) in histogram.iter().rev() {
        if count == 0 {
            continue;
        }
        let eligible: Vec<usize> = config
            .pes
            .iter()
            .enumerate()
            .filter(|(_, pe)| pe.co_range.0 <= co && co <= pe.co_range.1)
            .map(|(idx, _)| idx)
            .collect();
        match eligible.len() {
            0 => return Err(SimError::UncoveredCo { co }),
            1 => {
                let pe = eligible[0];
                let cost = stage_latencies(co, config.pes[pe].q).max();
                busy[pe] += cost * count as u64;
                assigned[pe].extend(std::iter::repeat_n(co, count));
            }
            _ => overlap.push((co, count)),
        }
    }

    // Overlap points after the forced ones, still largest first.
    for (co, count) in overlap {
        for _ in 0..count {
            let pe = config
                .pes
                .iter()
                .enumerate()
                .filter(|(_, pe)| pe.co_range.0 <= co && co <= pe.co_range.1)
                .map(|(idx, pe)| (busy[idx] + stage_latencies(co, pe.q).max(), idx))
                .min()
                .map(|(_, idx)| idx)
                .expect("overlap co was eligible somewhere");
            busy[pe] += stage_latencies(co, config.pes[pe].q).max();
            assigned[pe].push(co);
        }
    }

    for stream in &mut assigned {
        stream.sort_unstable_by(|a, b| b.cmp(a));
    }
    Ok(assigned)
}

/// Host/accelerator transfer volume and time: `18 o + ceil(b^2 / 2)` words
/// of 32 bits over the configured DMA bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferReport {
    pub words: u64,
    pub ms: f64,
}

pub fn transfer_model(observations: usize, cameras: usize, config: &PeConfig) -> TransferReport {
    let b = cameras as u64;
    let words = 18 * observations as u64 + (b * b).div_ceil(2);
    let ms = words as f64 * WORD_BITS / (config.dma_mbit_s * 1e3);
    TransferReport { words, ms }
}

/// Per-PE simulation outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeReport {
    pub assigned_points: usize,
    pub busy_cycles: u64,
    /// Largest CO processed: sizes the PE's intermediate buffers.
    pub max_co: u32,
}

/// Simulation outcome for one problem on one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub per_pe: Vec<PeReport>,
    /// Slowest PE's cycles; PEs run concurrently.
    pub makespan_cycles: u64,
    pub compute_ms: f64,
    pub transfer: TransferReport,
    /// Compute and transfer overlap; the slower one bounds the run.
    pub total_ms_overlapped: f64,
    /// Fully serialized alternative reading.
    pub total_ms_serial: f64,
    /// How many points bottleneck on each pipeline stage ("1".."4").
    pub bottleneck_stages: BTreeMap<String, usize>,
}

/// Runs the latency model for one co-observation histogram.
///
/// `observations`/`cameras` feed the transfer model; pass zeros to skip
/// transfer accounting.
pub fn simulate(
    histogram: &BTreeMap<u32, usize>,
    observations: usize,
    cameras: usize,
    config: &PeConfig,
) -> Result<SimReport, SimError> {
    let streams = assign_workload(histogram, config)?;
    let mut per_pe = Vec::with_capacity(streams.len());
    let mut makespan = 0u64;
    let mut bottlenecks: BTreeMap<String, usize> = BTreeMap::new();
    for (stream, pe) in streams.iter().zip(&config.pes) {
        let busy = pe_time(stream, pe.q);
        makespan = makespan.max(busy);
        for &co in stream {
            let stage = stage_latencies(co, pe.q).bottleneck_stage();
            *bottlenecks.entry(stage.to_string()).or_insert(0) += 1;
        }
        per_pe.push(PeReport {
            assigned_points: stream.len(),
            busy_cycles: busy,
            max_co: stream.first().copied().unwrap_or(0),
        });
    }
    let compute_ms = makespan as f64 / (config.clock_mhz * 1e3);
    let transfer = transfer_model(observations, cameras, config);
    Ok(SimReport {
        per_pe,
        makespan_cycles: makespan,
        compute_ms,
        transfer,
        total_ms_overlapped: compute_ms.max(transfer.ms),
        total_ms_serial: compute_ms + transfer.ms,
        bottleneck_stages: bottlenecks,
    })
}

/// One row of a configuration comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub problem: String,
    /// Compute milliseconds per configuration, in input order.
    pub times_ms: Vec<f64>,
    /// Speedup of each configuration relative to the first one.
    pub speedup_vs_first: Vec<f64>,
}

/// Simulates every (problem, configuration) pair and reports compute times
/// with speedups relative to the first configuration.
pub fn compare_configs(
    problems: &[(String, BTreeMap<u32, usize>, usize, usize)],
    configs: &[(String, PeConfig)],
) -> Result<Vec<ComparisonRow>, SimError> {
    let mut rows = Vec::with_capacity(problems.len());
    for (name, histogram, observations, cameras) in problems {
        let mut times = Vec::with_capacity(configs.len());
        for (_, config) in configs {
            times.push(simulate(histogram, *observations, *cameras, config)?.compute_ms);
        }
        let first = times[0];
        rows.push(ComparisonRow {
            problem: name.clone(),
            speedup_vs_first: times.iter().map(|&t| first / t).collect(),
            times_ms: times,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn stage_latency_values() {
        let s = stage_latencies(2, 1);
        assert_eq!((s.s1, s.s2, s.s3, s.s4), (72, 70, 72, 108));
        assert_eq!(stage_latencies(2, 2).s4, 54);
        let s = stage_latencies(1, 1);
        assert_eq!((s.s1, s.s2, s.s3, s.s4), (36, 70, 36, 36));
    }

    #[test]
    fn recommended_q_for_common_values() {
        assert_eq!(recommend_q(2), 2);
        assert_eq!(recommend_q(1), 1);
        // Exhaustive check of the inequality for co = 10.
        let co = 10;
        let target = (36 * co as u64).max(70);
        let brute = (1..=64)
            .find(|&q| stage_latencies(co, q).s4 <= target)
            .unwrap();
        assert_eq!(recommend_q(co), brute);
    }

    #[test]
    fn recommended_q_is_minimal() {
        for co in 1..=50 {
            let q = recommend_q(co);
            let target = (36 * co as u64).max(70);
            assert!(stage_latencies(co, q).s4 <= target);
            if q > 1 {
                assert!(stage_latencies(co, q - 1).s4 > target);
            }
        }
    }

    #[test]
    fn single_point_pays_full_latency() {
        assert_eq!(pe_time(&[2], 2), 268);
    }

    #[test]
    fn identical_points_stream_linearly() {
        let s = stage_latencies(3, 2);
        let fill = s.sum() - s.max();
        for n in 1..20usize {
            let stream = vec![3u32; n];
            assert_eq!(pe_time(&stream, 2), fill + n as u64 * s.max());
        }
    }

    /// Event-driven reference: advances an explicit clock over admission
    /// events, tracking the pipeline depth of the leading point and each
    /// point's slowest stage.
    fn event_driven_reference(cos: &[u32], q: u32) -> u64 {
        let mut stream_clock = 0u64;
        let mut drain_after_bottleneck = 0u64;
        for (n, &co) in cos.iter().enumerate() {
            let s = stage_latencies(co, q);
            if n == 0 {
                // The leading point primes the pipe: everything before its
                // bottleneck stage must run before the stream clock starts,
                // and everything after drains behind it.
                let stages = [s.s1, s.s2, s.s3, s.s4];
                let slowest = s.bottleneck_stage() as usize - 1;
                let before: u64 = stages[..slowest].iter().sum();
                let after: u64 = stages[slowest + 1..].iter().sum();
                stream_clock = before;
                drain_after_bottleneck = after;
            }
            stream_clock += s.max();
        }
        if cos.is_empty() {
            0
        } else {
            stream_clock + drain_after_bottleneck
        }
    }

    #[test]
    fn mixed_stream_matches_event_driven_reference() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let q = rng.gen_range(1..=4);
            let n = rng.gen_range(1..40);
            let mut cos: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=50)).collect();
            cos.sort_unstable_by(|a, b| b.cmp(a));
            assert_eq!(pe_time(&cos, q), event_driven_reference(&cos, q));
        }
    }

    #[test]
    fn spu_count_mismatch_degrades_efficiency() {
        // Streaming interval per point shrinks with extra S-update units
        // only up to the recommended count, then stays flat: fewer units
        // cost throughput, more units cost hardware for nothing.
        for co in [2u32, 5, 10, 20] {
            let q_star = recommend_q(co);
            let interval = |q: u32| stage_latencies(co, q).max();
            for q in 1..q_star {
                assert!(
                    interval(q) > interval(q_star),
                    "co={co}: q={q} should be slower than q*={q_star}"
                );
            }
            for q in q_star..q_star + 4 {
                assert_eq!(interval(q), interval(q_star), "co={co}: q={q}");
            }
        }
    }

    #[test]
    fn pe_time_is_monotone() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.gen_range(1..20);
            let mut cos: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=30)).collect();
            cos.sort_unstable_by(|a, b| b.cmp(a));
            let q = rng.gen_range(1..=4);
            let base = pe_time(&cos, q);
            // Adding a point never helps.
            let mut more = cos.clone();
            more.push(rng.gen_range(1..=30));
            more.sort_unstable_by(|a, b| b.cmp(a));
            assert!(pe_time(&more, q) >= base);
            // More S-update units never hurt.
            assert!(pe_time(&cos, q + 1) <= base);
        }
    }

    #[test]
    fn workload_exclusive_ranges() {
        let config = PeConfig::schur_3();
        let mut hist = BTreeMap::new();
        hist.insert(2u32, 100usize);
        let streams = assign_workload(&hist, &config).unwrap();
        assert_eq!(streams[0].len(), 100);
        assert!(streams[1].is_empty());

        let mut hist = BTreeMap::new();
        hist.insert(20u32, 40usize);
        let streams = assign_workload(&hist, &config).unwrap();
        assert!(streams[0].is_empty());
        assert_eq!(streams[1].len(), 40);
    }

    #[test]
    fn workload_balances_overlap() {
        let config = PeConfig::schur_3();
        let mut hist = BTreeMap::new();
        hist.insert(7u32, 101usize);
        let streams = assign_workload(&hist, &config).unwrap();
        let busy0 = pe_time(&streams[0], config.pes[0].q);
        let busy1 = pe_time(&streams[1], config.pes[1].q);
        // Identical points on identical PEs: fills cancel, so the busy
        // totals differ by at most one point's bottleneck latency.
        let bottleneck = stage_latencies(7, 2).max();
        assert!(
            busy0.abs_diff(busy1) <= bottleneck,
            "busy0 {busy0} busy1 {busy1}"
        );
        assert_eq!(streams[0].len() + streams[1].len(), 101);
    }

    #[test]
    fn workload_respects_ranges() {
        let mut rng = StdRng::seed_from_u64(7);
        let config = PeConfig::schur_3();
        for _ in 0..20 {
            let mut hist = BTreeMap::new();
            for _ in 0..rng.gen_range(1..8) {
                hist.insert(rng.gen_range(2..=50), rng.gen_range(1..50));
            }
            let streams = assign_workload(&hist, &config).unwrap();
            for (stream, pe) in streams.iter().zip(&config.pes) {
                for &co in stream {
                    assert!(pe.co_range.0 <= co && co <= pe.co_range.1);
                }
            }
        }
    }

    #[test]
    fn workload_rejects_uncovered() {
        let config = PeConfig::schur_3();
        let mut hist = BTreeMap::new();
        hist.insert(1u32, 5usize);
        assert!(matches!(
            assign_workload(&hist, &config),
            Err(SimError::UncoveredCo { co: 1 })
        ));
    }

    #[test]
    fn transfer_volume() {
        let config = PeConfig::schur_1();
        assert_eq!(transfer_model(0, 0, &config).words, 0);
        // 16-camera, 83718-observation problem.
        let t = transfer_model(83718, 16, &config);
        assert_eq!(t.words, 1_507_052);
        // Doubling o doubles the 18 o term exactly.
        let t2 = transfer_model(2 * 83718, 16, &config);
        assert_eq!(t2.words - 128, 2 * (t.words - 128));
    }

    #[test]
    fn buffer_requirement_tracks_max_co() {
        let config = PeConfig::schur_3();
        let mut hist = BTreeMap::new();
        for co in [2u32, 3, 7, 9, 10, 12, 30] {
            hist.insert(co, 10usize);
        }
        let report = simulate(&hist, 1000, 10, &config).unwrap();
        assert!(report.per_pe[0].max_co <= 10);
        assert!(report.per_pe[1].max_co <= 50);
        assert_eq!(report.per_pe[1].max_co, 30);
    }

    #[test]
    fn identical_configs_have_unit_speedup() {
        let mut hist = BTreeMap::new();
        hist.insert(2u32, 50usize);
        hist.insert(5u32, 20usize);
        let problems = vec![("p".to_string(), hist, 100, 4)];
        let configs = vec![
            ("a".to_string(), PeConfig::schur_1()),
            ("b".to_string(), PeConfig::schur_1()),
        ];
        let rows = compare_configs(&problems, &configs).unwrap();
        assert_eq!(rows[0].speedup_vs_first[1], 1.0);
    }
}

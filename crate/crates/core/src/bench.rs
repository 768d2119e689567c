//! Input generators, timed sort runs and result tables.
//!
//! Generators follow the usual parallel-sorting benchmark conventions for
//! 32-bit keys over `[0, 2^31)` split into [`GROUPS`] groups:
//!
//! * `random`: uniform over the whole `i32` range.
//! * `gauss`: each key is the mean of four uniform `i32` draws.
//! * `buckets`: the array is cut into `GROUPS` regions, each region into
//!   `GROUPS` chunks, and chunk `j` draws uniformly from the `j`-th of
//!   `GROUPS` equal sub-ranges of `[0, 2^31)`.
//! * `staggered`: region `i < GROUPS/2` draws from sub-range `2i + 1`,
//!   region `i >= GROUPS/2` from sub-range `i - GROUPS/2`.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qsort::{fork_sort, mm_sort, seq_qsort, SortConfig};
use crate::scheduler::SchedulerConfig;

/// Number of regions and sub-ranges used by `buckets` and `staggered`.
pub const GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKind {
    Random,
    Gauss,
    Buckets,
    Staggered,
}

impl DistKind {
    pub const ALL: [DistKind; 4] = [DistKind::Random, DistKind::Gauss, DistKind::Buckets, DistKind::Staggered];

    pub fn name(self) -> &'static str {
        match self {
            DistKind::Random => "random",
            DistKind::Gauss => "gauss",
            DistKind::Buckets => "buckets",
            DistKind::Staggered => "staggered",
        }
    }
}

impl fmt::Display for DistKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        DistKind::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown distribution {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    SeqSTL,
    SeqQS,
    Fork,
    Randfork,
    MMPar,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::SeqSTL, Variant::SeqQS, Variant::Fork, Variant::Randfork, Variant::MMPar];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SeqSTL => "SeqSTL",
            Variant::SeqQS => "SeqQS",
            Variant::Fork => "Fork",
            Variant::Randfork => "Randfork",
            Variant::MMPar => "MMPar",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distribution {
    pub kind: DistKind,
    pub n: usize,
    pub seed: u64,
}

fn range_of(j: usize) -> std::ops::RangeInclusive<i32> {
    let width = (1u32 << 31) / GROUPS as u32;
    (j as u32 * width) as i32..=((j as u32 + 1) * width - 1) as i32
}

/// Deterministic input for `d`.
pub fn generate(d: &Distribution) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let n = d.n;
    let region = n.div_ceil(GROUPS).max(1);
    match d.kind {
        DistKind::Random => (0..n).map(|_| rng.random::<i32>()).collect(),
        DistKind::Gauss => (0..n)
            .map(|_| {
                let s: i64 = (0..4).map(|_| i64::from(rng.random::<i32>())).sum();
                (s / 4) as i32
            })
            .collect(),
        DistKind::Buckets => {
            let chunk = region.div_ceil(GROUPS).max(1);
            (0..n).map(|k| rng.random_range(range_of((k % region) / chunk % GROUPS))).collect()
        }
        DistKind::Staggered => (0..n)
            .map(|k| {
                let i = k / region;
                let j = if i < GROUPS / 2 { 2 * i + 1 } else { i - GROUPS / 2 };
                rng.random_range(range_of(j))
            })
            .collect(),
    }
}

fn mix(x: i32) -> u64 {
    let mut z = (x as u32 as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-independent fingerprint of the multiset of `data`.
pub fn checksum(data: &[i32]) -> (u64, u64) {
    data.iter().fold((0u64, 0u64), |(s, x), &v| {
        let h = mix(v);
        (s.wrapping_add(h), x ^ h.rotate_left(17))
    })
}

pub fn is_sorted(data: &[i32]) -> bool {
    data.windows(2).all(|w| w[0] <= w[1])
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{variant} produced wrong output on {dist} n={n} run {run}: {what}")]
    Incorrect { dist: DistKind, n: usize, variant: Variant, run: usize, what: &'static str },
    #[error(transparent)]
    Scheduler(#[from] crate::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub distribution: DistKind,
    pub n: usize,
    pub variant: Variant,
    /// Wall-clock seconds of each repetition.
    pub runs: Vec<f64>,
    pub avg: f64,
    pub min: f64,
    pub speedup_avg: f64,
    pub speedup_min: f64,
}

impl BenchRecord {
    fn new(distribution: DistKind, n: usize, variant: Variant, runs: Vec<f64>) -> Self {
        let avg = runs.iter().sum::<f64>() / runs.len() as f64;
        let min = runs.iter().copied().fold(f64::INFINITY, f64::min);
        BenchRecord { distribution, n, variant, runs, avg, min, speedup_avg: f64::NAN, speedup_min: f64::NAN }
    }
}

pub fn speedup(baseline: f64, time: f64) -> f64 {
    baseline / time
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub dists: Vec<DistKind>,
    pub sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub seed: u64,
    pub sched: SchedulerConfig,
    pub sort: SortConfig,
}

/// Sorts one copy of the input with `variant`; returns seconds spent in the
/// sort call.
pub fn time_variant(
    variant: Variant,
    data: &mut [i32],
    sched: &SchedulerConfig,
    sort: &SortConfig,
) -> Result<f64, crate::Error> {
    let start = Instant::now();
    match variant {
        Variant::SeqSTL => data.sort_unstable(),
        Variant::SeqQS => seq_qsort(data, sort),
        Variant::Fork => {
            fork_sort(data, &SchedulerConfig { randomized: false, ..sched.clone() }, sort)?;
        }
        Variant::Randfork => {
            fork_sort(data, &SchedulerConfig { randomized: true, ..sched.clone() }, sort)?;
        }
        Variant::MMPar => {
            mm_sort(data, sched, sort)?;
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Times every (distribution, size, variant) cell `plan.reps` times,
/// checking each output. The sequential library sort is always measured as
/// the speedup baseline. Records come back in stable order.
pub fn run_bench(plan: &BenchPlan, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>, BenchError> {
    let reps = plan.reps.max(1);
    let mut out = Vec::new();
    for &dist in &plan.dists {
        for &n in &plan.sizes {
            let input = generate(&Distribution { kind: dist, n, seed: plan.seed });
            let sum = checksum(&input);
            let mut variants = plan.variants.clone();
            variants.sort();
            variants.dedup();
            let baseline_wanted = variants.contains(&Variant::SeqSTL);
            if !baseline_wanted {
                variants.insert(0, Variant::SeqSTL);
            }
            let mut cell = Vec::new();
            for &variant in &variants {
                let mut runs = Vec::with_capacity(reps);
                for run in 0..reps {
                    let mut data = input.clone();
                    runs.push(time_variant(variant, &mut data, &plan.sched, &plan.sort)?);
                    let bad = |what| BenchError::Incorrect { dist, n, variant, run, what };
                    if !is_sorted(&data) {
                        return Err(bad("not sorted"));
                    }
                    if checksum(&data) != sum {
                        return Err(bad("elements changed"));
                    }
                }
                cell.push(BenchRecord::new(dist, n, variant, runs));
            }
            let (base_avg, base_min) = (cell[0].avg, cell[0].min);
            for mut rec in cell {
                if rec.variant == Variant::SeqSTL && !baseline_wanted {
                    continue;
                }
                rec.speedup_avg = speedup(base_avg, rec.avg);
                rec.speedup_min = speedup(base_min, rec.min);
                progress(&rec);
                out.push(rec);
            }
        }
    }
    out.sort_by(|a, b| (a.distribution, a.n, a.variant).cmp(&(b.distribution, b.n, b.variant)));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    distribution: DistKind,
    n: usize,
    variant: Variant,
    reps: usize,
    avg: f64,
    min: f64,
    speedup_avg: f64,
    speedup_min: f64,
    runs: String,
}

/// One row per record, ordered by (distribution, n, variant).
pub fn to_csv(records: &[BenchRecord]) -> Result<String, BenchError> {
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.distribution, a.n, a.variant).cmp(&(b.distribution, b.n, b.variant)));
    let mut w = csv::Writer::from_writer(Vec::new());
    if sorted.is_empty() {
        w.write_record(["distribution", "n", "variant", "reps", "avg", "min", "speedup_avg", "speedup_min", "runs"])?;
    }
    for r in sorted {
        w.serialize(CsvRow {
            distribution: r.distribution,
            n: r.n,
            variant: r.variant,
            reps: r.runs.len(),
            avg: r.avg,
            min: r.min,
            speedup_avg: r.speedup_avg,
            speedup_min: r.speedup_min,
            runs: r.runs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<BenchRecord>, BenchError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: CsvRow = row?;
        let runs = if row.runs.is_empty() {
            Vec::new()
        } else {
            row.runs
                .split(';')
                .map(|x| x.parse::<f64>().map_err(|e| BenchError::Parse(format!("bad run time {x:?}: {e}"))))
                .collect::<Result<_, _>>()?
        };
        out.push(BenchRecord {
            distribution: row.distribution,
            n: row.n,
            variant: row.variant,
            runs,
            avg: row.avg,
            min: row.min,
            speedup_avg: row.speedup_avg,
            speedup_min: row.speedup_min,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    Avg,
    Min,
}

/// Table with one row per (distribution, n): times in seconds with three
/// decimals, speedups over the library sort with one.
pub fn to_markdown(records: &[BenchRecord], stat: Stat) -> String {
    let mut s = String::new();
    s.push_str("| Type | Size | Seq/STL | SeqQS | Fork | SU | Randfork | MMPar | SU |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    let mut keys: Vec<(DistKind, usize)> = records.iter().map(|r| (r.distribution, r.n)).collect();
    keys.sort();
    keys.dedup();
    for (dist, n) in keys {
        let find = |v: Variant| records.iter().find(|r| r.distribution == dist && r.n == n && r.variant == v);
        let time = |v: Variant| {
            find(v).map_or("-".to_string(), |r| format!("{:.3}", if stat == Stat::Avg { r.avg } else { r.min }))
        };
        let su = |v: Variant| {
            find(v).map_or("-".to_string(), |r| {
                format!("{:.1}", if stat == Stat::Avg { r.speedup_avg } else { r.speedup_min })
            })
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            dist,
            n,
            time(Variant::SeqSTL),
            time(Variant::SeqQS),
            time(Variant::Fork),
            su(Variant::Fork),
            time(Variant::Randfork),
            time(Variant::MMPar),
            su(Variant::MMPar),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dist: DistKind, n: usize, variant: Variant, runs: &[f64]) -> BenchRecord {
        let mut r = BenchRecord::new(dist, n, variant, runs.to_vec());
        r.speedup_avg = 2.0;
        r.speedup_min = 2.5;
        r
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in DistKind::ALL {
            assert!(generate(&Distribution { kind, n: 0, seed: 1 }).is_empty());
            let d = Distribution { kind, n: 10_000, seed: 5 };
            assert_eq!(generate(&d), generate(&d));
            assert_ne!(generate(&d), generate(&Distribution { seed: 6, ..d }));
        }
        let first: Vec<i32> = generate(&Distribution { kind: DistKind::Random, n: 3, seed: 42 });
        assert_eq!(first.len(), 3);
    }

    #[test]
    fn gauss_is_centered_and_narrow() {
        let v = generate(&Distribution { kind: DistKind::Gauss, n: 1_000_000, seed: 3 });
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let range = 2f64.powi(32);
        assert!(mean.abs() < 0.01 * range, "mean {mean}");
        let uniform_var = range * range / 12.0;
        assert!(var < uniform_var / 2.0, "var {var}");
    }

    #[test]
    fn bucket_and_staggered_layout() {
        let n = 64 * 100;
        let b = generate(&Distribution { kind: DistKind::Buckets, n, seed: 1 });
        let region = n / GROUPS;
        let chunk = region / GROUPS;
        for (k, &x) in b.iter().enumerate() {
            assert!(range_of((k % region) / chunk).contains(&x));
        }
        let s = generate(&Distribution { kind: DistKind::Staggered, n, seed: 1 });
        for (k, &x) in s.iter().enumerate() {
            let i = k / region;
            let j = if i < GROUPS / 2 { 2 * i + 1 } else { i - GROUPS / 2 };
            assert!(range_of(j).contains(&x));
        }
        assert!(b.iter().chain(&s).all(|&x| x >= 0));
    }

    #[test]
    fn checksum_tracks_multiset() {
        let a = [3, 1, 2, 2];
        assert_eq!(checksum(&a), checksum(&[2, 2, 1, 3]));
        assert_ne!(checksum(&a), checksum(&[3, 1, 2, 1]));
        assert_ne!(checksum(&a), checksum(&[3, 1, 2]));
    }

    #[test]
    fn speedup_example() {
        assert!((speedup(15.888, 1.835) - 8.658).abs() < 1e-3);
        assert!(speedup(1.0, 2.0) < 1.0);
    }

    #[test]
    fn csv_round_trip_and_order() {
        assert_eq!(from_csv(&to_csv(&[]).unwrap()).unwrap(), vec![]);
        let records = vec![
            rec(DistKind::Gauss, 10, Variant::MMPar, &[0.5, 0.25]),
            rec(DistKind::Random, 10, Variant::Fork, &[0.1, 0.2, 0.30000000000000004]),
            rec(DistKind::Random, 10, Variant::SeqSTL, &[1.0 / 3.0]),
        ];
        let text = to_csv(&records).unwrap();
        let back = from_csv(&text).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], records[2]);
        assert_eq!(back[1], records[1]);
        assert_eq!(back[2], records[0]);
        assert_eq!(to_csv(&back).unwrap(), text);
    }

    #[test]
    fn markdown_formatting() {
        let empty = to_markdown(&[], Stat::Avg);
        assert_eq!(empty.lines().count(), 2);
        let mut r = rec(DistKind::Random, 1000, Variant::Fork, &[0.9404]);
        r.speedup_avg = 3.94;
        let t = to_markdown(&[r], Stat::Avg);
        assert_eq!(t.lines().nth(2).unwrap(), "| random | 1000 | - | - | 0.940 | 3.9 | - | - | - |");
    }

    #[test]
    fn small_bench_verifies_every_run() {
        let plan = BenchPlan {
            dists: DistKind::ALL.to_vec(),
            sizes: vec![5000],
            variants: vec![Variant::MMPar, Variant::Fork, Variant::SeqQS, Variant::Randfork],
            reps: 2,
            seed: 1,
            sched: SchedulerConfig::with_threads(2),
            sort: SortConfig { block_size: 16, cutoff: 64, blocks_per_thread: 4 },
        };
        let mut seen = 0;
        let recs = run_bench(&plan, |_| seen += 1).unwrap();
        assert_eq!(recs.len(), 16);
        assert_eq!(seen, 16);
        for r in &recs {
            assert_eq!(r.runs.len(), 2);
            assert!(r.min <= r.avg);
            assert!(r.speedup_avg.is_finite());
        }
    }
}

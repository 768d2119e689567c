use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use teamsteal::bench::{run_bench, to_csv, to_markdown, BenchPlan, DistKind, Stat, Variant};
use teamsteal::qsort::SortConfig;
use teamsteal::scheduler::{parse_levels, SchedulerConfig};
use teamsteal::sim::{check_trace, simulate_exhaustive, simulate_random, Granularity, SimConfig, Workload};

#[derive(Parser)]
#[command(name = "teamsteal", version, about = "Team-building work-stealing scheduler: benchmarks and protocol checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time the Quicksort variants on generated inputs.
    Bench(BenchArgs),
    /// Check the team-building protocol in the simulator.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Parser)]
struct BenchArgs {
    /// Input distributions.
    #[arg(long, env = "TEAMSTEAL_DIST", value_delimiter = ',', default_value = "random,gauss,buckets,staggered")]
    dist: Vec<DistKind>,
    /// Input sizes.
    #[arg(
        long,
        env = "TEAMSTEAL_SIZES",
        value_delimiter = ',',
        default_value = "10000000,100000000,8388607,33554431,134217727"
    )]
    sizes: Vec<usize>,
    /// Sort variants; the library sort is always timed as the baseline.
    #[arg(
        long,
        env = "TEAMSTEAL_VARIANTS",
        value_delimiter = ',',
        default_value = "SeqSTL,SeqQS,Fork,Randfork,MMPar"
    )]
    variants: Vec<Variant>,
    #[arg(long, env = "TEAMSTEAL_REPS", default_value_t = 10)]
    reps: usize,
    /// Worker threads; defaults to the hardware thread count.
    #[arg(long, env = "TEAMSTEAL_THREADS")]
    threads: Option<usize>,
    /// Team size per level, e.g. 1,2,4,8.
    #[arg(long, env = "TEAMSTEAL_LEVELS")]
    levels: Option<String>,
    /// Randomize partners for the Fork and MMPar variants too.
    #[arg(long, env = "TEAMSTEAL_RANDOMIZED")]
    randomized: bool,
    #[arg(long, env = "TEAMSTEAL_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "TEAMSTEAL_FORMAT", value_enum, default_value = "csv")]
    format: Format,
    /// Output file; stdout if absent.
    #[arg(long, env = "TEAMSTEAL_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "TEAMSTEAL_BLOCK_SIZE", default_value_t = 4096)]
    block_size: usize,
    #[arg(long, env = "TEAMSTEAL_CUTOFF", default_value_t = 512)]
    cutoff: usize,
    #[arg(long, env = "TEAMSTEAL_BLOCKS_PER_THREAD", default_value_t = 128)]
    blocks_per_thread: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Random,
    Exhaustive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grain {
    Operation,
    Write,
}

#[derive(Parser)]
struct VerifyArgs {
    #[arg(long, env = "TEAMSTEAL_VERIFY_P", default_value_t = 4)]
    p: usize,
    #[arg(long, env = "TEAMSTEAL_VERIFY_MODE", value_enum, default_value = "random")]
    mode: Mode,
    /// Number of random schedules, seeds 0..N.
    #[arg(long, env = "TEAMSTEAL_VERIFY_SEEDS", default_value_t = 1000)]
    seeds: u64,
    /// Step budget per random schedule.
    #[arg(long, env = "TEAMSTEAL_VERIFY_STEPS", default_value_t = 2_000_000)]
    steps: usize,
    /// Spawn tree as `depth:r` pairs in preorder, e.g. `0:2,1:1,1:1`.
    /// Without it each seed gets its own random workload.
    #[arg(long, env = "TEAMSTEAL_VERIFY_WORKLOAD")]
    workload: Option<String>,
    /// Size of generated workloads.
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, env = "TEAMSTEAL_LEVELS")]
    levels: Option<String>,
    #[arg(long, env = "TEAMSTEAL_RANDOMIZED")]
    randomized: bool,
    /// Interleaving unit; exhaustive mode defaults to `write`.
    #[arg(long, value_enum)]
    granularity: Option<Grain>,
    /// Write the trace of the first random schedule (or of the failing one).
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Bench(a) => bench(a),
        Cmd::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyResult = Result<(), Box<dyn std::error::Error>>;

fn bench(a: BenchArgs) -> AnyResult {
    let mut sched = SchedulerConfig::default().from_env()?;
    if let Some(p) = a.threads {
        sched.p = p;
    }
    if let Some(l) = &a.levels {
        sched.level_sizes = Some(parse_levels(l)?);
    }
    sched.randomized = a.randomized;
    sched.seed = a.seed;
    sched.validate()?;
    let sort = SortConfig { block_size: a.block_size, cutoff: a.cutoff, blocks_per_thread: a.blocks_per_thread };
    sort.validate::<i32>()?;
    let plan = BenchPlan { dists: a.dist, sizes: a.sizes, variants: a.variants, reps: a.reps, seed: a.seed, sched, sort };
    eprintln!("threads={} reps={}", plan.sched.p, plan.reps);
    let records = run_bench(&plan, |r| {
        eprintln!(
            "{:<9} {:>10} {:<8} avg {:.3}s min {:.3}s speedup {:.2}",
            r.distribution, r.n, r.variant, r.avg, r.min, r.speedup_avg
        )
    })?;
    let text = match a.format {
        Format::Csv => to_csv(&records)?,
        Format::Markdown => format!(
            "Average over {} runs\n\n{}\nBest of {} runs\n\n{}",
            plan.reps,
            to_markdown(&records, Stat::Avg),
            plan.reps,
            to_markdown(&records, Stat::Min)
        ),
    };
    match &a.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> AnyResult {
    let mut cfg = SimConfig::new(a.p);
    cfg.max_steps = a.steps;
    cfg.randomized = a.randomized;
    if let Some(l) = &a.levels {
        cfg.level_sizes = Some(parse_levels(l)?);
    }
    cfg.granularity = match (a.granularity, a.mode) {
        (Some(Grain::Operation), _) | (None, Mode::Random) => Granularity::Operation,
        (Some(Grain::Write), _) | (None, Mode::Exhaustive) => Granularity::Write,
    };
    let fixed = a.workload.as_deref().map(Workload::parse).transpose()?;
    let start = Instant::now();
    match a.mode {
        Mode::Exhaustive => {
            let w = fixed.unwrap_or_default();
            let s = simulate_exhaustive(&w, &cfg)?;
            println!(
                "exhaustive p={} workload={:?}: {} states, {} transitions, {} terminal, all reach termination ({:.1?})",
                a.p,
                w.to_dsl(),
                s.states,
                s.transitions,
                s.terminal,
                start.elapsed()
            );
        }
        Mode::Random => {
            cfg.record_trace = true;
            let mut steps = 0usize;
            for seed in 0..a.seeds {
                let w = match &fixed {
                    Some(w) => w.clone(),
                    None => Workload::random(seed, a.tasks, a.p),
                };
                let failure = match simulate_random(&w, &cfg, seed) {
                    Ok(run) => {
                        steps += run.steps;
                        let trace = run.trace.expect("trace recorded");
                        if seed == 0 {
                            if let Some(path) = &a.trace {
                                std::fs::write(path, trace.to_string())?;
                            }
                        }
                        let report = check_trace(&trace);
                        if report.ok() {
                            None
                        } else {
                            if let Some(path) = &a.trace {
                                std::fs::write(path, trace.to_string())?;
                            }
                            Some(format!("trace check failed:\n{report}"))
                        }
                    }
                    Err(e) => Some(e.to_string()),
                };
                if let Some(msg) = failure {
                    return Err(format!("seed {seed}, workload {:?}: {msg}", w.to_dsl()).into());
                }
            }
            println!(
                "random p={} seeds={}: no violations, {} steps ({:.1?})",
                a.p,
                a.seeds,
                steps,
                start.elapsed()
            );
        }
    }
    Ok(())
}

//! Python bindings: sorting variants, input generators and the protocol
//! checker.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use teamsteal::bench::{self, DistKind, Distribution, Variant};
use teamsteal::qsort::{self, SortConfig};
use teamsteal::scheduler::{self, SchedulerConfig};
use teamsteal::sim::{self, SimConfig, Workload};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sched_config(threads: Option<usize>, levels: Option<Vec<usize>>, randomized: bool, seed: u64) -> PyResult<SchedulerConfig> {
    let mut cfg = SchedulerConfig::default();
    if let Some(p) = threads {
        cfg.p = p;
    }
    cfg.level_sizes = levels;
    cfg.randomized = randomized;
    cfg.seed = seed;
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn report_dict<'py>(py: Python<'py>, rep: &scheduler::RunReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("executions", rep.executions)?;
    d.set_item("team_executions", rep.team_executions)?;
    d.set_item("reg_cas", rep.reg_cas)?;
    d.set_item("team_cas", rep.team_cas)?;
    d.set_item("steals", rep.steals)?;
    d.set_item("conflicts", rep.conflicts)?;
    d.set_item("seconds", rep.elapsed.as_secs_f64())?;
    Ok(d)
}

/// Sorts `data` with one of SeqSTL, SeqQS, Fork, Randfork, MMPar and
/// returns `(sorted, stats)`.
#[pyfunction]
#[pyo3(signature = (data, variant="MMPar", threads=None, levels=None, randomized=false, seed=0, block_size=4096, cutoff=512, blocks_per_thread=128))]
#[allow(clippy::too_many_arguments)]
fn sort<'py>(
    py: Python<'py>,
    mut data: Vec<i32>,
    variant: &str,
    threads: Option<usize>,
    levels: Option<Vec<usize>>,
    randomized: bool,
    seed: u64,
    block_size: usize,
    cutoff: usize,
    blocks_per_thread: usize,
) -> PyResult<(Vec<i32>, Bound<'py, PyDict>)> {
    let variant: Variant = variant.parse().map_err(value_err)?;
    let sched = sched_config(threads, levels, randomized, seed)?;
    let cfg = SortConfig { block_size, cutoff, blocks_per_thread };
    cfg.validate::<i32>().map_err(value_err)?;
    let stats = PyDict::new(py);
    let rep = py.allow_threads(|| -> teamsteal::Result<Option<scheduler::RunReport>> {
        Ok(match variant {
            Variant::SeqSTL => {
                data.sort_unstable();
                None
            }
            Variant::SeqQS => {
                qsort::seq_qsort(&mut data, &cfg);
                None
            }
            Variant::Fork => Some(qsort::fork_sort(&mut data, &sched, &cfg)?),
            Variant::Randfork => {
                let sched = SchedulerConfig { randomized: true, ..sched.clone() };
                Some(qsort::fork_sort(&mut data, &sched, &cfg)?)
            }
            Variant::MMPar => Some(qsort::mm_sort(&mut data, &sched, &cfg)?),
        })
    });
    match rep {
        Ok(Some(rep)) => Ok((data, report_dict(py, &rep)?)),
        Ok(None) => Ok((data, stats)),
        Err(e) => Err(PyRuntimeError::new_err(e.to_string())),
    }
}

/// Deterministic benchmark input: random, gauss, buckets or staggered.
#[pyfunction]
#[pyo3(signature = (dist, n, seed=1))]
fn generate(dist: &str, n: usize, seed: u64) -> PyResult<Vec<i32>> {
    let kind: DistKind = dist.parse().map_err(value_err)?;
    Ok(bench::generate(&Distribution { kind, n, seed }))
}

/// Team size the mixed-mode sort uses for a span of `n` elements.
#[pyfunction]
#[pyo3(signature = (n, p, block_size=4096, blocks_per_thread=128))]
fn best_np(n: usize, p: usize, block_size: usize, blocks_per_thread: usize) -> usize {
    qsort::best_np(n, &SortConfig { block_size, blocks_per_thread, ..SortConfig::default() }, p)
}

/// Runs a root task that spawns `n` unit tasks; returns the scheduler
/// counters plus how many children actually ran.
#[pyfunction]
#[pyo3(signature = (n, threads=None))]
fn unit_tasks<'py>(py: Python<'py>, n: usize, threads: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let sched = sched_config(threads, None, false, 0)?;
    let ran = Arc::new(AtomicUsize::new(0));
    let counter = ran.clone();
    let rep = py
        .allow_threads(move || {
            scheduler::run(&sched, 1, move |ctx| {
                for _ in 0..n {
                    let c = counter.clone();
                    ctx.spawn(1, move |_| {
                        c.fetch_add(1, Ordering::Relaxed);
                    })
                    .expect("unit task fits");
                }
            })
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = report_dict(py, &rep)?;
    d.set_item("children_ran", ran.load(Ordering::Relaxed))?;
    Ok(d)
}

/// Checks the protocol in the simulator. `mode` is "random" (seeds
/// `0..seeds`) or "exhaustive". Raises on any violation.
#[pyfunction]
#[pyo3(signature = (p, mode="random", seeds=100, workload=None, tasks=50))]
fn verify<'py>(
    py: Python<'py>,
    p: usize,
    mode: &str,
    seeds: u64,
    workload: Option<&str>,
    tasks: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let fixed = workload.map(Workload::parse).transpose().map_err(value_err)?;
    let mut cfg = SimConfig::new(p);
    let d = PyDict::new(py);
    match mode {
        "exhaustive" => {
            cfg.granularity = sim::Granularity::Write;
            let w = fixed.unwrap_or_default();
            let s = py
                .allow_threads(|| sim::simulate_exhaustive(&w, &cfg))
                .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            d.set_item("states", s.states)?;
            d.set_item("transitions", s.transitions)?;
            d.set_item("terminal", s.terminal)?;
        }
        "random" => {
            let steps = py
                .allow_threads(|| -> Result<usize, String> {
                    let mut steps = 0;
                    for seed in 0..seeds {
                        let w = fixed.clone().unwrap_or_else(|| Workload::random(seed, tasks, p));
                        let run = sim::simulate_random(&w, &cfg, seed).map_err(|e| e.to_string())?;
                        let report = sim::check_trace(run.trace.as_ref().expect("trace recorded"));
                        if !report.ok() {
                            return Err(format!("seed {seed}: {report}"));
                        }
                        steps += run.steps;
                    }
                    Ok(steps)
                })
                .map_err(PyRuntimeError::new_err)?;
            d.set_item("seeds", seeds)?;
            d.set_item("steps", steps)?;
        }
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
    Ok(d)
}

#[pymodule]
fn teamsteal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sort, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(best_np, m)?)?;
    m.add_function(wrap_pyfunction!(unit_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

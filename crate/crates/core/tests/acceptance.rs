//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Everything runs inside a single test so the heavy criteria do not compete
//! for cores, and so the team logs gathered while sorting can be reused for
//! the local-id check. Set `TEAMSTEAL_ACCEPT_REPS` to shorten the sorting
//! matrix during development.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teamsteal::bench::{checksum, generate, is_sorted, DistKind, Distribution, Variant};
use teamsteal::qsort::{self, parallel_partition, partition_pivot_last, SortConfig};
use teamsteal::regword::{pack, unpack, RegistrationWord as Word};
use teamsteal::scheduler::{run, SchedulerConfig, TeamExec};
use teamsteal::sim::{check_trace, simulate_exhaustive, simulate_random, Granularity, Kind, SimConfig, Trace, Workload};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

/// Writes straight to the process stdout so the lines survive the test
/// harness's output capture.
fn emit(n: usize, name: &str, v: &Verdict) {
    let (tag, detail) = match v {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => ("FAIL", d),
        Verdict::Skip(d) => ("SKIP", d),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} [{tag}] {name}: {detail}");
    let _ = out.flush();
}

fn hw_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn reps() -> usize {
    std::env::var("TEAMSTEAL_ACCEPT_REPS").ok().and_then(|s| s.parse().ok()).unwrap_or(10)
}

/// Local ids of every team execution, grouped per task, must be exactly
/// `0..team` once each.
fn local_id_errors(execs: impl IntoIterator<Item = (u64, usize, usize)>) -> (usize, Vec<String>) {
    let mut per_task: HashMap<u64, (usize, Vec<usize>)> = HashMap::new();
    for (task, team, lid) in execs {
        let e = per_task.entry(task).or_insert((team, Vec::new()));
        if e.0 != team {
            e.0 = usize::MAX;
        }
        e.1.push(lid);
    }
    let mut errors = Vec::new();
    for (task, (team, mut lids)) in per_task.iter().map(|(k, v)| (*k, v.clone())) {
        lids.sort_unstable();
        if team == usize::MAX || lids != (0..team).collect::<Vec<_>>() {
            errors.push(format!("task {task}: team {team}, local ids {lids:?}"));
        }
    }
    (per_task.len(), errors)
}

fn trace_local_ids(trace: &Trace) -> impl Iterator<Item = (u64, usize, usize)> + '_ {
    trace.events.iter().filter_map(|e| match e.kind {
        Kind::ExecStart { task, team, local_id, .. } if team > 1 => Some((u64::from(task), team, local_id)),
        _ => None,
    })
}

/// Team tasks seen and local-id errors found in the simulator runs.
struct SimTeams {
    team_tasks: usize,
    id_errors: Vec<String>,
}

fn criterion_1() -> (Verdict, SimTeams) {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut states = 0;
    let exhaustive: &[(usize, &[&str])] = &[
        (
            2,
            &[
                "",
                "0:1",
                "0:2",
                "0:2,0:1",
                "0:1,1:2",
                "0:2,1:1,1:1",
                "0:1,1:2,1:2,2:1",
                "0:2,1:1,1:1,1:2,0:2,1:1",
                "0:1,1:1,1:2,2:1,2:2,0:1",
                "0:2,0:2,0:2,0:1,0:1,0:2",
            ],
        ),
        (
            4,
            &[
                "",
                "0:4",
                "0:2,0:1",
                "0:1,1:2,2:4",
                "0:2,1:1,1:1",
                "0:4,1:4,1:1",
                "0:1,1:4,1:4,1:2",
                "0:2,1:1,1:1,1:2,0:2,1:1",
                "0:4,1:1,1:2,1:1,0:2,1:4",
                "0:2,1:4,2:1,2:2,1:1,0:4",
            ],
        ),
    ];
    for &(p, workloads) in exhaustive {
        for text in workloads {
            let w = Workload::parse(text).expect("well-formed workload");
            let grains: &[Granularity] =
                if p == 2 { &[Granularity::Operation, Granularity::Write] } else { &[Granularity::Write] };
            for &g in grains {
                let mut cfg = SimConfig::new(p);
                cfg.granularity = g;
                match simulate_exhaustive(&w, &cfg) {
                    Ok(s) => states += s.states,
                    Err(e) => failures.push(format!("exhaustive p={p} {text:?} {g:?}: {e}")),
                }
            }
        }
    }

    let mut team_tasks = 0;
    let mut id_errors = Vec::new();
    let mut cfg = SimConfig::new(8);
    cfg.record_trace = true;
    let seeds = 10_000u64;
    for seed in 0..seeds {
        let w = Workload::random(seed, 100, 8);
        match simulate_random(&w, &cfg, seed) {
            Ok(run) => {
                let trace = run.trace.expect("trace recorded");
                let report = check_trace(&trace);
                if let Some((prop, v)) = report.first_violation() {
                    failures.push(format!("seed {seed}: {prop} at {v}"));
                }
                let (n, errs) = local_id_errors(trace_local_ids(&trace));
                team_tasks += n;
                id_errors.extend(errs.into_iter().map(|e| format!("seed {seed}: {e}")));
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
        if failures.len() > 5 {
            break;
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        failures.push(format!("took {elapsed:.0?}, budget 5 min"));
    }
    let verdict = if failures.is_empty() {
        Verdict::Pass(format!(
            "exhaustive p=2,4 ({states} states) and {seeds} random p=8 schedules clean in {elapsed:.1?}"
        ))
    } else {
        Verdict::Fail(failures.join("; "))
    };
    (verdict, SimTeams { team_tasks, id_errors })
}

fn criterion_2() -> Verdict {
    let n = 10_000_000;
    let data = generate(&Distribution { kind: DistKind::Random, n, seed: 2 });
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for p in BTreeSet::from([2, 4, hw_threads().max(1)]) {
        let sched = SchedulerConfig::with_threads(p);
        let mut d = data.clone();
        match qsort::fork_sort(&mut d, &sched, &SortConfig::default()) {
            Ok(rep) => {
                if rep.reg_cas != 0 || rep.team_cas != 0 || !is_sorted(&d) {
                    failures.push(format!("p={p}: reg_cas={} team_cas={}", rep.reg_cas, rep.team_cas));
                }
                lines.push(format!("p={p} reg_cas={} team_cas={} ({} tasks)", rep.reg_cas, rep.team_cas, rep.executions));
            }
            Err(e) => failures.push(format!("p={p}: {e}")),
        }
    }
    if failures.is_empty() {
        Verdict::Pass(lines.join(", "))
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

/// Team executions logged while sorting, with task ids made unique across
/// runs.
struct SortTeams {
    team_log: Vec<TeamExec>,
    team_tasks_logged: usize,
}

fn criterion_3() -> (Verdict, SortTeams) {
    let start = Instant::now();
    let reps = reps();
    let cfg = SortConfig::default();
    let ps: BTreeSet<usize> = BTreeSet::from([1, 2, 4, hw_threads()]);
    let kinds = [DistKind::Random, DistKind::Gauss, DistKind::Buckets, DistKind::Staggered];
    let mut runs = 0;
    let mut failures = Vec::new();
    let mut team_log = Vec::new();
    let mut team_tasks_logged = 0;
    let mut next_uid_base = 0u64;
    for &kind in &kinds {
        for n in [100_000, 1_000_000, 10_000_000] {
            for rep in 0..reps {
                let input = generate(&Distribution { kind, n, seed: 1000 + rep as u64 });
                let want = checksum(&input);
                let check = |label: String, out: &[i32], runs: &mut usize, failures: &mut Vec<String>| {
                    *runs += 1;
                    if !is_sorted(out) || checksum(out) != want {
                        failures.push(label);
                    }
                };
                // The sequential sort does not depend on p.
                let mut d = input.clone();
                qsort::seq_qsort(&mut d, &cfg);
                check(format!("{kind} n={n} rep={rep} {}", Variant::SeqQS), &d, &mut runs, &mut failures);
                for &p in &ps {
                    let sched = SchedulerConfig { record_teams: true, ..SchedulerConfig::with_threads(p) };
                    for v in [Variant::Fork, Variant::MMPar] {
                        let mut d = input.clone();
                        let res = match v {
                            Variant::Fork => qsort::fork_sort(&mut d, &sched, &cfg),
                            _ => qsort::mm_sort(&mut d, &sched, &cfg),
                        };
                        match res {
                            Ok(rep_) => {
                                // Task ids restart per run; offset them to keep runs apart.
                                let log = rep_.team_log;
                                team_tasks_logged += log.iter().map(|e| e.task).collect::<BTreeSet<_>>().len();
                                team_log.extend(
                                    log.into_iter().map(|e| TeamExec { task: e.task + next_uid_base, ..e }),
                                );
                                next_uid_base += 1 << 40;
                                check(format!("{kind} n={n} rep={rep} p={p} {v}"), &d, &mut runs, &mut failures);
                            }
                            Err(e) => failures.push(format!("{kind} n={n} rep={rep} p={p} {v}: {e}")),
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(15 * 60) {
        failures.push(format!("took {elapsed:.0?}, budget 15 min"));
    }
    let verdict = if failures.is_empty() {
        Verdict::Pass(format!(
            "{runs} runs sorted and checksum-equal (p in {ps:?}, {reps} reps) in {elapsed:.1?}"
        ))
    } else {
        Verdict::Fail(format!("{} of {runs} runs wrong, first: {}", failures.len(), failures[0]))
    };
    (verdict, SortTeams { team_log, team_tasks_logged })
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=10_000);
        // Narrow value ranges give many keys equal to the pivot.
        let hi = *[3, 100, 1 << 20, i32::MAX].get(case % 4).expect("index in range");
        let input: Vec<i32> = (0..n).map(|_| rng.random_range(-hi..=hi)).collect();
        let mut sorted_in = input.clone();
        sorted_in.sort_unstable();
        let mut reference = input.clone();
        let q_ref = partition_pivot_last(&mut reference);
        for np in [1, 2, 4] {
            let mut d = input.clone();
            let pv = input[n - 1];
            let q = parallel_partition(&mut d, np, 16);
            checked += 1;
            let ok = q < n
                && d[q] == pv
                && d[..q].iter().all(|x| *x <= pv)
                && d[q + 1..].iter().all(|x| *x >= pv)
                && {
                    let mut s = d.clone();
                    s.sort_unstable();
                    s == sorted_in
                };
            if !ok {
                return Verdict::Fail(format!("case {case}: n={n} np={np} q={q} breaks the split predicate"));
            }
            if np == 1 && (q != q_ref || d != reference) {
                return Verdict::Fail(format!("case {case}: np=1 gave {q}, sequential gave {q_ref}"));
            }
        }
    }
    Verdict::Pass(format!("{checked} partitions (1000 arrays x np 1,2,4, block 16) hold the predicate"))
}

fn criterion_5(sim: &SimTeams, sort: &SortTeams) -> Verdict {
    let (live_tasks, live_errors) =
        local_id_errors(sort.team_log.iter().map(|e| (e.task, e.team, e.local_id)));
    let mut errors = sim.id_errors.clone();
    errors.extend(live_errors);
    if live_tasks != sort.team_tasks_logged {
        errors.push(format!("grouped {live_tasks} team tasks, logged {}", sort.team_tasks_logged));
    }
    if errors.is_empty() {
        Verdict::Pass(format!(
            "{} simulated and {live_tasks} live team tasks each saw local ids 0..r exactly once",
            sim.team_tasks
        ))
    } else {
        Verdict::Fail(format!("{} bad teams, first: {}", errors.len(), errors[0]))
    }
}

// Hand-written transition rules, kept separate from the implementation.
type Fields = (u16, u16, u16, u16);

fn spec_spawn((r, a, t, n): Fields, r_new: usize, p: usize) -> Option<Fields> {
    if r_new == 0 || r_new > p {
        return None;
    }
    let rn = r_new as u16;
    if rn > r {
        Some((rn.max(t), a, t, n))
    } else if rn < r {
        Some((rn.max(t), t, t, n.wrapping_add(1)))
    } else {
        Some((r, a, t, n))
    }
}

fn spec_fix((r, a, _t, n): Fields) -> Option<Fields> {
    (a == r).then_some((r, a, r, n))
}

fn spec_reset((_, _, _, n): Fields) -> Fields {
    (1, 1, 1, n.wrapping_add(1))
}

fn fields(w: Word) -> Fields {
    (w.r, w.a, w.t, w.n)
}

fn criterion_6() -> Verdict {
    let mut failures = Vec::new();
    let boundary = [0u64, 1, 1 << 15, 65535];
    let mut round_trips = 0;
    for &r in &boundary {
        for &a in &boundary {
            for &t in &boundary {
                for &n in &boundary {
                    let bits = pack(r, a, t, n).expect("16-bit fields");
                    let expect_bits = r | a << 16 | t << 32 | n << 48;
                    let back = unpack(bits);
                    round_trips += 1;
                    if bits != expect_bits || fields(back) != (r as u16, a as u16, t as u16, n as u16) {
                        failures.push(format!("round trip of {r}/{a}/{t}/{n}"));
                    }
                }
            }
        }
    }
    for (i, v) in [(0, 65536u64), (1, 65536), (2, 65536), (3, 65536)] {
        let mut f = [0u64; 4];
        f[i] = v;
        if pack(f[0], f[1], f[2], f[3]).is_ok() {
            failures.push(format!("field {i} = {v} was accepted"));
        }
    }

    // A few rows written out literally, as a check on the rules themselves.
    let p = 8;
    let literal: &[(Fields, usize, Option<Fields>)] = &[
        ((1, 1, 1, 0), 4, Some((4, 1, 1, 0))),
        ((4, 3, 1, 2), 8, Some((8, 3, 1, 2))),
        ((4, 3, 1, 2), 2, Some((2, 1, 1, 3))),
        ((8, 4, 4, 0), 2, Some((4, 4, 4, 1))),
        ((2, 2, 2, 5), 2, Some((2, 2, 2, 5))),
        ((2, 1, 1, 0), 9, None),
        ((2, 1, 1, 0), 0, None),
    ];
    for &(from, rn, want) in literal {
        if spec_spawn(from, rn, p) != want {
            failures.push(format!("literal row {from:?} r'={rn} disagrees with the rules"));
        }
    }

    let mut cases = 0;
    for r in 0..=8u16 {
        for a in 0..=8u16 {
            for t in 0..=8u16 {
                for n in (0..=3u16).chain([65535]) {
                    let w = Word::new(r, a, t, n);
                    let f = (r, a, t, n);
                    for rn in 0..=9usize {
                        cases += 1;
                        let got = w.on_spawn_requirement(rn, p).ok().map(fields);
                        if got != spec_spawn(f, rn, p) {
                            failures.push(format!("spawn {f:?} r'={rn}: got {got:?}"));
                        }
                    }
                    cases += 2;
                    let got = w.fix_team().ok().map(fields);
                    if got != spec_fix(f) {
                        failures.push(format!("fixTeam {f:?}: got {got:?}"));
                    }
                    if fields(w.reset_to_solo()) != spec_reset(f) {
                        failures.push(format!("resetToSolo {f:?}"));
                    }
                }
            }
        }
    }
    if failures.is_empty() {
        Verdict::Pass(format!("{round_trips} boundary round trips and {cases} transitions match the tables"))
    } else {
        Verdict::Fail(format!("{} mismatches, first: {}", failures.len(), failures[0]))
    }
}

fn criterion_7() -> Verdict {
    let hw = hw_threads();
    if hw < 8 {
        return Verdict::Skip(format!("needs at least 8 hardware threads, host has {hw}"));
    }
    let n = 100_000_000;
    let input = generate(&Distribution { kind: DistKind::Random, n, seed: 7 });
    let sched = SchedulerConfig::with_threads(hw);
    let cfg = SortConfig::default();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for rep in 0..3 {
        let mut d = input.clone();
        let t = Instant::now();
        d.sort_unstable();
        let seq = t.elapsed().as_secs_f64();
        let mut d = input.clone();
        let t = Instant::now();
        let fork = qsort::fork_sort(&mut d, &sched, &cfg).map(|_| t.elapsed().as_secs_f64());
        let mut d = input.clone();
        let t = Instant::now();
        let mm = qsort::mm_sort(&mut d, &sched, &cfg).map(|_| t.elapsed().as_secs_f64());
        match (fork, mm) {
            (Ok(fork), Ok(mm)) => {
                let su = seq / fork;
                if su < 2.0 {
                    failures.push(format!("rep {rep}: Fork speedup {su:.2} < 2"));
                }
                if mm > 1.2 * fork {
                    failures.push(format!("rep {rep}: MMPar {mm:.3}s > 1.2 x Fork {fork:.3}s"));
                }
                lines.push(format!("Fork SU {su:.2}, MMPar/Fork {:.2}", mm / fork));
            }
            (Err(e), _) | (_, Err(e)) => failures.push(format!("rep {rep}: {e}")),
        }
    }
    if failures.is_empty() {
        Verdict::Pass(lines.join("; "))
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

fn criterion_8() -> Verdict {
    let mut failures = Vec::new();
    for p in [1, 2, 4, 8] {
        let sched = SchedulerConfig::with_threads(p);
        if let Err(e) = run(&sched, 1, |_| {}) {
            failures.push(format!("empty p={p}: {e}"));
        }
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let res = run(&sched, 1, move |ctx| {
            for _ in 0..100_000 {
                let c = c.clone();
                ctx.spawn(1, move |_| {
                    c.fetch_add(1, Ordering::Relaxed);
                })
                .expect("r = 1 fits");
            }
        });
        match res {
            Ok(_) if count.load(Ordering::Relaxed) == 100_000 => {}
            Ok(_) => failures.push(format!("unit p={p}: ran {}", count.load(Ordering::Relaxed))),
            Err(e) => failures.push(format!("unit p={p}: {e}")),
        }
    }

    // Workers give up after a single empty sweep, so children are pushed
    // right as the others go idle.
    let mut cfg = SimConfig::new(4);
    cfg.idle_sweeps = 1;
    cfg.record_trace = true;
    let chains = [Workload::chain(&[1, 1, 1, 1]), Workload::chain(&[1, 2, 1, 4, 1, 1])];
    let seeds = 10_000u64;
    let mut lost = 0;
    for seed in 0..seeds {
        let w = &chains[seed as usize % chains.len()];
        match simulate_random(w, &cfg, seed) {
            Ok(run) => {
                let trace = run.trace.expect("trace recorded");
                let started: BTreeMap<u32, usize> =
                    trace.events.iter().fold(BTreeMap::new(), |mut m, e| {
                        if let Kind::ExecStart { task, .. } = e.kind {
                            *m.entry(task).or_default() += 1;
                        }
                        m
                    });
                let missing = w.tasks.iter().enumerate().filter(|(i, t)| started.get(&(*i as u32)) != Some(&t.r)).count();
                lost += missing;
                if missing > 0 || !check_trace(&trace).ok() {
                    failures.push(format!("idle boundary seed {seed}: {missing} tasks lost"));
                }
            }
            Err(e) => failures.push(format!("idle boundary seed {seed}: {e}")),
        }
        if failures.len() > 5 {
            break;
        }
    }
    if failures.is_empty() {
        Verdict::Pass(format!(
            "empty and 10^5 unit workloads finished at p=1,2,4,8; {seeds} idle-boundary schedules lost {lost} tasks"
        ))
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n, name, v: Verdict| {
        emit(n, name, &v);
        verdicts.push((n, name, v));
    };

    let (v, sim) = criterion_1();
    record(1, "protocol properties in the simulator", v);
    record(2, "plain fork-join runs without team CAS", criterion_2());
    let (v, sort) = criterion_3();
    record(3, "sorting correctness", v);
    record(4, "parallel partition oracle", criterion_4());
    record(5, "local ids per team", criterion_5(&sim, &sort));
    record(6, "registration word algebra", criterion_6());
    record(7, "performance smoke", criterion_7());
    record(8, "termination and liveness", criterion_8());

    let failed: Vec<_> = verdicts.iter().filter(|(_, _, v)| matches!(v, Verdict::Fail(_))).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

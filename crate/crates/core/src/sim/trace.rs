//! Simulation traces and the offline property checker.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use crate::regword::RegistrationWord as Word;
use crate::topology::Topology;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Kind {
    Push { worker: usize, level: usize, task: u32, seq: u32, r: usize },
    PopBottom { worker: usize, level: usize, task: u32 },
    PopTop { victim: usize, level: usize, task: u32 },
    Register { coord: usize, word: Word },
    Silent { coord: usize, n: u16 },
    Deregister { coord: usize, word: Word },
    Leave { coord: usize },
    Reconcile { before: Word, after: Word },
    /// Team fixed by the acting thread; `registered` are the counted members
    /// observed at that moment.
    Fix { word: Word, registered: Vec<usize> },
    Publish { task: u32, id: u64, team: u16 },
    Conflict { winner: (usize, usize), loser: (usize, usize) },
    ExecStart { task: u32, coord: usize, team: usize, local_id: usize },
    ExecEnd { task: u32 },
    Spawn { parent: u32, child: u32, word: Word },
    Idle { on: bool },
    Backoff,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: usize,
    pub thread: usize,
    pub kind: Kind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub p: usize,
    pub level_sizes: Vec<usize>,
    /// Number of tasks in the workload.
    pub tasks: usize,
    pub events: Vec<TraceEvent>,
}

fn fmt_word(w: &Word) -> String {
    format!("{}/{}/{}/{}", w.r, w.a, w.t, w.n)
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Push { worker, level, task, seq, r } => {
                write!(f, "push worker={worker} level={level} task={task} seq={seq} r={r}")
            }
            Kind::PopBottom { worker, level, task } => write!(f, "popBottom worker={worker} level={level} task={task}"),
            Kind::PopTop { victim, level, task } => write!(f, "steal victim={victim} level={level} task={task}"),
            Kind::Register { coord, word } => write!(f, "register coord={coord} word={}", fmt_word(word)),
            Kind::Silent { coord, n } => write!(f, "silent coord={coord} n={n}"),
            Kind::Deregister { coord, word } => write!(f, "deregister coord={coord} word={}", fmt_word(word)),
            Kind::Leave { coord } => write!(f, "leave coord={coord}"),
            Kind::Reconcile { before, after } => {
                write!(f, "reconcile before={} after={}", fmt_word(before), fmt_word(after))
            }
            Kind::Fix { word, registered } => {
                let ids: Vec<String> = registered.iter().map(ToString::to_string).collect();
                write!(f, "fixTeam word={} registered=[{}]", fmt_word(word), ids.join(" "))
            }
            Kind::Publish { task, id, team } => write!(f, "publish task={task} id={id} team={team}"),
            Kind::Conflict { winner, loser } => write!(
                f,
                "conflict winner=({},{}) loser=({},{})",
                winner.0, winner.1, loser.0, loser.1
            ),
            Kind::ExecStart { task, coord, team, local_id } => {
                write!(f, "execStart task={task} coord={coord} team={team} local={local_id}")
            }
            Kind::ExecEnd { task } => write!(f, "execEnd task={task}"),
            Kind::Spawn { parent, child, word } => {
                write!(f, "spawn parent={parent} child={child} word={}", fmt_word(word))
            }
            Kind::Idle { on } => write!(f, "idle {}", if *on { "on" } else { "off" }),
            Kind::Backoff => write!(f, "backoff"),
            Kind::Terminate => write!(f, "terminate"),
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} t{} {}", self.step, self.thread, self.kind)
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.level_sizes.iter().map(ToString::to_string).collect();
        writeln!(f, "# p={} levels={} tasks={}", self.p, sizes.join(","), self.tasks)?;
        for e in &self.events {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.message)
    }
}

/// Per-property verdicts; each keeps the first violation found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    /// Every task ran and the run terminated.
    pub progress: Result<(), Violation>,
    /// No reordering inside a queue level.
    pub order: Result<(), Violation>,
    /// Conflicts won by the smaller `(r, id)`.
    pub conflicts: Result<(), Violation>,
    /// Each team member ran its task exactly once with a distinct local id.
    pub exactly_once: Result<(), Violation>,
    /// Fixed teams are exactly the expected consecutive threads.
    pub consecutive: Result<(), Violation>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.verdicts().iter().all(|(_, v)| v.is_ok())
    }

    pub fn verdicts(&self) -> [(&'static str, &Result<(), Violation>); 5] {
        [
            ("progress", &self.progress),
            ("order", &self.order),
            ("conflicts", &self.conflicts),
            ("exactly-once", &self.exactly_once),
            ("consecutive", &self.consecutive),
        ]
    }

    /// Earliest violation over all properties.
    pub fn first_violation(&self) -> Option<(&'static str, &Violation)> {
        self.verdicts()
            .into_iter()
            .filter_map(|(name, v)| v.as_ref().err().map(|e| (name, e)))
            .min_by_key(|(_, e)| e.step)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.verdicts() {
            match v {
                Ok(()) => writeln!(f, "{name}: pass")?,
                Err(e) => writeln!(f, "{name}: FAIL at {e}")?,
            }
        }
        Ok(())
    }
}

fn fail(slot: &mut Result<(), Violation>, step: usize, message: String) {
    if slot.is_ok() {
        *slot = Err(Violation { step, message });
    }
}

/// Checks a complete trace from its events alone.
pub fn check_trace(trace: &Trace) -> Report {
    let mut report = Report {
        progress: Ok(()),
        order: Ok(()),
        conflicts: Ok(()),
        exactly_once: Ok(()),
        consecutive: Ok(()),
    };
    let topo = match Topology::build(trace.p, Some(&trace.level_sizes), false, 0) {
        Ok(t) => t,
        Err(e) => {
            fail(&mut report.progress, 0, format!("bad trace header: {e}"));
            return report;
        }
    };

    let mut queues: HashMap<(usize, usize), VecDeque<(u32, u32)>> = HashMap::new();
    let mut requirement: HashMap<u32, usize> = HashMap::new();
    let mut runs: HashMap<u32, Vec<(usize, usize, usize, usize)>> = HashMap::new();
    let mut first_start: HashMap<u32, usize> = HashMap::new();
    let mut terminated = false;
    let mut last_step = 0;

    for e in &trace.events {
        last_step = e.step;
        match &e.kind {
            Kind::Push { worker, level, task, seq, r } => {
                requirement.insert(*task, *r);
                let q = queues.entry((*worker, *level)).or_default();
                if let Some(&(below, below_seq)) = q.back() {
                    if below_seq >= *seq {
                        fail(
                            &mut report.order,
                            e.step,
                            format!(
                                "task {task} (seq {seq}) pushed below task {below} (seq {below_seq}) at worker {worker} level {level}"
                            ),
                        );
                    }
                }
                q.push_back((*task, *seq));
            }
            Kind::PopBottom { worker, level, task } => {
                let q = queues.entry((*worker, *level)).or_default();
                match q.back() {
                    Some(&(t, _)) if t == *task => {
                        q.pop_back();
                    }
                    other => {
                        fail(
                            &mut report.order,
                            e.step,
                            format!("popBottom of task {task} at worker {worker} level {level} but bottom is {other:?}"),
                        );
                        q.retain(|&(t, _)| t != *task);
                    }
                }
            }
            Kind::PopTop { victim, level, task } => {
                let q = queues.entry((*victim, *level)).or_default();
                match q.front() {
                    Some(&(t, _)) if t == *task => {
                        q.pop_front();
                    }
                    other => {
                        fail(
                            &mut report.order,
                            e.step,
                            format!("steal of task {task} at worker {victim} level {level} but top is {other:?}"),
                        );
                        q.retain(|&(t, _)| t != *task);
                    }
                }
            }
            Kind::Conflict { winner, loser } => {
                if winner >= loser {
                    fail(
                        &mut report.conflicts,
                        e.step,
                        format!("conflict resolved for {winner:?} over smaller {loser:?}"),
                    );
                }
            }
            Kind::Fix { word, registered } => {
                let coord = e.thread;
                let (lo, hi) = topo.team_bounds(coord, usize::from(word.t));
                let mut members: Vec<usize> = registered.clone();
                members.push(coord);
                members.sort_unstable();
                let expected: Vec<usize> = (lo..=hi).collect();
                if members != expected {
                    fail(
                        &mut report.consecutive,
                        e.step,
                        format!("team of {coord} fixed with {members:?}, expected {expected:?}"),
                    );
                }
            }
            Kind::ExecStart { task, coord, team, local_id } => {
                first_start.entry(*task).or_insert(e.step);
                let entries = runs.entry(*task).or_default();
                if entries.iter().any(|&(thread, _, _, _)| thread == e.thread) {
                    fail(
                        &mut report.exactly_once,
                        e.step,
                        format!("thread {} ran task {task} twice", e.thread),
                    );
                }
                if entries.iter().any(|&(_, lid, _, _)| lid == *local_id) {
                    fail(
                        &mut report.exactly_once,
                        e.step,
                        format!("local id {local_id} of task {task} used twice"),
                    );
                }
                if !topo.in_team(*coord, e.thread, *team) || topo.local_id(*coord, e.thread, *team) != Ok(*local_id) {
                    fail(
                        &mut report.exactly_once,
                        e.step,
                        format!(
                            "thread {} ran task {task} as local {local_id} outside team {:?}",
                            e.thread,
                            topo.team_bounds(*coord, *team)
                        ),
                    );
                }
                entries.push((e.thread, *local_id, *coord, *team));
            }
            Kind::Terminate => terminated = true,
            _ => {}
        }
    }

    let mut tasks: Vec<u32> = requirement.keys().copied().collect();
    tasks.sort_unstable();
    for task in &tasks {
        let r = requirement[task];
        let Some(entries) = runs.get(task) else {
            fail(&mut report.progress, last_step, format!("task {task} never ran"));
            continue;
        };
        let step = first_start[task];
        if entries.iter().any(|&(_, _, _, team)| team != r) {
            fail(&mut report.exactly_once, step, format!("task {task} with r = {r} ran in a team of another size"));
        }
        let coords: HashSet<usize> = entries.iter().map(|&(_, _, c, _)| c).collect();
        if coords.len() > 1 {
            fail(&mut report.exactly_once, step, format!("task {task} ran under several coordinators {coords:?}"));
        }
        let lids: HashSet<usize> = entries.iter().map(|&(_, l, _, _)| l).collect();
        if entries.len() != r || lids != (0..r).collect() {
            fail(
                &mut report.exactly_once,
                step,
                format!("task {task} ran {} times with local ids {lids:?}, expected 0..{r}", entries.len()),
            );
        }
    }
    if tasks.len() != trace.tasks {
        fail(
            &mut report.progress,
            last_step,
            format!("{} of {} tasks were created", tasks.len(), trace.tasks),
        );
    }
    if !terminated {
        fail(&mut report.progress, last_step, "run did not terminate".into());
    }
    report
}

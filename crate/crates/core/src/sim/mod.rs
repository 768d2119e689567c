//! Deterministic simulation of the team-building protocol.
//!
//! Every worker runs the same [`Machine`] as the live runtime, but all shared
//! state lives in one plain struct and a single thread decides which worker
//! takes the next step. Task bodies are modeled as a start step, one push and
//! one registration update per spawned child (local id 0 only), and an end
//! step.
//!
//! A worker whose step ends in a backoff is parked until some worker writes
//! shared state, unless its private state changed since its previous backoff.
//! If every live worker is parked the run is reported as deadlocked.
//!
//! Two drivers are provided: seeded random schedules with a step budget, and
//! an exhaustive search over all interleavings for tiny configurations that
//! additionally proves every reachable state can still reach termination.

pub mod trace;
pub mod workload;

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, VecDeque};
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::{self, Assignment, CasKind, Env, Event, Machine, Record, Step};
use crate::regword::RegistrationWord as Word;
use crate::topology::Topology;

pub use trace::{check_trace, Kind, Report, Trace, TraceEvent, Violation};
pub use workload::{WorkTask, Workload};

/// Exhaustive search is limited to this many threads.
pub const EXHAUSTIVE_MAX_P: usize = 4;
/// Exhaustive search is limited to workloads of this many tasks.
pub const EXHAUSTIVE_MAX_TASKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Setup(String),
    #[error("{property} violated (seed {seed}, step {step}): {message}")]
    Violation { property: &'static str, seed: u64, step: usize, message: String },
    #[error("deadlock (seed {seed}, step {step}): every live worker is waiting")]
    Deadlock { seed: u64, step: usize },
    #[error("livelock suspected (seed {seed}): {steps} steps without termination")]
    Livelock { seed: u64, steps: usize },
    #[error("{stuck} of {states} reachable states cannot reach termination")]
    NoProgress { states: usize, stuck: usize },
    #[error("state space exceeds {limit} states")]
    StateLimit { limit: usize },
}

/// What one scheduling decision executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// A single shared-memory operation.
    Operation,
    /// All of one worker's reads up to and including its next write (or
    /// backoff). Interleavings between a worker's reads are not explored,
    /// which keeps exhaustive search tractable.
    Write,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub p: usize,
    pub level_sizes: Option<Vec<usize>>,
    pub randomized: bool,
    pub idle_sweeps: u8,
    pub max_steal: Option<usize>,
    /// Step budget per random run.
    pub max_steps: usize,
    /// State budget for exhaustive search.
    pub max_states: usize,
    pub record_trace: bool,
    pub granularity: Granularity,
}

impl SimConfig {
    pub fn new(p: usize) -> Self {
        SimConfig {
            p,
            level_sizes: None,
            randomized: false,
            idle_sweeps: protocol::DEFAULT_IDLE_SWEEPS,
            max_steal: None,
            max_steps: 2_000_000,
            max_states: 20_000_000,
            record_trace: true,
            granularity: Granularity::Operation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Body {
    Start,
    Push { child: u8 },
    Load { child: u8 },
    Cas { child: u8, old: Word },
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Exec {
    task: u32,
    coord: u16,
    team: u16,
    local_id: u16,
    body: Body,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Thread {
    m: Machine<u32>,
    exec: Option<Exec>,
    parked: bool,
    /// Fingerprint of the machine at its last backoff since the last write.
    last_backoff: Option<u64>,
    done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Shared {
    reg: Vec<Word>,
    coord: Vec<u16>,
    g: Vec<u16>,
    slot: Vec<Option<Record<u32>>>,
    /// `queues[w][level]`, top at the front.
    queues: Vec<Vec<VecDeque<u32>>>,
    idle: u16,
    terminated: bool,
    /// Creation order of each task, `u32::MAX` until spawned.
    seq: Vec<u32>,
    next_seq: u32,
}

/// Complete simulation state; hashable for the exhaustive search.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct World {
    threads: Vec<Thread>,
    shared: Shared,
    /// Per task: threads that ran it, and local ids used.
    ran: Vec<u64>,
    lids: Vec<u64>,
}

/// Everything that does not change during a run.
struct Ctx<'a> {
    topo: Topology,
    workload: &'a Workload,
    randomized: bool,
}

struct SimEnv<'a> {
    me: usize,
    shared: &'a mut Shared,
    topo: &'a Topology,
    workload: &'a Workload,
    rng: &'a mut ChaCha8Rng,
    randomized: bool,
    out: &'a mut Vec<Kind>,
    wrote: bool,
    order_violation: Option<String>,
}

impl SimEnv<'_> {
    fn push(&mut self, worker: usize, task: u32) {
        let r = self.workload.tasks[task as usize].r;
        let level = self.topo.level_for_requirement(worker, r).expect("feasible requirement");
        let seq = self.shared.seq[task as usize];
        let q = &mut self.shared.queues[worker][level];
        if let Some(&below) = q.back() {
            if self.shared.seq[below as usize] >= seq && self.order_violation.is_none() {
                self.order_violation = Some(format!("task {task} pushed below newer task {below}"));
            }
        }
        q.push_back(task);
        self.out.push(Kind::Push { worker, level, task, seq, r });
        self.wrote = true;
    }
}

impl Env for SimEnv<'_> {
    type Task = u32;

    fn topology(&self) -> &Topology {
        self.topo
    }

    fn requirement(&self, task: &u32) -> usize {
        self.workload.tasks[*task as usize].r
    }

    fn partner(&mut self, level: usize) -> Option<usize> {
        if self.randomized {
            self.topo.random_partner(self.me, level, self.rng)
        } else {
            self.topo.partner(self.me, level)
        }
    }

    fn load_reg(&mut self, worker: usize) -> Word {
        self.shared.reg[worker]
    }

    fn cas_reg(&mut self, worker: usize, old: Word, new: Word, _kind: CasKind) -> bool {
        if self.shared.reg[worker] == old {
            self.shared.reg[worker] = new;
            self.wrote = true;
            true
        } else {
            false
        }
    }

    fn load_coord(&mut self, worker: usize) -> usize {
        usize::from(self.shared.coord[worker])
    }

    fn store_coord(&mut self, coord: usize) {
        self.shared.coord[self.me] = coord as u16;
        self.wrote = true;
    }

    fn load_g(&mut self) -> usize {
        usize::from(self.shared.g[self.me])
    }

    fn store_g(&mut self, g: usize) {
        self.shared.g[self.me] = g as u16;
        self.wrote = true;
    }

    fn dec_g(&mut self, worker: usize) {
        self.shared.g[worker] -= 1;
        self.wrote = true;
    }

    fn load_slot(&mut self, worker: usize, seen: u64) -> Option<Record<u32>> {
        self.shared.slot[worker].clone().filter(|r| r.id != seen)
    }

    fn store_slot(&mut self, record: Option<Record<u32>>) {
        self.shared.slot[self.me] = record;
        self.wrote = true;
    }

    fn push_bottom(&mut self, task: u32) {
        self.push(self.me, task);
    }

    fn pop_bottom(&mut self, level: usize) -> Option<u32> {
        let task = self.shared.queues[self.me][level].pop_back()?;
        self.out.push(Kind::PopBottom { worker: self.me, level, task });
        self.wrote = true;
        Some(task)
    }

    fn lowest_nonempty(&mut self) -> Option<usize> {
        self.shared.queues[self.me].iter().position(|q| !q.is_empty())
    }

    fn pop_top(&mut self, victim: usize, level: usize) -> Option<u32> {
        let task = self.shared.queues[victim][level].pop_front()?;
        self.out.push(Kind::PopTop { victim, level, task });
        self.wrote = true;
        Some(task)
    }

    fn level_len(&mut self, victim: usize, level: usize) -> usize {
        self.shared.queues[victim][level].len()
    }

    fn idle_enter(&mut self) {
        self.shared.idle += 1;
        self.wrote = true;
    }

    fn idle_leave(&mut self) {
        self.shared.idle -= 1;
        self.wrote = true;
    }

    fn idle_count(&mut self) -> usize {
        usize::from(self.shared.idle)
    }

    fn quiescent(&mut self, worker: usize) -> bool {
        self.shared.g[worker] == 0 && self.shared.queues[worker].iter().all(VecDeque::is_empty)
    }

    fn terminated(&mut self) -> bool {
        self.shared.terminated
    }

    fn set_terminated(&mut self) {
        self.shared.terminated = true;
        self.wrote = true;
    }

    fn event(&mut self, event: Event<u32>) {
        let kind = match event {
            Event::Register { coord, word } => Kind::Register { coord, word },
            Event::Silent { coord, n } => Kind::Silent { coord, n },
            Event::Deregister { coord, word } => Kind::Deregister { coord, word },
            Event::Leave { coord } => Kind::Leave { coord },
            Event::Reconcile { before, after } => Kind::Reconcile { before, after },
            Event::Fix { word } => Kind::Fix { word, registered: Vec::new() },
            Event::Publish { task, id, team, .. } => Kind::Publish { task, id, team },
            Event::Conflict { winner, loser } => Kind::Conflict { winner, loser },
            Event::Idle { on } => Kind::Idle { on },
            Event::Terminate => Kind::Terminate,
            Event::Steal { .. } => return,
        };
        self.out.push(kind);
    }
}

fn fingerprint<H: Hash>(value: &H) -> u64 {
    let mut h = DefaultHasher::new();
    value.hash(&mut h);
    h.finish()
}

fn fingerprint128<H: Hash>(value: &H) -> u128 {
    let mut a = DefaultHasher::new();
    value.hash(&mut a);
    let mut b = DefaultHasher::new();
    0x9e37_79b9_7f4a_7c15u64.hash(&mut b);
    value.hash(&mut b);
    (u128::from(a.finish()) << 64) | u128::from(b.finish())
}

/// What a single operation did.
struct Outcome {
    wrote: bool,
    backoff: bool,
}

/// Operations a thread may perform in one write-granularity step before it
/// is considered stuck.
const COARSE_SPIN_LIMIT: usize = 100_000;

/// A property failure detected while stepping.
struct Failure {
    property: &'static str,
    message: String,
}

impl World {
    fn new(cfg: &SimConfig, ctx: &Ctx<'_>) -> Self {
        let p = cfg.p;
        let n = ctx.workload.len();
        let levels = ctx.topo.levels();
        let mut shared = Shared {
            reg: vec![Word::SOLO; p],
            coord: (0..p as u16).collect(),
            g: vec![0; p],
            slot: vec![None; p],
            queues: vec![vec![VecDeque::new(); levels]; p],
            idle: 0,
            terminated: false,
            seq: vec![u32::MAX; n],
            next_seq: 0,
        };
        for &root in &ctx.workload.roots {
            let r = ctx.workload.tasks[root].r;
            let level = ctx.topo.level_for_requirement(0, r).expect("feasible requirement");
            shared.seq[root] = shared.next_seq;
            shared.next_seq += 1;
            shared.queues[0][level].push_back(root as u32);
            shared.reg[0] = protocol::spawn_transition(&ctx.topo, 0, shared.reg[0], r).expect("feasible requirement");
        }
        let threads = (0..p)
            .map(|i| {
                let mut m = Machine::new(i).with_idle_sweeps(cfg.idle_sweeps).with_max_steal(cfg.max_steal);
                m.note_spawn(shared.reg[i]);
                Thread { m, exec: None, parked: false, last_backoff: None, done: false }
            })
            .collect();
        World { threads, shared, ran: vec![0; n], lids: vec![0; n] }
    }

    fn runnable(&self) -> impl Iterator<Item = usize> + '_ {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.done && (t.exec.is_some() || !t.parked))
            .map(|(i, _)| i)
    }

    fn all_done(&self) -> bool {
        self.threads.iter().all(|t| t.done)
    }

    /// Initial trace events describing the seeded roots.
    fn seed_events(&self, ctx: &Ctx<'_>) -> Vec<Kind> {
        let mut order: Vec<(u32, u32)> = Vec::new();
        for q in &self.shared.queues[0] {
            order.extend(q.iter().map(|&t| (self.shared.seq[t as usize], t)));
        }
        order.sort_unstable();
        order
            .into_iter()
            .map(|(seq, task)| {
                let r = ctx.workload.tasks[task as usize].r;
                let level = ctx.topo.level_for_requirement(0, r).unwrap();
                Kind::Push { worker: 0, level, task, seq, r }
            })
            .collect()
    }

    /// Advances thread `t` by one shared operation, appending trace events
    /// to `out`.
    fn fine_step(&mut self, t: usize, ctx: &Ctx<'_>, rng: &mut ChaCha8Rng, out: &mut Vec<Kind>) -> Result<Outcome, Failure> {
        let start = out.len();
        let mut env = SimEnv {
            me: t,
            shared: &mut self.shared,
            topo: &ctx.topo,
            workload: ctx.workload,
            rng,
            randomized: ctx.randomized,
            out,
            wrote: false,
            order_violation: None,
        };
        let thread = &mut self.threads[t];
        let mut ended = false;
        let mut backoff = false;
        if let Some(exec) = thread.exec.as_mut() {
            let children = &ctx.workload.tasks[exec.task as usize].children;
            let spawns = if exec.local_id == 0 { children.len() } else { 0 };
            let next = |i: usize| if i < spawns { Body::Push { child: i as u8 } } else { Body::End };
            match exec.body.clone() {
                Body::Start => {
                    env.out.push(Kind::ExecStart {
                        task: exec.task,
                        coord: usize::from(exec.coord),
                        team: usize::from(exec.team),
                        local_id: usize::from(exec.local_id),
                    });
                    exec.body = next(0);
                }
                Body::Push { child } => {
                    let task = children[usize::from(child)] as u32;
                    env.shared.seq[task as usize] = env.shared.next_seq;
                    env.shared.next_seq += 1;
                    env.push(t, task);
                    exec.body = Body::Load { child };
                }
                Body::Load { child } => {
                    let old = env.shared.reg[t];
                    exec.body = Body::Cas { child, old };
                }
                Body::Cas { child, old } => {
                    let task = children[usize::from(child)];
                    let r = ctx.workload.tasks[task].r;
                    let new = protocol::spawn_transition(&ctx.topo, t, old, r).expect("feasible requirement");
                    if new == old || env.cas_reg(t, old, new, CasKind::Reconcile) {
                        thread.m.note_spawn(new);
                        env.out.push(Kind::Spawn { parent: exec.task, child: task as u32, word: new });
                        exec.body = next(usize::from(child) + 1);
                    } else {
                        exec.body = Body::Load { child };
                    }
                }
                Body::End => {
                    env.out.push(Kind::ExecEnd { task: exec.task });
                    ended = true;
                    env.wrote = true;
                }
            }
        } else {
            match thread.m.step(&mut env, false) {
                Step::Continue => {}
                Step::Backoff => {
                    env.out.push(Kind::Backoff);
                    backoff = true;
                }
                Step::Run(Assignment { task, team, local_id, coord, .. }) => {
                    thread.exec = Some(Exec {
                        task,
                        coord: coord as u16,
                        team: team as u16,
                        local_id: local_id as u16,
                        body: Body::Start,
                    });
                }
                Step::Terminated => {
                    // Forget private leftovers so finished runs compare equal.
                    *thread = Thread {
                        m: Machine::new(t),
                        exec: None,
                        parked: false,
                        last_backoff: None,
                        done: true,
                    };
                }
                Step::Stopped => unreachable!("the simulator never requests a stop"),
            }
        }
        if ended {
            thread.exec = None;
        }
        let wrote = env.wrote;
        let order_violation = env.order_violation.take();
        if let Some(message) = order_violation {
            return Err(Failure { property: "order", message });
        }
        for kind in &mut out[start..] {
            self.check_event(t, kind, ctx)?;
        }
        Ok(Outcome { wrote, backoff })
    }

    fn unpark_all(&mut self) {
        for th in &mut self.threads {
            th.parked = false;
            th.last_backoff = None;
        }
    }

    /// One scheduling decision for thread `t` at the given granularity,
    /// including the parking bookkeeping.
    fn step(
        &mut self,
        t: usize,
        ctx: &Ctx<'_>,
        rng: &mut ChaCha8Rng,
        out: &mut Vec<Kind>,
        granularity: Granularity,
    ) -> Result<(), Failure> {
        match granularity {
            Granularity::Operation => {
                let o = self.fine_step(t, ctx, rng, out)?;
                if o.wrote {
                    self.unpark_all();
                } else if o.backoff && !ctx.randomized {
                    let th = &mut self.threads[t];
                    let fp = fingerprint(&th.m);
                    if th.last_backoff == Some(fp) {
                        th.parked = true;
                    } else {
                        th.last_backoff = Some(fp);
                    }
                }
                Ok(())
            }
            Granularity::Write => {
                let start = fingerprint(&self.threads[t].m);
                for _ in 0..COARSE_SPIN_LIMIT {
                    let o = self.fine_step(t, ctx, rng, out)?;
                    if o.wrote {
                        self.unpark_all();
                        return Ok(());
                    }
                    if self.threads[t].done {
                        return Ok(());
                    }
                    if o.backoff {
                        if !ctx.randomized && fingerprint(&self.threads[t].m) == start {
                            self.threads[t].parked = true;
                        }
                        return Ok(());
                    }
                }
                Err(Failure {
                    property: "progress",
                    message: format!("thread {t} ran {COARSE_SPIN_LIMIT} operations without writing or backing off"),
                })
            }
        }
    }

    /// Online checks; also fills the registered set of fix events.
    fn check_event(&mut self, t: usize, kind: &mut Kind, ctx: &Ctx<'_>) -> Result<(), Failure> {
        match kind {
            Kind::Conflict { winner, loser } => {
                if winner >= loser {
                    return Err(Failure {
                        property: "conflicts",
                        message: format!("thread {t} let {winner:?} beat smaller {loser:?}"),
                    });
                }
            }
            Kind::Fix { word, registered } => {
                *registered = (0..self.threads.len())
                    .filter(|&i| i != t && self.threads[i].m.counted_at(t, word.n))
                    .collect();
                let (lo, hi) = ctx.topo.team_bounds(t, usize::from(word.t));
                let mut members = registered.clone();
                members.push(t);
                members.sort_unstable();
                if members != (lo..=hi).collect::<Vec<_>>() {
                    return Err(Failure {
                        property: "consecutive",
                        message: format!("team of {t} fixed as {members:?}, expected {lo}..={hi}"),
                    });
                }
            }
            Kind::ExecStart { task, coord, team, local_id } => {
                let i = *task as usize;
                let r = ctx.workload.tasks[i].r;
                let bad = *team != r
                    || !ctx.topo.in_team(*coord, t, *team)
                    || ctx.topo.local_id(*coord, t, *team) != Ok(*local_id)
                    || self.ran[i] & (1 << t) != 0
                    || self.lids[i] & (1 << *local_id) != 0;
                if bad {
                    return Err(Failure {
                        property: "exactly-once",
                        message: format!(
                            "thread {t} started task {task} (r = {r}) as local {local_id} of team {team} at {coord}; \
                             earlier runners {:#b}",
                            self.ran[i]
                        ),
                    });
                }
                self.ran[i] |= 1 << t;
                self.lids[i] |= 1 << *local_id;
            }
            _ => {}
        }
        Ok(())
    }

    /// Final checks once every thread terminated.
    fn check_final(&self, ctx: &Ctx<'_>) -> Result<(), Failure> {
        for (i, task) in ctx.workload.tasks.iter().enumerate() {
            let full = if task.r >= 64 { u64::MAX } else { (1u64 << task.r) - 1 };
            if self.lids[i] != full {
                return Err(Failure {
                    property: "progress",
                    message: format!("task {i} (r = {}) ran with local ids {:#b}", task.r, self.lids[i]),
                });
            }
        }
        Ok(())
    }
}

fn setup<'a>(workload: &'a Workload, cfg: &SimConfig) -> Result<Ctx<'a>, SimError> {
    if cfg.p == 0 || cfg.p > 64 {
        return Err(SimError::Setup(format!("p = {} outside 1..=64", cfg.p)));
    }
    workload.check_feasible(cfg.p).map_err(|e| SimError::Setup(e.to_string()))?;
    if workload.tasks.iter().any(|t| t.children.len() > usize::from(u8::MAX)) {
        return Err(SimError::Setup("too many children for one task".into()));
    }
    let topo = Topology::build(cfg.p, cfg.level_sizes.as_deref(), cfg.randomized, 0)
        .map_err(|e| SimError::Setup(e.to_string()))?;
    Ok(Ctx { topo, workload, randomized: cfg.randomized })
}

/// Outcome of one random run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: usize,
    pub trace: Option<Trace>,
}

/// Runs one seeded random schedule to termination.
pub fn simulate_random(workload: &Workload, cfg: &SimConfig, seed: u64) -> Result<RunSummary, SimError> {
    let ctx = setup(workload, cfg)?;
    let mut world = World::new(cfg, &ctx);
    let mut sched = ChaCha8Rng::seed_from_u64(seed);
    let mut partner_rngs: Vec<ChaCha8Rng> =
        (0..cfg.p).map(|i| ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32))).collect();
    let mut trace = cfg.record_trace.then(|| Trace {
        p: cfg.p,
        level_sizes: ctx.topo.level_sizes().to_vec(),
        tasks: workload.len(),
        events: world
            .seed_events(&ctx)
            .into_iter()
            .map(|kind| TraceEvent { step: 0, thread: 0, kind })
            .collect(),
    });
    let mut out = Vec::new();
    let mut runnable = Vec::with_capacity(cfg.p);
    for step in 1..=cfg.max_steps {
        if world.all_done() {
            world.check_final(&ctx).map_err(|f| violation(f, seed, step))?;
            return Ok(RunSummary { steps: step - 1, trace });
        }
        runnable.clear();
        runnable.extend(world.runnable());
        if runnable.is_empty() {
            return Err(SimError::Deadlock { seed, step });
        }
        let t = runnable[sched.random_range(0..runnable.len())];
        out.clear();
        let result = world.step(t, &ctx, &mut partner_rngs[t], &mut out, cfg.granularity);
        if let Some(tr) = trace.as_mut() {
            tr.events.extend(out.drain(..).map(|kind| TraceEvent { step, thread: t, kind }));
        }
        result.map_err(|f| violation(f, seed, step))?;
    }
    Err(SimError::Livelock { seed, steps: cfg.max_steps })
}

fn violation(f: Failure, seed: u64, step: usize) -> SimError {
    SimError::Violation { property: f.property, seed, step, message: f.message }
}

/// Statistics of an exhaustive exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreSummary {
    pub states: usize,
    pub transitions: usize,
    pub terminal: usize,
}

/// Explores every interleaving. Fails on the first property violation or
/// deadlock, and if any reachable state cannot reach termination.
pub fn simulate_exhaustive(workload: &Workload, cfg: &SimConfig) -> Result<ExploreSummary, SimError> {
    if cfg.p > EXHAUSTIVE_MAX_P || workload.len() > EXHAUSTIVE_MAX_TASKS {
        return Err(SimError::Setup(format!(
            "exhaustive mode needs p <= {EXHAUSTIVE_MAX_P} and at most {EXHAUSTIVE_MAX_TASKS} tasks"
        )));
    }
    if cfg.randomized {
        return Err(SimError::Setup("exhaustive mode needs deterministic partners".into()));
    }
    let ctx = setup(workload, cfg)?;
    let start = World::new(cfg, &ctx);
    let mut ids: HashMap<u128, u32> = HashMap::new();
    let mut edges: Vec<Vec<u32>> = Vec::new();
    let mut terminal: Vec<bool> = Vec::new();
    let mut frontier: Vec<(u32, World)> = Vec::new();
    ids.insert(fingerprint128(&start), 0);
    edges.push(Vec::new());
    terminal.push(false);
    frontier.push((0, start));
    // Partners are deterministic here; the generator is never drawn from.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    let mut transitions = 0;

    while let Some((id, world)) = frontier.pop() {
        if world.all_done() {
            world.check_final(&ctx).map_err(|f| violation(f, 0, 0))?;
            terminal[id as usize] = true;
            continue;
        }
        let runnable: Vec<usize> = world.runnable().collect();
        if runnable.is_empty() {
            return Err(SimError::Deadlock { seed: 0, step: 0 });
        }
        for t in runnable {
            let mut next = world.clone();
            out.clear();
            next.step(t, &ctx, &mut rng, &mut out, cfg.granularity).map_err(|f| violation(f, 0, 0))?;
            transitions += 1;
            let key = fingerprint128(&next);
            let nid = match ids.get(&key) {
                Some(&nid) => nid,
                None => {
                    let nid = edges.len() as u32;
                    if edges.len() >= cfg.max_states {
                        return Err(SimError::StateLimit { limit: cfg.max_states });
                    }
                    ids.insert(key, nid);
                    edges.push(Vec::new());
                    terminal.push(false);
                    frontier.push((nid, next));
                    nid
                }
            };
            edges[id as usize].push(nid);
        }
    }

    // Backward reachability from terminal states.
    let n = edges.len();
    let mut reverse: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (from, tos) in edges.iter().enumerate() {
        for &to in tos {
            reverse[to as usize].push(from as u32);
        }
    }
    let mut good = terminal.clone();
    let mut stack: Vec<u32> = (0..n as u32).filter(|&i| terminal[i as usize]).collect();
    while let Some(s) = stack.pop() {
        for &prev in &reverse[s as usize] {
            if !good[prev as usize] {
                good[prev as usize] = true;
                stack.push(prev);
            }
        }
    }
    let stuck = good.iter().filter(|g| !**g).count();
    if stuck > 0 {
        return Err(SimError::NoProgress { states: n, stuck });
    }
    Ok(ExploreSummary { states: n, transitions, terminal: terminal.iter().filter(|t| **t).count() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(w: &str, p: usize, seeds: std::ops::Range<u64>) {
        let w = Workload::parse(w).unwrap();
        let cfg = SimConfig::new(p);
        for seed in seeds {
            let s = simulate_random(&w, &cfg, seed).unwrap_or_else(|e| panic!("{e}"));
            let report = check_trace(s.trace.as_ref().unwrap());
            assert!(report.ok(), "seed {seed}:\n{report}");
        }
    }

    #[test]
    fn empty_workload_terminates() {
        let s = simulate_random(&Workload::default(), &SimConfig::new(1), 0).unwrap();
        let trace = s.trace.unwrap();
        assert!(check_trace(&trace).ok());
        assert!(trace.events.iter().any(|e| e.kind == Kind::Terminate));
        run("", 4, 0..20);
    }

    #[test]
    fn single_team_task() {
        run("0:2", 2, 0..200);
        run("0:4", 4, 0..200);
    }

    #[test]
    fn mixed_small_workloads() {
        run("0:1,1:2,2:4", 4, 0..300);
        run("0:2,1:1,1:1,1:2,0:4,1:1", 4, 0..300);
        run("0:3,1:2,1:1", 4, 0..300);
        run("0:1,1:3,1:5,2:2,2:6", 6, 0..300);
    }

    #[test]
    fn exhaustive_pair() {
        let w = Workload::parse("0:2,0:1").unwrap();
        let s = simulate_exhaustive(&w, &SimConfig::new(2)).unwrap();
        assert!(s.terminal > 0);
        let w = Workload::parse("0:2").unwrap();
        simulate_exhaustive(&w, &SimConfig::new(2)).unwrap();
    }

    #[test]
    fn exhaustive_four_threads_at_write_granularity() {
        let mut cfg = SimConfig::new(4);
        cfg.granularity = Granularity::Write;
        for w in ["", "0:2,1:1,1:1", "0:1,1:2,2:4"] {
            let w = Workload::parse(w).unwrap();
            simulate_exhaustive(&w, &cfg).unwrap_or_else(|e| panic!("{e}"));
        }
    }

    #[test]
    fn exhaustive_guard() {
        let w = Workload::flat(&[1; 9]);
        assert!(matches!(simulate_exhaustive(&w, &SimConfig::new(2)), Err(SimError::Setup(_))));
        assert!(matches!(simulate_exhaustive(&Workload::default(), &SimConfig::new(5)), Err(SimError::Setup(_))));
    }
}

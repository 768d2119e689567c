//! The live runtime: `p` worker threads driving [`Machine`]s over atomics.
//!
//! Tasks are closures with a thread requirement. A task body receives a
//! [`TaskCtx`] through which it learns its team position, spawns children
//! and waits for them. Waiting never blocks the thread: [`TaskCtx::sync`]
//! keeps stepping the worker's protocol machine and runs whatever it is
//! handed until the children are done. Every task body ends with an
//! implicit sync.

use std::cell::{Cell, RefCell};
use std::panic::{self, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam::utils::CachePadded;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deque::{QueueSet, QueueStealers, Requirement};
use crate::error::{Error, Result};
use crate::protocol::{self, Assignment, CasKind, Env, Event, Machine, Record, Step};
use crate::regword::{RegistrationCell, RegistrationWord as Word};
use crate::topology::{validate_level_sizes, Topology};

/// Runtime configuration. [`SchedulerConfig::from_env`] applies the
/// `TEAMSTEAL_*` overrides listed on each field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerConfig {
    /// `TEAMSTEAL_THREADS`
    pub p: usize,
    /// `TEAMSTEAL_LEVELS`, comma separated, e.g. `1,2,3,6`.
    pub level_sizes: Option<Vec<usize>>,
    /// `TEAMSTEAL_RANDOMIZED`
    pub randomized: bool,
    /// `TEAMSTEAL_SEED`
    pub seed: u64,
    /// `TEAMSTEAL_MAX_STEAL`; `None` steals up to `2^level` tasks.
    pub max_steal: Option<usize>,
    /// `TEAMSTEAL_BACKOFF_MIN_US`
    pub backoff_min: Duration,
    /// `TEAMSTEAL_BACKOFF_MAX_US`
    pub backoff_max: Duration,
    /// `TEAMSTEAL_IDLE_SWEEPS`
    pub idle_sweeps: u8,
    /// `TEAMSTEAL_STACK_MB`
    pub stack_size: usize,
    /// Keep a log of every team task execution in the report.
    pub record_teams: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            p: std::thread::available_parallelism().map_or(1, |n| n.get()),
            level_sizes: None,
            randomized: false,
            seed: 0,
            max_steal: None,
            backoff_min: Duration::from_micros(1),
            backoff_max: Duration::from_millis(10),
            idle_sweeps: protocol::DEFAULT_IDLE_SWEEPS,
            stack_size: 64 << 20,
            record_teams: false,
        }
    }
}

fn env_var<T: FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("cannot parse {name}={v:?}"))),
        Err(_) => Ok(None),
    }
}

fn parse_bool(name: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {name}={v:?}"))),
    }
}

/// Parses a comma separated list of level sizes.
pub fn parse_levels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad level size {x:?}"))))
        .collect()
}

impl SchedulerConfig {
    pub fn with_threads(p: usize) -> Self {
        SchedulerConfig { p, ..Self::default() }
    }

    /// Applies `TEAMSTEAL_*` environment overrides on top of `self`.
    pub fn from_env(mut self) -> Result<Self> {
        if let Some(p) = env_var("TEAMSTEAL_THREADS")? {
            self.p = p;
        }
        if let Ok(v) = std::env::var("TEAMSTEAL_LEVELS") {
            self.level_sizes = Some(parse_levels(&v)?);
        }
        if let Ok(v) = std::env::var("TEAMSTEAL_RANDOMIZED") {
            self.randomized = parse_bool("TEAMSTEAL_RANDOMIZED", &v)?;
        }
        if let Some(s) = env_var("TEAMSTEAL_SEED")? {
            self.seed = s;
        }
        if let Some(m) = env_var::<usize>("TEAMSTEAL_MAX_STEAL")? {
            self.max_steal = (m > 0).then_some(m);
        }
        if let Some(us) = env_var("TEAMSTEAL_BACKOFF_MIN_US")? {
            self.backoff_min = Duration::from_micros(us);
        }
        if let Some(us) = env_var("TEAMSTEAL_BACKOFF_MAX_US")? {
            self.backoff_max = Duration::from_micros(us);
        }
        if let Some(k) = env_var("TEAMSTEAL_IDLE_SWEEPS")? {
            self.idle_sweeps = k;
        }
        if let Some(mb) = env_var::<usize>("TEAMSTEAL_STACK_MB")? {
            self.stack_size = mb << 20;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("need at least one thread".into()));
        }
        if self.p > usize::from(u16::MAX) {
            return Err(Error::Config(format!("{} threads exceed the supported maximum", self.p)));
        }
        if let Some(sizes) = &self.level_sizes {
            validate_level_sizes(self.p, sizes)?;
        }
        if self.idle_sweeps == 0 {
            return Err(Error::Config("idle sweeps must be at least 1".into()));
        }
        if self.backoff_min.is_zero() || self.backoff_min > self.backoff_max {
            return Err(Error::Config("backoff bounds must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }

    fn topology(&self) -> Result<Topology> {
        Topology::build(self.p, self.level_sizes.as_deref(), self.randomized, self.seed)
    }
}

/// One execution of a team task by one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeamExec {
    pub task: u64,
    pub worker: usize,
    pub team: usize,
    pub local_id: usize,
    pub coord: usize,
}

/// Counters collected during [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    /// Task body invocations, counting each team member.
    pub executions: u64,
    /// Invocations with a team of two or more.
    pub team_executions: u64,
    /// Compare-exchange attempts on registration words, spawns included.
    pub reg_cas: u64,
    /// Of those, attempts that fix or change a team size.
    pub team_cas: u64,
    /// Tasks taken from other workers' queues.
    pub steals: u64,
    pub conflicts: u64,
    pub elapsed: Duration,
    pub team_log: Vec<TeamExec>,
}

type Body = dyn Fn(&TaskCtx<'_>) + Send + Sync;

struct Job {
    uid: u64,
    r: usize,
    body: Box<Body>,
    /// Outstanding-children counter of the execution that spawned this.
    parent: Option<Arc<AtomicUsize>>,
    /// Members that have not finished yet.
    members_left: AtomicUsize,
}

#[derive(Clone)]
struct TaskRef(Arc<Job>);

impl Requirement for TaskRef {
    fn requirement(&self) -> usize {
        self.0.r
    }
}

struct Slot {
    /// Id of the record held, 0 when empty. Lets readers skip the lock.
    id: AtomicU64,
    record: Mutex<Option<Record<TaskRef>>>,
}

struct WorkerShared {
    reg: RegistrationCell,
    coord: AtomicUsize,
    g: AtomicUsize,
    slot: Slot,
}

struct Shared {
    topo: Topology,
    workers: Vec<CachePadded<WorkerShared>>,
    stealers: Vec<QueueStealers<TaskRef>>,
    idle: CachePadded<AtomicUsize>,
    terminated: AtomicBool,
    next_uid: AtomicU64,
    executions: AtomicU64,
    team_executions: AtomicU64,
    reg_cas: AtomicU64,
    team_cas: AtomicU64,
    steals: AtomicU64,
    conflicts: AtomicU64,
    panic: Mutex<Option<String>>,
    team_log: Option<Mutex<Vec<TeamExec>>>,
}

/// Everything one worker thread owns.
struct Worker {
    me: usize,
    shared: Arc<Shared>,
    queues: QueueSet<TaskRef>,
    machine: RefCell<Machine<TaskRef>>,
    rng: RefCell<ChaCha8Rng>,
    delay: Cell<Duration>,
    backoff_min: Duration,
    backoff_max: Duration,
    /// Task bodies currently on this thread's stack.
    depth: Cell<usize>,
}

struct LiveEnv<'a> {
    w: &'a Worker,
}

impl Env for LiveEnv<'_> {
    type Task = TaskRef;

    fn topology(&self) -> &Topology {
        &self.w.shared.topo
    }

    fn requirement(&self, task: &TaskRef) -> usize {
        task.0.r
    }

    fn partner(&mut self, level: usize) -> Option<usize> {
        let topo = &self.w.shared.topo;
        topo.choose_partner(self.w.me, level, &mut *self.w.rng.borrow_mut())
    }

    fn load_reg(&mut self, worker: usize) -> Word {
        self.w.shared.workers[worker].reg.load()
    }

    fn cas_reg(&mut self, worker: usize, old: Word, new: Word, kind: CasKind) -> bool {
        let s = &self.w.shared;
        s.reg_cas.fetch_add(1, SeqCst);
        if matches!(kind, CasKind::Fix | CasKind::Reconcile) {
            s.team_cas.fetch_add(1, SeqCst);
        }
        s.workers[worker].reg.compare_exchange(old, new)
    }

    fn load_coord(&mut self, worker: usize) -> usize {
        self.w.shared.workers[worker].coord.load(SeqCst)
    }

    fn store_coord(&mut self, coord: usize) {
        self.w.shared.workers[self.w.me].coord.store(coord, SeqCst);
    }

    fn load_g(&mut self) -> usize {
        self.w.shared.workers[self.w.me].g.load(SeqCst)
    }

    fn store_g(&mut self, g: usize) {
        self.w.shared.workers[self.w.me].g.store(g, SeqCst);
    }

    fn dec_g(&mut self, worker: usize) {
        self.w.shared.workers[worker].g.fetch_sub(1, SeqCst);
    }

    fn load_slot(&mut self, worker: usize, seen: u64) -> Option<Record<TaskRef>> {
        let slot = &self.w.shared.workers[worker].slot;
        let id = slot.id.load(SeqCst);
        if id == 0 || id == seen {
            return None;
        }
        let guard = slot.record.lock().expect("slot lock");
        guard.clone().filter(|r| r.id != seen)
    }

    fn store_slot(&mut self, record: Option<Record<TaskRef>>) {
        let slot = &self.w.shared.workers[self.w.me].slot;
        let mut guard = slot.record.lock().expect("slot lock");
        match record {
            Some(rec) => {
                let id = rec.id;
                *guard = Some(rec);
                slot.id.store(id, SeqCst);
            }
            None => {
                slot.id.store(0, SeqCst);
                *guard = None;
            }
        }
    }

    fn push_bottom(&mut self, task: TaskRef) {
        self.w.queues.push_bottom(task).expect("task fits this worker's levels");
    }

    fn pop_bottom(&mut self, level: usize) -> Option<TaskRef> {
        self.w.queues.pop_bottom(level)
    }

    fn lowest_nonempty(&mut self) -> Option<usize> {
        self.w.queues.lowest_nonempty()
    }

    fn pop_top(&mut self, victim: usize, level: usize) -> Option<TaskRef> {
        self.w.shared.stealers[victim].pop_top(level)
    }

    fn level_len(&mut self, victim: usize, level: usize) -> usize {
        self.w.shared.stealers[victim].size(level)
    }

    fn idle_enter(&mut self) {
        self.w.shared.idle.fetch_add(1, SeqCst);
    }

    fn idle_leave(&mut self) {
        self.w.shared.idle.fetch_sub(1, SeqCst);
    }

    fn idle_count(&mut self) -> usize {
        self.w.shared.idle.load(SeqCst)
    }

    fn quiescent(&mut self, worker: usize) -> bool {
        let s = &self.w.shared;
        s.workers[worker].g.load(SeqCst) == 0 && s.stealers[worker].is_empty()
    }

    fn terminated(&mut self) -> bool {
        self.w.shared.terminated.load(SeqCst)
    }

    fn set_terminated(&mut self) {
        self.w.shared.terminated.store(true, SeqCst);
    }

    fn event(&mut self, event: Event<TaskRef>) {
        match event {
            Event::Steal { .. } => {
                self.w.shared.steals.fetch_add(1, SeqCst);
            }
            Event::Conflict { .. } => {
                self.w.shared.conflicts.fetch_add(1, SeqCst);
            }
            _ => {}
        }
    }
}

impl Worker {
    fn step(&self, stop: bool) -> Step<TaskRef> {
        let mut env = LiveEnv { w: self };
        self.machine.borrow_mut().step(&mut env, stop)
    }

    fn backoff(&self) {
        let d = self.delay.get();
        if d < Duration::from_micros(50) {
            let start = Instant::now();
            while start.elapsed() < d {
                std::thread::yield_now();
            }
        } else {
            std::thread::sleep(d);
        }
        self.delay.set((d * 2).min(self.backoff_max));
    }

    fn reset_backoff(&self) {
        self.delay.set(self.backoff_min);
    }

    /// Scheduler loop of a worker with nothing on its stack.
    fn main_loop(&self) {
        loop {
            match self.step(false) {
                Step::Continue => {}
                Step::Backoff => self.backoff(),
                Step::Run(a) => self.execute(a),
                Step::Terminated => return,
                Step::Stopped => unreachable!("no stop was requested"),
            }
        }
    }

    fn execute(&self, a: Assignment<TaskRef>) {
        self.reset_backoff();
        let s = &self.shared;
        let job = a.task.0;
        s.executions.fetch_add(1, SeqCst);
        if a.team > 1 {
            s.team_executions.fetch_add(1, SeqCst);
            if let Some(log) = &s.team_log {
                log.lock().expect("team log lock").push(TeamExec {
                    task: job.uid,
                    worker: self.me,
                    team: a.team,
                    local_id: a.local_id,
                    coord: a.coord,
                });
            }
        }
        self.depth.set(self.depth.get() + 1);
        self.machine.borrow_mut().set_waiting(true);
        let ctx = TaskCtx {
            worker: self,
            team: a.team,
            local_id: a.local_id,
            coord: a.coord,
            children: Arc::new(AtomicUsize::new(0)),
        };
        if let Err(payload) = panic::catch_unwind(AssertUnwindSafe(|| (job.body)(&ctx))) {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "non-string panic payload".into());
            s.panic.lock().expect("panic lock").get_or_insert(msg);
        }
        ctx.sync();
        self.depth.set(self.depth.get() - 1);
        self.machine.borrow_mut().set_waiting(self.depth.get() > 0);
        if job.members_left.fetch_sub(1, SeqCst) == 1 {
            if let Some(parent) = &job.parent {
                parent.fetch_sub(1, SeqCst);
            }
        }
    }
}

/// A running task's view of the scheduler.
pub struct TaskCtx<'a> {
    worker: &'a Worker,
    team: usize,
    local_id: usize,
    coord: usize,
    children: Arc<AtomicUsize>,
}

impl TaskCtx<'_> {
    pub fn team_size(&self) -> usize {
        self.team
    }

    /// Position in the team, `0..team_size()`.
    pub fn local_id(&self) -> usize {
        self.local_id
    }

    pub fn coordinator(&self) -> usize {
        self.coord
    }

    /// Worker thread executing this body.
    pub fn worker(&self) -> usize {
        self.worker.me
    }

    pub fn threads(&self) -> usize {
        self.worker.shared.topo.p()
    }

    /// Queues a child task needing `r` threads on this worker.
    pub fn spawn<F>(&self, r: usize, body: F) -> Result<()>
    where
        F: Fn(&TaskCtx<'_>) + Send + Sync + 'static,
    {
        if self.local_id != 0 {
            return Err(Error::SpawnFromNonLeader { local_id: self.local_id });
        }
        let w = self.worker;
        let s = &w.shared;
        let p = s.topo.p();
        if r == 0 {
            return Err(Error::ZeroRequirement);
        }
        if r > p {
            return Err(Error::InfeasibleRequirement { required: r, available: p });
        }
        self.children.fetch_add(1, SeqCst);
        let job = Job {
            uid: s.next_uid.fetch_add(1, SeqCst),
            r,
            body: Box::new(body),
            parent: Some(self.children.clone()),
            members_left: AtomicUsize::new(r),
        };
        w.queues.push_bottom(TaskRef(Arc::new(job))).expect("requirement checked above");
        let cell = &s.workers[w.me].reg;
        let mut old = cell.load();
        loop {
            let new = protocol::spawn_transition(&s.topo, w.me, old, r)?;
            if new == old {
                break;
            }
            s.reg_cas.fetch_add(1, SeqCst);
            if cell.compare_exchange(old, new) {
                w.machine.borrow_mut().note_spawn(new);
                break;
            }
            old = cell.load();
        }
        Ok(())
    }

    /// Returns once every task spawned from this body so far has finished,
    /// running other work in the meantime.
    pub fn sync(&self) {
        let w = self.worker;
        if self.children.load(SeqCst) == 0 {
            return;
        }
        while self.children.load(SeqCst) > 0 {
            match w.step(false) {
                Step::Continue => {}
                Step::Backoff => w.backoff(),
                Step::Run(a) => w.execute(a),
                Step::Terminated | Step::Stopped => unreachable!("children outstanding"),
            }
        }
        loop {
            match w.step(true) {
                Step::Stopped => break,
                Step::Continue => {}
                Step::Backoff => w.backoff(),
                Step::Run(a) => w.execute(a),
                Step::Terminated => unreachable!("terminated inside a task"),
            }
        }
    }
}

/// Runs `root`, which needs `r` threads, and everything it spawns to
/// completion on `config.p` worker threads.
pub fn run<F>(config: &SchedulerConfig, r: usize, root: F) -> Result<RunReport>
where
    F: Fn(&TaskCtx<'_>) + Send + Sync + 'static,
{
    config.validate()?;
    let topo = config.topology()?;
    let p = config.p;
    if r == 0 {
        return Err(Error::ZeroRequirement);
    }
    if r > p {
        return Err(Error::InfeasibleRequirement { required: r, available: p });
    }
    let queues: Vec<QueueSet<TaskRef>> = (0..p).map(|i| QueueSet::new(topo.effective_sizes(i))).collect();
    let stealers = queues.iter().map(QueueSet::stealers).collect();
    let workers = (0..p)
        .map(|i| {
            CachePadded::new(WorkerShared {
                reg: RegistrationCell::default(),
                coord: AtomicUsize::new(i),
                g: AtomicUsize::new(0),
                slot: Slot { id: AtomicU64::new(0), record: Mutex::new(None) },
            })
        })
        .collect();
    let shared = Arc::new(Shared {
        topo: topo.clone(),
        workers,
        stealers,
        idle: CachePadded::new(AtomicUsize::new(0)),
        terminated: AtomicBool::new(false),
        next_uid: AtomicU64::new(1),
        executions: AtomicU64::new(0),
        team_executions: AtomicU64::new(0),
        reg_cas: AtomicU64::new(0),
        team_cas: AtomicU64::new(0),
        steals: AtomicU64::new(0),
        conflicts: AtomicU64::new(0),
        panic: Mutex::new(None),
        team_log: config.record_teams.then(|| Mutex::new(Vec::new())),
    });

    // Seed the root before any worker starts.
    let root = Job { uid: 0, r, body: Box::new(root), parent: None, members_left: AtomicUsize::new(r) };
    queues[0].push_bottom(TaskRef(Arc::new(root)))?;
    let w0 = &shared.workers[0].reg;
    w0.compare_exchange(w0.load(), protocol::spawn_transition(&topo, 0, w0.load(), r)?);
    let root_word = w0.load();

    let start = Instant::now();
    let handles: Vec<_> = queues
        .into_iter()
        .enumerate()
        .map(|(i, qs)| {
            let shared = shared.clone();
            let mut machine = Machine::new(i).with_idle_sweeps(config.idle_sweeps).with_max_steal(config.max_steal);
            if i == 0 {
                machine.note_spawn(root_word);
            }
            let rng = ChaCha8Rng::seed_from_u64(config.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let (lo, hi) = (config.backoff_min, config.backoff_max);
            std::thread::Builder::new()
                .name(format!("teamsteal-{i}"))
                .stack_size(config.stack_size)
                .spawn(move || {
                    let w = Worker {
                        me: i,
                        shared,
                        queues: qs,
                        machine: RefCell::new(machine),
                        rng: RefCell::new(rng),
                        delay: Cell::new(lo),
                        backoff_min: lo,
                        backoff_max: hi,
                        depth: Cell::new(0),
                    };
                    w.main_loop();
                })
                .map_err(|e| Error::Config(format!("cannot start worker thread: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut worker_panic = None;
    for h in handles {
        if let Err(payload) = h.join() {
            worker_panic.get_or_insert_with(|| {
                payload.downcast_ref::<&str>().map_or("worker thread panicked".to_string(), |s| s.to_string())
            });
        }
    }
    let elapsed = start.elapsed();
    if let Some(msg) = worker_panic {
        return Err(Error::TaskPanicked(msg));
    }
    let s = Arc::try_unwrap(shared).unwrap_or_else(|_| unreachable!("workers joined"));
    if let Some(msg) = s.panic.into_inner().expect("panic lock") {
        return Err(Error::TaskPanicked(msg));
    }
    Ok(RunReport {
        executions: s.executions.into_inner(),
        team_executions: s.team_executions.into_inner(),
        reg_cas: s.reg_cas.into_inner(),
        team_cas: s.team_cas.into_inner(),
        steals: s.steals.into_inner(),
        conflicts: s.conflicts.into_inner(),
        elapsed,
        team_log: s.team_log.map(|l| l.into_inner().expect("team log lock")).unwrap_or_default(),
    })
}

//! The per-worker team-building state machine.
//!
//! [`Machine`] holds everything a worker keeps privately and advances through
//! explicit program counters. Every call to [`Machine::step`] performs at most
//! one operation on shared state through the [`Env`] trait, which lets the
//! live runtime and the deterministic simulator drive the same logic: the
//! runtime loops on `step`, the simulator interleaves steps of many machines
//! under a chosen schedule.
//!
//! Summary of the rules implemented here:
//!
//! * A coordinator pops its bottom task from the lowest non-empty level and
//!   holds it privately while the team forms. Tasks with `r = 1` on a solo
//!   word run at once without touching the registration word.
//! * Once `a = r` the coordinator fixes the team, sets `G = r - 1` and
//!   publishes a slot record. Members run the record if they lie inside its
//!   team and have not run it before, then decrement `G`.
//! * After all members started, the next task reuses the team if it has the
//!   same size, shrinks it if smaller, and disbands it if larger.
//! * Conflicts between overlapping prospective teams go to the smaller
//!   `(r, id)` pair.
//! * Workers with empty queues reset to solo and sweep their partners: they
//!   register where their help is needed and steal otherwise.

use crate::regword::RegistrationWord as Word;
use crate::topology::Topology;

/// Failed full partner sweeps before a worker declares itself idle.
pub const DEFAULT_IDLE_SWEEPS: u8 = 3;

/// A published ready task.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record<T> {
    pub task: T,
    /// Unique per publication, never 0.
    pub id: u64,
    /// Size of the team that runs it.
    pub team: u16,
    /// Epoch of the coordinator's word at publication.
    pub n: u16,
}

/// Why a registration word CAS is attempted. Used for instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasKind {
    Register,
    Deregister,
    Reconcile,
    Fix,
    Reset,
}

/// Something worth recording in a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event<T> {
    Register { coord: usize, word: Word },
    Silent { coord: usize, n: u16 },
    Deregister { coord: usize, word: Word },
    Leave { coord: usize },
    Reconcile { before: Word, after: Word },
    Fix { word: Word },
    Publish { task: T, id: u64, team: u16, n: u16 },
    /// `(r, coordinator)` pairs; the winner must be the smaller one.
    Conflict { winner: (usize, usize), loser: (usize, usize) },
    Steal { victim: usize, level: usize },
    Idle { on: bool },
    Terminate,
}

/// Shared state as seen by one worker.
pub trait Env {
    type Task: Clone;

    fn topology(&self) -> &Topology;
    fn requirement(&self, task: &Self::Task) -> usize;
    /// Partner at `level`, randomized if configured.
    fn partner(&mut self, level: usize) -> Option<usize>;

    fn load_reg(&mut self, worker: usize) -> Word;
    fn cas_reg(&mut self, worker: usize, old: Word, new: Word, kind: CasKind) -> bool;
    fn load_coord(&mut self, worker: usize) -> usize;
    fn store_coord(&mut self, coord: usize);
    fn load_g(&mut self) -> usize;
    fn store_g(&mut self, g: usize);
    fn dec_g(&mut self, worker: usize);
    /// Current record of `worker`, or `None` if empty or its id is `seen`.
    fn load_slot(&mut self, worker: usize, seen: u64) -> Option<Record<Self::Task>>;
    fn store_slot(&mut self, record: Option<Record<Self::Task>>);

    fn push_bottom(&mut self, task: Self::Task);
    fn pop_bottom(&mut self, level: usize) -> Option<Self::Task>;
    fn lowest_nonempty(&mut self) -> Option<usize>;
    fn pop_top(&mut self, victim: usize, level: usize) -> Option<Self::Task>;
    fn level_len(&mut self, victim: usize, level: usize) -> usize;

    fn idle_enter(&mut self);
    fn idle_leave(&mut self);
    fn idle_count(&mut self) -> usize;
    /// No queued task and no unstarted published task at `worker`.
    fn quiescent(&mut self, worker: usize) -> bool;
    fn terminated(&mut self) -> bool;
    fn set_terminated(&mut self);

    fn event(&mut self, _event: Event<Self::Task>) {}
}

/// A task handed to the driver for execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment<T> {
    pub task: T,
    pub team: usize,
    pub local_id: usize,
    pub coord: usize,
    /// Publication id for team tasks.
    pub record: Option<u64>,
}

/// Outcome of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step<T> {
    /// Made a move; call again.
    Continue,
    /// Nothing useful to do right now; back off before calling again.
    Backoff,
    Run(Assignment<T>),
    /// The stop request passed to `step` was honored.
    Stopped,
    Terminated,
}

/// How a worker may join a coordinator's forming team.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Join {
    /// Inside the team window with room left: register and count.
    Count,
    /// Inside the prospective block but outside the window: wait uncounted.
    Silent,
    No,
}

pub fn join_mode(topo: &Topology, me: usize, coord: usize, word: Word) -> Join {
    if coord == me || word.t > 1 || word.r <= 1 {
        return Join::No;
    }
    let r = usize::from(word.r);
    if topo.in_team(coord, me, r) {
        if word.a < word.r {
            Join::Count
        } else {
            Join::No
        }
    } else if topo.overlap(coord, me, r) {
        Join::Silent
    } else {
        Join::No
    }
}

/// Word after the owner pushes a task requiring `r` threads. Like
/// [`Word::on_spawn_requirement`], but growing a forming team whose window
/// does not contain the old one opens a new epoch.
pub fn spawn_transition(topo: &Topology, me: usize, word: Word, r: usize) -> crate::Result<Word> {
    let next = word.on_spawn_requirement(r, topo.p())?;
    if word.t == 1
        && next.r > word.r
        && next.n == word.n
        && !topo.team_grows_in_place(me, usize::from(word.r), usize::from(next.r))
    {
        return Ok(word.disband_for(next.r));
    }
    Ok(next)
}

/// What a coordinator holding a task of requirement `r` does next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plan {
    /// Run alone right away.
    Run,
    /// Team of the right size already fixed: publish.
    Publish,
    /// Adjust the word and look again.
    Adjust(Word),
    /// Everyone is here: fix the team.
    Fix(Word),
    /// Still waiting for registrations.
    Poll,
}

pub fn reconcile(topo: &Topology, me: usize, word: Word, r: usize) -> Plan {
    let h = r as u16;
    if word.t > 1 {
        if h == word.t {
            Plan::Publish
        } else if h == 1 {
            Plan::Adjust(word.reset_to_solo())
        } else if h < word.t && topo.team_grows_in_place(me, r, usize::from(word.t)) {
            Plan::Adjust(word.shrink_team(h))
        } else {
            Plan::Adjust(word.disband_for(h))
        }
    } else if h == word.r {
        if h == 1 {
            Plan::Run
        } else if word.a == word.r {
            Plan::Fix(word.fix_team().expect("a = r"))
        } else {
            Plan::Poll
        }
    } else if h > word.r && topo.team_grows_in_place(me, usize::from(word.r), r) {
        Plan::Adjust(Word { r: h, ..word })
    } else {
        Plan::Adjust(word.disband_for(h))
    }
}

/// Outcome of inspecting one partner while waiting for a team.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollMove {
    Skip,
    /// Overlapping team, ours is smaller.
    Win,
    /// Overlapping team, theirs is smaller and has room for us.
    Switch,
    /// Theirs is smaller but full or already running.
    Wait,
    /// Theirs is smaller and does not need us: help drain it.
    Steal,
}

/// `cid`/`r` is the team this worker is forming or waiting on; `xc`/`xr`
/// the partner's coordinator and its word.
pub fn poll_decision(topo: &Topology, me: usize, cid: usize, r: usize, xc: usize, xr: Word) -> PollMove {
    if xc == cid || xc == me {
        return PollMove::Skip;
    }
    let needs_me = xr.r > 1 && topo.overlap(xc, me, usize::from(xr.r));
    if (usize::from(xr.r), xc) < (r, cid) {
        if !needs_me {
            PollMove::Steal
        } else if join_mode(topo, me, xc, xr) == Join::No {
            PollMove::Wait
        } else {
            PollMove::Switch
        }
    } else if needs_me {
        PollMove::Win
    } else {
        PollMove::Skip
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum StealMode {
    /// From the empty-queue sweep; the last task becomes our candidate.
    Sweep { level: u8 },
    /// While waiting for a team; everything goes to our queues.
    Poll { cid: u16, r: u16, level: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Pc {
    Top,
    ClearSlot,
    Lowest,
    PopOwn { level: u8 },
    Reconcile,
    ReconcileCas { old: Word, new: Word },
    StoreG { word: Word },
    Publish { word: Word },
    StopReg,
    StopCas { old: Word },
    PushHeld,

    MemberSlot,
    MemberDec,
    MemberReg,
    MemberUpgrade { old: Word },
    MemberLowest { word: Word },
    MemberPop { word: Word, level: u8 },
    MemberPushBack { word: Word, leave: bool },
    MemberLeave { word: Word },
    Detach,

    PollCoord { cid: u16, r: u16, level: u8 },
    PollReg { cid: u16, r: u16, level: u8, x: u16, xc: u16 },
    PollLen { mode: StealMode, x: u16, vlevel: u8 },
    PollPushHeld { mode: StealMode, x: u16, vlevel: u8, take: u16 },

    SwitchPushHeld { xc: u16 },
    SwitchOld { xc: u16, was_coord: bool },
    SwitchOldCas { xc: u16, old: Word },
    SwitchNew { xc: u16, was_coord: bool },
    SwitchNewCas { xc: u16, old: Word, was_coord: bool },
    SwitchStore { xc: u16, was_coord: bool },
    SwitchReset,
    SwitchResetCas { old: Word },

    EmptyReg,
    EmptyCas { old: Word },
    SweepCoord { level: u8 },
    SweepReg { level: u8, x: u16, xc: u16 },
    SweepJoin { level: u8, x: u16, xc: u16, old: Word },
    SweepSilent { xc: u16, n: u16 },
    SweepLen { level: u8, x: u16, vlevel: u8 },
    StealPop { mode: StealMode, x: u16, vlevel: u8, left: u16 },
    StealPush { mode: StealMode, x: u16, vlevel: u8, left: u16 },
    StealDone { mode: StealMode },
    SweepEnd,
    IdleCheck,
    IdleCount,
    Confirm { worker: u16 },
    Terminate,
    Done,
}

/// Private protocol state of one worker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Machine<T> {
    me: usize,
    pc: Pc,
    /// Coordinator; `me` when coordinating or solo.
    c: usize,
    /// Epoch observed when joining `c`.
    cn: u16,
    /// Registered at `c` with a counted slot (as opposed to silently).
    counted: bool,
    /// Own word known to be `{1, 1, 1, _}`.
    solo: bool,
    /// Own slot holds a record.
    published: bool,
    idle: bool,
    fails: u8,
    last_exec: u64,
    next_id: u64,
    held: Option<T>,
    stolen: Option<T>,
    pending: Option<T>,
    grabbed: Option<Record<T>>,
    own: Option<T>,
    idle_sweeps: u8,
    max_steal: Option<u16>,
    /// Stepped from inside a running task, which must never count as idle.
    waiting: bool,
}

impl<T: Clone> Machine<T> {
    pub fn new(me: usize) -> Self {
        Machine {
            me,
            pc: Pc::Top,
            c: me,
            cn: 0,
            counted: false,
            solo: true,
            published: false,
            idle: false,
            fails: 0,
            last_exec: 0,
            next_id: 0,
            held: None,
            stolen: None,
            pending: None,
            grabbed: None,
            own: None,
            idle_sweeps: DEFAULT_IDLE_SWEEPS,
            max_steal: None,
            waiting: false,
        }
    }

    /// Failed sweeps before idling (at least 1).
    pub fn with_idle_sweeps(mut self, k: u8) -> Self {
        self.idle_sweeps = k.max(1);
        self
    }

    /// Fixed steal batch size instead of `2^level`.
    pub fn with_max_steal(mut self, max: Option<usize>) -> Self {
        self.max_steal = max.map(|m| m.clamp(1, u16::MAX as usize) as u16);
        self
    }

    pub fn id(&self) -> usize {
        self.me
    }

    pub fn coordinator(&self) -> usize {
        self.c
    }

    /// Whether this worker currently holds a counted registration at its
    /// coordinator made in epoch `n`.
    pub fn counted_at(&self, coord: usize, n: u16) -> bool {
        self.c == coord && self.c != self.me && self.counted && self.cn == n
    }

    /// Marks the machine as driven by a task waiting for its children. It
    /// keeps stealing but never joins the idle set while this is on.
    pub fn set_waiting(&mut self, waiting: bool) {
        self.waiting = waiting;
    }

    pub fn is_idle(&self) -> bool {
        self.idle
    }

    /// At the loop head with nothing in flight, where a stop request is
    /// honored.
    pub fn at_top(&self) -> bool {
        self.pc == Pc::Top
    }

    /// Records the owner's word after a spawn changed it.
    pub fn note_spawn(&mut self, word: Word) {
        self.solo = word.is_solo();
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        ((self.me as u64 + 1) << 40) | self.next_id
    }

    fn goto(&mut self, pc: Pc) -> Step<T> {
        self.pc = pc;
        Step::Continue
    }

    fn backoff(&mut self) -> Step<T> {
        self.pc = Pc::Top;
        Step::Backoff
    }

    /// Leaves the idle set before touching anything. Returns true if that
    /// used up the step.
    fn unidle<E: Env<Task = T>>(&mut self, env: &mut E) -> bool {
        if self.idle {
            env.idle_leave();
            env.event(Event::Idle { on: false });
            self.idle = false;
            true
        } else {
            false
        }
    }

    fn steal_cap(&self, level: usize, len: usize) -> u16 {
        let cap = match self.max_steal {
            Some(m) => usize::from(m),
            None => 1usize << level.min(15),
        };
        len.div_ceil(2).min(cap).max(1) as u16
    }

    /// Highest victim level whose tasks all land strictly below our level
    /// for requirement `r`.
    fn poll_victim_top(topo: &Topology, me: usize, x: usize, r: usize) -> Option<usize> {
        let lv = topo.level_for_requirement(me, r).ok()?;
        if lv == 0 {
            return None;
        }
        let limit = topo.effective_sizes(me)[lv - 1];
        let sizes = topo.effective_sizes(x);
        (0..sizes.len()).rev().find(|&k| sizes[k] <= limit)
    }

    /// Advances by one shared operation. `stop` asks the machine to return
    /// [`Step::Stopped`] as soon as it is free of obligations.
    pub fn step<E: Env<Task = T>>(&mut self, env: &mut E, stop: bool) -> Step<T> {
        let me = self.me;
        let pc = std::mem::replace(&mut self.pc, Pc::Top);
        match pc {
            Pc::Top => {
                if self.published {
                    if env.load_g() > 0 {
                        return self.backoff();
                    }
                    return self.goto(Pc::ClearSlot);
                }
                if self.c != me {
                    return self.goto(Pc::MemberSlot);
                }
                if stop {
                    if self.held.is_some() {
                        return self.goto(Pc::PushHeld);
                    }
                    if !self.solo {
                        return self.goto(Pc::StopReg);
                    }
                    return Step::Stopped;
                }
                if self.held.is_some() {
                    self.goto(Pc::Reconcile)
                } else {
                    self.goto(Pc::Lowest)
                }
            }
            Pc::ClearSlot => {
                env.store_slot(None);
                self.published = false;
                self.goto(Pc::Top)
            }
            Pc::PushHeld => {
                let task = self.held.take().expect("held task");
                env.push_bottom(task);
                self.goto(Pc::Top)
            }
            Pc::StopReg => {
                let word = env.load_reg(me);
                if word.is_solo() {
                    self.solo = true;
                    Step::Stopped
                } else if word.t > 1 {
                    self.goto(Pc::StopCas { old: word })
                } else {
                    // A forming team may keep gathering while we are away.
                    Step::Stopped
                }
            }
            Pc::StopCas { old } => {
                let new = old.reset_to_solo();
                if env.cas_reg(me, old, new, CasKind::Reset) {
                    env.event(Event::Reconcile { before: old, after: new });
                    self.solo = true;
                    Step::Stopped
                } else {
                    self.goto(Pc::StopReg)
                }
            }

            Pc::Lowest => match env.lowest_nonempty() {
                Some(level) => self.goto(Pc::PopOwn { level: level as u8 }),
                None if self.solo => self.goto(Pc::SweepCoord { level: 0 }),
                None => self.goto(Pc::EmptyReg),
            },
            Pc::PopOwn { level } => match env.pop_bottom(usize::from(level)) {
                Some(task) => {
                    self.held = Some(task);
                    self.goto(Pc::Reconcile)
                }
                None => self.goto(Pc::Lowest),
            },
            Pc::Reconcile => {
                let task = self.held.as_ref().expect("held task");
                let r = env.requirement(task);
                if r == 1 && self.solo {
                    let task = self.held.take().unwrap();
                    self.fails = 0;
                    return Step::Run(Assignment { task, team: 1, local_id: 0, coord: me, record: None });
                }
                let word = env.load_reg(me);
                let topo = env.topology();
                match reconcile(topo, me, word, r) {
                    Plan::Run => {
                        self.solo = true;
                        let task = self.held.take().unwrap();
                        self.fails = 0;
                        Step::Run(Assignment { task, team: 1, local_id: 0, coord: me, record: None })
                    }
                    Plan::Publish => self.goto(Pc::StoreG { word }),
                    Plan::Adjust(new) => self.goto(Pc::ReconcileCas { old: word, new }),
                    Plan::Fix(new) => self.goto(Pc::ReconcileCas { old: word, new }),
                    Plan::Poll => {
                        self.solo = false;
                        self.goto(Pc::PollCoord { cid: me as u16, r: r as u16, level: 0 })
                    }
                }
            }
            Pc::ReconcileCas { old, new } => {
                let fixing = old.t == 1 && new.t > 1;
                let kind = if fixing { CasKind::Fix } else { CasKind::Reconcile };
                if env.cas_reg(me, old, new, kind) {
                    self.solo = new.is_solo();
                    if fixing {
                        env.event(Event::Fix { word: new });
                        self.goto(Pc::StoreG { word: new })
                    } else {
                        env.event(Event::Reconcile { before: old, after: new });
                        self.goto(Pc::Reconcile)
                    }
                } else {
                    self.goto(Pc::Reconcile)
                }
            }
            Pc::StoreG { word } => {
                env.store_g(usize::from(word.t) - 1);
                self.goto(Pc::Publish { word })
            }
            Pc::Publish { word } => {
                let task = self.held.take().expect("held task");
                let id = self.fresh_id();
                let record = Record { task: task.clone(), id, team: word.t, n: word.n };
                env.store_slot(Some(record));
                env.event(Event::Publish { task: task.clone(), id, team: word.t, n: word.n });
                self.published = true;
                self.solo = false;
                self.fails = 0;
                let team = usize::from(word.t);
                let local_id = env.topology().local_id(me, me, team).expect("coordinator is in its team");
                Step::Run(Assignment { task, team, local_id, coord: me, record: Some(id) })
            }

            Pc::MemberSlot => {
                let c = self.c;
                match env.load_slot(c, self.last_exec) {
                    Some(rec) if rec.id != self.last_exec && env.topology().in_team(c, me, usize::from(rec.team)) => {
                        self.grabbed = Some(rec);
                        self.goto(Pc::MemberDec)
                    }
                    _ => self.goto(Pc::MemberReg),
                }
            }
            Pc::MemberDec => {
                let rec = self.grabbed.take().expect("grabbed record");
                let c = self.c;
                env.dec_g(c);
                self.last_exec = rec.id;
                self.fails = 0;
                let team = usize::from(rec.team);
                let local_id = env.topology().local_id(c, me, team).expect("member is in its team");
                Step::Run(Assignment { task: rec.task, team, local_id, coord: c, record: Some(rec.id) })
            }
            Pc::MemberReg => {
                let c = self.c;
                let word = env.load_reg(c);
                let topo = env.topology();
                if word.t > 1 && topo.in_team(c, me, usize::from(word.t)) {
                    // Locked into a running team until it is reshaped.
                    return self.backoff();
                }
                if word.n != self.cn {
                    return self.goto(Pc::Detach);
                }
                if !self.counted {
                    if word.t > 1 || word.r <= 1 || !topo.overlap(c, me, usize::from(word.r)) {
                        return self.goto(Pc::Detach);
                    }
                    if topo.in_team(c, me, usize::from(word.r)) && word.a < word.r && !stop {
                        return self.goto(Pc::MemberUpgrade { old: word });
                    }
                }
                self.goto(Pc::MemberLowest { word })
            }
            Pc::MemberUpgrade { old } => {
                let c = self.c;
                let new = old.try_acquire_delta(1).expect("a < r");
                if env.cas_reg(c, old, new, CasKind::Register) {
                    env.event(Event::Register { coord: c, word: new });
                    self.counted = true;
                }
                self.goto(Pc::Top)
            }
            Pc::MemberLowest { word } => match env.lowest_nonempty() {
                Some(level) => self.goto(Pc::MemberPop { word, level: level as u8 }),
                None if stop => self.goto(Pc::MemberLeave { word }),
                None => self.goto(Pc::PollCoord { cid: self.c as u16, r: word.r, level: 0 }),
            },
            Pc::MemberPop { word, level } => match env.pop_bottom(usize::from(level)) {
                Some(task) => {
                    let r = env.requirement(&task);
                    let beats = (r, me) < (usize::from(word.r), self.c);
                    self.own = Some(task);
                    self.goto(Pc::MemberPushBack { word, leave: beats || stop })
                }
                None => self.goto(Pc::MemberLowest { word }),
            },
            Pc::MemberPushBack { word, leave } => {
                let task = self.own.take().expect("own task");
                env.push_bottom(task);
                if leave {
                    self.goto(Pc::MemberLeave { word })
                } else {
                    self.goto(Pc::PollCoord { cid: self.c as u16, r: word.r, level: 0 })
                }
            }
            Pc::MemberLeave { word } => {
                if !self.counted {
                    return self.goto(Pc::Detach);
                }
                let c = self.c;
                let new = word.try_acquire_delta(-1).expect("counted member above team size");
                if env.cas_reg(c, word, new, CasKind::Deregister) {
                    env.event(Event::Deregister { coord: c, word: new });
                    self.counted = false;
                    self.goto(Pc::Detach)
                } else {
                    self.goto(Pc::Top)
                }
            }
            Pc::Detach => {
                let old = self.c;
                env.store_coord(me);
                env.event(Event::Leave { coord: old });
                self.c = me;
                self.counted = false;
                self.goto(Pc::Top)
            }

            Pc::PollCoord { cid, r, mut level } => {
                let topo = env.topology();
                let top = topo
                    .level_for_requirement(usize::from(cid), usize::from(r))
                    .unwrap_or(topo.partner_levels());
                while usize::from(level) < top {
                    if let Some(x) = env.partner(usize::from(level)) {
                        let xc = env.load_coord(x);
                        return self.goto(Pc::PollReg { cid, r, level, x: x as u16, xc: xc as u16 });
                    }
                    level += 1;
                }
                self.backoff()
            }
            Pc::PollReg { cid, r, level, x, xc } => {
                let (cid_u, r_u, x_u, xc_u) = (usize::from(cid), usize::from(r), usize::from(x), usize::from(xc));
                let xr = env.load_reg(xc_u);
                let next = Pc::PollCoord { cid, r, level: level + 1 };
                match poll_decision(env.topology(), me, cid_u, r_u, xc_u, xr) {
                    PollMove::Skip => self.goto(next),
                    PollMove::Win => {
                        env.event(Event::Conflict { winner: (r_u, cid_u), loser: (usize::from(xr.r), xc_u) });
                        self.goto(next)
                    }
                    PollMove::Switch => {
                        env.event(Event::Conflict { winner: (usize::from(xr.r), xc_u), loser: (r_u, cid_u) });
                        let was_coord = self.c == me;
                        if self.held.is_some() {
                            return self.goto(Pc::SwitchPushHeld { xc });
                        }
                        self.goto(Pc::SwitchOld { xc, was_coord })
                    }
                    PollMove::Wait => {
                        env.event(Event::Conflict { winner: (usize::from(xr.r), xc_u), loser: (r_u, cid_u) });
                        self.backoff()
                    }
                    PollMove::Steal => {
                        match Self::poll_victim_top(env.topology(), me, x_u, r_u) {
                            Some(vlevel) => self.goto(Pc::PollLen {
                                mode: StealMode::Poll { cid, r, level },
                                x,
                                vlevel: vlevel as u8,
                            }),
                            None => self.goto(next),
                        }
                    }
                }
            }
            Pc::PollLen { mode, x, vlevel } => {
                let len = env.level_len(usize::from(x), usize::from(vlevel));
                let StealMode::Poll { cid, r, level } = mode else { unreachable!() };
                if len == 0 {
                    if vlevel == 0 {
                        return self.goto(Pc::PollCoord { cid, r, level: level + 1 });
                    }
                    return self.goto(Pc::PollLen { mode, x, vlevel: vlevel - 1 });
                }
                let take = self.steal_cap(usize::from(level), len);
                self.goto(Pc::PollPushHeld { mode, x, vlevel, take })
            }
            Pc::PollPushHeld { mode, x, vlevel, take } => {
                if let Some(task) = self.held.take() {
                    env.push_bottom(task);
                    self.pc = Pc::StealPop { mode, x, vlevel, left: take };
                    return Step::Continue;
                }
                // Nothing held; the pop itself is this step.
                self.step_steal_pop(env, mode, x, vlevel, take)
            }

            Pc::SwitchPushHeld { xc } => {
                let task = self.held.take().expect("held task");
                env.push_bottom(task);
                self.goto(Pc::SwitchOld { xc, was_coord: true })
            }
            Pc::SwitchOld { xc, was_coord } => {
                if self.c == me || !self.counted {
                    return self.goto(Pc::SwitchNew { xc, was_coord });
                }
                let c = self.c;
                let word = env.load_reg(c);
                if word.t > 1 && env.topology().in_team(c, me, usize::from(word.t)) {
                    return self.backoff();
                }
                if word.n != self.cn {
                    self.counted = false;
                    return self.goto(Pc::SwitchNew { xc, was_coord });
                }
                self.goto(Pc::SwitchOldCas { xc, old: word })
            }
            Pc::SwitchOldCas { xc, old } => {
                let c = self.c;
                let new = old.try_acquire_delta(-1).expect("counted member above team size");
                if env.cas_reg(c, old, new, CasKind::Deregister) {
                    env.event(Event::Deregister { coord: c, word: new });
                    self.counted = false;
                    self.goto(Pc::SwitchNew { xc, was_coord: false })
                } else {
                    self.goto(Pc::SwitchOld { xc, was_coord: false })
                }
            }
            Pc::SwitchNew { xc, was_coord } => {
                let xc_u = usize::from(xc);
                let word = env.load_reg(xc_u);
                match join_mode(env.topology(), me, xc_u, word) {
                    Join::Count => self.goto(Pc::SwitchNewCas { xc, old: word, was_coord }),
                    Join::Silent => {
                        env.event(Event::Silent { coord: xc_u, n: word.n });
                        self.counted = false;
                        self.cn = word.n;
                        self.goto(Pc::SwitchStore { xc, was_coord })
                    }
                    Join::No if self.c != me => self.goto(Pc::Detach),
                    Join::No => self.backoff(),
                }
            }
            Pc::SwitchNewCas { xc, old, was_coord } => {
                let xc_u = usize::from(xc);
                let new = old.try_acquire_delta(1).expect("a < r");
                if env.cas_reg(xc_u, old, new, CasKind::Register) {
                    env.event(Event::Register { coord: xc_u, word: new });
                    self.c = xc_u;
                    self.counted = true;
                    self.cn = new.n;
                    self.goto(Pc::SwitchStore { xc, was_coord })
                } else {
                    self.goto(Pc::SwitchNew { xc, was_coord })
                }
            }
            Pc::SwitchStore { xc, was_coord } => {
                env.store_coord(usize::from(xc));
                self.c = usize::from(xc);
                if was_coord && !self.solo {
                    self.goto(Pc::SwitchReset)
                } else {
                    self.goto(Pc::Top)
                }
            }
            Pc::SwitchReset => {
                let word = env.load_reg(me);
                if word.is_solo() {
                    self.solo = true;
                    self.goto(Pc::Top)
                } else {
                    self.goto(Pc::SwitchResetCas { old: word })
                }
            }
            Pc::SwitchResetCas { old } => {
                let new = old.reset_to_solo();
                if env.cas_reg(me, old, new, CasKind::Reset) {
                    env.event(Event::Reconcile { before: old, after: new });
                    self.solo = true;
                    self.goto(Pc::Top)
                } else {
                    self.goto(Pc::SwitchReset)
                }
            }

            Pc::EmptyReg => {
                let word = env.load_reg(me);
                if word.is_solo() {
                    self.solo = true;
                    self.goto(Pc::SweepCoord { level: 0 })
                } else {
                    self.goto(Pc::EmptyCas { old: word })
                }
            }
            Pc::EmptyCas { old } => {
                let new = old.reset_to_solo();
                if env.cas_reg(me, old, new, CasKind::Reset) {
                    env.event(Event::Reconcile { before: old, after: new });
                    self.solo = true;
                    self.goto(Pc::SweepCoord { level: 0 })
                } else {
                    self.goto(Pc::EmptyReg)
                }
            }
            Pc::SweepCoord { mut level } => {
                let levels = env.topology().partner_levels();
                while usize::from(level) < levels {
                    if let Some(x) = env.partner(usize::from(level)) {
                        let xc = env.load_coord(x);
                        return self.goto(Pc::SweepReg { level, x: x as u16, xc: xc as u16 });
                    }
                    level += 1;
                }
                self.goto(Pc::SweepEnd)
            }
            Pc::SweepReg { level, x, xc } => {
                let xc_u = usize::from(xc);
                let word = env.load_reg(xc_u);
                match join_mode(env.topology(), me, xc_u, word) {
                    Join::Count => self.goto(Pc::SweepJoin { level, x, xc, old: word }),
                    Join::Silent => self.goto(Pc::SweepSilent { xc, n: word.n }),
                    Join::No => self.goto(Pc::SweepLen { level, x, vlevel: level }),
                }
            }
            Pc::SweepJoin { level, x, xc, old } => {
                if self.unidle(env) {
                    self.pc = Pc::SweepJoin { level, x, xc, old };
                    return Step::Continue;
                }
                let xc_u = usize::from(xc);
                let new = old.try_acquire_delta(1).expect("a < r");
                if env.cas_reg(xc_u, old, new, CasKind::Register) {
                    env.event(Event::Register { coord: xc_u, word: new });
                    self.c = xc_u;
                    self.counted = true;
                    self.cn = new.n;
                    self.fails = 0;
                    self.goto(Pc::SwitchStore { xc, was_coord: false })
                } else {
                    self.goto(Pc::SweepReg { level, x, xc })
                }
            }
            Pc::SweepSilent { xc, n } => {
                if self.unidle(env) {
                    self.pc = Pc::SweepSilent { xc, n };
                    return Step::Continue;
                }
                let xc_u = usize::from(xc);
                env.store_coord(xc_u);
                env.event(Event::Silent { coord: xc_u, n });
                self.c = xc_u;
                self.counted = false;
                self.cn = n;
                self.fails = 0;
                self.goto(Pc::Top)
            }
            Pc::SweepLen { level, x, vlevel } => {
                let len = env.level_len(usize::from(x), usize::from(vlevel));
                if len == 0 {
                    if vlevel == 0 {
                        return self.goto(Pc::SweepCoord { level: level + 1 });
                    }
                    return self.goto(Pc::SweepLen { level, x, vlevel: vlevel - 1 });
                }
                let left = self.steal_cap(usize::from(level), len);
                self.goto(Pc::StealPop { mode: StealMode::Sweep { level }, x, vlevel, left })
            }
            Pc::StealPop { mode, x, vlevel, left } => {
                if self.unidle(env) {
                    self.pc = Pc::StealPop { mode, x, vlevel, left };
                    return Step::Continue;
                }
                self.step_steal_pop(env, mode, x, vlevel, left)
            }
            Pc::StealPush { mode, x, vlevel, left } => {
                let task = self.pending.take().expect("pending stolen task");
                env.push_bottom(task);
                if left == 0 {
                    self.goto(Pc::StealDone { mode })
                } else {
                    self.goto(Pc::StealPop { mode, x, vlevel, left })
                }
            }
            Pc::StealDone { mode } => self.steal_done(env, mode),
            Pc::SweepEnd => {
                self.fails = (self.fails + 1).min(self.idle_sweeps);
                if self.idle {
                    return self.goto(Pc::IdleCheck);
                }
                if self.fails >= self.idle_sweeps && !self.waiting {
                    env.idle_enter();
                    env.event(Event::Idle { on: true });
                    self.idle = true;
                    return self.goto(Pc::IdleCount);
                }
                self.backoff()
            }
            Pc::IdleCheck => {
                if env.terminated() {
                    return self.goto(Pc::Done);
                }
                self.goto(Pc::IdleCount)
            }
            Pc::IdleCount => {
                if env.idle_count() == env.topology().p() {
                    self.goto(Pc::Confirm { worker: 0 })
                } else {
                    self.backoff()
                }
            }
            Pc::Confirm { worker } => {
                if !env.quiescent(usize::from(worker)) {
                    return self.backoff();
                }
                if usize::from(worker) + 1 == env.topology().p() {
                    self.goto(Pc::Terminate)
                } else {
                    self.goto(Pc::Confirm { worker: worker + 1 })
                }
            }
            Pc::Terminate => {
                env.set_terminated();
                env.event(Event::Terminate);
                self.goto(Pc::Done)
            }
            Pc::Done => {
                self.pc = Pc::Done;
                Step::Terminated
            }
        }
    }

    fn step_steal_pop<E: Env<Task = T>>(&mut self, env: &mut E, mode: StealMode, x: u16, vlevel: u8, left: u16) -> Step<T> {
        match env.pop_top(usize::from(x), usize::from(vlevel)) {
            Some(task) => {
                env.event(Event::Steal { victim: usize::from(x), level: usize::from(vlevel) });
                let left = left - 1;
                match self.stolen.replace(task) {
                    Some(prev) => {
                        self.pending = Some(prev);
                        self.goto(Pc::StealPush { mode, x, vlevel, left })
                    }
                    None if left == 0 => self.goto(Pc::StealDone { mode }),
                    None => self.goto(Pc::StealPop { mode, x, vlevel, left }),
                }
            }
            None => self.goto(Pc::StealDone { mode }),
        }
    }

    /// Finishes a steal. In the sweep the last task becomes our candidate;
    /// while polling it joins our queues like the rest. Costs a push in the
    /// polling case, nothing otherwise.
    fn steal_done<E: Env<Task = T>>(&mut self, env: &mut E, mode: StealMode) -> Step<T> {
        match (mode, self.stolen.take()) {
            (StealMode::Sweep { .. }, Some(task)) => {
                self.held = Some(task);
                self.fails = 0;
                self.goto(Pc::Reconcile)
            }
            (StealMode::Sweep { level }, None) => self.goto(Pc::SweepCoord { level: level + 1 }),
            (StealMode::Poll { .. }, Some(task)) => {
                env.push_bottom(task);
                self.goto(Pc::Top)
            }
            (StealMode::Poll { cid, r, level }, None) => {
                if self.held.is_none() && self.c == self.me {
                    // The held task went back to the queue; pick it up again.
                    return self.goto(Pc::Top);
                }
                self.goto(Pc::PollCoord { cid, r, level: level + 1 })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(r: u16, a: u16, t: u16, n: u16) -> Word {
        Word::new(r, a, t, n)
    }

    #[test]
    fn join_modes() {
        let topo = Topology::uniform(8).unwrap();
        assert_eq!(join_mode(&topo, 5, 4, w(4, 1, 1, 0)), Join::Count);
        assert_eq!(join_mode(&topo, 5, 4, w(4, 4, 1, 0)), Join::No);
        assert_eq!(join_mode(&topo, 5, 4, w(4, 2, 4, 0)), Join::No);
        assert_eq!(join_mode(&topo, 2, 4, w(4, 1, 1, 0)), Join::No);
        // r = 3 around 4 is {4, 5, 6}; 7 waits silently.
        assert_eq!(join_mode(&topo, 7, 4, w(3, 1, 1, 0)), Join::Silent);
        assert_eq!(join_mode(&topo, 6, 4, w(3, 1, 1, 0)), Join::Count);
        assert_eq!(join_mode(&topo, 4, 4, w(3, 1, 1, 0)), Join::No);
        assert_eq!(join_mode(&topo, 5, 4, w(1, 1, 1, 0)), Join::No);
    }

    #[test]
    fn reconcile_plans() {
        let topo = Topology::uniform(8).unwrap();
        assert_eq!(reconcile(&topo, 0, w(1, 1, 1, 0), 1), Plan::Run);
        assert_eq!(reconcile(&topo, 0, w(4, 4, 1, 0), 4), Plan::Fix(w(4, 4, 4, 0)));
        assert_eq!(reconcile(&topo, 0, w(4, 2, 1, 0), 4), Plan::Poll);
        assert_eq!(reconcile(&topo, 0, w(4, 4, 4, 3), 4), Plan::Publish);
        assert_eq!(reconcile(&topo, 0, w(4, 4, 4, 3), 2), Plan::Adjust(w(2, 2, 2, 4)));
        assert_eq!(reconcile(&topo, 0, w(4, 4, 4, 3), 8), Plan::Adjust(w(8, 1, 1, 4)));
        assert_eq!(reconcile(&topo, 0, w(4, 4, 4, 3), 1), Plan::Adjust(w(1, 1, 1, 4)));
        assert_eq!(reconcile(&topo, 0, w(2, 2, 1, 3), 4), Plan::Adjust(w(4, 2, 1, 3)));
        assert_eq!(reconcile(&topo, 0, w(4, 2, 1, 3), 2), Plan::Adjust(w(2, 1, 1, 4)));
        assert_eq!(reconcile(&topo, 0, w(4, 2, 1, 3), 1), Plan::Adjust(w(1, 1, 1, 4)));
    }

    #[test]
    fn growth_that_moves_the_window_opens_an_epoch() {
        let topo = Topology::uniform(8).unwrap();
        // Around 4, r = 3 is {4, 5, 6} but r = 5 is {0, .., 4}.
        assert!(!topo.team_grows_in_place(4, 3, 5));
        assert_eq!(spawn_transition(&topo, 4, w(3, 2, 1, 0), 5), Ok(w(5, 1, 1, 1)));
        assert_eq!(reconcile(&topo, 4, w(3, 2, 1, 0), 5), Plan::Adjust(w(5, 1, 1, 1)));
        assert_eq!(spawn_transition(&topo, 0, w(2, 2, 1, 0), 4), Ok(w(4, 2, 1, 0)));
        assert_eq!(spawn_transition(&topo, 0, w(1, 1, 1, 0), 1), Ok(w(1, 1, 1, 0)));
        assert_eq!(spawn_transition(&topo, 0, w(4, 3, 1, 0), 2), Ok(w(2, 1, 1, 1)));
    }

    #[test]
    fn poll_decisions() {
        let topo = Topology::uniform(8).unwrap();
        // Equal r, partner's coordinator has the smaller id and room.
        assert_eq!(poll_decision(&topo, 2, 2, 4, 0, w(4, 2, 1, 0)), PollMove::Switch);
        // We are the smaller one.
        assert_eq!(poll_decision(&topo, 0, 0, 4, 2, w(4, 2, 1, 0)), PollMove::Win);
        // Partner's team is smaller and lies elsewhere: help drain it.
        assert_eq!(poll_decision(&topo, 0, 0, 4, 2, w(2, 1, 1, 0)), PollMove::Steal);
        // Smaller team containing us.
        assert_eq!(poll_decision(&topo, 1, 3, 4, 0, w(2, 1, 1, 0)), PollMove::Switch);
        // Smaller but full.
        assert_eq!(poll_decision(&topo, 1, 3, 4, 0, w(2, 2, 2, 0)), PollMove::Wait);
        assert_eq!(poll_decision(&topo, 1, 3, 4, 3, w(2, 1, 1, 0)), PollMove::Skip);
        assert_eq!(poll_decision(&topo, 0, 0, 4, 1, w(1, 1, 1, 0)), PollMove::Steal);
    }
}

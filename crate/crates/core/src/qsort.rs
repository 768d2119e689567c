//! Quicksort variants used as the benchmark workload.
//!
//! * [`seq_qsort`]: plain sequential Quicksort with a library-sort cutoff.
//! * [`fork_sort`]: task-parallel Quicksort, one `r = 1` task per span.
//! * [`mm_sort`]: mixed-mode Quicksort. Large spans are partitioned by a
//!   team of `np` threads with [`PartitionTeam`]; `np` comes from
//!   [`best_np`] and shrinks as spans get smaller, falling back to the
//!   fork variant at `np = 1`.
//!
//! The team partitioner splits the span (pivot excluded) into blocks taken
//! alternately from both ends. Each member pairs a left block with a right
//! block and swaps misplaced elements until one of them is neutralized
//! (left block all `<= pivot`, right block all `>= pivot`), then fetches a
//! fresh block for that side. When blocks run out, members hand their
//! unfinished block to the other side through a one-slot exchanger or leave
//! it behind. Local id 0 finally gathers the unfinished blocks next to the
//! untouched middle and partitions that range sequentially.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scheduler::{run, RunReport, SchedulerConfig, TaskCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SortConfig {
    /// Elements per block in team partitioning.
    pub block_size: usize,
    /// Spans shorter than this are handed to the library sort.
    pub cutoff: usize,
    /// Minimum blocks per partitioning thread, see [`best_np`].
    pub blocks_per_thread: usize,
}

impl Default for SortConfig {
    fn default() -> Self {
        SortConfig { block_size: 4096, cutoff: 512, blocks_per_thread: 128 }
    }
}

impl SortConfig {
    /// Checks the bounds and that a block of `T` spans whole cache lines.
    pub fn validate<T>(&self) -> Result<()> {
        if self.block_size == 0 || self.cutoff == 0 || self.blocks_per_thread == 0 {
            return Err(Error::Config("block size, cutoff and blocks per thread must be positive".into()));
        }
        let size = std::mem::size_of::<T>();
        if size > 0 && size <= 64 && 64 % size == 0 && (self.block_size * size) % 64 != 0 {
            return Err(Error::Config(format!(
                "block size {} is not a whole number of cache lines of {size}-byte elements",
                self.block_size
            )));
        }
        Ok(())
    }
}

/// Largest power of two `np <= p` with `n >= np * blocks_per_thread *
/// block_size`, at least 1.
pub fn best_np(n: usize, cfg: &SortConfig, p: usize) -> usize {
    let per = cfg.blocks_per_thread.saturating_mul(cfg.block_size).max(1);
    let mut np = 1;
    while np * 2 <= p && n / per >= np * 2 {
        np *= 2;
    }
    np
}

fn median_of_three<T: Ord>(d: &[T]) -> usize {
    let (a, b, c) = (0, d.len() / 2, d.len() - 1);
    if d[a] < d[b] {
        if d[b] < d[c] {
            b
        } else if d[a] < d[c] {
            c
        } else {
            a
        }
    } else if d[a] < d[c] {
        a
    } else if d[b] < d[c] {
        c
    } else {
        b
    }
}

/// Moves the median of first, middle and last to the end.
pub fn pivot_to_end<T: Ord>(d: &mut [T]) {
    if d.len() > 1 {
        let m = median_of_three(d);
        let last = d.len() - 1;
        d.swap(m, last);
    }
}

/// Hoare-style split around the value `pv`. Returns `q` with `d[..q] <= pv`
/// and `d[q..] >= pv`. Elements equal to `pv` stop both scans, so runs of
/// equal keys split near the middle.
pub fn partition_by_value<T: Ord>(d: &mut [T], pv: &T) -> usize {
    let (mut i, mut j) = (0, d.len());
    loop {
        while i < j && d[i] < *pv {
            i += 1;
        }
        while i < j && d[j - 1] > *pv {
            j -= 1;
        }
        if i >= j {
            return i;
        }
        if i + 1 == j {
            // d[i] equals the pivot.
            return j;
        }
        d.swap(i, j - 1);
        i += 1;
        j -= 1;
    }
}

/// Partitions around the last element and moves it to its final place `q`.
pub fn partition_pivot_last<T: Ord>(d: &mut [T]) -> usize {
    let m = d.len() - 1;
    let (rest, pv) = d.split_at_mut(m);
    let q = partition_by_value(rest, &pv[0]);
    d.swap(q, m);
    q
}

/// Sequential partition with a median-of-three pivot. Returns the pivot's
/// final index.
pub fn partition<T: Ord>(d: &mut [T]) -> usize {
    pivot_to_end(d);
    partition_pivot_last(d)
}

pub fn seq_qsort<T: Ord>(mut d: &mut [T], cfg: &SortConfig) {
    loop {
        if d.len() < cfg.cutoff.max(2) {
            d.sort_unstable();
            return;
        }
        let q = partition(d);
        let (left, rest) = d.split_at_mut(q);
        let right = &mut rest[1..];
        // Recurse into the smaller side to bound the stack.
        if left.len() < right.len() {
            seq_qsort(left, cfg);
            d = right;
        } else {
            seq_qsort(right, cfg);
            d = left;
        }
    }
}

/// Which side of a two-block neutralization ran out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neutralized {
    Left,
    Right,
    Both,
}

/// Swaps elements `> pv` in `left[*li..]` with elements `< pv` in
/// `right[*ri..]` until one block is exhausted. On return `left[..*li]` is
/// `<= pv` and `right[..*ri]` is `>= pv`.
pub fn neutralize<T: Ord>(left: &mut [T], li: &mut usize, right: &mut [T], ri: &mut usize, pv: &T) -> Neutralized {
    loop {
        while *li < left.len() && left[*li] <= *pv {
            *li += 1;
        }
        while *ri < right.len() && right[*ri] >= *pv {
            *ri += 1;
        }
        match (*li == left.len(), *ri == right.len()) {
            (true, true) => return Neutralized::Both,
            (true, false) => return Neutralized::Left,
            (false, true) => return Neutralized::Right,
            (false, false) => {
                std::mem::swap(&mut left[*li], &mut right[*ri]);
                *li += 1;
                *ri += 1;
            }
        }
    }
}

/// Raw view of a span shared by the tasks that sort it. Users guarantee
/// that concurrent accesses touch disjoint elements.
struct Span<T> {
    ptr: *mut T,
    len: usize,
}

impl<T> Clone for Span<T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Span<T> {}

unsafe impl<T: Send> Send for Span<T> {}
unsafe impl<T: Send> Sync for Span<T> {}

impl<T> Span<T> {
    fn new(d: &mut [T]) -> Self {
        Span { ptr: d.as_mut_ptr(), len: d.len() }
    }

    /// # Safety
    /// No other live reference may overlap `start..start + len`.
    #[allow(clippy::mut_from_ref)]
    unsafe fn slice(&self, start: usize, len: usize) -> &mut [T] {
        debug_assert!(start + len <= self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(start), len)
    }

    /// Sub-spans left and right of index `q`, which is excluded.
    fn split(self, q: usize) -> (Span<T>, Span<T>) {
        let left = Span { ptr: self.ptr, len: q };
        let right = Span { ptr: unsafe { self.ptr.add(q + 1) }, len: self.len - q - 1 };
        (left, right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

const EMPTY: u64 = 0;

fn pack(block: usize, pos: usize) -> u64 {
    ((block as u64 + 1) << 32) | pos as u64
}

fn unpack(v: u64) -> (usize, usize) {
    (((v >> 32) - 1) as usize, (v & 0xffff_ffff) as usize)
}

/// Shared state of one team partitioning a span whose pivot sits at the
/// last position.
pub struct PartitionTeam {
    np: usize,
    block: usize,
    taken: AtomicUsize,
    next: [AtomicUsize; 2],
    /// One parked unfinished block per side, `(index, position)` packed.
    exchanger: [AtomicU64; 2],
    leftover: Mutex<Vec<(Side, usize)>>,
    arrived: AtomicUsize,
}

impl PartitionTeam {
    pub fn new(np: usize, block: usize) -> Self {
        assert!(np >= 1 && block >= 1);
        PartitionTeam {
            np,
            block,
            taken: AtomicUsize::new(0),
            next: [AtomicUsize::new(0), AtomicUsize::new(0)],
            exchanger: [AtomicU64::new(EMPTY), AtomicU64::new(EMPTY)],
            leftover: Mutex::new(Vec::new()),
            arrived: AtomicUsize::new(0),
        }
    }

    fn acquire(&self, side: Side, blocks: usize) -> Option<usize> {
        if self.taken.fetch_add(1, SeqCst) < blocks {
            Some(self.next[side as usize].fetch_add(1, SeqCst))
        } else {
            None
        }
    }

    fn start(&self, side: Side, idx: usize, m: usize) -> usize {
        match side {
            Side::Left => idx * self.block,
            Side::Right => m - (idx + 1) * self.block,
        }
    }

    /// Runs member `local_id`'s share. Every member must call this exactly
    /// once; local id 0 returns the pivot's final index after all members
    /// finished, the others return `None` right away.
    ///
    /// # Safety
    /// `data` must stay valid and untouched by anyone but the team until
    /// local id 0 returns.
    unsafe fn member<T: Ord>(&self, data: Span<T>, local_id: usize) -> Option<usize> {
        let n = data.len;
        let m = n - 1;
        let pv = &*data.ptr.add(m);
        let b = self.block;
        let blocks = m / b;
        let block = |side: Side, idx: usize| data.slice(self.start(side, idx, m), b);

        // Phase 1: neutralize pairs of fresh blocks.
        let mut left = self.acquire(Side::Left, blocks).map(|i| (i, 0));
        let mut right = if left.is_some() { self.acquire(Side::Right, blocks).map(|i| (i, 0)) } else { None };
        // Phase 2: trade unfinished blocks through the exchanger.
        loop {
            match (left, right) {
                (Some((li, mut lp)), Some((ri, mut rp))) => {
                    let done = neutralize(block(Side::Left, li), &mut lp, block(Side::Right, ri), &mut rp, pv);
                    left = Some((li, lp));
                    right = Some((ri, rp));
                    if done != Neutralized::Right {
                        left = self.acquire(Side::Left, blocks).map(|i| (i, 0));
                    }
                    if done != Neutralized::Left {
                        right = self.acquire(Side::Right, blocks).map(|i| (i, 0));
                    }
                }
                (Some(l), None) => match self.trade(Side::Left, l) {
                    Some(r) => right = Some(r),
                    None => break,
                },
                (None, Some(r)) => match self.trade(Side::Right, r) {
                    Some(l) => left = Some(l),
                    None => break,
                },
                (None, None) => break,
            }
        }
        if local_id != 0 {
            self.arrived.fetch_add(1, SeqCst);
            return None;
        }
        while self.arrived.load(SeqCst) + 1 < self.np {
            std::thread::yield_now();
        }
        // Phase 3: gather unfinished blocks around the middle and finish
        // sequentially.
        let mut unfinished = std::mem::take(&mut *self.leftover.lock().expect("leftover lock"));
        for side in [Side::Left, Side::Right] {
            let v = self.exchanger[side as usize].swap(EMPTY, SeqCst);
            if v != EMPTY {
                unfinished.push((side, unpack(v).0));
            }
        }
        let mut bounds = [0; 2];
        for side in [Side::Left, Side::Right] {
            let count = self.next[side as usize].load(SeqCst);
            let mut mine: Vec<usize> =
                unfinished.iter().filter(|(s, _)| *s == side).map(|&(_, i)| i).collect();
            let k = mine.len();
            let tail = count - k;
            let outside: Vec<usize> = mine.iter().copied().filter(|&i| i < tail).collect();
            mine.sort_unstable();
            let free: Vec<usize> = (tail..count).filter(|i| mine.binary_search(i).is_err()).collect();
            for (&u, &f) in outside.iter().zip(&free) {
                block(side, u).swap_with_slice(block(side, f));
            }
            bounds[side as usize] = tail;
        }
        let lo = bounds[Side::Left as usize] * b;
        let hi = m - bounds[Side::Right as usize] * b;
        let q = lo + partition_by_value(data.slice(lo, hi - lo), pv);
        data.slice(0, n).swap(q, m);
        Some(q)
    }

    /// Holding an unfinished block on `side`, takes a parked block from the
    /// other side if there is one. Otherwise parks ours, or leaves it for
    /// the final phase if the slot is taken.
    fn trade(&self, side: Side, (idx, pos): (usize, usize)) -> Option<(usize, usize)> {
        let other = match side {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        };
        let v = self.exchanger[other as usize].swap(EMPTY, SeqCst);
        if v != EMPTY {
            return Some(unpack(v));
        }
        let slot = &self.exchanger[side as usize];
        if slot.compare_exchange(EMPTY, pack(idx, pos), SeqCst, SeqCst).is_err() {
            self.leftover.lock().expect("leftover lock").push((side, idx));
        }
        None
    }
}

/// Partitions `data` around its last element with `np` plain threads and
/// returns the pivot's final index. With `np = 1` this is exactly
/// [`partition_pivot_last`].
pub fn parallel_partition<T: Ord + Send + Sync>(data: &mut [T], np: usize, block: usize) -> usize {
    assert!(!data.is_empty());
    if np == 1 {
        return partition_pivot_last(data);
    }
    let team = PartitionTeam::new(np, block);
    let span = Span::new(data);
    std::thread::scope(|s| {
        for lid in 1..np {
            let team = &team;
            s.spawn(move || unsafe { team.member(span, lid) });
        }
        unsafe { team.member(span, 0) }.expect("local id 0 returns the split")
    })
}

fn fork_task<T: Ord + Send + Sync + 'static>(ctx: &TaskCtx<'_>, mut span: Span<T>, cfg: SortConfig) {
    loop {
        if span.len < cfg.cutoff.max(2) {
            unsafe { span.slice(0, span.len) }.sort_unstable();
            break;
        }
        let q = partition(unsafe { span.slice(0, span.len) });
        let (left, right) = span.split(q);
        ctx.spawn(1, move |ctx| fork_task(ctx, left, cfg)).expect("r = 1 always fits");
        span = right;
    }
    ctx.sync();
}

fn spawn_mm<T: Ord + Send + Sync + 'static>(ctx: &TaskCtx<'_>, span: Span<T>, cfg: SortConfig) {
    let np = best_np(span.len, &cfg, ctx.threads());
    if np == 1 {
        ctx.spawn(1, move |ctx| fork_task(ctx, span, cfg)).expect("r = 1 always fits");
        return;
    }
    // The spawner still owns the span, so it can place the pivot.
    pivot_to_end(unsafe { span.slice(0, span.len) });
    let team = Arc::new(PartitionTeam::new(np, cfg.block_size));
    ctx.spawn(np, move |ctx| mm_task(ctx, span, &team, cfg)).expect("np <= p");
}

fn mm_task<T: Ord + Send + Sync + 'static>(ctx: &TaskCtx<'_>, span: Span<T>, team: &PartitionTeam, cfg: SortConfig) {
    let Some(q) = (unsafe { team.member(span, ctx.local_id()) }) else { return };
    let (left, right) = span.split(q);
    spawn_mm(ctx, left, cfg);
    spawn_mm(ctx, right, cfg);
    ctx.sync();
}

/// Sorts with task-parallel Quicksort on the scheduler.
pub fn fork_sort<T: Ord + Send + Sync + 'static>(
    data: &mut [T],
    sched: &SchedulerConfig,
    cfg: &SortConfig,
) -> Result<RunReport> {
    cfg.validate::<T>()?;
    let span = Span::new(data);
    let cfg = *cfg;
    // `run` joins every worker before returning, so no task outlives `data`.
    run(sched, 1, move |ctx| fork_task(ctx, span, cfg))
}

/// Sorts with mixed-mode Quicksort on the scheduler.
pub fn mm_sort<T: Ord + Send + Sync + 'static>(
    data: &mut [T],
    sched: &SchedulerConfig,
    cfg: &SortConfig,
) -> Result<RunReport> {
    cfg.validate::<T>()?;
    let np = best_np(data.len(), cfg, sched.p);
    let span = Span::new(data);
    let cfg = *cfg;
    if np == 1 {
        return run(sched, 1, move |ctx| fork_task(ctx, span, cfg));
    }
    pivot_to_end(data);
    let team = Arc::new(PartitionTeam::new(np, cfg.block_size));
    run(sched, np, move |ctx| mm_task(ctx, span, &team, cfg))
}

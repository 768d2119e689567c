//! Per-worker task queues, one deque per level.
//!
//! The owner pushes and pops at the bottom through [`QueueSet`]; other
//! threads take from the top through the cloneable [`QueueStealers`] handle.
//! Each level is a growable lock-free Chase-Lev deque.

use crossbeam::deque::{Steal, Stealer, Worker};

use crate::error::{Error, Result};

/// Anything that knows how many threads it needs.
pub trait Requirement {
    fn requirement(&self) -> usize;
}

/// Level a task of requirement `r` belongs to, given the owner's effective
/// team sizes `n'_0 < n'_1 < ...` (trailing duplicates allowed).
pub fn queue_index_for_requirement(r: usize, sizes: &[usize]) -> Result<usize> {
    if r == 0 {
        return Err(Error::ZeroRequirement);
    }
    let top = sizes.last().copied().unwrap_or(0);
    sizes
        .iter()
        .position(|&n| n >= r)
        .ok_or(Error::InfeasibleRequirement { required: r, available: top })
}

/// Owner side of a worker's queues. Not `Sync`; only the owner touches it.
pub struct QueueSet<T> {
    levels: Vec<Worker<T>>,
    sizes: Vec<usize>,
}

/// Thief side of a worker's queues.
pub struct QueueStealers<T> {
    levels: Vec<Stealer<T>>,
}

impl<T> Clone for QueueStealers<T> {
    fn clone(&self) -> Self {
        QueueStealers { levels: self.levels.clone() }
    }
}

impl<T: Requirement> QueueSet<T> {
    /// One level per entry of `sizes`, the owner's effective team sizes.
    pub fn new(sizes: Vec<usize>) -> Self {
        let levels = sizes.iter().map(|_| Worker::new_lifo()).collect();
        QueueSet { levels, sizes }
    }

    pub fn stealers(&self) -> QueueStealers<T> {
        QueueStealers { levels: self.levels.iter().map(Worker::stealer).collect() }
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_for(&self, r: usize) -> Result<usize> {
        queue_index_for_requirement(r, &self.sizes)
    }

    /// Pushes at the bottom of the task's level and returns that level.
    pub fn push_bottom(&self, task: T) -> Result<usize> {
        let level = self.level_for(task.requirement())?;
        self.levels[level].push(task);
        Ok(level)
    }

    pub fn pop_bottom(&self, level: usize) -> Option<T> {
        self.levels[level].pop()
    }

    pub fn size(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(Worker::is_empty)
    }

    /// Lowest level holding at least one task.
    pub fn lowest_nonempty(&self) -> Option<usize> {
        self.levels.iter().position(|w| !w.is_empty())
    }
}

impl<T> QueueStealers<T> {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Removes the oldest task of a level. Spurious contention is retried, so
    /// `None` means the level was observed empty.
    pub fn pop_top(&self, level: usize) -> Option<T> {
        loop {
            match self.levels[level].steal() {
                Steal::Success(task) => return Some(task),
                Steal::Empty => return None,
                Steal::Retry => std::hint::spin_loop(),
            }
        }
    }

    pub fn size(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(Stealer::is_empty)
    }
}

/// Moves up to `count` tasks one at a time from the top of `victim`'s
/// `level` to the bottom of `thief`'s matching levels. The last task taken is
/// not enqueued but handed back. Returns the number taken.
pub fn popappend<T: Requirement>(
    thief: &QueueSet<T>,
    victim: &QueueStealers<T>,
    level: usize,
    count: usize,
) -> (usize, Option<T>) {
    let mut taken = 0;
    let mut last: Option<T> = None;
    while taken < count {
        let Some(task) = victim.pop_top(level) else { break };
        if let Some(prev) = last.replace(task) {
            thief.push_bottom(prev).expect("stolen task fits the thief's levels");
        }
        taken += 1;
    }
    (taken, last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Arc;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    struct T {
        id: usize,
        r: usize,
    }

    impl Requirement for T {
        fn requirement(&self) -> usize {
            self.r
        }
    }

    fn t(id: usize, r: usize) -> T {
        T { id, r }
    }

    fn qs8() -> QueueSet<T> {
        QueueSet::new(vec![1, 2, 4, 8])
    }

    #[test]
    fn push_selects_level() {
        let qs = qs8();
        assert_eq!(qs.push_bottom(t(0, 1)), Ok(0));
        assert_eq!(qs.push_bottom(t(1, 4)), Ok(2));
        assert_eq!(qs.push_bottom(t(2, 1)), Ok(0));
        assert_eq!(qs.push_bottom(t(3, 2)), Ok(1));
        assert_eq!(qs.size(0), 2);
        assert_eq!(qs.size(1), 1);
        let st = qs.stealers();
        assert_eq!(st.pop_top(0), Some(t(0, 1)));
        assert_eq!(
            qs.push_bottom(t(9, 9)),
            Err(Error::InfeasibleRequirement { required: 9, available: 8 })
        );
    }

    #[test]
    fn bottom_and_top() {
        let qs = qs8();
        let st = qs.stealers();
        assert!(qs.is_empty());
        assert_eq!(qs.pop_bottom(0), None);
        assert_eq!(st.pop_top(0), None);
        qs.push_bottom(t(1, 1)).unwrap();
        assert!(!qs.is_empty());
        assert_eq!(qs.size(0), 1);
        qs.push_bottom(t(2, 1)).unwrap();
        assert_eq!(qs.pop_bottom(0), Some(t(2, 1)));
        assert_eq!(qs.pop_bottom(0), Some(t(1, 1)));
        assert!(qs.is_empty());
        qs.push_bottom(t(1, 1)).unwrap();
        qs.push_bottom(t(2, 1)).unwrap();
        assert_eq!(st.pop_top(0), Some(t(1, 1)));
        assert_eq!(qs.lowest_nonempty(), Some(0));
    }

    #[test]
    fn queue_index_examples() {
        assert_eq!(queue_index_for_requirement(1, &[1, 2, 4, 8]), Ok(0));
        assert_eq!(queue_index_for_requirement(8, &[1, 2, 4, 8]), Ok(3));
        assert_eq!(queue_index_for_requirement(3, &[1, 2, 3, 6]), Ok(2));
        assert_eq!(queue_index_for_requirement(5, &[1, 2, 4, 8]), Ok(3));
        assert_eq!(queue_index_for_requirement(0, &[1, 2]), Err(Error::ZeroRequirement));
        assert_eq!(queue_index_for_requirement(2, &[1, 1, 3]), Ok(2));
    }

    #[test]
    fn popappend_examples() {
        let victim = qs8();
        let thief = qs8();
        for id in 1..=4 {
            victim.push_bottom(t(id, 1)).unwrap();
        }
        let st = victim.stealers();
        let (n, last) = popappend(&thief, &st, 0, 2);
        assert_eq!((n, last), (2, Some(t(2, 1))));
        assert_eq!(thief.pop_bottom(0), Some(t(1, 1)));
        assert!(thief.is_empty());
        assert_eq!(victim.size(0), 2);
        assert_eq!(st.pop_top(0), Some(t(3, 1)));

        let victim = qs8();
        victim.push_bottom(t(1, 1)).unwrap();
        let (n, last) = popappend(&thief, &victim.stealers(), 0, 3);
        assert_eq!((n, last), (1, Some(t(1, 1))));
        assert!(thief.is_empty());

        assert_eq!(popappend(&thief, &victim.stealers(), 0, 2), (0, None));
    }

    #[test]
    fn popappend_keeps_victim_order() {
        let victim = qs8();
        let thief = qs8();
        for id in 0..6 {
            victim.push_bottom(t(id, 1)).unwrap();
        }
        let (n, last) = popappend(&thief, &victim.stealers(), 0, 4);
        assert_eq!((n, last.map(|x| x.id)), (4, Some(3)));
        let st = thief.stealers();
        let order: Vec<_> = std::iter::from_fn(|| st.pop_top(0)).map(|x| x.id).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn single_element_race() {
        for _ in 0..200 {
            let qs = qs8();
            qs.push_bottom(t(0, 1)).unwrap();
            let wins = Arc::new(AtomicUsize::new(0));
            let thieves: Vec<_> = (0..2)
                .map(|_| {
                    let st = qs.stealers();
                    let wins = wins.clone();
                    std::thread::spawn(move || {
                        if st.pop_top(0).is_some() {
                            wins.fetch_add(1, Ordering::SeqCst);
                        }
                    })
                })
                .collect();
            if qs.pop_bottom(0).is_some() {
                wins.fetch_add(1, Ordering::SeqCst);
            }
            for h in thieves {
                h.join().unwrap();
            }
            assert_eq!(wins.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn owner_and_thieves_see_every_task_once() {
        const N: usize = 20_000;
        let qs = qs8();
        let seen: Arc<Vec<AtomicUsize>> = Arc::new((0..N).map(|_| AtomicUsize::new(0)).collect());
        let done = Arc::new(AtomicBool::new(false));
        let thieves: Vec<_> = (0..3)
            .map(|_| {
                let st = qs.stealers();
                let seen = seen.clone();
                let done = done.clone();
                std::thread::spawn(move || loop {
                    match st.pop_top(0) {
                        Some(x) => {
                            seen[x.id].fetch_add(1, Ordering::SeqCst);
                        }
                        None if done.load(Ordering::SeqCst) => break,
                        None => std::thread::yield_now(),
                    }
                })
            })
            .collect();
        for id in 0..N {
            qs.push_bottom(t(id, 1)).unwrap();
            if id % 3 == 0 {
                if let Some(x) = qs.pop_bottom(0) {
                    seen[x.id].fetch_add(1, Ordering::SeqCst);
                }
            }
        }
        while let Some(x) = qs.pop_bottom(0) {
            seen[x.id].fetch_add(1, Ordering::SeqCst);
        }
        done.store(true, Ordering::SeqCst);
        for h in thieves {
            h.join().unwrap();
        }
        assert!(seen.iter().all(|c| c.load(Ordering::SeqCst) == 1));
    }
}

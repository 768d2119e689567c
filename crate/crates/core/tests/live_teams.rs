//! Mixed-requirement task trees on the threaded runtime.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use teamsteal::{run, SchedulerConfig, TaskCtx};

/// Task `i` needs `rs[i]` threads and spawns the tasks listed in `kids[i]`.
#[derive(Debug, Clone)]
struct Tree {
    rs: Vec<usize>,
    kids: Vec<Vec<usize>>,
}

fn tree(p: usize) -> impl Strategy<Value = Tree> {
    prop::collection::vec((1..=p, any::<prop::sample::Index>()), 1..40).prop_map(|nodes| {
        let mut kids = vec![Vec::new(); nodes.len()];
        for (i, (_, parent)) in nodes.iter().enumerate().skip(1) {
            kids[parent.index(i)].push(i);
        }
        Tree { rs: nodes.iter().map(|(r, _)| *r).collect(), kids }
    })
}

type Seen = Arc<Mutex<HashMap<usize, Vec<(usize, usize)>>>>;

fn body(ctx: &TaskCtx<'_>, id: usize, t: &Arc<Tree>, seen: &Seen) {
    seen.lock().unwrap().entry(id).or_default().push((ctx.team_size(), ctx.local_id()));
    if ctx.local_id() != 0 {
        return;
    }
    for &k in &t.kids[id] {
        let (t2, s2) = (t.clone(), seen.clone());
        ctx.spawn(t.rs[k], move |ctx| body(ctx, k, &t2, &s2)).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_task_runs_once_per_member(t in tree(4), p in prop::sample::select(vec![4usize, 3]), randomized: bool) {
        let rs: Vec<usize> = t.rs.iter().map(|&r| r.min(p)).collect();
        let t = Arc::new(Tree { rs, kids: t.kids });
        let seen: Seen = Arc::default();
        let cfg = SchedulerConfig { randomized, ..SchedulerConfig::with_threads(p) };
        let (t2, s2) = (t.clone(), seen.clone());
        run(&cfg, t.rs[0], move |ctx| body(ctx, 0, &t2, &s2)).unwrap();
        let seen = seen.lock().unwrap();
        prop_assert_eq!(seen.len(), t.rs.len());
        for (id, runs) in seen.iter() {
            let r = t.rs[*id];
            let mut lids: Vec<usize> = runs.iter().map(|&(team, lid)| { assert_eq!(team, r); lid }).collect();
            lids.sort_unstable();
            prop_assert_eq!(lids, (0..r).collect::<Vec<_>>());
        }
    }
}

#[test]
fn deep_recursion_with_sync_at_every_level() {
    fn fib(ctx: &TaskCtx<'_>, n: u32, acc: Arc<AtomicUsize>) {
        if n < 2 {
            acc.fetch_add(n as usize, SeqCst);
            return;
        }
        for m in [n - 1, n - 2] {
            let a = acc.clone();
            ctx.spawn(1, move |ctx| fib(ctx, m, a.clone())).unwrap();
        }
        ctx.sync();
    }
    for p in [1, 2, 4, 8] {
        let acc = Arc::new(AtomicUsize::new(0));
        let a = acc.clone();
        run(&SchedulerConfig::with_threads(p), 1, move |ctx| fib(ctx, 18, a.clone())).unwrap();
        assert_eq!(acc.load(SeqCst), 2584, "p={p}");
    }
}

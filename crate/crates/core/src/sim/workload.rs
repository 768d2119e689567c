//! Task trees for the simulator.
//!
//! Textual form: a preorder list of `depth:r` pairs separated by commas or
//! whitespace. Depth 0 entries are roots, seeded into worker 0's queues before
//! the run. Any other entry becomes a child of the closest preceding entry one
//! level up; children are spawned by local id 0 of their parent's team in
//! list order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkTask {
    pub r: usize,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pub tasks: Vec<WorkTask>,
    pub roots: Vec<usize>,
}

impl Workload {
    pub fn parse(text: &str) -> Result<Self> {
        let mut w = Workload::default();
        // Most recent task seen at each depth.
        let mut last_at: Vec<usize> = Vec::new();
        for token in text.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()) {
            let (d, r) = token
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("workload entry `{token}` is not depth:r")))?;
            let depth: usize = d.trim().parse().map_err(|_| Error::Config(format!("bad depth in `{token}`")))?;
            let r: usize = r.trim().parse().map_err(|_| Error::Config(format!("bad requirement in `{token}`")))?;
            if r == 0 {
                return Err(Error::ZeroRequirement);
            }
            let id = w.tasks.len();
            if depth == 0 {
                w.roots.push(id);
            } else {
                let parent = *last_at
                    .get(depth - 1)
                    .ok_or_else(|| Error::Config(format!("entry `{token}` has no parent at depth {}", depth - 1)))?;
                w.tasks[parent].children.push(id);
            }
            last_at.truncate(depth);
            last_at.push(id);
            w.tasks.push(WorkTask { r, children: Vec::new() });
        }
        Ok(w)
    }

    /// Independent root tasks with the given requirements.
    pub fn flat(rs: &[usize]) -> Self {
        Workload {
            tasks: rs.iter().map(|&r| WorkTask { r, children: Vec::new() }).collect(),
            roots: (0..rs.len()).collect(),
        }
    }

    /// A chain: each task spawns the next.
    pub fn chain(rs: &[usize]) -> Self {
        let mut w = Workload::default();
        for (i, &r) in rs.iter().enumerate() {
            if i == 0 {
                w.roots.push(0);
            } else {
                w.tasks[i - 1].children.push(i);
            }
            w.tasks.push(WorkTask { r, children: Vec::new() });
        }
        w
    }

    /// A random tree of `n` tasks for `p` threads, about half of them
    /// `r = 1`.
    pub fn random(seed: u64, n: usize, p: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(n);
        let mut depth = 0usize;
        for id in 0..n {
            let r = if p == 1 || rng.random_bool(0.5) { 1 } else { rng.random_range(2..=p) };
            depth = if id == 0 || rng.random_bool(0.05) { 0 } else { rng.random_range(1..=depth + 1) };
            entries.push(format!("{depth}:{r}"));
        }
        Workload::parse(&entries.join(",")).expect("generated workload is well formed")
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Back to the textual form.
    pub fn to_dsl(&self) -> String {
        fn walk(w: &Workload, id: usize, depth: usize, out: &mut Vec<String>) {
            out.push(format!("{depth}:{}", w.tasks[id].r));
            for &c in &w.tasks[id].children {
                walk(w, c, depth + 1, out);
            }
        }
        let mut out = Vec::new();
        for &root in &self.roots {
            walk(self, root, 0, &mut out);
        }
        out.join(",")
    }

    pub fn check_feasible(&self, p: usize) -> Result<()> {
        match self.tasks.iter().find(|t| t.r > p) {
            Some(t) => Err(Error::InfeasibleRequirement { required: t.r, available: p }),
            None => Ok(()),
        }
    }
}

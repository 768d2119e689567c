//! Team geometry.
//!
//! Threads are arranged in a hierarchy of levels with capacities
//! `n_0 = 1 < n_1 < ... < n_L = p`, each at most double the previous one. A
//! level-`l` block is split into a left child holding the first `n_{l-1}`
//! threads and a right child holding the rest, recursively, so threads are
//! packed left to right. With `p` a power of two and the default chain this
//! is exactly the bit-flip hierarchy: the level-`l` partner of `i` is
//! `i ^ (1 << l)` and a team of size `t` spans the `t`-aligned block around
//! its coordinator.
//!
//! Everything is precomputed by [`Topology::build`] and immutable afterwards.

use rand::Rng;

use crate::error::{Error, Result};

/// Inclusive range of thread ids.
pub type Bounds = (usize, usize);

/// Position of the most significant set bit.
pub fn msb(x: u64) -> Result<u32> {
    if x == 0 {
        return Err(Error::MsbOfZero);
    }
    Ok(63 - x.leading_zeros())
}

/// Default level chain for `p` threads: repeated ceiling halving from `p`
/// down to 1, reversed. For powers of two this is `1, 2, 4, ..., p`.
pub fn default_level_sizes(p: usize) -> Vec<usize> {
    let mut sizes = vec![p.max(1)];
    while *sizes.last().unwrap() > 1 {
        let last = *sizes.last().unwrap();
        sizes.push(last.div_ceil(2));
    }
    sizes.reverse();
    sizes
}

/// Checks the chain constraint `n_0 = 1`, `n_{l-1} < n_l <= 2 n_{l-1}`,
/// ending at `p`.
pub fn validate_level_sizes(p: usize, sizes: &[usize]) -> Result<()> {
    if p == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    if sizes.first() != Some(&1) {
        return Err(Error::Config(format!("level chain {sizes:?} must start at 1")));
    }
    if sizes.last() != Some(&p) {
        return Err(Error::Config(format!("level chain {sizes:?} must end at p = {p}")));
    }
    for pair in sizes.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next <= prev || next > 2 * prev {
            return Err(Error::Config(format!(
                "level chain {sizes:?} violates n[l-1] < n[l] <= 2 n[l-1] at {prev} -> {next}"
            )));
        }
    }
    Ok(())
}

/// Precomputed partner tables and level blocks for `p` threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    p: usize,
    level_sizes: Vec<usize>,
    /// `blocks[i][l]`: the level-`l` block containing thread `i`.
    blocks: Vec<Vec<Bounds>>,
    /// `partners[i][l]`: partner of `i` between the two halves of its
    /// level-`l+1` block.
    partners: Vec<Vec<Option<usize>>>,
    randomized: bool,
    seed: u64,
}

impl Topology {
    /// Builds the topology; `level_sizes` defaults to [`default_level_sizes`].
    pub fn build(p: usize, level_sizes: Option<&[usize]>, randomized: bool, seed: u64) -> Result<Self> {
        let level_sizes = match level_sizes {
            Some(sizes) => sizes.to_vec(),
            None => default_level_sizes(p),
        };
        validate_level_sizes(p, &level_sizes)?;
        let levels = level_sizes.len();
        let mut topo = Topology {
            p,
            blocks: vec![vec![(0, 0); levels]; p],
            partners: vec![vec![None; levels - 1]; p],
            level_sizes,
            randomized,
            seed,
        };
        topo.fill(levels - 1, 0, p);
        Ok(topo)
    }

    /// Shorthand for the default power-of-two style topology.
    pub fn uniform(p: usize) -> Result<Self> {
        Topology::build(p, None, false, 0)
    }

    fn fill(&mut self, level: usize, lo: usize, size: usize) {
        for i in lo..lo + size {
            self.blocks[i][level] = (lo, lo + size - 1);
        }
        if level == 0 {
            debug_assert_eq!(size, 1);
            return;
        }
        let left = size.min(self.level_sizes[level - 1]);
        let right = size - left;
        self.fill(level - 1, lo, left);
        if right > 0 {
            self.fill(level - 1, lo + left, right);
        }
        for k in 0..right {
            self.partners[lo + k][level - 1] = Some(lo + left + k);
            self.partners[lo + left + k][level - 1] = Some(lo + k);
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    /// Number of queue levels per thread (`L + 1`).
    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Number of partner levels (`L`).
    pub fn partner_levels(&self) -> usize {
        self.level_sizes.len() - 1
    }

    pub fn randomized(&self) -> bool {
        self.randomized
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The level-`level` block containing `thread`.
    pub fn block(&self, thread: usize, level: usize) -> Bounds {
        self.blocks[thread][level]
    }

    /// Team sizes `n'_l` actually available around `thread`.
    pub fn effective_sizes(&self, thread: usize) -> Vec<usize> {
        self.blocks[thread].iter().map(|&(lo, hi)| hi - lo + 1).collect()
    }

    fn effective_size(&self, thread: usize, level: usize) -> usize {
        let (lo, hi) = self.blocks[thread][level];
        hi - lo + 1
    }

    /// Deterministic partner of `thread` at `level`, if it exists.
    pub fn partner(&self, thread: usize, level: usize) -> Option<usize> {
        self.partners[thread][level]
    }

    /// A uniformly chosen thread from the opposite half of `thread`'s
    /// level-`level+1` block; with powers of two this is `thread ^ i` for a
    /// random `2^l <= i <= 2^(l+1) - 1`.
    pub fn random_partner<R: Rng + ?Sized>(&self, thread: usize, level: usize, rng: &mut R) -> Option<usize> {
        let (lo, hi) = self.blocks[thread][level + 1];
        let (clo, chi) = self.blocks[thread][level];
        let (slo, shi) = if clo == lo {
            if chi == hi {
                return None;
            }
            (chi + 1, hi)
        } else {
            (lo, clo - 1)
        };
        Some(rng.random_range(slo..=shi))
    }

    /// Partner honoring the randomized switch. `rng` is only drawn from in
    /// randomized mode.
    pub fn choose_partner<R: Rng + ?Sized>(&self, thread: usize, level: usize, rng: &mut R) -> Option<usize> {
        if self.randomized {
            self.random_partner(thread, level, rng)
        } else {
            self.partner(thread, level)
        }
    }

    /// Queue level for a task requiring `r` threads pushed at `thread`: the
    /// unique `l` with `n'_{l-1} < r <= n'_l`.
    pub fn level_for_requirement(&self, thread: usize, r: usize) -> Result<usize> {
        if r == 0 {
            return Err(Error::ZeroRequirement);
        }
        if r > self.p {
            return Err(Error::InfeasibleRequirement { required: r, available: self.p });
        }
        Ok((0..self.levels())
            .find(|&l| self.effective_size(thread, l) >= r)
            .expect("top level spans every thread"))
    }

    /// Smallest team size available at `thread` that fits `r` threads.
    pub fn ceil_to_team_size(&self, thread: usize, r: usize) -> Result<usize> {
        let level = self.level_for_requirement(thread, r)?;
        Ok(self.effective_size(thread, level))
    }

    /// The block a coordinator builds its team in for requirement `r`;
    /// threads inside it but outside the team register silently.
    pub fn prospective_block(&self, coord: usize, r: usize) -> Bounds {
        let level = self.level_for_requirement(coord, r.clamp(1, self.p)).expect("clamped");
        self.blocks[coord][level]
    }

    /// The `size` consecutive threads forming a coordinator's team: the
    /// leftmost run of that length inside the prospective block that still
    /// contains the coordinator. For level sizes this is the whole block.
    pub fn team_bounds(&self, coord: usize, size: usize) -> Bounds {
        let size = size.clamp(1, self.p);
        let (lo, _) = self.prospective_block(coord, size);
        let start = lo.max((coord + 1).saturating_sub(size));
        (start, start + size - 1)
    }

    /// Whether `thread` belongs to the team of `size` threads around `coord`.
    pub fn in_team(&self, coord: usize, thread: usize, size: usize) -> bool {
        let (lo, hi) = self.team_bounds(coord, size);
        (lo..=hi).contains(&thread)
    }

    /// Zero-based index of `thread` within the team around `coord`.
    pub fn local_id(&self, coord: usize, thread: usize, size: usize) -> Result<usize> {
        let (lo, hi) = self.team_bounds(coord, size);
        if !(lo..=hi).contains(&thread) {
            return Err(Error::NotInTeam { thread, lo, hi });
        }
        Ok(thread - lo)
    }

    /// Whether `j` lies in the prospective block of a task requiring `r`
    /// threads coordinated by `i`.
    pub fn overlap(&self, i: usize, j: usize, r: usize) -> bool {
        let (lo, hi) = self.prospective_block(i, r);
        (lo..=hi).contains(&j)
    }

    /// True when growing a forming team from `r_old` to `r_new` keeps every
    /// thread already registered inside the new team.
    pub fn team_grows_in_place(&self, coord: usize, r_old: usize, r_new: usize) -> bool {
        let (olo, ohi) = self.team_bounds(coord, r_old);
        let (nlo, nhi) = self.team_bounds(coord, r_new);
        nlo <= olo && ohi <= nhi
    }
}

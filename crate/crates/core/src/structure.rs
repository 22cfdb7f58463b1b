//! Symbolic Markov structure of an induced map: the transition graph on
//! cells, irreducibility, aperiodicity, coprime blocks and the mixing
//! classification of the tower.

use std::collections::{HashMap, VecDeque};

use fixedbitset::FixedBitSet;
use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheme::{InducingScheme, SymbolSet};

/// Default largest block size examined by the coprime-block search.
pub const DEFAULT_MAX_BLOCK: usize = 4;

/// Cells as nodes, `u -> v` when the image of `u` covers `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionGraph {
    pub nodes: Vec<usize>,
    /// Out-neighbours of each node as symbol ranges.
    pub edges: Vec<SymbolSet>,
    pub return_times: Vec<u32>,
    /// Set when the scheme discarded mass; edges are then lower bounds.
    pub truncated: bool,
}

impl TransitionGraph {
    pub fn new(edges: Vec<SymbolSet>, return_times: Vec<u32>, truncated: bool) -> Result<Self> {
        let n = edges.len();
        if return_times.len() != n {
            return Err(Error::InvalidParameter(format!("{} return times for {n} nodes", return_times.len())));
        }
        for (u, row) in edges.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::InvalidParameter(format!("node {u} has no out-edges")));
            }
            if row.ranges().last().is_some_and(|r| r[1] as usize > n) {
                return Err(Error::InvalidParameter(format!("node {u} has an edge outside the graph")));
            }
        }
        if return_times.contains(&0) {
            return Err(Error::InvalidParameter("return times must be positive".into()));
        }
        Ok(Self { nodes: (0..n).collect(), edges, return_times, truncated })
    }

    /// Graph from explicit adjacency lists.
    pub fn from_adjacency(adj: &[Vec<usize>], return_times: Vec<u32>) -> Result<Self> {
        Self::new(adj.iter().map(|a| SymbolSet::from_symbols(a.clone())).collect(), return_times, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges[u].contains(v)
    }

    fn row_bits(&self, u: usize) -> FixedBitSet {
        let mut b = FixedBitSet::with_capacity(self.len());
        for r in self.edges[u].ranges() {
            b.insert_range(r[0] as usize..r[1] as usize);
        }
        b
    }
}

/// Transition graph of a scheme, from the Markov images of its cells.
pub fn build_graph(scheme: &InducingScheme) -> Result<TransitionGraph> {
    if let Some(c) = scheme.cells().iter().find(|c| !c.aligned) {
        return Err(Error::NonMarkovImage(c.symbol));
    }
    let edges = scheme.cells().iter().map(|c| c.image.clone()).collect();
    TransitionGraph::new(edges, scheme.return_times(), scheme.is_truncated())
}

/// Strong connectivity, by forward and backward search from node 0.
pub fn check_irreducible(g: &TransitionGraph) -> bool {
    let n = g.len();
    if n == 0 {
        return false;
    }
    let fwd = reach(g, 0, false);
    let bwd = reach(g, 0, true);
    fwd.count_ones(..) == n && bwd.count_ones(..) == n
}

fn reach(g: &TransitionGraph, start: usize, reverse: bool) -> FixedBitSet {
    let n = g.len();
    let mut seen = FixedBitSet::with_capacity(n);
    seen.insert(start);
    let mut queue = VecDeque::from([start]);
    if !reverse {
        while let Some(u) = queue.pop_front() {
            for v in g.edges[u].iter() {
                if !seen.put(v) {
                    queue.push_back(v);
                }
            }
        }
        return seen;
    }
    // sweep until no new predecessor appears
    let mut changed = true;
    while changed {
        changed = false;
        for u in 0..n {
            if !seen.contains(u) && g.edges[u].iter().any(|v| seen.contains(v)) {
                seen.insert(u);
                changed = true;
            }
        }
    }
    seen
}

/// Gcd of `pot(u) + w(u) - pot(v)` over edges, with potentials from a search
/// rooted at node 0. For a strongly connected graph this is the gcd of the
/// weights of its closed walks.
fn cycle_gcd(g: &TransitionGraph, weight: impl Fn(usize) -> i64) -> u64 {
    let n = g.len();
    let mut pot: Vec<Option<i64>> = vec![None; n];
    pot[0] = Some(0);
    let mut queue = VecDeque::from([0usize]);
    let mut acc: u64 = 0;
    while let Some(u) = queue.pop_front() {
        let pu = pot[u].unwrap() + weight(u);
        for v in g.edges[u].iter() {
            match pot[v] {
                None => {
                    pot[v] = Some(pu);
                    queue.push_back(v);
                }
                Some(pv) => {
                    acc = acc.gcd(&(pu - pv).unsigned_abs());
                    if acc == 1 {
                        return 1;
                    }
                }
            }
        }
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aperiodicity {
    pub aperiodic: bool,
    pub period: u64,
    /// Least `n` with every pair joined by a path of every length `>= n`.
    pub k0: Option<usize>,
}

/// Period of an irreducible graph and, when it is 1, the primitivity index.
pub fn check_aperiodic(g: &TransitionGraph, horizon: usize) -> Result<Aperiodicity> {
    if !check_irreducible(g) {
        return Err(Error::InvalidParameter("aperiodicity needs an irreducible graph".into()));
    }
    let period = cycle_gcd(g, |_| 1);
    if period != 1 {
        return Ok(Aperiodicity { aperiodic: false, period, k0: None });
    }
    match primitivity_index(g, horizon) {
        Some(k0) => Ok(Aperiodicity { aperiodic: true, period, k0: Some(k0) }),
        None => Err(Error::HorizonExceeded(horizon)),
    }
}

/// First `n <= horizon` with every entry of `A^n` positive.
///
/// Nodes sharing an out-row share every row of `A^n`, so powers are taken
/// on the distinct rows only: `row_c(A^n) = OR_{v in row_c} row_v(A^{n-1})`.
/// Once `A^n` is full every later power is full, since no row is empty.
fn primitivity_index(g: &TransitionGraph, horizon: usize) -> Option<usize> {
    let n = g.len();
    let mut class_of = vec![0usize; n];
    let mut reps: Vec<usize> = Vec::new();
    let mut seen: HashMap<&SymbolSet, usize> = HashMap::new();
    for u in 0..n {
        let next = reps.len();
        let c = *seen.entry(&g.edges[u]).or_insert(next);
        if c == next {
            reps.push(u);
        }
        class_of[u] = c;
    }
    let hits: Vec<Vec<usize>> = reps
        .iter()
        .map(|&u| {
            let mut h: Vec<usize> = g.edges[u].iter().map(|v| class_of[v]).collect();
            h.sort_unstable();
            h.dedup();
            h
        })
        .collect();
    let base: Vec<FixedBitSet> = reps.iter().map(|&u| g.row_bits(u)).collect();
    let full = |rows: &[FixedBitSet]| rows.iter().all(|r| r.count_ones(..) == n);
    let mut cur = base;
    for k in 1..=horizon {
        if full(&cur) {
            return Some(k);
        }
        let next: Vec<FixedBitSet> = hits
            .iter()
            .map(|h| {
                let mut acc = FixedBitSet::with_capacity(n);
                for &d in h {
                    acc.union_with(&cur[d]);
                }
                acc
            })
            .collect();
        cur = next;
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoprimeBlockCertificate {
    pub found: bool,
    pub block: Vec<usize>,
    pub gcd_of_block: u64,
    pub search_bound: usize,
}

impl CoprimeBlockCertificate {
    /// Re-checks containment and the gcd against the graph.
    pub fn validate(&self, g: &TransitionGraph) -> bool {
        if !self.found {
            return self.block.is_empty();
        }
        let contained = self.block.iter().all(|&u| g.edges[u].contains_all(&self.block));
        let d = self.block.iter().fold(0u64, |a, &u| a.gcd(&(g.return_times[u] as u64)));
        self.block.len() >= 2 && contained && d == 1 && d == self.gcd_of_block
    }
}

/// Smallest block `S`, `2 <= |S| <= max_block`, first in lexicographic order,
/// with `S` inside the image of each of its members and coprime return times.
pub fn find_coprime_block(g: &TransitionGraph, max_block: usize) -> CoprimeBlockCertificate {
    let miss = CoprimeBlockCertificate { found: false, block: Vec::new(), gcd_of_block: 0, search_bound: max_block };
    // members need self-loops and must cover each other
    let cand: Vec<usize> = (0..g.len()).filter(|&u| g.has_edge(u, u)).collect();
    let total = cand.iter().fold(0u64, |a, &u| a.gcd(&(g.return_times[u] as u64)));
    if cand.len() < 2 || total != 1 {
        return miss;
    }
    let mutual = |a: usize, b: usize| g.has_edge(a, b) && g.has_edge(b, a);
    for size in 2..=max_block.min(cand.len()) {
        let mut stack: Vec<usize> = Vec::with_capacity(size);
        if let Some(block) = search_block(g, &cand, &mutual, size, 0, &mut stack) {
            return CoprimeBlockCertificate { found: true, block, gcd_of_block: 1, search_bound: max_block };
        }
    }
    miss
}

fn search_block(
    g: &TransitionGraph,
    cand: &[usize],
    mutual: &impl Fn(usize, usize) -> bool,
    size: usize,
    from: usize,
    stack: &mut Vec<usize>,
) -> Option<Vec<usize>> {
    if stack.len() == size {
        let d = stack.iter().fold(0u64, |a, &u| a.gcd(&(g.return_times[u] as u64)));
        return (d == 1).then(|| stack.clone());
    }
    for i in from..cand.len() {
        if cand.len() - i < size - stack.len() {
            break;
        }
        let u = cand[i];
        if stack.iter().all(|&s| mutual(s, u)) {
            stack.push(u);
            if let Some(b) = search_block(g, cand, mutual, size, i + 1, stack) {
                return Some(b);
            }
            stack.pop();
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetReturn {
    pub base_symbol: usize,
    pub horizon: usize,
    pub period: u64,
    /// Achievable return lengths up to the horizon.
    pub lengths: Vec<usize>,
}

/// Gcd of the total return time of closed walks through `base_symbol`.
///
/// A walk leaving `u` spends `R(u)` tower steps before landing in the next
/// cell, so the lengths are the times at which the tower lift of the cell
/// can meet itself.
pub fn tower_return_period(g: &TransitionGraph, base_symbol: usize, horizon: usize) -> Result<SetReturn> {
    if base_symbol >= g.len() {
        return Err(Error::InvalidParameter(format!("no node {base_symbol}")));
    }
    let n = g.len();
    let rows: Vec<FixedBitSet> = (0..n).map(|u| g.row_bits(u)).collect();
    let mut at: Vec<FixedBitSet> = vec![FixedBitSet::with_capacity(n); horizon + 1];
    at[0].insert(base_symbol);
    let mut lengths = Vec::new();
    let mut period = 0u64;
    for t in 0..=horizon {
        if t > 0 && at[t].contains(base_symbol) {
            lengths.push(t);
            period = period.gcd(&(t as u64));
        }
        let here: Vec<usize> = at[t].ones().collect();
        for u in here {
            let s = t + g.return_times[u] as usize;
            if s <= horizon {
                at[s].union_with(&rows[u]);
            }
        }
    }
    if lengths.is_empty() {
        return Err(Error::HorizonExceeded(horizon));
    }
    Ok(SetReturn { base_symbol, horizon, period, lengths })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    MixingCertified,
    NonMixingCertified,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingVerdict {
    pub irreducible: bool,
    pub aperiodic: bool,
    pub period: Option<u64>,
    pub k0: Option<usize>,
    pub gcd_r: u64,
    pub coprime_block: CoprimeBlockCertificate,
    /// Gcd of the return-time weights of closed walks; `None` when reducible.
    pub tower_period: Option<u64>,
    pub obstruction: Option<SetReturn>,
    pub truncated: bool,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

/// Mixing classification with the default block bound.
pub fn classify_mixing(g: &TransitionGraph, horizon: usize) -> MixingVerdict {
    classify_mixing_with(g, horizon, DEFAULT_MAX_BLOCK)
}

pub fn classify_mixing_with(g: &TransitionGraph, horizon: usize, max_block: usize) -> MixingVerdict {
    let mut notes = Vec::new();
    let irreducible = check_irreducible(g);
    let gcd_r = g.return_times.iter().fold(0u64, |a, &r| a.gcd(&(r as u64)));
    let (mut aperiodic, mut period, mut k0) = (false, None, None);
    let mut tower_period = None;
    if irreducible {
        match check_aperiodic(g, horizon) {
            Ok(a) => {
                aperiodic = a.aperiodic;
                period = Some(a.period);
                k0 = a.k0;
            }
            Err(_) => {
                aperiodic = true;
                period = Some(1);
                notes.push(format!("primitivity index exceeds horizon {horizon}"));
            }
        }
        tower_period = Some(cycle_gcd(g, |u| g.return_times[u] as i64));
    } else {
        notes.push("graph is not strongly connected".into());
    }
    let coprime_block = find_coprime_block(g, max_block);
    let mut obstruction = None;
    let verdict = if irreducible && aperiodic && coprime_block.found {
        Verdict::MixingCertified
    } else if tower_period.is_some_and(|t| t >= 2) && !g.truncated {
        match tower_return_period(g, 0, horizon) {
            Ok(sr) if sr.period >= 2 => {
                obstruction = Some(sr);
                Verdict::NonMixingCertified
            }
            Ok(sr) => {
                notes.push(format!("set-return period {} disagrees with cycle weights", sr.period));
                Verdict::Inconclusive
            }
            Err(e) => {
                notes.push(format!("set-return check failed: {e}"));
                Verdict::Inconclusive
            }
        }
    } else {
        if g.truncated && tower_period.is_some_and(|t| t >= 2) {
            notes.push("truncated graph cannot certify non-mixing".into());
        }
        Verdict::Inconclusive
    };
    MixingVerdict {
        irreducible,
        aperiodic,
        period,
        k0,
        gcd_r,
        coprime_block,
        tower_period,
        obstruction,
        truncated: g.truncated,
        verdict,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(adj: &[&[usize]], r: &[u32]) -> TransitionGraph {
        TransitionGraph::from_adjacency(&adj.iter().map(|a| a.to_vec()).collect::<Vec<_>>(), r.to_vec()).unwrap()
    }

    #[test]
    fn two_cycle_has_period_two() {
        let g = graph(&[&[1], &[0]], &[1, 1]);
        let a = check_aperiodic(&g, 10).unwrap();
        assert!(!a.aperiodic);
        assert_eq!(a.period, 2);
    }

    #[test]
    fn full_branch_is_primitive_at_one() {
        let g = graph(&[&[0, 1, 2], &[0, 1, 2], &[0, 1, 2]], &[1, 2, 3]);
        assert_eq!(check_aperiodic(&g, 10).unwrap().k0, Some(1));
        let b = find_coprime_block(&g, 4);
        assert_eq!(b.block, vec![0, 1]);
        assert!(b.validate(&g));
        assert_eq!(classify_mixing(&g, 10).verdict, Verdict::MixingCertified);
    }

    #[test]
    fn disjoint_loops_are_reducible() {
        let g = graph(&[&[0], &[1]], &[1, 1]);
        assert!(!check_irreducible(&g));
    }

    #[test]
    fn even_return_times_block_nothing() {
        let g = graph(&[&[0, 1], &[0, 1]], &[2, 4]);
        assert!(!find_coprime_block(&g, 4).found);
    }

    #[test]
    fn empty_row_is_rejected() {
        assert!(TransitionGraph::from_adjacency(&[vec![]], vec![1]).is_err());
    }
}

//! Auditors and ground-truth oracles.

use std::collections::BTreeMap;

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fallback::{select_output, FallbackState, Output};
use crate::graph::{Cause, Event, Rec, State, Vid};
use crate::params::Params;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: &'static str,
    pub t: u64,
    pub detail: String,
}

/// Accumulated audit findings over a run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ViolationReport {
    pub counts: BTreeMap<&'static str, u64>,
    /// First few violations with witnesses.
    pub samples: Vec<Violation>,
    pub under_sampled_created: u64,
    pub max_active: usize,
    pub max_tick_steps: u64,
    pub audits: u64,
}

const KEEP: usize = 32;

impl ViolationReport {
    pub fn is_clean(&self) -> bool {
        self.counts.values().all(|&c| c == 0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, name: &str) -> u64 {
        self.counts.get(name).copied().unwrap_or(0)
    }

    pub fn add(&mut self, v: Violation) {
        *self.counts.entry(v.invariant).or_default() += 1;
        if self.samples.len() < KEEP {
            self.samples.push(v);
        }
    }

    pub fn extend(&mut self, vs: Vec<Violation>) {
        for v in vs {
            self.add(v);
        }
    }
}

fn canonical(st: &State, a: Vid, b: Vid) -> Rec {
    let (la, lb) = (st.level(a), st.level(b));
    if la > lb || (la == lb && a < b) {
        Rec::Out
    } else {
        Rec::In(lb)
    }
}

/// Recomputes every audited predicate from the raw adjacency. Meant for quiescent
/// points between ticks; structures of active vertices are exempt where noted.
pub fn audit_invariants(st: &State, t: u64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |invariant: &'static str, detail: String| out.push(Violation { invariant, t, detail });
    let p = &st.p;
    let n = st.n() as Vid;
    let levels = p.levels();

    for v in 0..n {
        let x = st.vertex(v);
        if let Some(m) = x.mate {
            if x.level < 0 {
                bad("1a", format!("matched {v} at level {}", x.level));
            }
            if st.mate(m) != Some(v) || !st.has_edge(v, m) {
                bad("1b", format!("mate of {v} is {m} but not symmetric or not an edge"));
            }
        }
        if x.level >= 0 && x.mate.is_none() && !x.is_active() && x.queued() != Some(x.level as usize) {
            bad(
                "temp_free",
                format!("temporarily free {v} at level {} is neither queued nor active", x.level),
            );
        }
        if let Some(q) = x.queued() {
            if x.is_active() || x.mate.is_some() || x.level != q as i32 {
                bad(
                    "queue",
                    format!("{v} queued at {q} with level {} mate {:?}", x.level, x.mate),
                );
            }
        }
        if x.is_active() {
            continue;
        }
        if x.in_flight || !x.staged().is_empty() {
            bad("1'(d)", format!("non-active {v} is mid level change"));
        }
        // records, 1'(c) and 1'(d) against non-active neighbors
        let mut phi = vec![0u64; levels];
        for w in x.neighbors_sorted() {
            let (rec, staged) = x.record(w).expect("neighbor record");
            if !st.is_active(w) {
                if v < w {
                    let (back, back_staged) = st.vertex(w).record(v).expect("symmetric record");
                    if staged || back_staged || rec != canonical(st, v, w) || back != canonical(st, w, v) {
                        bad("1'(d)", format!("edge ({v},{w}) recorded as {rec:?}/{back:?}"));
                    }
                }
                if x.level == -1 && st.level(w) == -1 {
                    bad("1'(c)", format!("free {v} has free neighbor {w}"));
                }
            }
            let from = match rec {
                Rec::Out => x.level + 1,
                Rec::In(l) => x.level.max(l) + 1,
            };
            for slot in phi.iter_mut().skip(from.max(0) as usize) {
                *slot += 1;
            }
        }
        for j in ((x.level + 1).max(0) as usize)..levels {
            if x.phi(j) as u64 != phi[j] {
                bad("phi", format!("phi_{v}({j}) stored {} recomputed {}", x.phi(j), phi[j]));
            }
            if phi[j] > p.phi_cap(j) {
                bad("3", format!("phi_{v}({j}) = {} above cap {}", phi[j], p.phi_cap(j)));
            }
        }
    }

    for e in st.samples.edges() {
        let (lu, lv) = (st.level(e.u), st.level(e.v));
        if lu != e.level as i32 || lv != e.level as i32 || st.mate(e.u) != Some(e.v) {
            bad(
                "1b",
                format!(
                    "matched edge {} ({},{}) at {} has levels {lu},{lv}",
                    e.id, e.u, e.v, e.level
                ),
            );
        }
        if e.level >= p.low_level_cut && !e.under_sampled && e.s_rem as u64 <= p.sample_floor(e.level) {
            bad(
                "2",
                format!(
                    "edge {} at level {} keeps {} of its sample, floor {}",
                    e.id,
                    e.level,
                    e.s_rem,
                    p.sample_floor(e.level)
                ),
            );
        }
    }
    if st.samples.len() != st.matching_size() {
        bad(
            "1b",
            format!("{} tracked edges for {} matched", st.samples.len(), st.matching_size()),
        );
    }
    if st.active().len() > p.active_cap {
        bad(
            "active_cap",
            format!("{} active above cap {}", st.active().len(), p.active_cap),
        );
    }
    out
}

// ---- exact maximum matching ----------------------------------------------------

/// Exact maximum matching size by Edmonds' blossom search. Limited to n ≤ 64.
pub fn max_matching_exact(n: usize, edges: &[(Vid, Vid)]) -> Result<usize> {
    if n > 64 {
        return Err(Error::TooLarge(n));
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a as usize].push(b as usize);
        adj[b as usize].push(a as usize);
    }
    let mut mate = vec![usize::MAX; n];
    let mut size = 0;
    // greedy start
    for v in 0..n {
        if mate[v] == usize::MAX {
            if let Some(&w) = adj[v].iter().find(|&&w| mate[w] == usize::MAX) {
                mate[v] = w;
                mate[w] = v;
                size += 1;
            }
        }
    }
    for root in 0..n {
        if mate[root] == usize::MAX && augment(&adj, &mut mate, root) {
            size += 1;
        }
    }
    Ok(size)
}

const NONE: usize = usize::MAX;

fn lca(mate: &[usize], base: &[usize], parent: &[usize], mut a: usize, mut b: usize) -> usize {
    let mut seen = vec![false; mate.len()];
    loop {
        a = base[a];
        seen[a] = true;
        if mate[a] == NONE {
            break;
        }
        a = parent[mate[a]];
    }
    loop {
        b = base[b];
        if seen[b] {
            return b;
        }
        b = parent[mate[b]];
    }
}

fn mark_path(
    mate: &[usize],
    base: &[usize],
    parent: &mut [usize],
    blossom: &mut [bool],
    mut v: usize,
    b: usize,
    mut child: usize,
) {
    while base[v] != b {
        blossom[base[v]] = true;
        blossom[base[mate[v]]] = true;
        parent[v] = child;
        child = mate[v];
        v = parent[mate[v]];
    }
}

fn augment(adj: &[Vec<usize>], mate: &mut [usize], root: usize) -> bool {
    let n = adj.len();
    let mut used = vec![false; n];
    let mut parent = vec![NONE; n];
    let mut base: Vec<usize> = (0..n).collect();
    used[root] = true;
    let mut q = std::collections::VecDeque::from([root]);
    while let Some(v) = q.pop_front() {
        for &to in &adj[v] {
            if base[v] == base[to] || mate[v] == to {
                continue;
            }
            if to == root || (mate[to] != NONE && parent[mate[to]] != NONE) {
                let cur = lca(mate, &base, &parent, v, to);
                let mut blossom = vec![false; n];
                mark_path(mate, &base, &mut parent, &mut blossom, v, cur, to);
                mark_path(mate, &base, &mut parent, &mut blossom, to, cur, v);
                for i in 0..n {
                    if blossom[base[i]] {
                        base[i] = cur;
                        if !used[i] {
                            used[i] = true;
                            q.push_back(i);
                        }
                    }
                }
            } else if parent[to] == NONE {
                parent[to] = v;
                if mate[to] == NONE {
                    let mut u = to;
                    while u != NONE {
                        let pv = parent[u];
                        let ppv = mate[pv];
                        mate[u] = pv;
                        mate[pv] = u;
                        u = ppv;
                    }
                    return true;
                }
                used[mate[to]] = true;
                q.push_back(mate[to]);
            }
        }
    }
    false
}

/// Maximum matching by bitmask dynamic programming; the cross-check oracle for n ≤ 16.
pub fn max_matching_brute(n: usize, edges: &[(Vid, Vid)]) -> usize {
    assert!(n <= 16);
    let mut adj = vec![0u32; n];
    for &(a, b) in edges {
        adj[a as usize] |= 1 << b;
        adj[b as usize] |= 1 << a;
    }
    let full = 1usize << n;
    let mut dp = vec![0u8; full];
    for mask in 1..full {
        let v = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << v);
        let mut best = dp[rest];
        let mut nb = adj[v] as usize & rest;
        while nb != 0 {
            let w = nb.trailing_zeros() as usize;
            nb &= nb - 1;
            best = best.max(1 + dp[rest & !(1 << w)]);
        }
        dp[mask] = best;
    }
    dp[full - 1] as usize
}

// ---- bad-edge shadow --------------------------------------------------------------

#[derive(Debug, Clone)]
struct ShadowEdge {
    level: usize,
    under_sampled: bool,
    deleted: u64,
}

/// Verification-only mirror of every matched edge's sample, in graph-deletion
/// order. Never read by the algorithm.
#[derive(Debug, Clone, Default)]
pub struct BadEdgeShadow {
    live: HashMap<u64, ShadowEdge>,
    index: HashMap<(Vid, Vid), Vec<u64>>,
    present: HashSet<(Vid, Vid)>,
    /// Adversarial hits at levels ≥ cut: (rank, bad_rank, level, under_sampled).
    pub hits: Vec<(u64, u64, usize, bool)>,
    /// Hits on good, properly sampled edges.
    pub good_hits: u64,
}

fn key(a: Vid, b: Vid) -> (Vid, Vid) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl BadEdgeShadow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one tick: the update itself and the events the engine emitted during it.
    pub fn observe(&mut self, p: &Params, insert: bool, u: Vid, v: Vid, events: &[Event]) {
        let mut rest = events;
        if insert {
            self.present.insert(key(u, v));
        } else {
            // the handler runs first, so an adversarial unmatch is the first event
            if let Some(Event::MatchRemoved {
                id,
                level,
                cause: Cause::Adversary,
                ..
            }) = events.first()
            {
                if let Some(e) = self.live.remove(id) {
                    if *level >= p.low_level_cut {
                        let rank = e.deleted + 1;
                        let br = p.bad_rank(*level);
                        self.hits.push((rank, br, *level, e.under_sampled));
                        if rank > br && !e.under_sampled {
                            self.good_hits += 1;
                        }
                    }
                }
                rest = &events[1..];
            }
            self.present.remove(&key(u, v));
            if let Some(ids) = self.index.remove(&key(u, v)) {
                for id in ids {
                    if let Some(e) = self.live.get_mut(&id) {
                        e.deleted += 1;
                    }
                }
            }
        }
        for ev in rest {
            match ev {
                Event::MatchCreated {
                    id,
                    u,
                    level,
                    sample,
                    under_sampled,
                    ..
                } => {
                    let mut missing = 0;
                    for &x in sample {
                        let k = key(*u, x);
                        if self.present.contains(&k) {
                            let list = self.index.entry(k).or_default();
                            let live = &self.live;
                            list.retain(|i| live.contains_key(i));
                            list.push(*id);
                        } else {
                            missing += 1;
                        }
                    }
                    self.live.insert(
                        *id,
                        ShadowEdge {
                            level: *level,
                            under_sampled: *under_sampled,
                            deleted: missing,
                        },
                    );
                }
                Event::MatchRemoved { id, .. } => {
                    self.live.remove(id);
                }
            }
        }
    }

    /// Live edges flagged bad: at least ⌈2εγ^ℓ⌉ sample edges already deleted.
    pub fn bad_live(&self, p: &Params) -> usize {
        self.live.values().filter(|e| e.deleted >= p.bad_rank(e.level)).count()
    }
}

// ---- almost-maximality metrics ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmmRecord {
    pub tf_adversary: usize,
    /// Adversary-freed vertices queued at levels ≥ cut, or active there.
    pub tf_adversary_high: usize,
    pub tf_algorithm: usize,
    pub m_rand: usize,
    pub m_delta: usize,
    pub m_output: usize,
    pub output: &'static str,
    pub level_populations: Vec<usize>,
}

pub fn amm_metrics(st: &State, fb: &FallbackState) -> AmmRecord {
    let p = &st.p;
    let mut adv = 0;
    let mut adv_high = 0;
    for l in 0..p.levels() {
        let q = st.queue_len(l);
        adv += q;
        if l >= p.low_level_cut {
            adv_high += q;
        }
    }
    let mut alg = 0;
    for &v in st.active() {
        let x = st.vertex(v);
        if x.level >= 0 && x.mate.is_none() {
            if x.freed_by == Some(crate::graph::FreedBy::Adversary) {
                adv += 1;
                if x.level as usize >= p.low_level_cut {
                    adv_high += 1;
                }
            } else {
                alg += 1;
            }
        }
    }
    let mut pops = vec![0; p.levels() + 1];
    for v in 0..st.n() as Vid {
        pops[(st.level(v) + 1) as usize] += 1;
    }
    let (m_rand, m_delta) = (st.matching_size(), fb.size());
    let out = select_output(m_delta, fb.delta());
    AmmRecord {
        tf_adversary: adv,
        tf_adversary_high: adv_high,
        tf_algorithm: alg,
        m_rand,
        m_delta,
        m_output: if out == Output::UseMdelta { m_delta } else { m_rand },
        output: if out == Output::UseMdelta { "mdelta" } else { "mrand" },
        level_populations: pops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{derive, Config};
    use crate::procedures::handle_insertion;
    use rand::{Rng, SeedableRng};

    #[test]
    fn small_exact_cases() {
        let k4: Vec<(Vid, Vid)> = vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        assert_eq!(max_matching_exact(4, &k4).unwrap(), 2);
        let c5 = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)];
        assert_eq!(max_matching_exact(5, &c5).unwrap(), 2);
        assert_eq!(max_matching_brute(5, &c5), 2);
        assert!(max_matching_exact(65, &[]).is_err());
    }

    #[test]
    fn blossom_needed() {
        // triangle with tails; greedy picks (0,1) first and must augment through the odd cycle
        let e = vec![(0, 1), (1, 2), (2, 0), (0, 3), (2, 4), (4, 5)];
        assert_eq!(max_matching_exact(6, &e).unwrap(), 3);
    }

    #[test]
    fn exact_agrees_with_brute_on_random_graphs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.gen_range(1..=10);
            let p = rng.gen_range(0.1..0.9);
            let mut e = Vec::new();
            for a in 0..n as Vid {
                for b in a + 1..n as Vid {
                    if rng.gen_bool(p) {
                        e.push((a, b));
                    }
                }
            }
            assert_eq!(max_matching_exact(n, &e).unwrap(), max_matching_brute(n, &e));
        }
    }

    #[test]
    fn empty_state_audits_clean() {
        let st = State::new(&derive(&Config::new(16, 0.1)).unwrap());
        assert!(audit_invariants(&st, 0).is_empty());
    }

    #[test]
    fn misoriented_edge_is_reported() {
        let mut st = State::new(&derive(&Config::new(16, 0.1)).unwrap());
        handle_insertion(&mut st, 0, 1).unwrap();
        st.insert_edge_raw(0, 5).unwrap();
        // raise 5 without revisiting its neighbors: the pair records go stale
        let (work, added, _) = st.begin_set_level(5, 1);
        assert_eq!(work, vec![0]);
        st.finish_set_level(5, added);
        let v = audit_invariants(&st, 7);
        let d: Vec<_> = v.iter().filter(|x| x.invariant == "1'(d)").collect();
        assert_eq!(d.len(), 1, "{v:?}");
        assert!(d[0].detail.contains("(0,5)"));
        assert_eq!(d[0].t, 7);
    }
}

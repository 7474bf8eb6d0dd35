//! Gradual morphing of a source matching into a target matching with a
//! bounded number of replacements per update.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Vid;

pub type Edge = (Vid, Vid);

fn key(a: Vid, b: Vid) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Checks the matching property and returns a mate array.
fn mates(n: usize, edges: &[Edge]) -> Result<Vec<Option<Vid>>> {
    let mut m = vec![None; n];
    for &(a, b) in edges {
        if a == b || a as usize >= n || b as usize >= n {
            return Err(Error::Config(format!("bad matching edge ({a},{b})")));
        }
        if m[a as usize].is_some() || m[b as usize].is_some() {
            return Err(Error::Config(format!("edges share a vertex at ({a},{b})")));
        }
        m[a as usize] = Some(b);
        m[b as usize] = Some(a);
    }
    Ok(m)
}

fn size(m: &[Option<Vid>]) -> usize {
    m.iter().filter(|x| x.is_some()).count() / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Classify,
    Morph,
    Done,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepReport {
    /// Edges added to M*.
    pub added: Vec<Edge>,
    /// Edges removed from M* to make room for an addition.
    pub removed: Vec<Edge>,
    /// M* edges that left because the graph deleted them; not replacements.
    pub forced: Vec<Edge>,
    pub risky_added: usize,
}

impl StepReport {
    pub fn replacements(&self) -> usize {
        self.added.len() + self.removed.len()
    }
}

#[derive(Debug, Clone)]
pub struct TransformState {
    /// M*, the output.
    star: Vec<Option<Vid>>,
    /// M'_i, the target shrunk by graph deletions.
    target: Vec<Option<Vid>>,
    /// M_i, the old matching shrunk by graph deletions.
    old: Vec<Option<Vid>>,
    pub w: u64,
    half: u64,
    pub r: u64,
    /// Classification work list: M edges to index, then M' edges to classify.
    work: Vec<(bool, Edge)>,
    cursor: usize,
    safe: BTreeSet<Edge>,
    risky: BTreeSet<Edge>,
    steps: u64,
    phase: Phase,
}

impl TransformState {
    /// Starts a window with M* := M. `eps` is ε as (numerator, denominator).
    pub fn begin(n: usize, m: &[Edge], m_prime: &[Edge], eps: (u64, u64)) -> Result<Self> {
        let old = mates(n, m)?;
        let target = mates(n, m_prime)?;
        let (en, ed) = eps;
        if en == 0 || ed == 0 {
            return Err(Error::Config("ε must be positive".into()));
        }
        // W = ⌈ε|M|/4⌉ with a floor of 1, split into two halves
        let w = ((en * m.len() as u64).div_ceil(4 * ed)).max(1);
        let half = w.div_ceil(2);
        let total = (m.len() + m_prime.len()) as u64;
        let r = (4 * total).div_ceil(half).max(1);
        let mut work: Vec<(bool, Edge)> = m.iter().map(|&(a, b)| (false, key(a, b))).collect();
        work.extend(m_prime.iter().map(|&(a, b)| (true, key(a, b))));
        Ok(TransformState {
            star: old.clone(),
            target,
            old,
            w,
            half,
            r,
            work,
            cursor: 0,
            safe: BTreeSet::new(),
            risky: BTreeSet::new(),
            steps: 0,
            phase: Phase::Classify,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn output(&self) -> Vec<Edge> {
        edges_of(&self.star)
    }

    pub fn output_size(&self) -> usize {
        size(&self.star)
    }

    pub fn target_size(&self) -> usize {
        size(&self.target)
    }

    pub fn old_size(&self) -> usize {
        size(&self.old)
    }

    pub fn safe(&self) -> &BTreeSet<Edge> {
        &self.safe
    }

    pub fn risky(&self) -> &BTreeSet<Edge> {
        &self.risky
    }

    fn pending(&self, e: Edge) -> bool {
        self.target[e.0 as usize] == Some(e.1) && self.star[e.0 as usize] != Some(e.1)
    }

    fn classified(&self, e: Edge) -> bool {
        self.safe.contains(&e) || self.risky.contains(&e)
    }

    fn conflicts(&self, e: Edge) -> usize {
        self.star[e.0 as usize].is_some() as usize + self.star[e.1 as usize].is_some() as usize
    }

    fn file(&mut self, e: Edge) {
        self.safe.remove(&e);
        self.risky.remove(&e);
        if self.conflicts(e) == 2 {
            self.risky.insert(e);
        } else {
            self.safe.insert(e);
        }
    }

    /// Re-files the classified target edge at `x`, if any, after M* changed there.
    fn touch(&mut self, x: Vid) {
        if let Some(z) = self.target[x as usize] {
            let e = key(x, z);
            if self.pending(e) && self.classified(e) {
                self.file(e);
            }
        }
    }

    fn unlink_star(&mut self, a: Vid, b: Vid) {
        self.star[a as usize] = None;
        self.star[b as usize] = None;
        self.touch(a);
        self.touch(b);
    }

    /// Graph deletion of (u, v): shrinks M, M' and M*.
    pub fn apply_deletion(&mut self, u: Vid, v: Vid, rep: &mut StepReport) {
        let e = key(u, v);
        if self.old[u as usize] == Some(v) {
            self.old[u as usize] = None;
            self.old[v as usize] = None;
        }
        if self.target[u as usize] == Some(v) {
            self.safe.remove(&e);
            self.risky.remove(&e);
            self.target[u as usize] = None;
            self.target[v as usize] = None;
        }
        if self.star[u as usize] == Some(v) {
            self.unlink_star(u, v);
            rep.forced.push(e);
        }
    }

    /// One update step: graph deletions first, then at most r units of work.
    pub fn step(&mut self, deletions: &[Edge]) -> StepReport {
        let mut rep = StepReport::default();
        for &(u, v) in deletions {
            self.apply_deletion(u, v, &mut rep);
        }
        if self.phase == Phase::Done {
            return rep;
        }
        self.steps += 1;
        let mut units = 0;
        while units < self.r && self.cursor < self.work.len() {
            let (is_target, e) = self.work[self.cursor];
            self.cursor += 1;
            units += 1;
            if is_target && self.pending(e) {
                self.file(e);
            }
        }
        if self.cursor < self.work.len() || self.steps < self.half {
            return rep;
        }
        self.phase = Phase::Morph;
        let mut adds = 0;
        while adds < self.r {
            let e = match self.safe.iter().next() {
                Some(&e) => e,
                None => match self.risky.iter().next() {
                    Some(&e) => {
                        rep.risky_added += 1;
                        e
                    }
                    None => break,
                },
            };
            self.safe.remove(&e);
            self.risky.remove(&e);
            for x in [e.0, e.1] {
                if let Some(y) = self.star[x as usize] {
                    self.unlink_star(x, y);
                    rep.removed.push(key(x, y));
                }
            }
            self.star[e.0 as usize] = Some(e.1);
            self.star[e.1 as usize] = Some(e.0);
            rep.added.push(e);
            adds += 1;
        }
        if self.safe.is_empty() && self.risky.is_empty() {
            self.phase = Phase::Done;
        }
        rep
    }

    /// Audits after a step: M* is a matching, every pending target edge is
    /// filed in the right class, and 2|M*| ≥ 2·min(|M_i|, |M'_i|) − W − 2.
    pub fn audit(&self) -> std::result::Result<(), String> {
        for (a, m) in self.star.iter().enumerate() {
            if let Some(b) = m {
                if self.star[*b as usize] != Some(a as Vid) {
                    return Err(format!("M* not symmetric at {a}"));
                }
            }
        }
        if self.phase != Phase::Classify {
            for e in edges_of(&self.target) {
                if !self.pending(e) {
                    continue;
                }
                let want_risky = self.conflicts(e) == 2;
                if want_risky != self.risky.contains(&e) || want_risky == self.safe.contains(&e) {
                    return Err(format!("edge {e:?} misfiled"));
                }
            }
        }
        let lo = self.old_size().min(self.target_size()) as i64;
        if 2 * (self.output_size() as i64) < 2 * lo - self.w as i64 - 2 {
            return Err(format!(
                "|M*|={} below min(|M|,|M'|)={lo} − W/2 − 1 with W={}",
                self.output_size(),
                self.w
            ));
        }
        Ok(())
    }
}

fn edges_of(m: &[Option<Vid>]) -> Vec<Edge> {
    m.iter()
        .enumerate()
        .filter_map(|(a, b)| b.filter(|&b| (a as Vid) < b).map(|b| (a as Vid, b)))
        .collect()
}

/// If every edge of M' \ M* touches two edges of M*, then |M*| ≥ |M'|.
/// Returns the truth of that implication on the given pair.
pub fn riskyedge_bound(n: usize, m_star: &[Edge], m_prime: &[Edge]) -> Result<bool> {
    let star = mates(n, m_star)?;
    mates(n, m_prime)?;
    let all_risky = m_prime
        .iter()
        .filter(|&&(a, b)| star[a as usize] != Some(b))
        .all(|&(a, b)| star[a as usize].is_some() && star[b as usize].is_some());
    Ok(!all_risky || m_star.len() >= m_prime.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(t: &mut TransformState) -> Vec<StepReport> {
        let mut out = Vec::new();
        while t.phase() != Phase::Done {
            let rep = t.step(&[]);
            assert!(rep.replacements() as u64 <= 3 * t.r);
            t.audit().unwrap();
            out.push(rep);
        }
        out
    }

    #[test]
    fn identical_matchings_need_no_replacements() {
        let m = [(0, 1), (2, 3)];
        let mut t = TransformState::begin(4, &m, &m, (1, 10)).unwrap();
        let reps = run(&mut t);
        assert!(reps.iter().all(|r| r.replacements() == 0));
        assert_eq!(t.output(), m.to_vec());
    }

    #[test]
    fn four_cycle_starts_all_risky() {
        let m = [(0, 1), (2, 3)];
        let mp = [(1, 2), (0, 3)];
        let mut t = TransformState::begin(4, &m, &mp, (1, 10)).unwrap();
        assert_eq!(t.w, 1);
        let rep = t.step(&[]);
        // (0,3) is risky; adding it removes both old edges, then (1,2) is safe
        assert_eq!(rep.risky_added, 1);
        assert_eq!(rep.added, vec![(0, 3), (1, 2)]);
        assert_eq!(rep.removed, vec![(0, 1), (2, 3)]);
        assert_eq!(t.phase(), Phase::Done);
        assert_eq!(t.output(), vec![(0, 3), (1, 2)]);
    }

    #[test]
    fn safe_precedes_risky() {
        // (1,2) risky between (0,1) and (2,3); (5,6) safe, touching only (4,5)
        let m = [(0, 1), (2, 3), (4, 5)];
        let mp = [(1, 2), (5, 6)];
        let mut t = TransformState::begin(8, &m, &mp, (1, 2)).unwrap();
        t.r = 1;
        let mut first = None;
        while t.phase() != Phase::Done {
            let rep = t.step(&[]);
            if first.is_none() && !rep.added.is_empty() {
                first = Some(rep);
            }
        }
        let first = first.unwrap();
        assert_eq!(first.added, vec![(5, 6)]);
        assert_eq!(first.risky_added, 0);
    }

    #[test]
    fn lone_risky_addition_shrinks_by_one() {
        let m = [(0, 1), (2, 3)];
        let mp = [(1, 2)];
        let mut t = TransformState::begin(4, &m, &mp, (1, 10)).unwrap();
        let rep = t.step(&[]);
        assert_eq!(rep.risky_added, 1);
        assert_eq!(rep.replacements(), 3);
        assert_eq!(t.output_size(), 1);
    }

    #[test]
    fn deleted_target_edge_leaves_silently() {
        let m: Vec<Edge> = (0..20).map(|i| (2 * i, 2 * i + 1)).collect();
        let mp: Vec<Edge> = (0..19).map(|i| (2 * i + 1, 2 * i + 2)).collect();
        let mut t = TransformState::begin(40, &m, &mp, (2, 5)).unwrap();
        assert_eq!(t.w, 2);
        let rep = t.step(&[(3, 4), (10, 11)]);
        assert_eq!(rep.forced, vec![(10, 11)]);
        assert_eq!(t.target_size(), 18);
        run(&mut t);
        let out = t.output();
        assert!(!out.contains(&(3, 4)));
        for e in &mp {
            assert!(*e == (3, 4) || out.contains(e));
        }
    }

    #[test]
    fn empty_source_adopts_target_at_once() {
        let mp = [(0, 1), (2, 3), (4, 5)];
        let mut t = TransformState::begin(6, &[], &mp, (1, 10)).unwrap();
        let rep = t.step(&[]);
        assert_eq!(rep.added.len(), 3);
        assert!(rep.replacements() as u64 <= 3 * t.r);
        assert_eq!(t.phase(), Phase::Done);
    }

    #[test]
    fn riskyedge_hand_cases() {
        let m = [(0, 1), (2, 3)];
        assert!(riskyedge_bound(4, &m, &m).unwrap());
        // path 0-1-2-3-4: M* = {e1, e3}, M' = {e2}
        assert!(riskyedge_bound(5, &[(0, 1), (2, 3)], &[(1, 2)]).unwrap());
        assert!(riskyedge_bound(4, &[(0, 1), (0, 2)], &[]).is_err());
    }
}

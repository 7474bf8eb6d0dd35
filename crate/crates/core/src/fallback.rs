//! The partial-scan matching M_δ and the output selector.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::Vid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    UseMdelta,
    UseMrand,
}

/// Picks M_δ whenever it is smaller than δ.
pub fn select_output(size_mdelta: usize, delta: usize) -> Output {
    if size_mdelta < delta {
        Output::UseMdelta
    } else {
        Output::UseMrand
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Effect {
    pub replacements: u64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct FallbackState {
    delta: usize,
    adj: Vec<BTreeSet<Vid>>,
    mate: Vec<Option<Vid>>,
    size: usize,
    heavy_free: BTreeSet<Vid>,
}

impl FallbackState {
    pub fn new(n: usize, delta: usize) -> Self {
        FallbackState {
            delta: delta.max(1),
            adj: vec![BTreeSet::new(); n],
            mate: vec![None; n],
            size: 0,
            heavy_free: BTreeSet::new(),
        }
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mate(&self, v: Vid) -> Option<Vid> {
        self.mate[v as usize]
    }

    pub fn matching(&self) -> Vec<(Vid, Vid)> {
        (0..self.adj.len() as Vid)
            .filter_map(|u| self.mate[u as usize].filter(|&w| u < w).map(|w| (u, w)))
            .collect()
    }

    fn refresh(&mut self, v: Vid) {
        if self.mate[v as usize].is_none() && self.adj[v as usize].len() >= self.delta {
            self.heavy_free.insert(v);
        } else {
            self.heavy_free.remove(&v);
        }
    }

    fn pair(&mut self, u: Vid, v: Vid) {
        self.mate[u as usize] = Some(v);
        self.mate[v as usize] = Some(u);
        self.size += 1;
        self.refresh(u);
        self.refresh(v);
    }

    pub fn mdelta_insert(&mut self, u: Vid, v: Vid) -> Result<Effect> {
        if u == v {
            return Err(Error::SelfLoop(u));
        }
        if !self.adj[u as usize].insert(v) {
            return Err(Error::DuplicateEdge(u, v));
        }
        self.adj[v as usize].insert(u);
        let mut eff = Effect {
            replacements: 0,
            steps: 2,
        };
        if self.mate[u as usize].is_none() && self.mate[v as usize].is_none() {
            self.pair(u, v);
            eff.replacements = 1;
        } else {
            self.refresh(u);
            self.refresh(v);
        }
        Ok(eff)
    }

    /// Scans at most δ neighbors of a free `v` in ascending id, matching the first free one.
    fn partial_scan(&mut self, v: Vid, eff: &mut Effect) {
        if self.mate[v as usize].is_some() {
            return;
        }
        let found = self.adj[v as usize]
            .iter()
            .take(self.delta)
            .inspect(|_| eff.steps += 1)
            .copied()
            .find(|&w| self.mate[w as usize].is_none());
        if let Some(w) = found {
            self.pair(v, w);
            eff.replacements += 1;
        }
    }

    pub fn mdelta_delete(&mut self, u: Vid, v: Vid) -> Result<Effect> {
        if !self.adj[u as usize].remove(&v) {
            return Err(Error::AbsentEdge(u, v));
        }
        self.adj[v as usize].remove(&u);
        let mut eff = Effect {
            replacements: 0,
            steps: 2,
        };
        if self.mate[u as usize] == Some(v) {
            self.mate[u as usize] = None;
            self.mate[v as usize] = None;
            self.size -= 1;
            eff.replacements += 1;
            self.refresh(u);
            self.refresh(v);
            self.partial_scan(u, &mut eff);
            self.partial_scan(v, &mut eff);
        } else {
            self.refresh(u);
            self.refresh(v);
        }
        if let Some(&w) = self.heavy_free.iter().next() {
            self.partial_scan(w, &mut eff);
        }
        Ok(eff)
    }

    /// An edge between two free vertices, if any (the maximality witness).
    pub fn free_edge(&self) -> Option<(Vid, Vid)> {
        for (u, nb) in self.adj.iter().enumerate() {
            if self.mate[u].is_some() {
                continue;
            }
            if let Some(&w) = nb.iter().find(|&&w| self.mate[w as usize].is_none()) {
                return Some((u as Vid, w));
            }
        }
        None
    }

    /// Maximality check: a violation is a state with |M_δ| < δ that is not maximal.
    pub fn maxdelta_violation(&self) -> Option<(Vid, Vid)> {
        if self.size < self.delta {
            self.free_edge()
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector() {
        assert_eq!(select_output(0, 5), Output::UseMdelta);
        assert_eq!(select_output(4, 5), Output::UseMdelta);
        assert_eq!(select_output(5, 5), Output::UseMrand);
    }

    #[test]
    fn insert_rules() {
        let mut f = FallbackState::new(6, 6);
        f.mdelta_insert(0, 1).unwrap();
        assert_eq!(f.mate(0), Some(1));
        f.mdelta_insert(1, 2).unwrap();
        assert_eq!(f.mate(2), None);
        assert!(f.mdelta_insert(2, 1).is_err());
        // triangle fill-in
        f.mdelta_insert(0, 2).unwrap();
        assert_eq!(f.size(), 1);
        assert!(f.maxdelta_violation().is_none());
    }

    #[test]
    fn matched_deletion_rescans() {
        let mut f = FallbackState::new(6, 6);
        f.mdelta_insert(0, 1).unwrap();
        f.mdelta_insert(0, 2).unwrap();
        let e = f.mdelta_delete(0, 1).unwrap();
        assert_eq!(f.mate(0), Some(2));
        assert_eq!(e.replacements, 2);
        // unmatched deletion with both ends matched: bookkeeping only
        f.mdelta_insert(3, 4).unwrap();
        f.mdelta_insert(2, 3).unwrap();
        let e = f.mdelta_delete(2, 3).unwrap();
        assert_eq!(e.replacements, 0);
        assert!(f.mdelta_delete(2, 3).is_err());
    }

    #[test]
    fn heavy_free_vertex_gets_scanned() {
        let mut f = FallbackState::new(8, 2);
        for (a, b) in [(0, 1), (5, 6), (5, 0), (5, 1), (5, 7)] {
            f.mdelta_insert(a, b).unwrap();
        }
        f.mdelta_delete(5, 6).unwrap();
        assert_eq!(f.mate(5), None);
        // an unmatched deletion elsewhere still scans the smallest free vertex of degree ≥ δ
        let e = f.mdelta_delete(5, 0).unwrap();
        assert_eq!(f.mate(5), Some(7));
        assert_eq!(e.replacements, 1);
    }

    /// With a small δ the partial scan can leave two adjacent free vertices while
    /// |M_δ| < δ. Vertex 5 only ever inspects its two smallest neighbors 0 and 1,
    /// which are matched to each other, so its free neighbor 7 is never seen.
    #[test]
    fn small_delta_counterexample() {
        let mut f = FallbackState::new(8, 2);
        f.mdelta_insert(0, 1).unwrap();
        f.mdelta_insert(5, 6).unwrap();
        f.mdelta_insert(5, 0).unwrap();
        f.mdelta_insert(5, 1).unwrap();
        f.mdelta_insert(5, 7).unwrap();
        f.mdelta_delete(5, 6).unwrap();
        assert_eq!(f.size(), 1);
        assert_eq!(f.maxdelta_violation(), Some((5, 7)));
    }
}

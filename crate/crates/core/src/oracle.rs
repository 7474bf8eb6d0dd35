//! Future-deletion oracle over a fully scripted update sequence.

use rustc_hash::FxHashMap as HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Vid;
use crate::seq::{Op, UpdateSequence};

/// Deletion index of an edge occurrence; `None` means never deleted.
pub type DelTime = Option<u64>;

#[derive(Debug, Clone, Default)]
pub struct DeletionSchedule {
    intervals: HashMap<(Vid, Vid), Vec<(u64, DelTime)>>,
}

fn key(a: Vid, b: Vid) -> (Vid, Vid) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Orders deletion times with ∞ last.
fn rank(d: DelTime) -> u64 {
    d.unwrap_or(u64::MAX)
}

impl DeletionSchedule {
    pub fn build(seq: &UpdateSequence) -> Result<Self> {
        let mut intervals: HashMap<(Vid, Vid), Vec<(u64, DelTime)>> = HashMap::default();
        for (i, up) in seq.updates.iter().enumerate() {
            let list = intervals.entry(up.key()).or_default();
            let open = list.last().is_some_and(|&(_, d)| d.is_none());
            match up.op {
                Op::Insert if open => {
                    return Err(Error::Sequence {
                        index: i,
                        reason: format!("double insert of ({},{})", up.u, up.v),
                    })
                }
                Op::Insert => list.push((i as u64, None)),
                Op::Delete if !open => {
                    return Err(Error::Sequence {
                        index: i,
                        reason: format!("delete of absent ({},{})", up.u, up.v),
                    })
                }
                Op::Delete => list.last_mut().unwrap().1 = Some(i as u64),
            }
        }
        Ok(DeletionSchedule { intervals })
    }

    pub fn intervals(&self, u: Vid, v: Vid) -> &[(u64, DelTime)] {
        self.intervals.get(&key(u, v)).map_or(&[], |l| l.as_slice())
    }

    /// Deletion index of the occurrence of (u,v) alive at update `now`.
    pub fn next_deletion(&self, u: Vid, v: Vid, now: u64) -> Result<DelTime> {
        let list = self.intervals(u, v);
        let i = list.partition_point(|&(ins, _)| ins <= now);
        match i.checked_sub(1).map(|j| list[j]) {
            Some((_, d)) if rank(d) > now => Ok(d),
            _ => Err(Error::AbsentEdge(u, v)),
        }
    }

    /// The candidate whose edge to `v` is deleted last; ∞ beats every index, ties go to the smallest id.
    pub fn pick_latest_deleted(&self, v: Vid, candidates: &[Vid], now: u64) -> Option<Vid> {
        let mut best: Option<(u64, Vid)> = None;
        for &w in candidates {
            let d = rank(self.next_deletion(v, w, now).ok()?);
            best = match best {
                Some((bd, bw)) if bd > d || (bd == d && bw < w) => Some((bd, bw)),
                _ => Some((d, w)),
            };
        }
        best.map(|(_, w)| w)
    }

    /// Deleted-last rule applied to a random subset keeping each candidate with probability 1−ρ.
    pub fn pick_fuzzed<R: Rng>(&self, v: Vid, candidates: &[Vid], now: u64, rho: f64, rng: &mut R) -> Option<Vid> {
        let kept: Vec<Vid> = candidates.iter().copied().filter(|_| !rng.gen_bool(rho)).collect();
        if kept.is_empty() {
            return self.pick_latest_deleted(v, candidates, now);
        }
        self.pick_latest_deleted(v, &kept, now)
    }
}

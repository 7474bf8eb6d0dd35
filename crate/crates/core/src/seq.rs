//! Update sequences and their text format.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Vid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Insert,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Update {
    pub op: Op,
    pub u: Vid,
    pub v: Vid,
}

impl Update {
    pub fn ins(u: Vid, v: Vid) -> Self {
        Update { op: Op::Insert, u, v }
    }

    pub fn del(u: Vid, v: Vid) -> Self {
        Update { op: Op::Delete, u, v }
    }

    pub fn key(&self) -> (Vid, Vid) {
        if self.u < self.v {
            (self.u, self.v)
        } else {
            (self.v, self.u)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSequence {
    pub n: usize,
    pub updates: Vec<Update>,
    pub generator: String,
    pub seed: u64,
}

impl UpdateSequence {
    pub fn new(n: usize, updates: Vec<Update>) -> Self {
        UpdateSequence {
            n,
            updates,
            generator: "manual".into(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// Rejects self-loops, out-of-range ids, double inserts and deletes of absent edges.
    pub fn validate(&self) -> Result<()> {
        let mut present = HashSet::new();
        for (i, up) in self.updates.iter().enumerate() {
            let bad = |reason: String| Error::Sequence { index: i, reason };
            if up.u == up.v {
                return Err(bad(format!("self-loop on {}", up.u)));
            }
            if up.u as usize >= self.n || up.v as usize >= self.n {
                return Err(bad(format!("vertex out of range in ({},{})", up.u, up.v)));
            }
            match up.op {
                Op::Insert => {
                    if !present.insert(up.key()) {
                        return Err(bad(format!("double insert of ({},{})", up.u, up.v)));
                    }
                }
                Op::Delete => {
                    if !present.remove(&up.key()) {
                        return Err(bad(format!("delete of absent ({},{})", up.u, up.v)));
                    }
                }
            }
        }
        Ok(())
    }

    /// `n=<int>` on the first line, then `+ u v` or `- u v` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("n={}\n", self.n);
        for up in &self.updates {
            let c = if up.op == Op::Insert { '+' } else { '-' };
            let _ = writeln!(s, "{c} {} {}", up.u, up.v);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::Parse("empty input".into()))?;
        let n = head
            .trim()
            .strip_prefix("n=")
            .and_then(|x| x.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("bad header {head:?}")))?;
        let mut updates = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.split_whitespace();
            let op = match it.next() {
                Some("+") => Op::Insert,
                Some("-") => Op::Delete,
                _ => return Err(Error::Parse(format!("line {}: {line:?}", i + 2))),
            };
            let mut num = || -> Result<Vid> {
                it.next()
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("line {}: {line:?}", i + 2)))
            };
            let u = num()?;
            let v = num()?;
            updates.push(Update { op, u, v });
        }
        let seq = UpdateSequence::new(n, updates);
        seq.validate()?;
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let s = UpdateSequence::new(4, vec![Update::ins(0, 1), Update::ins(2, 3), Update::del(1, 0)]);
        let t = s.to_text();
        assert_eq!(t, "n=4\n+ 0 1\n+ 2 3\n- 1 0\n");
        assert_eq!(UpdateSequence::from_text(&t).unwrap().updates, s.updates);
    }

    #[test]
    fn validation_names_index() {
        let s = UpdateSequence::new(
            8,
            vec![
                Update::ins(0, 1),
                Update::del(0, 1),
                Update::ins(2, 3),
                Update::ins(4, 5),
                Update::ins(5, 6),
                Update::del(0, 1),
            ],
        );
        assert_eq!(
            s.validate(),
            Err(Error::Sequence {
                index: 5,
                reason: "delete of absent (0,1)".into()
            })
        );
        assert!(UpdateSequence::from_text("n=3\n+ 0 0\n").is_err());
        assert!(UpdateSequence::from_text("n=3\n+ 0 1\n+ 1 0\n").is_err());
        assert!(UpdateSequence::from_text("x\n").is_err());
    }
}

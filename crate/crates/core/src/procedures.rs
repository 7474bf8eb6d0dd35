//! Level changes, update handlers and the handle-free procedure, written as
//! resumable programs. A program advances one unit per [`Frame::step`] call;
//! the engine decides how many units fit into a tick.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{role, Cause, FreedBy, State, Vid};
use crate::oracle::DeletionSchedule;
use crate::ostree::OrderStatSet;
use crate::params::Mode;

/// Counters for the desk-scale escape hatches and the structural bounds.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ProcStats {
    /// Qualifying level whose candidate set was empty after pruning active vertices.
    pub fallthroughs: u64,
    pub under_sampled: u64,
    pub lstar_rises: u64,
    /// Handle-free subjects restarted because the chosen edge vanished mid-flight.
    pub restarts: u64,
    pub free_pair_repairs: u64,
    pub matches_created: u64,
    pub max_falls_per_program: u32,
    pub max_rises_per_program: u32,
    pub max_chain: u32,
}

pub struct Ctx<'a> {
    pub st: &'a mut State,
    pub rng: &'a mut ChaCha8Rng,
    pub oracle: Option<&'a DeletionSchedule>,
    /// Index of the update being processed.
    pub now: u64,
    pub stats: &'a mut ProcStats,
}

pub enum Step {
    Cont(u64),
    Done(u64),
    Call(Frame, u64),
}

pub enum Frame {
    SetLevel(SetLevelProg),
    HandleFree(HandleFreeProg),
}

impl Frame {
    pub fn step(&mut self, cx: &mut Ctx) -> Step {
        match self {
            Frame::SetLevel(p) => p.step(cx),
            Frame::HandleFree(p) => p.step(cx),
        }
    }
}

// ---- set_level ------------------------------------------------------------

enum SlPhase {
    Init,
    Scan { work: Vec<Vid>, idx: usize, added: bool },
}

pub struct SetLevelProg {
    pub v: Vid,
    pub dest: i32,
    phase: SlPhase,
}

impl SetLevelProg {
    pub fn new(v: Vid, dest: i32) -> Self {
        SetLevelProg {
            v,
            dest,
            phase: SlPhase::Init,
        }
    }

    fn step(&mut self, cx: &mut Ctx) -> Step {
        match &mut self.phase {
            SlPhase::Init => {
                let (work, added, cost) = cx.st.begin_set_level(self.v, self.dest);
                self.phase = SlPhase::Scan { work, idx: 0, added };
                Step::Cont(cost)
            }
            SlPhase::Scan { work, idx, added } => {
                if *idx < work.len() {
                    let w = work[*idx];
                    *idx += 1;
                    Step::Cont(cx.st.set_level_unit(self.v, w))
                } else {
                    Step::Done(cx.st.finish_set_level(self.v, *added))
                }
            }
        }
    }
}

// ---- handle_free ----------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum HfPhase {
    Select,
    AfterFall,
    AfterMateRise,
}

struct Cur {
    v: Vid,
    start: i32,
    target: i32,
    mate: Option<Vid>,
    sample: Vec<Vid>,
    sampled: bool,
    lstar_done: bool,
    phase: HfPhase,
}

/// Handle-free over a LIFO stack of subjects. The recursion on the freed
/// former mate is realized by pushing it, so one program owns the whole chain.
pub struct HandleFreeProg {
    stack: Vec<Vid>,
    cur: Option<Cur>,
    falls: u32,
    rises: u32,
    chain: u32,
}

impl HandleFreeProg {
    /// Subjects are handled last-in first-out.
    pub fn new(stack: Vec<Vid>) -> Self {
        HandleFreeProg {
            stack,
            cur: None,
            falls: 0,
            rises: 0,
            chain: 0,
        }
    }

    fn finish_stats(&self, cx: &mut Ctx) {
        let s = &mut cx.stats;
        s.max_falls_per_program = s.max_falls_per_program.max(self.falls);
        s.max_rises_per_program = s.max_rises_per_program.max(self.rises);
        s.max_chain = s.max_chain.max(self.chain);
    }

    fn step(&mut self, cx: &mut Ctx) -> Step {
        let Some(phase) = self.cur.as_ref().map(|c| c.phase) else {
            return self.begin(cx);
        };
        match phase {
            HfPhase::Select => self.select(cx),
            HfPhase::AfterFall => self.after_fall(cx),
            HfPhase::AfterMateRise => self.after_mate_rise(cx),
        }
    }

    fn begin(&mut self, cx: &mut Ctx) -> Step {
        let Some(v) = self.stack.pop() else {
            self.finish_stats(cx);
            return Step::Done(1);
        };
        let x = cx.st.vertex(v);
        let (level, matched, roles) = (x.level, x.mate.is_some(), x.roles);
        if matched || roles & role::NEXT_IN_LINE != 0 {
            // nothing to do, or a rise thread owns it
            return Step::Cont(1 + cx.st.remove_role(v, role::SUBJECT));
        }
        let cost = cx.st.add_role(v, role::SUBJECT);
        self.chain += 1;
        // a free subject only needs the free-neighbor check
        let phase = if level < 0 { HfPhase::AfterFall } else { HfPhase::Select };
        self.cur = Some(Cur {
            v,
            start: level,
            target: -1,
            mate: None,
            sample: Vec::new(),
            sampled: false,
            lstar_done: false,
            phase,
        });
        Step::Cont(cost + 1)
    }

    /// Non-active members of `pool` below `below`, sorted.
    fn candidates(st: &State, pool: impl Iterator<Item = Vid>, below: i32) -> Vec<Vid> {
        let mut c: Vec<Vid> = pool.filter(|&w| st.level(w) < below && !st.is_active(w)).collect();
        c.sort_unstable();
        c
    }

    /// Picks the mate among the first γ^j candidates and returns (mate, S*, cost).
    fn draw(cx: &mut Ctx, v: Vid, cand: &[Vid], j: usize) -> (Vid, Vec<Vid>, u64) {
        let cap = cx.st.p.gamma_pow(j).min(usize::MAX as u64) as usize;
        let sample: Vec<Vid> = cand[..cand.len().min(cap)].to_vec();
        let mut cost = sample.len() as u64;
        let offline = cx.st.p.mode == Mode::Offline;
        let picked = match cx.oracle {
            Some(o) if offline => o.pick_latest_deleted(v, &sample, cx.now),
            _ => None,
        };
        let w = match picked {
            Some(w) => w,
            None => {
                let mut set = OrderStatSet::from_sorted(&sample);
                let w = crate::graph::sample_uniform(&mut set, cap, cx.rng).expect("nonempty sample");
                cost += set.take_touched();
                w
            }
        };
        if cx.st.p.low_level_cut <= j && (sample.len() as u64) < cx.st.p.sample_lo(j) {
            cx.stats.under_sampled += 1;
        }
        (w, sample, cost)
    }

    fn select(&mut self, cx: &mut Ctx) -> Step {
        let cut = cx.st.p.low_level_cut;
        let cur = self.cur.as_mut().unwrap();
        let v = cur.v;
        let mut cost = cx.st.authenticate(v);
        let start = cx.st.level(v);
        cur.start = start;
        // φ_v(j) for j ≤ ℓ_v from one scan of O_v
        let mut hist = vec![0u64; (start + 2) as usize];
        for &x in cx.st.vertex(v).out() {
            let lx = cx.st.level(x);
            if lx < start {
                hist[(lx + 1) as usize] += 1;
            }
        }
        cost += cx.st.vertex(v).out().len() as u64;
        let mut phi = vec![0u64; (start + 1).max(0) as usize];
        let mut acc = 0;
        for j in 0..phi.len() {
            acc += hist[j];
            phi[j] = acc;
        }

        let mut choice: Option<(i32, Option<Vid>, Vec<Vid>, bool)> = None;
        for j in (0..phi.len()).rev() {
            if phi[j] < cx.st.p.gamma_pow(j) {
                continue;
            }
            if j >= cut {
                let cand = Self::candidates(cx.st, cx.st.vertex(v).out().iter().copied(), j as i32);
                cost += cx.st.vertex(v).out().len() as u64;
                if cand.is_empty() {
                    cx.stats.fallthroughs += 1;
                    continue;
                }
                let (w, sample, c) = Self::draw(cx, v, &cand, j);
                cost += c;
                choice = Some((j as i32, Some(w), sample, true));
            } else {
                let st = &*cx.st;
                let w = st
                    .vertex(v)
                    .out()
                    .iter()
                    .copied()
                    .filter(|&x| st.level(x) == -1 && !st.is_active(x))
                    .min();
                cost += st.vertex(v).out().len() as u64;
                choice = Some(match w {
                    Some(w) => (j as i32, Some(w), vec![w], false),
                    None => (-1, None, Vec::new(), false),
                });
            }
            break;
        }
        let (target, mate, sample, sampled) = choice.unwrap_or((-1, None, Vec::new(), false));
        if let Some(w) = mate {
            cost += cx.st.add_role(w, role::MATE);
        }
        let cur = self.cur.as_mut().unwrap();
        cur.target = target;
        cur.mate = mate;
        cur.sample = sample;
        cur.sampled = sampled;
        cur.lstar_done = false;
        cur.phase = HfPhase::AfterFall;
        self.falls += 1;
        Step::Call(Frame::SetLevel(SetLevelProg::new(v, target)), cost)
    }

    fn after_fall(&mut self, cx: &mut Ctx) -> Step {
        let cut = cx.st.p.low_level_cut;
        let cur = self.cur.as_mut().unwrap();
        let v = cur.v;
        let mut cost = 1;

        let Some(w) = cur.mate else {
            // v fell to −1; a free neighbor that was busy at selection time may be idle now
            let st = &*cx.st;
            let x = v_free_neighbor(st, v);
            cost += (st.vertex(v).out().len() + st.vertex(v).incoming(-1).len()) as u64;
            if let Some(x) = x {
                cost += cx.st.add_role(x, role::MATE);
                cx.stats.free_pair_repairs += 1;
                cur.mate = Some(x);
                cur.target = 0;
                cur.sample = vec![x];
                cur.sampled = false;
                cur.lstar_done = true;
                self.rises += 1;
                return Step::Call(Frame::SetLevel(SetLevelProg::new(v, 0)), cost);
            }
            cost += cx.st.remove_role(v, role::SUBJECT);
            self.cur = None;
            return Step::Cont(cost);
        };

        if !cur.lstar_done {
            cur.lstar_done = true;
            // conflict resolution: φ_v grew past a threshold above the target while v was falling
            let target = cur.target;
            let x = cx.st.vertex(v);
            let lstar = (target + 1..=cur.start)
                .rev()
                .map(|j| j as usize)
                .find(|&j| j >= cut && (x.phi(j) as u64) >= cx.st.p.gamma_pow(j));
            cost += (cur.start - target).max(0) as u64;
            if let Some(ls) = lstar {
                let pool: Vec<Vid> = x
                    .out()
                    .iter()
                    .copied()
                    .chain((target..ls as i32).flat_map(|b| x.incoming(b).iter().copied()))
                    .collect();
                cost += pool.len() as u64;
                let cand = Self::candidates(cx.st, pool.into_iter(), ls as i32);
                if !cand.is_empty() {
                    cost += cx.st.remove_role(w, role::MATE);
                    let (w2, sample, c) = Self::draw(cx, v, &cand, ls);
                    cost += c + cx.st.add_role(w2, role::MATE);
                    cx.stats.lstar_rises += 1;
                    let cur = self.cur.as_mut().unwrap();
                    cur.mate = Some(w2);
                    cur.sample = sample;
                    cur.sampled = true;
                    cur.target = ls as i32;
                    self.rises += 1;
                    return Step::Call(Frame::SetLevel(SetLevelProg::new(v, ls as i32)), cost);
                }
            }
        }

        let cur = self.cur.as_mut().unwrap();
        if !cx.st.has_edge(v, w) {
            cost += cx.st.remove_role(w, role::MATE);
            cx.stats.restarts += 1;
            cur.mate = None;
            cur.phase = HfPhase::Select;
            return Step::Cont(cost);
        }
        if let Some(w2) = cx.st.mate(w) {
            cx.st.remove_match(w, Cause::Mate);
            cost += 2;
            if !cx.st.is_active(w2) {
                cost += cx.st.add_role(w2, role::SUBJECT);
                self.stack.push(w2);
            }
        }
        let target = cur.target;
        cur.phase = HfPhase::AfterMateRise;
        self.rises += 1;
        Step::Call(Frame::SetLevel(SetLevelProg::new(w, target)), cost)
    }

    fn after_mate_rise(&mut self, cx: &mut Ctx) -> Step {
        let cut = cx.st.p.low_level_cut;
        let cur = self.cur.as_mut().unwrap();
        let (v, w) = (cur.v, cur.mate.unwrap());
        let mut cost = 1;
        if !cx.st.has_edge(v, w) {
            // w is left temporarily free at the target level; it joins this chain
            cost += cx.st.add_role(w, role::SUBJECT);
            cost += cx.st.remove_role(w, role::MATE);
            cx.st.mark_freed(w, FreedBy::Algorithm);
            self.stack.push(w);
            cx.stats.restarts += 1;
            cur.mate = None;
            cur.phase = HfPhase::Select;
            return Step::Cont(cost);
        }
        let level = cur.target as usize;
        let under = cur.sampled && level >= cut && (cur.sample.len() as u64) < cx.st.p.sample_lo(level);
        cost += cx.st.create_match(v, w, level, &cur.sample, under);
        cx.stats.matches_created += 1;
        cost += cx.st.remove_role(v, role::SUBJECT);
        cost += cx.st.remove_role(w, role::MATE);
        self.cur = None;
        Step::Cont(cost)
    }
}

/// Smallest non-active free neighbor of a vertex sitting at level −1.
fn v_free_neighbor(st: &State, v: Vid) -> Option<Vid> {
    let x = st.vertex(v);
    x.out()
        .iter()
        .chain(x.incoming(-1).iter())
        .copied()
        .filter(|&w| st.level(w) == -1 && !st.is_active(w))
        .min()
}

// ---- update handlers --------------------------------------------------------

/// Inserts the edge and matches two free endpoints at level 0.
pub fn handle_insertion(st: &mut State, u: Vid, v: Vid) -> Result<u64> {
    let mut cost = st.insert_edge_raw(u, v)?;
    if st.level(u) == -1 && st.level(v) == -1 && !st.is_active(u) && !st.is_active(v) {
        cost += st.set_level_now(u, 0);
        cost += st.set_level_now(v, 0);
        cost += st.create_match(u, v, 0, &[v], false);
    }
    Ok(cost)
}

/// Deletes the edge. A matched edge is first removed from the matching and its
/// endpoints are queued at their level, `u` first. Returns the cost and the
/// removed match level, if any.
pub fn handle_deletion(st: &mut State, u: Vid, v: Vid) -> Result<(u64, Option<usize>)> {
    if !st.has_edge(u, v) {
        return Err(crate::Error::AbsentEdge(u, v));
    }
    let mut cost = 1;
    let mut hit = None;
    if st.mate(u) == Some(v) {
        let level = st.level(u) as usize;
        st.remove_match(u, Cause::Adversary);
        st.push_queue(u);
        st.push_queue(v);
        cost += 4;
        hit = Some(level);
    }
    cost += st.delete_edge_raw(u, v)?;
    Ok((cost, hit))
}

//! The tick loop: the update handler, then the four schedulers, each as one
//! budgeted logical thread per level.
//!
//! A thread whose slot T_ℓ fits in its per-tick grant runs whole programs back
//! to back inside the tick. Otherwise the thread owns a slot of S ticks,
//! picks its work item only at the slot start, receives the grant each tick
//! and must finish before the slot ends. Slot lengths form a divisibility
//! chain, so the slot intervals of any two threads are nested or disjoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{role, Cause, FreedBy, State, Vid};
use crate::oracle::DeletionSchedule;
use crate::params::{Mode, Params};
use crate::procedures::{handle_deletion, handle_insertion, Ctx, Frame, HandleFreeProg, ProcStats, SetLevelProg, Step};
use crate::seq::{Op, Update};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sched {
    Temp,
    Rise,
    Shuffle,
    Unmatch,
}

impl Sched {
    pub const ORDER: [Sched; 4] = [Sched::Temp, Sched::Rise, Sched::Shuffle, Sched::Unmatch];

    pub fn name(self) -> &'static str {
        match self {
            Sched::Temp => "temp",
            Sched::Rise => "rise",
            Sched::Shuffle => "shuffle",
            Sched::Unmatch => "unmatch",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EngineOptions {
    /// Divides every per-tick grant. Values above 1 starve the schedulers on purpose.
    pub grant_divisor: u64,
    /// Keep the (start, end) tick interval of every multi-tick slot that ran a program.
    pub log_intervals: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            grant_divisor: 1,
            log_intervals: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotInterval {
    pub sched: Sched,
    pub level: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SchedSteps {
    pub temp: u64,
    pub rise: u64,
    pub shuffle: u64,
    pub unmatch: u64,
}

impl SchedSteps {
    fn add(&mut self, s: Sched, c: u64) {
        match s {
            Sched::Temp => self.temp += c,
            Sched::Rise => self.rise += c,
            Sched::Shuffle => self.shuffle += c,
            Sched::Unmatch => self.unmatch += c,
        }
    }

    pub fn total(&self) -> u64 {
        self.temp + self.rise + self.shuffle + self.unmatch
    }
}

/// One JSON-lines record per tick.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub t: u64,
    pub op: String,
    pub steps_total: u64,
    pub steps_handler: u64,
    pub steps_by_scheduler: SchedSteps,
    #[serde(rename = "|M|")]
    pub matching: usize,
    pub tf_adversary: usize,
    pub tf_algorithm: usize,
    pub per_level_queue_sizes: Vec<usize>,
    pub violations: usize,
    pub active: usize,
    /// Level of the matched edge this update deleted, if any.
    pub hit_level: Option<usize>,
}

struct Program {
    frames: Vec<Frame>,
    steps: u64,
    start: u64,
}

struct Thread {
    sched: Sched,
    level: usize,
    t: u64,
    grant: u64,
    /// Slot length in ticks; 0 marks a thread that completes its programs inside one tick.
    slot: u64,
    prog: Option<Program>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EngineCounters {
    pub ticks: u64,
    /// Adversarial deletions of matched edges, by level.
    pub hits_by_level: Vec<u64>,
    pub programs_by_level: Vec<u64>,
    /// Largest step count of a finished program, by level.
    pub max_program_steps: Vec<u64>,
    pub max_tick_steps: u64,
    pub max_handler_steps: u64,
    pub max_unit: u64,
    pub rise_picks: u64,
    pub sleeps: u64,
}

pub struct Engine {
    pub st: State,
    threads: Vec<Thread>,
    next_in_line: Vec<Option<Vid>>,
    hf_rng: ChaCha8Rng,
    oracle: Option<DeletionSchedule>,
    opts: EngineOptions,
    pub stats: ProcStats,
    pub counters: EngineCounters,
    pub intervals: Vec<SlotInterval>,
    tick: u64,
}

const HF_STREAM: u64 = 1 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Slot lengths in ticks for a Δ'-granted thread at virtual levels 0..=L+1.
/// Each non-zero entry is a multiple of the previous non-zero one.
fn slot_chain(p: &Params, grant: u64) -> Vec<u64> {
    let mut t = p.t.clone();
    t.push(p.t[p.l_max] * p.gamma);
    let mut out = Vec::with_capacity(t.len());
    let mut prev = 0u64;
    for &tl in &t {
        let s = if tl <= grant {
            0
        } else {
            let raw = tl.div_ceil(grant);
            if prev == 0 {
                raw
            } else {
                raw.div_ceil(prev) * prev
            }
        };
        if s > 0 {
            prev = s;
        }
        out.push(s);
    }
    out
}

impl Engine {
    pub fn new(p: &Params, oracle: Option<DeletionSchedule>, opts: EngineOptions) -> Result<Self> {
        if opts.grant_divisor == 0 {
            return Err(Error::Config("grant_divisor must be at least 1".into()));
        }
        let levels = p.levels();
        let g_fast = (p.delta_prime / opts.grant_divisor).max(1);
        let g_slow = (p.delta / opts.grant_divisor).max(1);
        let chain_fast = slot_chain(p, g_fast);
        // T_ℓ/Δ = T_{ℓ+1}/Δ', so a Δ-thread at ℓ shares the slot of a Δ'-thread at ℓ+1
        let chain_slow: Vec<u64> = if opts.grant_divisor == 1 {
            chain_fast[1..].to_vec()
        } else {
            let mut c = slot_chain(p, g_slow);
            c.pop();
            c
        };
        let mut threads = Vec::new();
        for s in Sched::ORDER {
            for l in (0..levels).rev() {
                let (grant, slot) = match s {
                    Sched::Unmatch => (g_slow, chain_slow[l]),
                    _ => (g_fast, chain_fast[l]),
                };
                if slot > 0 && grant < p.unit_cap() {
                    return Err(Error::Config(format!(
                        "{} grant {grant} at level {l} is below the unit cap {}",
                        s.name(),
                        p.unit_cap()
                    )));
                }
                threads.push(Thread {
                    sched: s,
                    level: l,
                    t: p.t[l],
                    grant,
                    slot,
                    prog: None,
                    rng: stream_rng(p.seed, (s.idx() * levels + l) as u64),
                });
            }
        }
        Ok(Engine {
            st: State::new(p),
            threads,
            next_in_line: vec![None; levels],
            hf_rng: stream_rng(p.seed, HF_STREAM),
            oracle,
            opts,
            stats: ProcStats::default(),
            counters: EngineCounters {
                hits_by_level: vec![0; levels],
                programs_by_level: vec![0; levels],
                max_program_steps: vec![0; levels],
                ..Default::default()
            },
            intervals: Vec::new(),
            tick: 0,
        })
    }

    pub fn params(&self) -> &Params {
        &self.st.p
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    /// (scheduler, level, slot ticks) of every thread; slot 0 means in-tick.
    pub fn slots(&self) -> Vec<(Sched, usize, u64)> {
        self.threads.iter().map(|t| (t.sched, t.level, t.slot)).collect()
    }

    pub fn next_in_line(&self) -> &[Option<Vid>] {
        &self.next_in_line
    }

    fn enabled(&self, s: Sched, level: usize) -> bool {
        let cut = self.st.p.low_level_cut;
        match s {
            Sched::Temp | Sched::Rise => true,
            Sched::Unmatch => level >= cut,
            // offline runs only need unmatch and rise
            Sched::Shuffle => level >= cut && self.st.p.mode == Mode::Oblivious,
        }
    }

    pub fn tick(&mut self, up: Update) -> Result<Metrics> {
        let now = self.tick;
        let (steps_handler, hit) = match up.op {
            Op::Insert => (handle_insertion(&mut self.st, up.u, up.v)?, None),
            Op::Delete => handle_deletion(&mut self.st, up.u, up.v)?,
        };
        if let Some(l) = hit {
            self.counters.hits_by_level[l] += 1;
        }
        let mut by = SchedSteps::default();
        for i in 0..self.threads.len() {
            let (s, l) = (self.threads[i].sched, self.threads[i].level);
            if !self.enabled(s, l) {
                continue;
            }
            let used = if self.threads[i].slot == 0 {
                self.run_instant(i, now)?
            } else {
                self.run_slotted(i, now)?
            };
            by.add(s, used);
        }
        let cap = self.st.p.active_cap;
        if self.st.max_active > cap {
            return Err(Error::ActiveCap {
                size: self.st.max_active,
                cap,
            });
        }
        let total = steps_handler + by.total();
        let c = &mut self.counters;
        c.ticks += 1;
        c.max_tick_steps = c.max_tick_steps.max(total);
        c.max_handler_steps = c.max_handler_steps.max(steps_handler);
        self.tick += 1;
        let (tf_adversary, tf_algorithm) = self.temp_free_counts();
        Ok(Metrics {
            t: now,
            op: format!("{}{},{}", if up.op == Op::Insert { '+' } else { '-' }, up.u, up.v),
            steps_total: total,
            steps_handler,
            steps_by_scheduler: by,
            matching: self.st.matching_size(),
            tf_adversary,
            tf_algorithm,
            per_level_queue_sizes: (0..self.st.p.levels()).map(|l| self.st.queue_len(l)).collect(),
            violations: 0,
            active: self.st.active().len(),
            hit_level: hit,
        })
    }

    /// Temporarily free vertices split by who freed them: queued vertices and
    /// adversary-freed active ones, then algorithm-freed active ones.
    pub fn temp_free_counts(&self) -> (usize, usize) {
        let mut adv: usize = (0..self.st.p.levels()).map(|l| self.st.queue_len(l)).sum();
        let mut alg = 0;
        for &v in self.st.active() {
            let x = self.st.vertex(v);
            if x.level >= 0 && x.mate.is_none() {
                match x.freed_by {
                    Some(FreedBy::Adversary) => adv += 1,
                    _ => alg += 1,
                }
            }
        }
        (adv, alg)
    }

    fn run_instant(&mut self, i: usize, now: u64) -> Result<u64> {
        let (t, grant) = (self.threads[i].t, self.threads[i].grant);
        let mut reserved = 0;
        let mut used = 0;
        while reserved + t <= grant {
            let Some(prog) = self.select_work(i, now) else {
                break;
            };
            reserved += t;
            let mut prog = prog;
            self.drive(i, &mut prog, now, u64::MAX)?;
            used += prog.steps;
            self.finish_program(i, &prog)?;
        }
        Ok(used)
    }

    fn run_slotted(&mut self, i: usize, now: u64) -> Result<u64> {
        let slot = self.threads[i].slot;
        let mut used = 0;
        if now.is_multiple_of(slot) {
            debug_assert!(self.threads[i].prog.is_none());
            match self.select_work(i, now) {
                Some(p) => {
                    used += p.steps;
                    if self.opts.log_intervals {
                        let th = &self.threads[i];
                        self.intervals.push(SlotInterval {
                            sched: th.sched,
                            level: th.level,
                            start: now,
                            end: now + slot,
                        });
                    }
                    self.threads[i].prog = Some(p);
                }
                None => self.counters.sleeps += 1,
            }
        }
        if let Some(mut prog) = self.threads[i].prog.take() {
            let budget = self.threads[i].grant - used.min(self.threads[i].grant);
            let before = prog.steps;
            let done = self.drive(i, &mut prog, now, budget)?;
            used += prog.steps - before;
            if done {
                self.finish_program(i, &prog)?;
            } else if (now + 1).is_multiple_of(slot) {
                let th = &self.threads[i];
                return Err(Error::BudgetOverrun {
                    scheduler: th.sched.name(),
                    level: th.level,
                    used: prog.steps,
                    slot,
                    t: th.t,
                });
            } else {
                self.threads[i].prog = Some(prog);
            }
        }
        Ok(used)
    }

    fn finish_program(&mut self, i: usize, prog: &Program) -> Result<()> {
        let th = &self.threads[i];
        if prog.steps > th.t {
            return Err(Error::BudgetOverrun {
                scheduler: th.sched.name(),
                level: th.level,
                used: prog.steps,
                slot: th.slot,
                t: th.t,
            });
        }
        let l = th.level;
        self.counters.programs_by_level[l] += 1;
        self.counters.max_program_steps[l] = self.counters.max_program_steps[l].max(prog.steps);
        let _ = prog.start;
        Ok(())
    }

    /// Runs units while the next one is guaranteed to fit into `budget`.
    /// Returns whether the program finished.
    fn drive(&mut self, i: usize, prog: &mut Program, now: u64, budget: u64) -> Result<bool> {
        let cap = self.st.p.unit_cap();
        let t = self.threads[i].t;
        let mut spent = 0u64;
        let mut cx = Ctx {
            st: &mut self.st,
            rng: &mut self.hf_rng,
            oracle: self.oracle.as_ref(),
            now,
            stats: &mut self.stats,
        };
        while let Some(top) = prog.frames.last_mut() {
            if budget != u64::MAX && spent + cap > budget {
                return Ok(false);
            }
            let (cost, res) = match top.step(&mut cx) {
                Step::Cont(c) => (c, None),
                Step::Done(c) => (c, Some(None)),
                Step::Call(f, c) => (c, Some(Some(f))),
            };
            match res {
                None => {}
                Some(None) => {
                    prog.frames.pop();
                }
                Some(Some(f)) => prog.frames.push(f),
            }
            if cost > cap {
                return Err(Error::UnitOverrun { cost, cap });
            }
            self.counters.max_unit = self.counters.max_unit.max(cost);
            spent += cost;
            prog.steps += cost;
            if prog.steps > t {
                let th = &self.threads[i];
                return Err(Error::BudgetOverrun {
                    scheduler: th.sched.name(),
                    level: th.level,
                    used: prog.steps,
                    slot: th.slot,
                    t,
                });
            }
        }
        Ok(true)
    }

    // ---- work items ----------------------------------------------------------

    fn select_work(&mut self, i: usize, now: u64) -> Option<Program> {
        let (s, l) = (self.threads[i].sched, self.threads[i].level);
        let (frames, cost) = match s {
            Sched::Temp => self.work_temp(l)?,
            Sched::Unmatch => {
                let e = self.st.samples.smallest(l)?;
                let u = e.u;
                self.unmatch_work(u, Cause::Unmatch)
            }
            Sched::Shuffle => {
                let e = self.st.samples.random(l, &mut self.threads[i].rng)?;
                let u = e.u;
                self.unmatch_work(u, Cause::Shuffle)
            }
            Sched::Rise => self.work_rise(l, self.threads[i].slot > 0)?,
        };
        Some(Program {
            frames,
            steps: cost,
            start: now,
        })
    }

    fn work_temp(&mut self, l: usize) -> Option<(Vec<Frame>, u64)> {
        let (v, probes) = self.st.pop_queue(l);
        let v = v?;
        let cost = probes + self.st.add_role(v, role::SUBJECT);
        Some((vec![Frame::HandleFree(HandleFreeProg::new(vec![v]))], cost))
    }

    /// Removes the matched edge on `u`; its non-active endpoints become subjects, `u` first.
    fn unmatch_work(&mut self, u: Vid, cause: Cause) -> (Vec<Frame>, u64) {
        let (a, b) = self.st.remove_match(u, cause).expect("matched edge");
        let mut cost = 2;
        let mut stack = Vec::new();
        for x in [b, a] {
            if !self.st.is_active(x) {
                cost += self.st.add_role(x, role::SUBJECT);
                stack.push(x);
            }
        }
        (vec![Frame::HandleFree(HandleFreeProg::new(stack))], cost)
    }

    fn qualifies(&self, v: Vid, l: usize) -> bool {
        let x = self.st.vertex(v);
        x.level < l as i32 && x.phi(l) as u64 >= self.st.p.gamma_pow(l)
    }

    fn work_rise(&mut self, l: usize, keep_next: bool) -> Option<(Vec<Frame>, u64)> {
        let mut cost = 1;
        let mut chosen = None;
        if let Some(x) = self.next_in_line[l].take() {
            cost += self.st.add_role(x, role::SUBJECT);
            cost += self.st.authenticate(x);
            cost += self.st.remove_role(x, role::NEXT_IN_LINE);
            if self.qualifies(x, l) {
                chosen = Some(x);
            } else {
                if self.st.mate(x).is_none() {
                    // it was skipped by handle-free while reserved here
                    return Some((vec![Frame::HandleFree(HandleFreeProg::new(vec![x]))], cost));
                }
                cost += self.st.remove_role(x, role::SUBJECT);
            }
        }
        let v = match chosen {
            Some(v) => v,
            None => {
                let v = self.st.max_phi_vertex(l, &Default::default())?;
                cost += 1 + self.st.authenticate(v);
                if !self.qualifies(v, l) {
                    return None;
                }
                cost += self.st.add_role(v, role::SUBJECT);
                v
            }
        };
        self.counters.rise_picks += 1;
        let mut stack = Vec::new();
        if let Some((_, w)) = self.st.remove_match(v, Cause::Rise) {
            cost += 2;
            if !self.st.is_active(w) {
                cost += self.st.add_role(w, role::SUBJECT);
                stack.push(w);
            }
        }
        stack.push(v);
        if keep_next {
            if let Some(y) = self.st.max_phi_vertex(l, &Default::default()) {
                cost += 1;
                if self.qualifies(y, l) {
                    cost += self.st.add_role(y, role::NEXT_IN_LINE);
                    self.next_in_line[l] = Some(y);
                }
            }
        }
        let frames = vec![
            Frame::HandleFree(HandleFreeProg::new(stack)),
            Frame::SetLevel(SetLevelProg::new(v, l as i32)),
        ];
        Some((frames, cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{derive, Config};

    fn engine(n: usize) -> Engine {
        Engine::new(&derive(&Config::new(n, 0.1)).unwrap(), None, EngineOptions::default()).unwrap()
    }

    #[test]
    fn first_insert_matches_at_level_zero() {
        let mut e = engine(64);
        let m = e.tick(Update::ins(1, 2)).unwrap();
        assert_eq!(e.st.mate(1), Some(2));
        assert_eq!(e.st.level(2), 0);
        assert_eq!(m.steps_by_scheduler.total(), 0);
        assert_eq!(m.matching, 1);
    }

    #[test]
    fn low_level_deletion_resolved_in_tick() {
        let mut e = engine(64);
        e.tick(Update::ins(0, 1)).unwrap();
        e.tick(Update::ins(0, 2)).unwrap();
        let m = e.tick(Update::del(0, 1)).unwrap();
        assert_eq!(m.per_level_queue_sizes[0], 0);
        assert_eq!(e.st.mate(0), Some(2));
        assert_eq!(e.st.level(1), -1);
        assert_eq!(m.tf_adversary + m.tf_algorithm, 0);
    }

    #[test]
    fn slot_chain_divides() {
        for n in [64usize, 256, 1024] {
            let p = derive(&Config::new(n, 0.1)).unwrap();
            for div in [1u64, 4, 16] {
                let c = slot_chain(&p, (p.delta_prime / div).max(1));
                let nz: Vec<u64> = c.iter().copied().filter(|&s| s > 0).collect();
                for w in nz.windows(2) {
                    assert_eq!(w[1] % w[0], 0, "n={n} div={div} {c:?}");
                }
            }
        }
    }

    #[test]
    fn default_slots_at_n64() {
        let e = engine(64);
        let slots = e.slots();
        let get = |s: Sched, l: usize| slots.iter().find(|x| x.0 == s && x.1 == l).unwrap().2;
        // T_2 = 186624 ≤ Δ' = 933120, while T_2 > Δ = 155520
        assert_eq!(get(Sched::Temp, 2), 0);
        assert_eq!(get(Sched::Shuffle, 3), 2);
        assert_eq!(get(Sched::Unmatch, 2), 2);
        assert_eq!(get(Sched::Unmatch, 3), 8);
    }
}

//! Sequence generators, the two-instance epoch scheme and the run driver.

use std::collections::BTreeSet;
use std::io::Write;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxBuildHasher;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineOptions, Metrics};
use crate::error::{Error, Result};
use crate::fallback::FallbackState;
use crate::graph::Vid;
use crate::oracle::DeletionSchedule;
use crate::params::{ceil_log2, derive, Config, Mode};
use crate::seq::{Op, Update, UpdateSequence};
use crate::transform::{Phase, TransformState};
use crate::verify::{amm_metrics, audit_invariants, max_matching_exact, BadEdgeShadow, Violation, ViolationReport};

pub type Edge = (Vid, Vid);

fn key(a: Vid, b: Vid) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

// ---- generators --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Random,
    SlidingWindow,
    ChurnMatchedProxy,
    OfflineStress,
}

impl Model {
    pub const ALL: [Model; 4] = [
        Model::Random,
        Model::SlidingWindow,
        Model::ChurnMatchedProxy,
        Model::OfflineStress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Model::Random => "random",
            Model::SlidingWindow => "sliding-window",
            Model::ChurnMatchedProxy => "churn-matched-proxy",
            Model::OfflineStress => "offline-stress",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown model {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub model: Model,
    pub n: usize,
    pub length: usize,
    pub seed: u64,
    /// Target fraction of all vertex pairs present (random, proxy, stress peak).
    pub density: f64,
    /// Live edges kept by the sliding window.
    pub window: usize,
    /// Degree cap for bounded-degree graphs.
    pub max_degree: Option<usize>,
    /// ε of the throwaway engine behind the proxy model.
    pub proxy_epsilon: f64,
}

impl GenSpec {
    pub fn new(model: Model, n: usize, length: usize, seed: u64) -> Self {
        let pairs = n * n.saturating_sub(1) / 2;
        GenSpec {
            model,
            n,
            length,
            seed,
            density: 0.5,
            window: pairs / 2,
            max_degree: None,
            proxy_epsilon: 0.1,
        }
    }

    pub fn density(mut self, d: f64) -> Self {
        self.density = d;
        self
    }

    pub fn window(mut self, w: usize) -> Self {
        self.window = w;
        self
    }

    pub fn max_degree(mut self, d: usize) -> Self {
        self.max_degree = Some(d);
        self
    }
}

/// Present edges with O(1) uniform choice, plus degrees.
struct Pool {
    n: usize,
    edges: IndexSet<Edge, FxBuildHasher>,
    deg: Vec<usize>,
    cap: usize,
}

impl Pool {
    fn new(n: usize, cap: Option<usize>) -> Self {
        Pool {
            n,
            edges: IndexSet::default(),
            deg: vec![0; n],
            cap: cap.unwrap_or(usize::MAX),
        }
    }

    fn pairs(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    /// A uniformly random absent pair within the degree cap, by rejection.
    fn absent(&self, rng: &mut ChaCha8Rng) -> Option<Edge> {
        for _ in 0..64 * self.n {
            let a = rng.gen_range(0..self.n as Vid);
            let b = rng.gen_range(0..self.n as Vid);
            let e = key(a, b);
            if a != b && !self.edges.contains(&e) && self.deg[a as usize] < self.cap && self.deg[b as usize] < self.cap
            {
                return Some(e);
            }
        }
        None
    }

    fn insert(&mut self, e: Edge) -> Update {
        self.edges.insert(e);
        self.deg[e.0 as usize] += 1;
        self.deg[e.1 as usize] += 1;
        Update::ins(e.0, e.1)
    }

    fn delete(&mut self, e: Edge) -> Update {
        self.edges.swap_remove(&e);
        self.deg[e.0 as usize] -= 1;
        self.deg[e.1 as usize] -= 1;
        Update::del(e.0, e.1)
    }

    fn random_present(&self, rng: &mut ChaCha8Rng) -> Option<Edge> {
        (!self.edges.is_empty()).then(|| self.edges[rng.gen_range(0..self.edges.len())])
    }

    /// Insert below the target, delete above it, with some slack both ways.
    fn random_step(&mut self, target: usize, rng: &mut ChaCha8Rng) -> Update {
        let p_ins = if self.edges.len() < target { 0.75 } else { 0.25 };
        if self.edges.is_empty() || rng.gen_bool(p_ins) {
            if let Some(e) = self.absent(rng) {
                return self.insert(e);
            }
        }
        let e = self.random_present(rng).expect("pool cannot be empty and full at once");
        self.delete(e)
    }
}

/// Deterministic per seed. Every output passes `UpdateSequence::validate`.
pub fn gen_sequence(spec: &GenSpec) -> Result<UpdateSequence> {
    let n = spec.n;
    if n < 2 {
        return Err(Error::Config("generators need n ≥ 2".into()));
    }
    if !(0.0..=1.0).contains(&spec.density) {
        return Err(Error::Config(format!("density {} outside [0, 1]", spec.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool = Pool::new(n, spec.max_degree);
    let target = (spec.density * pool.pairs() as f64).round() as usize;
    let mut ups = Vec::with_capacity(spec.length);
    match spec.model {
        Model::Random => {
            while ups.len() < spec.length {
                ups.push(pool.random_step(target, &mut rng));
            }
        }
        Model::SlidingWindow => {
            if spec.window == 0 || spec.window >= pool.pairs() {
                return Err(Error::Config(format!("window {} infeasible for n={n}", spec.window)));
            }
            let mut order = std::collections::VecDeque::new();
            while ups.len() < spec.length {
                if order.len() > spec.window {
                    let e = order.pop_front().unwrap();
                    ups.push(pool.delete(e));
                    continue;
                }
                let e = pool
                    .absent(&mut rng)
                    .ok_or_else(|| Error::Config("no absent pair within the degree cap".into()))?;
                order.push_back(e);
                ups.push(pool.insert(e));
            }
        }
        Model::ChurnMatchedProxy => {
            // a throwaway engine with its own seed decides which edges look matched;
            // the real run never sees it, so the sequence stays oblivious
            let mut cfg = Config::new(n, spec.proxy_epsilon).with_seed(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
            cfg.mode = Mode::Oblivious;
            // slack on T_ℓ and Δ alike so tiny n cannot overrun; only its matching is used
            cfg.c_t *= 4;
            cfg.c_delta_upd *= 4;
            let p = derive(&cfg)?;
            let mut proxy = Engine::new(&p, None, EngineOptions::default())?;
            while ups.len() < spec.length {
                let grow = pool.edges.len() < target;
                let up = if pool.edges.is_empty() || rng.gen_bool(if grow { 0.75 } else { 0.25 }) {
                    match pool.absent(&mut rng) {
                        Some(e) => pool.insert(e),
                        None => {
                            let e = pool.random_present(&mut rng).unwrap();
                            pool.delete(e)
                        }
                    }
                } else {
                    let m = proxy.st.matching();
                    let e = if !m.is_empty() && rng.gen_bool(0.9) {
                        let (a, b) = m[rng.gen_range(0..m.len())];
                        key(a, b)
                    } else {
                        pool.random_present(&mut rng).unwrap()
                    };
                    pool.delete(e)
                };
                proxy.tick(up)?;
                proxy.st.events.clear();
                ups.push(up);
            }
        }
        Model::OfflineStress => {
            // fill to the target, then delete a burst of 60% of the edges
            // biased toward high-degree vertices, then refill
            let mut burst: Vec<Edge> = Vec::new();
            while ups.len() < spec.length {
                if let Some(e) = burst.pop() {
                    if pool.edges.contains(&e) {
                        ups.push(pool.delete(e));
                    }
                    continue;
                }
                if pool.edges.len() >= target.max(1) {
                    let mut all: Vec<Edge> = pool.edges.iter().copied().collect();
                    all.sort_unstable();
                    all.shuffle(&mut rng);
                    let deg = &pool.deg;
                    all.sort_by_key(|&(a, b)| std::cmp::Reverse(deg[a as usize] + deg[b as usize]));
                    let k = all.len() * 3 / 5;
                    let mut chosen: Vec<Edge> = all[..k.max(1)].to_vec();
                    chosen.shuffle(&mut rng);
                    burst = chosen;
                    continue;
                }
                match pool.absent(&mut rng) {
                    Some(e) => ups.push(pool.insert(e)),
                    None => {
                        let e = pool.random_present(&mut rng).unwrap();
                        ups.push(pool.delete(e));
                    }
                }
            }
        }
    }
    let mut seq = UpdateSequence::new(n, ups);
    seq.generator = spec.model.name().into();
    seq.seed = spec.seed;
    seq.validate()?;
    Ok(seq)
}

// ---- epoch scheme ------------------------------------------------------------------

/// Edges copied from the old instance into the new one per update.
pub const C_COPY: usize = 4;

/// The updates one engine instance sees over its life, tagged with the real
/// update index that triggers them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceScript {
    pub life: usize,
    pub start: usize,
    /// Exclusive; `None` while still alive at the end of the sequence.
    pub end: Option<usize>,
    pub updates: Vec<(usize, Update)>,
}

impl InstanceScript {
    pub fn as_sequence(&self, n: usize) -> UpdateSequence {
        UpdateSequence::new(n, self.updates.iter().map(|x| x.1).collect())
    }
}

/// Splits a sequence into epochs of `t_max` updates over two mirrored
/// instances. During epoch e, life e is the old instance and serves output;
/// life e+1 receives every insertion, the deletions of edges it holds, and up
/// to `c_copy` surviving old edges per update. Errors if the two edge sets
/// differ at an epoch boundary.
pub fn plan_epochs(seq: &UpdateSequence, t_max: usize, c_copy: usize) -> Result<Vec<InstanceScript>> {
    if t_max == 0 {
        return Err(Error::Config("t_max must be positive".into()));
    }
    let len = seq.len();
    let mut scripts = vec![InstanceScript {
        life: 0,
        start: 0,
        end: None,
        updates: Vec::new(),
    }];
    let mut old_edges: BTreeSet<Edge> = BTreeSet::new();
    let mut epoch = 0;
    while epoch * t_max < len {
        let s = epoch * t_max;
        let e_end = (s + t_max).min(len);
        let old = epoch;
        let new = epoch + 1;
        scripts.push(InstanceScript {
            life: new,
            start: s,
            end: None,
            updates: Vec::new(),
        });
        let snapshot: Vec<Edge> = old_edges.iter().copied().collect();
        let mut cursor = 0;
        let mut new_edges: BTreeSet<Edge> = BTreeSet::new();
        for i in s..e_end {
            let up = seq.updates[i];
            let k = up.key();
            scripts[old].updates.push((i, up));
            match up.op {
                Op::Insert => {
                    old_edges.insert(k);
                    new_edges.insert(k);
                    scripts[new].updates.push((i, up));
                }
                Op::Delete => {
                    old_edges.remove(&k);
                    if new_edges.remove(&k) {
                        scripts[new].updates.push((i, up));
                    }
                }
            }
            let mut copied = 0;
            while copied < c_copy && cursor < snapshot.len() {
                let e = snapshot[cursor];
                cursor += 1;
                if old_edges.contains(&e) && new_edges.insert(e) {
                    scripts[new].updates.push((i, Update::ins(e.0, e.1)));
                    copied += 1;
                }
            }
        }
        if e_end == s + t_max {
            if old_edges != new_edges {
                return Err(Error::EpochMismatch(e_end as u64));
            }
            scripts[old].end = Some(e_end);
        }
        epoch += 1;
    }
    Ok(scripts)
}

// ---- run driver ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmmConstants {
    pub c_am: f64,
    pub c_log: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub config: Config,
    /// Audit every k engine ticks; 0 disables.
    pub audit_every: u64,
    /// Abort at the first violation.
    pub abort_on_violation: bool,
    /// Random checkpoints for the exact-matching ratio (n ≤ 64 only).
    pub checkpoints: usize,
    pub combine: bool,
    pub amm: Option<AmmConstants>,
    pub engine: EngineOptionsCfg,
}

/// Serializable mirror of the engine options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineOptionsCfg {
    pub grant_divisor: u64,
}

impl Default for EngineOptionsCfg {
    fn default() -> Self {
        EngineOptionsCfg { grant_divisor: 1 }
    }
}

impl RunConfig {
    pub fn new(config: Config) -> Self {
        RunConfig {
            config,
            audit_every: 1,
            abort_on_violation: false,
            checkpoints: 0,
            combine: false,
            amm: None,
            engine: EngineOptionsCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checkpoint {
    pub t: usize,
    pub exact: usize,
    pub m_output: usize,
    pub m_rand: usize,
    pub m_delta: usize,
    /// Transform output size in combine mode.
    pub m_combined: Option<usize>,
}

impl Checkpoint {
    pub fn ratio(exact: usize, m: usize) -> f64 {
        if exact == 0 {
            1.0
        } else if m == 0 {
            f64::INFINITY
        } else {
            exact as f64 / m as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AmmSummary {
    /// Updates with |M_output| ≥ 50.
    pub ticks: u64,
    pub violations: u64,
    /// max (tf_adversary + tf_algorithm) / (ε·|M_output|) over those updates.
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// The same against |M_rand| wherever |M_rand| ≥ 50.
    pub engine_ticks: u64,
    pub engine_violations: u64,
    pub engine_max_ratio: f64,
    pub engine_mean_ratio: f64,
    pub max_tf: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransformSummary {
    pub windows: u64,
    pub steps: u64,
    pub max_replacements: usize,
    /// Steps whose replacements exceeded 3r.
    pub over_budget: u64,
    pub risky_added: u64,
    pub audit_failures: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub n: usize,
    pub generator: String,
    pub mode: String,
    pub updates: usize,
    pub ticks: u64,
    pub instances: usize,
    pub epochs_checked: u64,
    pub max_tick_steps: u64,
    pub max_handler_steps: u64,
    pub step_ceiling: u64,
    /// Set when the run stopped early: (update index, error).
    pub aborted: Option<(usize, String)>,
    pub report: ViolationReport,
    /// Adversarial deletions of matched edges at levels ≥ low_level_cut.
    pub hits_high: u64,
    pub hits_by_level: Vec<u64>,
    /// Ticks ending with a nonempty queue at some level ≥ low_level_cut.
    pub high_queue_ticks: u64,
    pub good_hits: u64,
    pub under_sampled: u64,
    pub maxdelta_checks: u64,
    pub amm: AmmSummary,
    pub checkpoints: Vec<Checkpoint>,
    pub transform: TransformSummary,
    pub final_matching: usize,
    pub final_edges: usize,
}

/// One JSON line per real update.
#[derive(Serialize)]
struct Line<'a> {
    #[serde(flatten)]
    metrics: &'a Metrics,
    m_rand: usize,
    m_delta: usize,
    m_output: usize,
    output: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    m_combined: Option<usize>,
    epoch: usize,
}

struct Live {
    life: usize,
    engine: Engine,
    shadow: BadEdgeShadow,
    script: Vec<(usize, Update)>,
    pos: usize,
    end: Option<usize>,
}

fn violation(name: &'static str, t: u64, detail: String) -> Violation {
    Violation {
        invariant: name,
        t,
        detail,
    }
}

/// Drives the engine(s) over `seq`, fallback in lockstep. Lines go to `out`
/// when given. Engine errors stop the run and are reported in `aborted`.
pub fn run(seq: &UpdateSequence, rc: &RunConfig, mut out: Option<&mut dyn Write>) -> Result<RunSummary> {
    seq.validate()?;
    if seq.n != rc.config.n {
        return Err(Error::Config(format!(
            "sequence has n={}, config has n={}",
            seq.n, rc.config.n
        )));
    }
    let p = derive(&rc.config)?;
    if !p.epoching && seq.len() as u64 > p.t_max {
        return Err(Error::Config(format!(
            "{} updates exceed t_max={} without epoching",
            seq.len(),
            p.t_max
        )));
    }
    if rc.checkpoints > 0 && p.n > 64 {
        return Err(Error::TooLarge(p.n));
    }
    let scripts = if p.epoching {
        plan_epochs(seq, p.t_max as usize, C_COPY)?
    } else {
        vec![InstanceScript {
            life: 0,
            start: 0,
            end: None,
            updates: seq.updates.iter().copied().enumerate().collect(),
        }]
    };
    let opts = EngineOptions {
        grant_divisor: rc.engine.grant_divisor,
        log_intervals: false,
    };
    let mut sum = RunSummary {
        n: p.n,
        generator: seq.generator.clone(),
        mode: format!("{:?}", p.mode).to_lowercase(),
        updates: 0,
        instances: scripts.len(),
        step_ceiling: p.scheduler_ceiling() + p.c_update(),
        hits_by_level: vec![0; p.levels()],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0xc4ec_4b01);
    let mut checkpoints: BTreeSet<usize> = BTreeSet::new();
    if rc.checkpoints > 0 && !seq.is_empty() {
        let mut idx: Vec<usize> = (0..seq.len()).collect();
        idx.shuffle(&mut rng);
        checkpoints.extend(idx.into_iter().take(rc.checkpoints));
    }

    let mut pending: std::collections::VecDeque<InstanceScript> = scripts.into();
    let mut live: Vec<Live> = Vec::new();
    let mut fb = FallbackState::new(p.n, p.delta_threshold as usize);
    let mut graph: BTreeSet<Edge> = BTreeSet::new();
    let mut combine: Option<TransformState> = None;
    let eps = (p.eps.0 as u64, p.eps.1 as u64);
    let lg = ceil_log2(p.n as u64) as f64;
    let (mut amm_sum, mut amm_esum) = (0.0, 0.0);
    let mut global_tick: u64 = 0;

    'updates: for i in 0..seq.len() {
        // start instances whose life begins here
        while pending.front().is_some_and(|s| s.start == i) {
            let s = pending.pop_front().unwrap();
            let mut ip = p.clone();
            ip.seed = p.seed.wrapping_add(s.life as u64);
            let oracle = match p.mode {
                Mode::Offline => Some(DeletionSchedule::build(&s.as_sequence(p.n))?),
                Mode::Oblivious => None,
            };
            live.push(Live {
                life: s.life,
                engine: Engine::new(&ip, oracle, opts)?,
                shadow: BadEdgeShadow::new(),
                script: s.updates,
                pos: 0,
                end: s.end,
            });
        }
        let up = seq.updates[i];
        let mut out_metrics: Option<Metrics> = None;
        for inst in live.iter_mut() {
            while inst.pos < inst.script.len() && inst.script[inst.pos].0 == i {
                let iup = inst.script[inst.pos].1;
                inst.pos += 1;
                let m = match inst.engine.tick(iup) {
                    Ok(m) => m,
                    Err(e) => {
                        sum.aborted = Some((i, e.to_string()));
                        break 'updates;
                    }
                };
                global_tick += 1;
                sum.ticks += 1;
                let events = std::mem::take(&mut inst.engine.st.events);
                inst.shadow.observe(&p, iup.op == Op::Insert, iup.u, iup.v, &events);
                let st = &inst.engine.st;
                if (p.low_level_cut..p.levels()).any(|l| st.queue_len(l) > 0) {
                    sum.high_queue_ticks += 1;
                }
                sum.max_tick_steps = sum.max_tick_steps.max(m.steps_total);
                sum.max_handler_steps = sum.max_handler_steps.max(m.steps_handler);
                if rc.audit_every > 0 && global_tick.is_multiple_of(rc.audit_every) {
                    let vs = audit_invariants(st, i as u64);
                    sum.report.audits += 1;
                    if !vs.is_empty() {
                        sum.report.extend(vs);
                        if rc.abort_on_violation {
                            sum.aborted = Some((i, "invariant violation".into()));
                            break 'updates;
                        }
                    }
                }
                if iup == up && out_metrics.is_none() {
                    out_metrics = Some(m);
                }
            }
        }

        // real graph and fallback
        let k = up.key();
        match up.op {
            Op::Insert => {
                graph.insert(k);
                fb.mdelta_insert(up.u, up.v)?;
            }
            Op::Delete => {
                graph.remove(&k);
                fb.mdelta_delete(up.u, up.v)?;
            }
        }
        sum.updates = i + 1;
        let audit_now = rc.audit_every > 0;
        if audit_now {
            sum.maxdelta_checks += 1;
            if let Some((a, b)) = fb.maxdelta_violation() {
                sum.report.add(violation(
                    "maxdelta",
                    i as u64,
                    format!("free edge ({a},{b}) with |M_δ|={}", fb.size()),
                ));
            }
        }

        // epoch boundaries: the retiring instance must equal its successor
        if let Some(pos) = live.iter().position(|x| x.end == Some(i + 1)) {
            let old = live.remove(pos);
            if let Some(next) = live.iter().find(|x| x.life == old.life + 1) {
                sum.epochs_checked += 1;
                if old.engine.st.edge_list() != next.engine.st.edge_list() {
                    sum.report.add(violation(
                        "epoch",
                        i as u64,
                        format!("life {} differs from life {}", old.life, next.life),
                    ));
                    sum.aborted = Some((i, Error::EpochMismatch(i as u64 + 1).to_string()));
                }
            }
            retire(&mut sum, &old);
            if sum.aborted.is_some() {
                break;
            }
        }

        let output = &live[0];
        let st = &output.engine.st;
        let rec = amm_metrics(st, &fb);
        let tf = rec.tf_adversary + rec.tf_algorithm;
        sum.amm.max_tf = sum.amm.max_tf.max(tf);
        let e = p.epsilon();
        if let Some(c) = rc.amm {
            let allowed = c.c_am * e * rec.m_output as f64 + c.c_log * lg;
            if rec.m_output >= 50 {
                let r = tf as f64 / (e * rec.m_output as f64);
                sum.amm.ticks += 1;
                amm_sum += r;
                sum.amm.max_ratio = sum.amm.max_ratio.max(r);
                if tf as f64 > allowed {
                    sum.amm.violations += 1;
                }
            }
            if rec.m_rand >= 50 {
                let r = tf as f64 / (e * rec.m_rand as f64);
                sum.amm.engine_ticks += 1;
                amm_esum += r;
                sum.amm.engine_max_ratio = sum.amm.engine_max_ratio.max(r);
                if tf as f64 > c.c_am * e * rec.m_rand as f64 + c.c_log * lg {
                    sum.amm.engine_violations += 1;
                }
            }
        }

        let mut m_combined = None;
        if rc.combine {
            let dels: Vec<Edge> = if up.op == Op::Delete { vec![k] } else { Vec::new() };
            let tr = match combine.as_mut() {
                Some(tr) => tr,
                None => combine.insert(TransformState::begin(p.n, &[], &st.matching(), eps)?),
            };
            let rep = tr.step(&dels);
            let ts = &mut sum.transform;
            ts.steps += 1;
            ts.max_replacements = ts.max_replacements.max(rep.replacements());
            ts.risky_added += rep.risky_added as u64;
            if rep.replacements() as u64 > 3 * tr.r {
                ts.over_budget += 1;
                sum.report.add(violation(
                    "transform_budget",
                    i as u64,
                    format!("{} > 3r = {}", rep.replacements(), 3 * tr.r),
                ));
            }
            if let Err(msg) = tr.audit() {
                ts.audit_failures += 1;
                sum.report.add(violation("transform", i as u64, msg));
            }
            m_combined = Some(tr.output_size());
            if tr.phase() == Phase::Done {
                let next = TransformState::begin(p.n, &tr.output(), &st.matching(), eps)?;
                *tr = next;
                ts.windows += 1;
            }
        }

        if checkpoints.contains(&i) {
            let edges: Vec<Edge> = graph.iter().copied().collect();
            let exact = max_matching_exact(p.n, &edges)?;
            sum.checkpoints.push(Checkpoint {
                t: i,
                exact,
                m_output: rec.m_output,
                m_rand: rec.m_rand,
                m_delta: rec.m_delta,
                m_combined,
            });
        }

        if let Some(w) = out.as_deref_mut() {
            let metrics = out_metrics.unwrap_or_else(|| Metrics {
                t: i as u64,
                op: format!("{}{},{}", if up.op == Op::Insert { '+' } else { '-' }, up.u, up.v),
                ..Default::default()
            });
            let line = Line {
                metrics: &metrics,
                m_rand: rec.m_rand,
                m_delta: rec.m_delta,
                m_output: rec.m_output,
                output: rec.output,
                m_combined,
                epoch: output.life,
            };
            serde_json::to_writer(&mut *w, &line).map_err(|e| Error::Parse(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::Parse(e.to_string()))?;
        }
    }

    for inst in &live {
        retire(&mut sum, inst);
    }
    if sum.amm.ticks > 0 {
        sum.amm.mean_ratio = amm_sum / sum.amm.ticks as f64;
    }
    if sum.amm.engine_ticks > 0 {
        sum.amm.engine_mean_ratio = amm_esum / sum.amm.engine_ticks as f64;
    }
    sum.report.max_tick_steps = sum.max_tick_steps;
    if let Some(inst) = live.first() {
        sum.final_matching = inst.engine.st.matching_size();
    }
    sum.final_edges = graph.len();
    Ok(sum)
}

fn retire(sum: &mut RunSummary, inst: &Live) {
    let p = inst.engine.params();
    let c = &inst.engine.counters;
    for (l, &h) in c.hits_by_level.iter().enumerate() {
        sum.hits_by_level[l] += h;
        if l >= p.low_level_cut {
            sum.hits_high += h;
        }
    }
    sum.good_hits += inst.shadow.good_hits;
    sum.under_sampled += inst.engine.stats.under_sampled;
    sum.report.under_sampled_created += inst.engine.stats.under_sampled;
    sum.report.max_active = sum.report.max_active.max(inst.engine.st.max_active);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_random_sequence() {
        let s = gen_sequence(&GenSpec::new(Model::Random, 8, 0, 1)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn sliding_window_deletes_three_inserts_later() {
        let s = gen_sequence(&GenSpec::new(Model::SlidingWindow, 10, 60, 5).window(3)).unwrap();
        let mut inserted: Vec<Edge> = Vec::new();
        for up in &s.updates {
            match up.op {
                Op::Insert => inserted.push(up.key()),
                Op::Delete => {
                    let at = inserted.iter().rposition(|&e| e == up.key()).unwrap();
                    assert_eq!(inserted.len() - 1 - at, 3);
                }
            }
        }
    }

    #[test]
    fn generators_are_valid_and_deterministic() {
        for m in Model::ALL {
            let spec = GenSpec::new(m, 16, 400, 9).density(0.4).window(40);
            let a = gen_sequence(&spec).unwrap();
            let b = gen_sequence(&spec).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_eq!(a.len(), 400);
        }
    }

    #[test]
    fn degree_cap_holds() {
        let s = gen_sequence(&GenSpec::new(Model::Random, 32, 2000, 2).density(0.5).max_degree(3)).unwrap();
        let mut deg = [0i32; 32];
        for up in &s.updates {
            let d = if up.op == Op::Insert { 1 } else { -1 };
            deg[up.u as usize] += d;
            deg[up.v as usize] += d;
            assert!(deg.iter().all(|&x| x <= 3));
        }
    }

    #[test]
    fn static_graph_copies_at_four_per_update() {
        // 20 edges inserted in epoch 0, then only no-op churn on a disjoint pair
        let mut ups: Vec<Update> = (0..20).map(|i| Update::ins(i, i + 20)).collect();
        while ups.len() < 100 {
            ups.push(Update::ins(60, 61));
            ups.push(Update::del(60, 61));
        }
        let seq = UpdateSequence::new(64, ups);
        let plan = plan_epochs(&seq, 40, C_COPY).unwrap();
        // epoch 1 starts at 40: life 2 receives the 20 old edges by update 40 + ⌈20/4⌉ − 1
        let life2 = plan.iter().find(|s| s.life == 2).unwrap();
        let copies: Vec<usize> = life2.updates.iter().filter(|x| x.1.v < 60).map(|x| x.0).collect();
        assert_eq!(copies.len(), 20);
        assert_eq!(*copies.last().unwrap(), 44);
        assert_eq!(plan[0].end, Some(40));
        assert_eq!(plan[1].end, Some(80));
    }

    #[test]
    fn deleted_before_copy_is_skipped() {
        let mut ups: Vec<Update> = (0..8).map(|i| Update::ins(i, i + 8)).collect();
        ups.push(Update::del(7, 15));
        while ups.len() < 10 {
            ups.push(Update::ins(30, 31));
        }
        // epoch boundary at 8: edge (7,15) dies at index 8 before its copy slot
        let seq = UpdateSequence::new(32, ups);
        let plan = plan_epochs(&seq, 8, C_COPY).unwrap();
        let life2 = plan.iter().find(|s| s.life == 2).unwrap();
        assert!(life2.updates.iter().all(|x| x.1.key() != (7, 15)));
    }

    #[test]
    fn replay_is_byte_identical() {
        let seq = gen_sequence(&GenSpec::new(Model::Random, 16, 200, 4).density(0.5)).unwrap();
        let rc = RunConfig::new(Config::new(16, 0.1).with_seed(11));
        let mut a = Vec::new();
        let mut b = Vec::new();
        let sa = run(&seq, &rc, Some(&mut a)).unwrap();
        run(&seq, &rc, Some(&mut b)).unwrap();
        assert_eq!(a, b);
        assert!(sa.report.is_clean(), "{:?}", sa.report);
        assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 200);
    }

    #[test]
    fn long_runs_need_epoching() {
        let seq = gen_sequence(&GenSpec::new(Model::Random, 8, 200, 4).density(0.5)).unwrap();
        let rc = RunConfig::new(Config::new(8, 0.1));
        assert!(run(&seq, &rc, None).is_err());
        let mut cfg = Config::new(8, 0.1);
        cfg.epoching = true;
        let s = run(&seq, &RunConfig::new(cfg), None).unwrap();
        assert_eq!(s.epochs_checked, 3, "{s:?}");
        assert!(s.aborted.is_none());
        assert!(s.report.is_clean());
    }
}

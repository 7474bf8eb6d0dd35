//! Standalone simulators: the balls-and-bins games and the shuffling game.

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---- balls and bins --------------------------------------------------------------

/// True iff `b < span / (ln N + 1)`.
pub fn bins_threshold(n: usize, span: u64, b: u64) -> bool {
    b == 0 || (b as f64) < span as f64 / ((n as f64).ln() + 1.0)
}

/// The two-threshold form: `b < (k − k') / (ln N + 1)`.
pub fn bins_threshold_variant(n: usize, k: u64, k_prime: u64, b: u64) -> bool {
    k > k_prime && bins_threshold(n, k - k_prime, b)
}

/// Largest integer b strictly below `span / (ln N + 1)`.
pub fn largest_b_below(n: usize, span: u64) -> u64 {
    let bound = span as f64 / ((n as f64).ln() + 1.0);
    let mut b = bound.ceil() as u64;
    while b > 0 && !bins_threshold(n, span, b) {
        b -= 1;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Empty bins; Player I removes a largest bin, Player II adds balls.
    AddRemoveLargest,
    /// Bins start at k; Player I removes a smallest bin, Player II removes balls.
    RemoveRemoveSmallest,
    /// Bins start at k'; otherwise as `AddRemoveLargest`.
    PrefilledAdd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::AddRemoveLargest,
        Variant::RemoveRemoveSmallest,
        Variant::PrefilledAdd,
    ];

    fn adds(self) -> bool {
        self != Variant::RemoveRemoveSmallest
    }
}

/// Player II strategies. In the removing variant "max" and "min" swap roles,
/// so `Concentrate` always piles onto the bin Player I will take next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Concentrate,
    RoundRobin,
    Random,
    AntiGreedy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Concentrate,
        Strategy::RoundRobin,
        Strategy::Random,
        Strategy::AntiGreedy,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinsGame {
    pub bins: usize,
    pub k: u64,
    /// Second threshold; ignored by `AddRemoveLargest`.
    pub k_prime: u64,
    pub b: u64,
    pub variant: Variant,
    pub strategy: Strategy,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Winner {
    PlayerI,
    PlayerII,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BinsOutcome {
    pub winner: Winner,
    pub rounds: usize,
    /// Bin sizes after each round, `None` once removed. Empty unless requested.
    pub trace: Vec<Vec<Option<u64>>>,
    pub claim_checks: u64,
    pub claim_violations: u64,
}

/// lcm(1..=n) and H_i·lcm for i in 0..n, all exact.
fn harmonic_scaled(n: usize) -> Option<(i128, Vec<i128>)> {
    let mut d: i128 = 1;
    for j in 1..=n as i128 {
        let g = gcd(d, j);
        d = d.checked_mul(j / g)?;
    }
    let mut h = vec![0i128; n.max(1)];
    for i in 1..n {
        h[i] = h[i - 1] + d / i as i128;
    }
    Some((d, h))
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct Board {
    sizes: Vec<Option<u64>>,
    cursor: usize,
}

impl Board {
    fn alive(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.sizes.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s)))
    }

    /// A bin of extreme size; ties broken uniformly when an rng is supplied.
    fn extreme(&self, largest: bool, rng: Option<&mut ChaCha8Rng>) -> Option<usize> {
        let best = if largest {
            self.alive().map(|x| x.1).max()?
        } else {
            self.alive().map(|x| x.1).min()?
        };
        let ties: Vec<usize> = self.alive().filter(|x| x.1 == best).map(|x| x.0).collect();
        Some(match rng {
            Some(r) => ties[r.gen_range(0..ties.len())],
            None => ties[0],
        })
    }

    fn next_rr(&mut self, need_nonempty: bool) -> Option<usize> {
        let n = self.sizes.len();
        for step in 0..n {
            let i = (self.cursor + step) % n;
            if matches!(self.sizes[i], Some(s) if !need_nonempty || s > 0) {
                self.cursor = (i + 1) % n;
                return Some(i);
            }
        }
        None
    }

    fn random_bin(&self, rng: &mut ChaCha8Rng, need_nonempty: bool) -> Option<usize> {
        let c: Vec<usize> = self
            .alive()
            .filter(|x| !need_nonempty || x.1 > 0)
            .map(|x| x.0)
            .collect();
        (!c.is_empty()).then(|| c[rng.gen_range(0..c.len())])
    }
}

/// Plays one game to termination. Player I breaks ties by lowest index;
/// the seed only drives Player II.
pub fn bins_run(game: &BinsGame, max_rounds: usize, keep_trace: bool) -> Result<BinsOutcome> {
    let g = *game;
    if g.bins == 0 || g.bins > 64 {
        return Err(Error::Config(format!("bins must be in 1..=64, got {}", g.bins)));
    }
    if g.variant != Variant::AddRemoveLargest && g.k <= g.k_prime {
        return Err(Error::Config("k must exceed k'".into()));
    }
    let (d, hd) = harmonic_scaled(g.bins).ok_or_else(|| Error::Config("harmonic overflow".into()))?;
    let init = match g.variant {
        Variant::AddRemoveLargest => 0,
        Variant::RemoveRemoveSmallest => g.k,
        Variant::PrefilledAdd => g.k_prime,
    };
    let adds = g.variant.adds();
    let mut board = Board {
        sizes: vec![Some(init); g.bins],
        cursor: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    board.cursor = rng.gen_range(0..g.bins);
    // sizes at removal time, oldest first
    let mut removed: Vec<u64> = Vec::with_capacity(g.bins);
    let mut out = BinsOutcome {
        winner: Winner::Inconclusive,
        rounds: 0,
        trace: Vec::new(),
        claim_checks: 0,
        claim_violations: 0,
    };
    let lost = |s: u64| if adds { s >= g.k } else { s <= g.k_prime };

    while out.rounds < max_rounds {
        out.rounds += 1;
        let Some(x) = board.extreme(adds, None) else {
            out.winner = Winner::PlayerI;
            break;
        };
        removed.push(board.sizes[x].take().unwrap());
        if board.alive().next().is_none() {
            out.winner = Winner::PlayerI;
            if keep_trace {
                out.trace.push(board.sizes.clone());
            }
            break;
        }
        player_two(&mut board, &g, adds, &mut rng);
        if keep_trace {
            out.trace.push(board.sizes.clone());
        }

        // |B_i| ≥ s − b·H_{i−1} (adding) or |B_i| ≤ s + b·H_{i−1} (removing),
        // where s is the current extreme and B_i the i-th most recent removal.
        let s = board.extreme(adds, None).map(|i| board.sizes[i].unwrap()).unwrap();
        let (s, b) = (s as i128, g.b as i128);
        for (j, &r) in removed.iter().rev().enumerate() {
            // B_{j+2}, so the sum runs to H_{j+1}; a bin is still alive, so j+1 < N
            let h = hd[j + 1];
            let r = r as i128;
            out.claim_checks += 1;
            let ok = if adds {
                r * d >= s * d - b * h
            } else {
                r * d <= s * d + b * h
            };
            if !ok {
                out.claim_violations += 1;
            }
        }

        if board.alive().any(|(_, s)| lost(s)) {
            out.winner = Winner::PlayerII;
            break;
        }
    }
    Ok(out)
}

fn player_two(board: &mut Board, g: &BinsGame, adds: bool, rng: &mut ChaCha8Rng) {
    // "target" is the bin Player I would take next
    let delta = |s: &mut Option<u64>| {
        if let Some(v) = s.as_mut() {
            if adds {
                *v += 1;
            } else {
                *v = v.saturating_sub(1);
            }
        }
    };
    match g.strategy {
        Strategy::Concentrate => {
            if let Some(i) = board.extreme(adds, Some(rng)) {
                let v = board.sizes[i].as_mut().unwrap();
                *v = if adds { *v + g.b } else { v.saturating_sub(g.b) };
            }
        }
        Strategy::RoundRobin => {
            for _ in 0..g.b {
                match board.next_rr(!adds) {
                    Some(i) => delta(&mut board.sizes[i]),
                    None => break,
                }
            }
        }
        Strategy::Random => {
            for _ in 0..g.b {
                match board.random_bin(rng, !adds) {
                    Some(i) => delta(&mut board.sizes[i]),
                    None => break,
                }
            }
        }
        Strategy::AntiGreedy => {
            // level the board: feed the bins Player I is least likely to take
            for _ in 0..g.b {
                match board.extreme(!adds, Some(rng)) {
                    Some(i) if adds || board.sizes[i] != Some(0) => delta(&mut board.sizes[i]),
                    _ => break,
                }
            }
        }
    }
}

// ---- shuffling game ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleVariant {
    /// Exact fluid accounting: each shuf deletion removes the prevailing bad fraction.
    Deterministic,
    Randomized,
}

/// When mal spends its deletion credit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MalSchedule {
    Off,
    Eager,
    /// Only while the edge count is falling.
    ShrinkOnly,
    /// Only once the edge count is at most a quarter of the cap.
    LowCount,
}

impl MalSchedule {
    pub const ALL: [MalSchedule; 4] = [
        MalSchedule::Off,
        MalSchedule::Eager,
        MalSchedule::ShrinkOnly,
        MalSchedule::LowCount,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleGame {
    /// ε̂ as a fraction (numerator, denominator).
    pub eps_hat: (u64, u64),
    /// Bad probability of an added edge; must not exceed ε̂/2.
    pub p: (u64, u64),
    /// shuf deletions per mal credit.
    pub ratio: u64,
    /// Most edges alive at once (n/2 matched edges).
    pub cap: u64,
    /// Fractions are audited only while at least this many edges exist.
    pub floor: u64,
    pub mal: MalSchedule,
    pub variant: ShuffleVariant,
    pub seed: u64,
}

impl ShuffleGame {
    /// Game for an n-vertex graph: cap n/2, speed ratio 2⌈log₂ n⌉, p = ε̂/2.
    pub fn for_n(n: u64, eps_hat: (u64, u64), mal: MalSchedule, variant: ShuffleVariant, seed: u64) -> Self {
        let lg = crate::params::ceil_log2(n).max(1);
        ShuffleGame {
            eps_hat,
            p: (eps_hat.0, 2 * eps_hat.1),
            ratio: 2 * lg,
            cap: n / 2,
            floor: 4 * lg,
            mal,
            variant,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShuffleOutcome {
    pub max_fraction: f64,
    /// e·ε̂ with e rounded down. Deterministic fractions are held to it exactly;
    /// randomized ones get `sampling_slack` on top at the current edge count.
    pub bound: f64,
    pub audited: u64,
    pub violations: u64,
    pub events: u64,
    pub mal_deletions: u64,
    /// (edge count, bad fraction) after each event. Empty unless requested.
    pub trace: Vec<(u64, f64)>,
}

/// e rounded down to nine decimals, so exact checks against it are conservative.
fn e_lower() -> Ratio<u64> {
    Ratio::new(2_718_281_828, 1_000_000_000)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Ev {
    Add,
    Shuf,
}

/// Sawtooth driver: grow to the cap with two adds per shuf, then shrink by
/// shuf deletions to cap/2^j, cycling j through 1..=log₂(cap/floor).
struct Driver {
    cap: u64,
    troughs: Vec<u64>,
    phase_grow: bool,
    j: usize,
    beat: u8,
}

impl Driver {
    fn new(cap: u64, floor: u64) -> Self {
        let mut troughs = Vec::new();
        let mut t = cap / 2;
        while t >= floor.max(1) {
            troughs.push(t);
            t /= 2;
        }
        if troughs.is_empty() {
            troughs.push(floor.max(1).min(cap));
        }
        Driver {
            cap,
            troughs,
            phase_grow: true,
            j: 0,
            beat: 0,
        }
    }

    fn next(&mut self, count: u64) -> Ev {
        if self.phase_grow && count >= self.cap {
            self.phase_grow = false;
        } else if !self.phase_grow && count <= self.troughs[self.j] {
            self.phase_grow = true;
            self.j = (self.j + 1) % self.troughs.len();
        }
        if self.phase_grow {
            self.beat = (self.beat + 1) % 3;
            if self.beat == 0 && count > 0 {
                Ev::Shuf
            } else {
                Ev::Add
            }
        } else if count == 0 {
            Ev::Add
        } else {
            Ev::Shuf
        }
    }
}

fn mal_wants(m: MalSchedule, shrinking: bool, count: u64, cap: u64) -> bool {
    match m {
        MalSchedule::Off => false,
        MalSchedule::Eager => true,
        MalSchedule::ShrinkOnly => shrinking,
        MalSchedule::LowCount => 4 * count <= cap,
    }
}

/// Runs `horizon` adder/shuf events (mal moves are extra). Mal earns one credit
/// per `ratio` shuf deletions and holds at most one.
pub fn shuffle_run(game: &ShuffleGame, horizon: u64, keep_trace: bool) -> Result<ShuffleOutcome> {
    let g = game;
    if g.eps_hat.1 == 0 || g.p.1 == 0 || g.ratio == 0 || g.cap == 0 {
        return Err(Error::Config("shuffle game parameters must be positive".into()));
    }
    let eps = Ratio::new(g.eps_hat.0, g.eps_hat.1);
    let p = Ratio::new(g.p.0, g.p.1);
    if p * 2 > eps {
        return Err(Error::Config("adder bad probability exceeds ε̂/2".into()));
    }
    let bound = e_lower() * eps;
    let mut out = ShuffleOutcome {
        max_fraction: 0.0,
        bound: bound.to_f64().unwrap_or(0.0),
        audited: 0,
        violations: 0,
        events: 0,
        mal_deletions: 0,
        trace: Vec::new(),
    };
    let mut driver = Driver::new(g.cap, g.floor);
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut count: u64 = 0;
    let mut shuf_since = 0u64;
    let mut credit = false;

    let big = |r: Ratio<u64>| BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()));
    let (p_big, bound_big) = (big(p), big(bound));
    // deterministic: exact bad mass; randomized: integer bad count
    let mut bad_exact = BigRational::zero();
    let mut bad: u64 = 0;

    for _ in 0..horizon {
        let ev = driver.next(count);
        out.events += 1;
        match ev {
            Ev::Add => {
                count += 1;
                match g.variant {
                    ShuffleVariant::Deterministic => bad_exact += &p_big,
                    ShuffleVariant::Randomized => {
                        if rng.gen_ratio(g.p.0 as u32, g.p.1 as u32) {
                            bad += 1;
                        }
                    }
                }
            }
            Ev::Shuf => {
                match g.variant {
                    ShuffleVariant::Deterministic => {
                        let c = BigInt::from(count);
                        bad_exact *= BigRational::new(c.clone() - 1, c);
                    }
                    ShuffleVariant::Randomized => {
                        if rng.gen_range(0..count) < bad {
                            bad -= 1;
                        }
                    }
                }
                count -= 1;
                shuf_since += 1;
                if shuf_since == g.ratio {
                    shuf_since = 0;
                    credit = true;
                }
            }
        }
        if credit && mal_wants(g.mal, !driver.phase_grow, count, g.cap) {
            let good_left = match g.variant {
                ShuffleVariant::Deterministic => {
                    BigRational::from_integer(BigInt::from(count)) - &bad_exact >= BigRational::one()
                }
                ShuffleVariant::Randomized => count > bad,
            };
            if good_left {
                count -= 1;
                credit = false;
                out.mal_deletions += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let frac = match g.variant {
            ShuffleVariant::Deterministic => {
                let f = &bad_exact / BigRational::from_integer(BigInt::from(count));
                if count >= g.floor {
                    out.audited += 1;
                    if f > bound_big {
                        out.violations += 1;
                    }
                }
                f.to_f64().unwrap_or(f64::NAN)
            }
            ShuffleVariant::Randomized => {
                let f = bad as f64 / count as f64;
                if count >= g.floor {
                    out.audited += 1;
                    if f > out.bound + sampling_slack(out.bound, count) {
                        out.violations += 1;
                    }
                }
                f
            }
        };
        if count >= g.floor && frac > out.max_fraction {
            out.max_fraction = frac;
        }
        if keep_trace {
            out.trace.push((count, frac));
        }
    }
    Ok(out)
}

/// Three-sigma slack for a fraction q observed over `count` edges.
pub fn sampling_slack(q: f64, count: u64) -> f64 {
    3.0 * (q * (1.0 - q) / count.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        assert!(bins_threshold(8, 10, 3));
        assert!(!bins_threshold(8, 10, 4));
        assert!(bins_threshold(8, 1, 0));
        assert_eq!(largest_b_below(8, 10), 3);
        assert!(bins_threshold_variant(8, 20, 10, 3));
        assert!(!bins_threshold_variant(8, 10, 10, 0));
    }

    #[test]
    fn harmonic_exact() {
        let (d, h) = harmonic_scaled(4).unwrap();
        assert_eq!(d, 12);
        assert_eq!(h, vec![0, 12, 18, 22]);
    }

    #[test]
    fn zero_b_player_one_wins_in_n_rounds() {
        for v in Variant::ALL {
            let g = BinsGame {
                bins: 8,
                k: 10,
                k_prime: 5,
                b: 0,
                variant: v,
                strategy: Strategy::Random,
                seed: 1,
            };
            let o = bins_run(&g, 100, false).unwrap();
            assert_eq!(o.winner, Winner::PlayerI);
            assert_eq!(o.rounds, 8);
            assert_eq!(o.claim_violations, 0);
        }
    }

    #[test]
    fn concentrating_player_two_wins_with_large_b() {
        let g = BinsGame {
            bins: 8,
            k: 10,
            k_prime: 0,
            b: 40,
            variant: Variant::AddRemoveLargest,
            strategy: Strategy::Concentrate,
            seed: 0,
        };
        let o = bins_run(&g, 100, true).unwrap();
        assert_eq!(o.winner, Winner::PlayerII);
        assert_eq!(o.rounds, 1);
        assert_eq!(o.trace.len(), 1);
    }

    #[test]
    fn max_rounds_is_inconclusive() {
        let g = BinsGame {
            bins: 8,
            k: 10,
            k_prime: 0,
            b: 1,
            variant: Variant::AddRemoveLargest,
            strategy: Strategy::RoundRobin,
            seed: 0,
        };
        assert_eq!(bins_run(&g, 3, false).unwrap().winner, Winner::Inconclusive);
    }

    #[test]
    fn no_mal_no_bad() {
        let mut g = ShuffleGame::for_n(256, (8, 100), MalSchedule::Off, ShuffleVariant::Randomized, 3);
        g.p = (0, 1);
        let o = shuffle_run(&g, 2000, false).unwrap();
        assert_eq!(o.max_fraction, 0.0);
        g.variant = ShuffleVariant::Deterministic;
        let o = shuffle_run(&g, 2000, false).unwrap();
        assert_eq!(o.max_fraction, 0.0);
        assert_eq!(o.violations, 0);
    }

    #[test]
    fn deterministic_without_mal_keeps_the_adder_fraction() {
        let g = ShuffleGame::for_n(256, (8, 100), MalSchedule::Off, ShuffleVariant::Deterministic, 0);
        let o = shuffle_run(&g, 3000, false).unwrap();
        assert!((o.max_fraction - 0.04).abs() < 1e-12, "{}", o.max_fraction);
    }

    #[test]
    fn rejects_greedy_adder() {
        let mut g = ShuffleGame::for_n(64, (8, 100), MalSchedule::Off, ShuffleVariant::Deterministic, 0);
        g.p = (5, 100);
        assert!(shuffle_run(&g, 10, false).is_err());
    }
}

//! Run configuration and the frozen set of derived parameters.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    #[default]
    Oblivious,
}

fn one() -> u64 {
    1
}
fn c_t_default() -> u64 {
    4
}
fn two() -> u64 {
    2
}
fn eight() -> u64 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub n: usize,
    pub epsilon: f64,
    #[serde(default = "one")]
    pub c_gamma: u64,
    #[serde(default = "c_t_default", rename = "c_T")]
    pub c_t: u64,
    #[serde(default = "two", rename = "c_Delta")]
    pub c_delta_upd: u64,
    #[serde(default = "eight")]
    pub c_phi: u64,
    #[serde(default = "one")]
    pub c_delta: u64,
    #[serde(default = "eight")]
    pub c_active: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epoching: bool,
}

impl Config {
    pub fn new(n: usize, epsilon: f64) -> Self {
        Config {
            n,
            epsilon,
            c_gamma: 1,
            c_t: 4,
            c_delta_upd: 2,
            c_phi: 8,
            c_delta: 1,
            c_active: 8,
            mode: Mode::Oblivious,
            seed: 0,
            epoching: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Every quantity derived from a [`Config`]. Built once by [`derive`] and never mutated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Params {
    pub n: usize,
    /// ε as an exact fraction; `0.1` becomes `1/10`.
    pub eps: (i64, i64),
    pub lg: u64,
    pub gamma: u64,
    pub l_max: usize,
    /// T_ℓ for ℓ in `0..=l_max`.
    pub t: Vec<u64>,
    pub delta: u64,
    pub delta_prime: u64,
    pub delta_threshold: u64,
    pub low_level_cut: usize,
    pub t_max: u64,
    pub active_cap: usize,
    pub c_phi: u64,
    pub mode: Mode,
    pub seed: u64,
    pub epoching: bool,
}

/// ⌈log₂ n⌉ for n ≥ 1.
pub fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros() as u64
    }
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

pub fn derive(config: &Config) -> Result<Params> {
    if config.n < 2 {
        return Err(Error::Config(format!("n must be at least 2, got {}", config.n)));
    }
    if !(config.epsilon > 0.0 && config.epsilon < 0.5) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 1/2), got {}",
            config.epsilon
        )));
    }
    let consts = [
        ("c_gamma", config.c_gamma),
        ("c_T", config.c_t),
        ("c_Delta", config.c_delta_upd),
        ("c_phi", config.c_phi),
        ("c_delta", config.c_delta),
        ("c_active", config.c_active),
    ];
    for (name, c) in consts {
        if c == 0 {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
    }
    let eps = Ratio::<i64>::approximate_float(config.epsilon)
        .ok_or_else(|| Error::Config("epsilon is not representable".into()))?;
    let (en, ed) = (*eps.numer() as u128, *eps.denom() as u128);

    let n = config.n as u64;
    let lg = ceil_log2(n).max(1);
    let gamma = (config.c_gamma * lg).max(2);

    let mut l_max = 0usize;
    let mut pow = 1u64;
    while pow < n - 1 {
        pow *= gamma;
        l_max += 1;
    }

    let lg4 = lg.pow(4);
    let mut t = Vec::with_capacity(l_max + 1);
    let mut g = 1u64;
    for _ in 0..=l_max {
        t.push(config.c_t * g * lg4);
        g *= gamma;
    }

    let lg5 = (lg as u128).pow(5);
    let delta = ceil_div(config.c_delta_upd as u128 * lg5 * ed, en) as u64;
    let delta_prime = gamma * delta;
    let dt = ceil_div(config.c_delta as u128 * lg5 * ed.pow(4), en.pow(4));
    let delta_threshold = dt.min(n as u128) as u64;

    let low_level_cut = t.iter().position(|&tl| tl >= delta).unwrap_or(l_max + 1);

    Ok(Params {
        n: config.n,
        eps: (*eps.numer(), *eps.denom()),
        lg,
        gamma,
        l_max,
        t,
        delta,
        delta_prime,
        delta_threshold,
        low_level_cut,
        t_max: n * n,
        active_cap: (config.c_active as usize) * (l_max + 1),
        c_phi: config.c_phi,
        mode: config.mode,
        seed: config.seed,
        epoching: config.epoching,
    })
}

impl Params {
    pub fn gamma_pow(&self, level: usize) -> u64 {
        self.gamma.pow(level as u32)
    }

    /// ⌈(1−ε)·γ^ℓ⌉
    pub fn sample_lo(&self, level: usize) -> u64 {
        let (en, ed) = (self.eps.0 as u128, self.eps.1 as u128);
        ceil_div((ed - en) * self.gamma_pow(level) as u128, ed) as u64
    }

    /// ⌊(1−2ε)·γ^ℓ⌋
    pub fn sample_floor(&self, level: usize) -> u64 {
        let (en, ed) = (self.eps.0 as u128, self.eps.1 as u128);
        ((ed - 2 * en) * self.gamma_pow(level) as u128 / ed) as u64
    }

    pub fn phi_cap(&self, level: usize) -> u64 {
        self.c_phi * self.gamma_pow(level) * self.lg * self.lg
    }

    /// ⌈2ε·γ^ℓ⌉, the rank below which a sampled edge counts as bad.
    pub fn bad_rank(&self, level: usize) -> u64 {
        let (en, ed) = (self.eps.0 as u128, self.eps.1 as u128);
        ceil_div(2 * en * self.gamma_pow(level) as u128, ed) as u64
    }

    pub fn epsilon(&self) -> f64 {
        self.eps.0 as f64 / self.eps.1 as f64
    }

    pub fn levels(&self) -> usize {
        self.l_max + 1
    }

    /// Ceiling on granted scheduler steps in one tick, handler excluded.
    pub fn scheduler_ceiling(&self) -> u64 {
        let lv = self.levels() as u64;
        3 * self.delta_prime * lv + self.delta * lv
    }

    /// Budget reserved for the update handler itself.
    pub fn c_update(&self) -> u64 {
        self.t[0]
    }

    /// Largest step cost any single indivisible unit of work may have.
    pub fn unit_cap(&self) -> u64 {
        let n = self.n as u64;
        8 * n * (self.lg + self.l_max as u64 + 2) + 16 * self.active_cap as u64 * (self.l_max as u64 + 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n1024_gamma_and_levels() {
        let p = derive(&Config::new(1024, 0.1)).unwrap();
        assert_eq!(p.gamma, 10);
        assert_eq!(p.l_max, 4);
    }

    #[test]
    fn two_vertices_single_level() {
        for eps in [0.01, 0.2, 0.49] {
            let p = derive(&Config::new(2, eps)).unwrap();
            assert_eq!(p.l_max, 0);
            assert_eq!(p.t.len(), 1);
        }
    }

    #[test]
    fn delta_n256_quarter() {
        let mut c = Config::new(256, 0.25);
        c.c_delta_upd = 1;
        let p = derive(&c).unwrap();
        assert_eq!(p.delta, 131072);
        assert_eq!(p.delta_prime, 8 * 131072);
    }

    #[test]
    fn desk_scale_values() {
        let p = derive(&Config::new(64, 0.1)).unwrap();
        assert_eq!((p.lg, p.gamma, p.l_max), (6, 6, 3));
        assert_eq!(p.t[0], 5184);
        assert_eq!(p.delta, 155520);
        assert_eq!(p.delta_prime, 933120);
        assert_eq!(p.low_level_cut, 2);
        assert_eq!(p.delta_threshold, 64);
        assert_eq!(p.sample_lo(2), 33);
        assert_eq!(p.sample_floor(2), 28);
        assert_eq!(p.bad_rank(2), 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(derive(&Config::new(1, 0.1)).is_err());
        assert!(derive(&Config::new(8, 0.5)).is_err());
        assert!(derive(&Config::new(8, 0.0)).is_err());
        let mut c = Config::new(8, 0.1);
        c.c_phi = 0;
        assert!(derive(&c).is_err());
    }

    #[test]
    fn json_rejects_unknown_keys() {
        assert!(Config::from_json(r#"{"n": 8, "epsilon": 0.1}"#).is_ok());
        assert!(Config::from_json(r#"{"n": 8, "epsilon": 0.1, "c_T": 2, "mode": "offline"}"#).is_ok());
        assert!(Config::from_json(r#"{"n": 8, "epsilon": 0.1, "gamma": 3}"#).is_err());
    }

    #[test]
    fn invariants_over_grid() {
        for n in [2usize, 3, 5, 16, 64, 100, 256, 1000, 4096] {
            for eps in [0.01, 0.1, 0.25, 0.49] {
                for cg in [1, 2] {
                    let mut c = Config::new(n, eps);
                    c.c_gamma = cg;
                    let p = derive(&c).unwrap();
                    assert_eq!(p, derive(&c).unwrap());
                    assert_eq!(p.delta_prime, p.gamma * p.delta);
                    for l in 0..p.l_max {
                        assert_eq!(p.t[l + 1], p.gamma * p.t[l]);
                    }
                    for l in 0..=p.l_max {
                        if l < p.low_level_cut {
                            assert!(p.t[l] < p.delta);
                        } else {
                            assert!(p.t[l] >= p.delta);
                            assert!(p.sample_floor(l) < p.sample_lo(l));
                            assert!(p.sample_lo(l) <= p.gamma_pow(l));
                        }
                    }
                    assert!(p.gamma_pow(p.l_max) as usize >= n - 1);
                    assert!(p.delta_threshold as usize <= n);
                }
            }
        }
    }
}

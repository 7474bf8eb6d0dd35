use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use dynmatch::games::{
    bins_run, largest_b_below, shuffle_run, BinsGame, MalSchedule, ShuffleGame, ShuffleVariant, Strategy, Variant,
    Winner,
};
use dynmatch::harness::{gen_sequence, run, AmmConstants, GenSpec, Model, RunConfig, RunSummary};
use dynmatch::params::{Config, Mode};
use dynmatch::seq::UpdateSequence;

#[derive(Parser)]
#[command(
    name = "dynmatch",
    about = "Dynamic almost-maximal matching: generators, runs, audits, games"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an update sequence.
    Gen(GenArgs),
    /// Run the engine over a sequence, JSON lines per update.
    Run(RunArgs),
    /// Replay with an audit after every tick; stops at the first violation.
    Audit(RunArgs),
    /// Play the balls-and-bins or shuffling game, CSV trace.
    #[command(subcommand)]
    Game(GameCmd),
    /// Run a matrix of configurations and print a CSV summary.
    Bench(BenchArgs),
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = kebab::<Model>, default_value = "random")]
    model: Model,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    length: usize,
    #[arg(long, env = "DYNMATCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    max_degree: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Sequence file (`n=` header format).
    seq: PathBuf,
    /// JSON config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = kebab::<Mode>)]
    mode: Option<Mode>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, env = "DYNMATCH_SEED")]
    seed: Option<u64>,
    /// `every`, `off`, or an integer k to audit every k ticks.
    #[arg(long, default_value = "every")]
    audit: String,
    #[arg(long)]
    epoch: bool,
    #[arg(long)]
    combine: bool,
    /// Exact-matching checkpoints (n ≤ 64).
    #[arg(long, default_value_t = 0)]
    checkpoints: usize,
    /// c_am,c_log for the almost-maximality check.
    #[arg(long, value_delimiter = ',')]
    amm: Option<Vec<f64>>,
    /// JSON-lines output; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Suppress the per-update lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum GameCmd {
    Bins(BinsArgs),
    Shuffle(ShuffleArgs),
}

#[derive(Args)]
struct BinsArgs {
    #[arg(long, default_value_t = 16)]
    bins: usize,
    #[arg(long, default_value_t = 32)]
    k: u64,
    #[arg(long, default_value_t = 0)]
    k_prime: u64,
    /// Balls per Player II move; defaults to the largest value below the threshold.
    #[arg(long)]
    b: Option<u64>,
    #[arg(long, value_parser = kebab::<Variant>, default_value = "add-remove-largest")]
    variant: Variant,
    #[arg(long, value_parser = kebab::<Strategy>, default_value = "concentrate")]
    strategy: Strategy,
    #[arg(long, env = "DYNMATCH_SEED", default_value_t = 0)]
    seed: u64,
    /// Play this many seeds and print one summary row each instead of a trace.
    #[arg(long)]
    sweep: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    max_rounds: usize,
}

#[derive(Args)]
struct ShuffleArgs {
    #[arg(long, default_value_t = 256)]
    n: u64,
    /// ε̂ as num/den, e.g. 1/25.
    #[arg(long, default_value = "1/25")]
    eps_hat: String,
    #[arg(long, value_parser = kebab::<MalSchedule>, default_value = "eager")]
    mal: MalSchedule,
    #[arg(long, value_parser = kebab::<ShuffleVariant>, default_value = "deterministic")]
    variant: ShuffleVariant,
    #[arg(long, env = "DYNMATCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    horizon: u64,
    #[arg(long)]
    sweep: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,256")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = kebab::<Model>, default_value = "random,sliding-window,churn-matched-proxy,offline-stress")]
    models: Vec<Model>,
    #[arg(long, value_delimiter = ',', value_parser = kebab::<Mode>, default_value = "oblivious")]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = 5000)]
    length: usize,
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, env = "DYNMATCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "every")]
    audit: String,
}

fn parse_audit(s: &str) -> Result<u64> {
    Ok(match s {
        "every" => 1,
        "off" => 0,
        k => k.parse().with_context(|| format!("bad --audit value {k:?}"))?,
    })
}

fn parse_ratio(s: &str) -> Result<(u64, u64)> {
    let (a, b) = s.split_once('/').context("expected num/den")?;
    let r = (a.trim().parse()?, b.trim().parse()?);
    if r.1 == 0 || r.0 == 0 || r.0 >= r.1 {
        bail!("ratio {s} must lie in (0, 1)");
    }
    Ok(r)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Ok(false) means the command ran but found violations.
fn real_main() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Run(a) => cmd_run(a, false),
        Cmd::Audit(a) => cmd_run(a, true),
        Cmd::Game(GameCmd::Bins(a)) => cmd_bins(a),
        Cmd::Game(GameCmd::Shuffle(a)) => cmd_shuffle(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<bool> {
    let mut spec = GenSpec::new(a.model, a.n, a.length, a.seed).density(a.density);
    if let Some(w) = a.window {
        spec = spec.window(w);
    }
    if let Some(d) = a.max_degree {
        spec = spec.max_degree(d);
    }
    let text = gen_sequence(&spec)?.to_text();
    match a.out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(true)
}

fn clean(s: &RunSummary) -> bool {
    s.aborted.is_none() && s.report.is_clean() && s.amm.violations == 0
}

fn cmd_run(a: RunArgs, audit: bool) -> Result<bool> {
    let text = fs::read_to_string(&a.seq).with_context(|| format!("reading {}", a.seq.display()))?;
    let seq = UpdateSequence::from_text(&text)?;
    let mut cfg = match &a.config {
        Some(p) => Config::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Config::new(seq.n, 0.1),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.epoching |= a.epoch;
    let mut rc = RunConfig::new(cfg);
    rc.audit_every = if audit { 1 } else { parse_audit(&a.audit)? };
    rc.abort_on_violation = audit;
    rc.combine = a.combine;
    rc.checkpoints = a.checkpoints;
    rc.amm = match a.amm.as_deref() {
        None => None,
        Some(&[c_am, c_log]) => Some(AmmConstants { c_am, c_log }),
        Some(_) => bail!("--amm takes exactly two values: c_am,c_log"),
    };

    let summary = if a.quiet {
        run(&seq, &rc, None)?
    } else {
        let mut w: Box<dyn Write> = match &a.out {
            Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        };
        let s = run(&seq, &rc, Some(&mut *w))?;
        w.flush()?;
        s
    };
    eprintln!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(clean(&summary))
}

fn cmd_bins(a: BinsArgs) -> Result<bool> {
    let span = if a.variant == Variant::PrefilledAdd {
        a.k.saturating_sub(a.k_prime)
    } else {
        a.k
    };
    let b = a.b.unwrap_or_else(|| largest_b_below(a.bins, span));
    let mut game = BinsGame {
        bins: a.bins,
        k: a.k,
        k_prime: a.k_prime,
        b,
        variant: a.variant,
        strategy: a.strategy,
        seed: a.seed,
    };
    let mut out = BufWriter::new(io::stdout().lock());
    let mut ok = true;
    if let Some(seeds) = a.sweep {
        writeln!(out, "seed,winner,rounds,claim_checks,claim_violations")?;
        for s in 0..seeds {
            game.seed = a.seed + s;
            let o = bins_run(&game, a.max_rounds, false)?;
            ok &= o.claim_violations == 0;
            writeln!(
                out,
                "{},{:?},{},{},{}",
                game.seed, o.winner, o.rounds, o.claim_checks, o.claim_violations
            )?;
        }
    } else {
        let o = bins_run(&game, a.max_rounds, true)?;
        ok &= o.claim_violations == 0;
        let header: Vec<String> = (0..a.bins).map(|i| format!("bin{i}")).collect();
        writeln!(out, "round,{}", header.join(","))?;
        for (r, row) in o.trace.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.map_or(String::new(), |x| x.to_string())).collect();
            writeln!(out, "{r},{}", cells.join(","))?;
        }
        eprintln!(
            "winner={:?} rounds={} b={b} claim_violations={}",
            o.winner, o.rounds, o.claim_violations
        );
        ok &= o.winner != Winner::PlayerII || a.b.is_some();
    }
    out.flush()?;
    Ok(ok)
}

fn cmd_shuffle(a: ShuffleArgs) -> Result<bool> {
    let eps = parse_ratio(&a.eps_hat)?;
    let mut out = BufWriter::new(io::stdout().lock());
    let mut ok = true;
    if let Some(seeds) = a.sweep {
        writeln!(out, "seed,max_fraction,bound,audited,violations,mal_deletions")?;
        for s in 0..seeds {
            let g = ShuffleGame::for_n(a.n, eps, a.mal, a.variant, a.seed + s);
            let o = shuffle_run(&g, a.horizon, false)?;
            ok &= o.violations == 0;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                g.seed, o.max_fraction, o.bound, o.audited, o.violations, o.mal_deletions
            )?;
        }
    } else {
        let g = ShuffleGame::for_n(a.n, eps, a.mal, a.variant, a.seed);
        let o = shuffle_run(&g, a.horizon, true)?;
        ok &= o.violations == 0;
        writeln!(out, "event,bad_fraction")?;
        for (t, f) in &o.trace {
            writeln!(out, "{t},{f}")?;
        }
        eprintln!(
            "max_fraction={} bound={} violations={}",
            o.max_fraction, o.bound, o.violations
        );
    }
    out.flush()?;
    Ok(ok)
}

fn cmd_bench(a: BenchArgs) -> Result<bool> {
    let audit = parse_audit(&a.audit)?;
    let mut out = BufWriter::new(io::stdout().lock());
    writeln!(
        out,
        "n,model,mode,seed,updates,max_tick_steps,step_ceiling,violations,under_sampled,hits_high,good_hits,amm_max_ratio,final_matching,aborted"
    )?;
    let mut ok = true;
    for &n in &a.n {
        for &model in &a.models {
            for &mode in &a.modes {
                for s in 0..a.seeds {
                    let seed = a.seed + s;
                    let seq = gen_sequence(&GenSpec::new(model, n, a.length, seed).density(a.density))?;
                    let mut cfg = Config::new(n, 0.1).with_seed(seed);
                    cfg.mode = mode;
                    cfg.epoching = a.length as u64 > (n * n) as u64;
                    let mut rc = RunConfig::new(cfg);
                    rc.audit_every = audit;
                    rc.amm = Some(AmmConstants { c_am: 1.0, c_log: 1.0 });
                    let r = run(&seq, &rc, None)?;
                    ok &= r.aborted.is_none() && r.report.is_clean();
                    writeln!(
                        out,
                        "{n},{},{},{seed},{},{},{},{},{},{},{},{:.4},{},{}",
                        model.name(),
                        r.mode,
                        r.updates,
                        r.max_tick_steps,
                        r.step_ceiling,
                        r.report.total(),
                        r.under_sampled,
                        r.hits_high,
                        r.good_hits,
                        r.amm.max_ratio,
                        r.final_matching,
                        r.aborted.as_ref().map_or("", |x| x.1.as_str()),
                    )?;
                    out.flush()?;
                }
            }
        }
    }
    Ok(ok)
}

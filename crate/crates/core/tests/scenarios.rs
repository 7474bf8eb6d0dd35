use dynmatch::harness::{gen_sequence, plan_epochs, run, GenSpec, Model, RunConfig, C_COPY};
use dynmatch::params::{derive, Config, Mode};
use dynmatch::seq::{Update, UpdateSequence};
use dynmatch::Error;

/// Derived parameters recomputed in floating point, away from the integer code path.
fn params_oracle(n: usize, eps: f64) -> (u64, u64, usize, Vec<u64>, u64, usize) {
    let lg = (n as f64).log2().ceil() as u64;
    let gamma = lg.max(2);
    let l_max = ((n - 1) as f64).log(gamma as f64).ceil() as usize;
    let t: Vec<u64> = (0..=l_max).map(|l| 4 * gamma.pow(l as u32) * lg.pow(4)).collect();
    let delta = (2.0 * (lg as f64).powi(5) / eps).ceil() as u64;
    let cut = t.iter().position(|&x| x >= delta).unwrap_or(l_max + 1);
    (lg, gamma, l_max, t, delta, cut)
}

#[test]
fn desk_scale_parameters_match_float_oracle() {
    for n in [64usize, 256] {
        let p = derive(&Config::new(n, 0.1)).unwrap();
        let (lg, gamma, l_max, t, delta, cut) = params_oracle(n, 0.1);
        assert_eq!((p.lg, p.gamma, p.l_max), (lg, gamma, l_max), "n={n}");
        assert_eq!(p.t, t);
        assert_eq!(p.delta, delta);
        assert_eq!(p.delta_prime, gamma * delta);
        assert_eq!(p.low_level_cut, cut);
        assert_eq!(p.t_max, (n * n) as u64);
        // δ caps at n at this scale
        assert_eq!(p.delta_threshold, n as u64);
    }
}

#[test]
fn frozen_desk_values() {
    let p = derive(&Config::new(256, 0.1)).unwrap();
    assert_eq!((p.lg, p.gamma, p.l_max, p.low_level_cut), (8, 8, 3, 2));
    assert_eq!(p.t, vec![16384, 131072, 1048576, 8388608]);
    assert_eq!(p.delta, 655360);
    assert_eq!(
        p.scheduler_ceiling() + p.c_update(),
        3 * 5242880 * 4 + 655360 * 4 + 16384
    );
}

#[test]
fn validation_catches_delete_of_absent() {
    let mut ups = vec![Update::ins(0, 1), Update::ins(1, 2)];
    ups.insert(1, Update::del(2, 3));
    let s = UpdateSequence::new(4, ups);
    assert!(s.validate().is_err());
    let text = "n=4\n+ 0 1\n- 2 3\n";
    assert!(UpdateSequence::from_text(text).and_then(|s| s.validate()).is_err());
}

#[test]
fn copy_finishes_at_the_copy_rate() {
    // 30 edges, no deletions: the new instance holds everything by ⌈30/4⌉ updates into the epoch
    let mut ups: Vec<Update> = (0..30).map(|i| Update::ins(i, 63 - i)).collect();
    for i in 0..40u32 {
        ups.push(Update::ins(30 + i % 2, 32));
        ups.push(Update::del(30 + i % 2, 32));
    }
    let s = UpdateSequence::new(64, ups);
    let plan = plan_epochs(&s, 30, C_COPY).unwrap();
    let life2 = plan.iter().find(|x| x.life == 2).unwrap();
    let last_copy = life2.updates.iter().filter(|x| x.1.v > 32).map(|x| x.0).max().unwrap();
    assert_eq!(last_copy, 30 + 30_usize.div_ceil(4) - 1);
}

#[test]
fn static_graph_epochs_are_identical() {
    let n = 12;
    let mut ups: Vec<Update> = (0..6).map(|i| Update::ins(2 * i, 2 * i + 1)).collect();
    while ups.len() < 3 * n * n {
        ups.push(Update::ins(0, 2));
        ups.push(Update::del(0, 2));
    }
    let s = UpdateSequence::new(n, ups);
    let mut c = Config::new(n, 0.1);
    c.epoching = true;
    let sum = run(&s, &RunConfig::new(c), None).unwrap();
    assert_eq!(sum.epochs_checked, 3);
    assert!(sum.report.is_clean() && sum.aborted.is_none());
    assert_eq!(sum.final_matching, 6);
}

#[test]
fn offline_mode_has_no_high_level_hits() {
    let n = 64;
    let s = gen_sequence(&GenSpec::new(Model::OfflineStress, n, 3000, 8).density(0.7)).unwrap();
    let mut c = Config::new(n, 0.1).with_seed(8);
    c.mode = Mode::Offline;
    let sum = run(&s, &RunConfig::new(c), None).unwrap();
    assert!(sum.aborted.is_none());
    assert_eq!(sum.hits_high, 0);
    assert_eq!(sum.high_queue_ticks, 0);
}

#[test]
fn mismatched_n_and_oversized_checkpoints_are_rejected() {
    let s = gen_sequence(&GenSpec::new(Model::Random, 8, 10, 1)).unwrap();
    assert!(matches!(
        run(&s, &RunConfig::new(Config::new(9, 0.1)), None),
        Err(Error::Config(_))
    ));
    let big = gen_sequence(&GenSpec::new(Model::Random, 80, 10, 1)).unwrap();
    let mut rc = RunConfig::new(Config::new(80, 0.1));
    rc.checkpoints = 1;
    assert!(run(&big, &rc, None).is_err());
}

#[test]
fn infeasible_generator_parameters_fail() {
    assert!(gen_sequence(&GenSpec::new(Model::SlidingWindow, 4, 10, 1).window(6)).is_err());
    assert!(gen_sequence(&GenSpec::new(Model::Random, 1, 10, 1)).is_err());
    assert!(gen_sequence(&GenSpec::new(Model::Random, 8, 10, 1).density(1.5)).is_err());
}

use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dynmatch"));
    c.env_remove("DYNMATCH_SEED");
    c
}

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("dynmatch-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn gen_then_run_is_deterministic() {
    let seq = tmp("seq.txt");
    let st = bin()
        .args([
            "gen", "--model", "random", "--n", "16", "--length", "200", "--seed", "3", "-o",
        ])
        .arg(&seq)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&seq).unwrap();
    assert!(text.starts_with("n=16\n"));
    assert_eq!(text.lines().count(), 201);

    let once = || bin().args(["run", "--seed", "9"]).arg(&seq).output().unwrap();
    let (a, b) = (once(), once());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 200);
}

#[test]
fn seed_comes_from_the_environment() {
    let run = |env: Option<&str>| {
        let mut c = bin();
        c.args(["gen", "--n", "10", "--length", "30"]);
        if let Some(s) = env {
            c.env("DYNMATCH_SEED", s);
        }
        c.output().unwrap().stdout
    };
    assert_eq!(run(Some("5")), run(Some("5")));
    assert_ne!(run(Some("5")), run(Some("6")));
}

#[test]
fn malformed_sequence_fails() {
    let seq = tmp("bad.txt");
    std::fs::write(&seq, "n=4\n- 0 1\n").unwrap();
    let out = bin().args(["audit"]).arg(&seq).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bins_game_trace_is_csv() {
    let out = bin()
        .args(["game", "bins", "--bins", "8", "--k", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "round,bin0,bin1,bin2,bin3,bin4,bin5,bin6,bin7");
    assert!(lines.all(|l| l.split(',').count() == 9));
}

#[test]
fn shuffle_sweep_rows() {
    let out = bin()
        .args(["game", "shuffle", "--sweep", "3", "--horizon", "500"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("seed,max_fraction,bound,"));
}

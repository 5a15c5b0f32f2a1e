use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[data]\nsize = 800\nheldout = 200\n[net]\nhidden_dim = 12\nnum_hidden_layers = 2\n\
[teacher]\niters = 30\n[distill]\niters = 20\n[eval]\nevery = 10\nseeds = 40\nresidual_batch = 20\n";

fn scfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scfm"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCFM_SEED")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = scfm(dir.path(), &["train-teacher", "--config", "tiny.toml", "--out-dir", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[teacher]\nitres = 3\n").unwrap();
    let out = scfm(dir.path(), &["train-teacher", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("itres"));
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(scfm(dir.path(), &["distill", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_teacher_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = scfm(dir.path(), &["distill", "--config", "tiny.toml", "--teacher", "nope.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("hot.toml"), format!("{TINY}\n[teacher]\nlr = 1e300\n").replace("[teacher]\niters = 30\n", "")).unwrap();
    let out = scfm(dir.path(), &["train-teacher", "--config", "hot.toml", "--out-dir", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_env_overrides_config() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_scfm"))
        .args(["train-teacher", "--config", "tiny.toml", "--out-dir", "seeded"])
        .current_dir(dir.path())
        .env("SCFM_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    let a = std::fs::read(dir.path().join("run/teacher.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("seeded/teacher.ckpt")).unwrap();
    assert_ne!(a, b);
    let resolved = std::fs::read_to_string(dir.path().join("seeded/config.toml")).unwrap();
    assert!(resolved.contains("seed = 9"), "{resolved}");
}

#[test]
fn distill_eval_and_sample_are_deterministic() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = scfm(d, &["distill", "--config", "tiny.toml", "--teacher", "run/teacher.ckpt", "--variant", "fast-slow", "--out-dir", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["student.ckpt", "metrics.csv", "config.toml"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    let iterations: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iterations, ["0", "10", "20"]);

    let eval = |student: &str| {
        let o = scfm(d, &["eval", "--config", "tiny.toml", "--teacher", "run/teacher.ckpt", "--student", student, "--steps", "1,4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let table = eval("a/student.ckpt");
    assert_eq!(table, eval("b/student.ckpt"));
    assert!(table.starts_with("model,steps,fid_sw,straightness,residual\n"));
    assert_eq!(table.lines().count(), 5);

    let o = scfm(d, &["sample", "--ckpt", "a/student.ckpt", "--count", "7", "--out", "s.csv"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,label"));
    assert_eq!(csv.lines().count(), 8);
    let o = scfm(d, &["sample", "--ckpt", "a/student.ckpt", "--out", "s.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_writes_svgs() {
    let dir = setup();
    let o = scfm(dir.path(), &["plot", "--config", "tiny.toml", "--teacher", "run/teacher.ckpt", "--out-dir", "plots"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(dir.path().join("plots/samples.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = scfm(dir.path(), &["grad-check", "--probes", "4"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().starts_with("PASS"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ncgmm");

const TINY: &str = r#"
seed = 3

[scenarios]
n_train = 40
n_dev = 8
horizon = 20

[train]
epochs = 3
warmup_epochs = 1
batch_size = 16

[eval]
steps = 300
band_dwell = 100
transient = 50
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("NCGMM_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_every_subcommand() {
    let top = run(&["--help"]);
    assert_eq!(code(&top), 0);
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in ["gen-data", "train", "eval", "run-all"] {
        assert!(text.contains(sub), "{sub} missing from top-level help");
    }
    let expected: [(&str, &[&str]); 4] = [
        ("gen-data", &["--config", "--out", "--seed"]),
        ("train", &["--config", "--data", "--out", "--threads", "--seed"]),
        ("eval", &["--config", "--checkpoint", "--out", "--steps", "--scenarios", "--seed"]),
        ("run-all", &["--config", "--out", "--threads", "--steps", "--seed"]),
    ];
    for (sub, flags) in expected {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let h = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(h.contains(f), "{sub} --help lacks {f}");
        }
        assert!(h.contains("NCGMM_SEED"));
    }
}

#[test]
fn missing_config_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--config", "/no/such/config.toml", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_config_reports_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nbatch_size = -4\n");
    let o = run(&["gen-data", "--config", &cfg, "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.batch_size"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "range.toml", "[scenarios]\nsigma = -1.0\n");
    let o = run(&["gen-data", "--config", &cfg, "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("scenarios.sigma"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["gen-data"])), 2);
}

#[test]
fn unwritable_output_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = run(&["gen-data", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn overflowing_plant_is_numerical_abort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{TINY}\n[plant]\na = [[1e300]]\n"));
    let o = run(&["run-all", "--config", &cfg, "--out", s(&dir.path().join("o")), "--quiet"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(!dir.path().join("o/checkpoint.ncgmm").exists());
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let gen = |out: &str, flag: Option<&str>, env: Option<&str>| {
        let mut c = Command::new(BIN);
        c.args(["gen-data", "--config", &cfg, "--out", out]).env_remove("NCGMM_SEED");
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        if let Some(e) = env {
            c.env("NCGMM_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(Path::new(out).join("train.csv")).unwrap()
    };
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let from_flag = gen(&p("a"), Some("9"), Some("4"));
    let from_env = gen(&p("b"), None, Some("9"));
    let from_cfg = gen(&p("c"), None, None);
    let explicit_cfg = gen(&p("d"), Some("3"), None);
    assert_eq!(from_flag, from_env);
    assert_eq!(from_cfg, explicit_cfg);
    assert_ne!(from_flag, from_cfg);
    assert!(String::from_utf8_lossy(&from_flag).contains("# seed=9"));
}

#[test]
fn pipeline_subcommands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "c.toml", TINY);
    let data = root.join("data");
    assert_eq!(code(&run(&["gen-data", "--config", &cfg, "--out", s(&data)])), 0);
    let train_text = fs::read_to_string(data.join("train.csv")).unwrap();
    assert!(train_text.contains("# scenarios=40"));
    assert_eq!(train_text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 40 * 20);

    for out in ["m1", "m2"] {
        let o = run(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&root.join(out)), "--quiet"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("final dev loss: "));
    }
    for f in ["history.csv", "checkpoint.ncgmm"] {
        assert_eq!(fs::read(root.join("m1").join(f)).unwrap(), fs::read(root.join("m2").join(f)).unwrap(), "{f}");
    }
    let history = fs::read_to_string(root.join("m1/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,dev_loss,dev_track,dev_terminal,dev_du,dev_con\n"));

    let ck = root.join("m1/checkpoint.ncgmm");
    let ev = root.join("ev");
    let o = run(&["eval", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(ev.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 301);
    assert_eq!(csv.lines().next().unwrap(), "k,y,u,d,ymin,ymax");
    for f in ["trajectory.svg", "metrics.txt", "metrics.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["control_bound_fraction"], 1.0);
    assert_eq!(json["transient"], 50);

    let one = root.join("ev1");
    let o = run(&["eval", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(&one), "--steps", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(one.join("trajectory.csv")).unwrap().lines().count(), 2);

    let many = root.join("evm");
    let o = run(&["eval", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(&many), "--scenarios", "3", "--steps", "120"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(many.join("trajectory_0002.csv").exists());
    assert!(fs::read_to_string(many.join("metrics.txt")).unwrap().contains("steps=360"));
}

#[test]
fn bad_checkpoints_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "c.toml", TINY);
    let corrupt = root.join("corrupt.ncgmm");
    fs::write(&corrupt, b"NCGMM1\x05\x00").unwrap();
    let o = run(&["eval", "--config", &cfg, "--checkpoint", s(&corrupt), "--out", s(&root.join("e"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let small = write_config(root, "small.toml", &TINY.replace("[train]\n", "[train]\nhidden = 16\n"));
    let o = run(&["run-all", "--config", &small, "--out", s(&root.join("small")), "--quiet", "--steps", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["eval", "--config", &cfg, "--checkpoint", s(&root.join("small/checkpoint.ncgmm")), "--out", s(&root.join("e2"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));
}

#[test]
fn dataset_plant_mismatch_is_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let two_d = write_config(root, "two.toml", &format!("{TINY}\n[plant]\ne = [[0.3, 0.1]]\n"));
    let cfg = write_config(root, "c.toml", TINY);
    assert_eq!(code(&run(&["gen-data", "--config", &two_d, "--out", s(&root.join("d"))])), 0);
    let o = run(&["train", "--config", &cfg, "--data", s(&root.join("d")), "--out", s(&root.join("m")), "--quiet"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

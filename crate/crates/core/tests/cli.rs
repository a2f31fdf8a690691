//! End-to-end tests of the `invgame` binary: exit codes, outputs, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn invgame(mode: &str, config: &Path, out: &Path, envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_invgame"));
    cmd.args([mode, "--config"]).arg(config).arg("--out").arg(out).env_remove("INVGAME_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to launch invgame")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SIMULATE: &str = r#"
mode = "simulate"
[system]
a = [[1.0, 1.0], [0.0, 2.0]]
b = [[[1.0], [0.0]], [[0.0], [1.0]]]
c = [[[1.0, 0.0]], [[0.0, 1.0]]]
[targets]
k = [[[3.0]], [[4.0]]]
[trajectory]
dt_fine = 1e-4
delta_t = 0.01
duration = 0.2
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn solve_mb_writes_result_and_trace() {
    let tmp = TempDir::new().unwrap();
    let o = invgame("solve-mb", &fixture("mb_2player.toml"), tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&tmp.path().join("result.json"));
    assert_eq!(r["players"], 2);
    assert!(r["certificate"]["passed"].as_bool().unwrap());
    let iterations = r["iterations"].as_u64().unwrap() as usize;
    let trace = fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "s,e_1,e_2,spectral_abscissa");
    assert_eq!(lines.count(), iterations);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        assert_eq!(code(&invgame("solve-mb", &fixture("mb_2player.toml"), dir.path(), &[])), 0);
    }
    for f in ["result.json", "trace.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn overshooting_step_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let o = invgame("solve-mb", &fixture("mb_overshoot.toml"), tmp.path(), &[]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stability lost at s="), "{err}");
    assert!(err.contains("[gradient]"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let text = fs::read_to_string(fixture("mb_2player.toml")).unwrap().replace("beta = 0.6", "beta = 0.6\ngamma = 1.0");
    let cfg = write(tmp.path(), "bad.toml", &text);
    let o = invgame("solve-mb", &cfg, tmp.path(), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&invgame("solve-mf", &fixture("mb_2player.toml"), tmp.path(), &[])), 2);
}

#[test]
fn coarse_integration_step_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.toml", &SIMULATE.replace("dt_fine = 1e-4", "dt_fine = 1e-3"));
    assert_eq!(code(&invgame("simulate", &cfg, tmp.path(), &[])), 2);
}

#[test]
fn simulate_respects_seed_env_and_flag() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sim.toml", SIMULATE);
    let run = |name: &str, envs: &[(&str, &str)]| {
        let out = tmp.path().join(name);
        let o = invgame("simulate", &cfg, &out, envs);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (read_json(&out.join("result.json")), fs::read(out.join("trajectory.csv")).unwrap())
    };
    let (r7, t7) = run("a", &[("INVGAME_SEED", "7")]);
    let (r7b, t7b) = run("b", &[("INVGAME_SEED", "7")]);
    let (r8, t8) = run("c", &[("INVGAME_SEED", "8")]);
    assert_eq!(r7["seed"], 7);
    assert_eq!(r8["seed"], 8);
    assert_eq!(t7, t7b);
    assert_ne!(t7, t8);
    assert_eq!(r7, r7b);
    assert_eq!(r7["data"]["intervals"], 20);

    let out = tmp.path().join("d");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_invgame"));
    let o = cmd
        .args(["simulate", "--seed", "8", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("INVGAME_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("trajectory.csv")).unwrap(), t8);
}

fn verify_config(r: &Value, q: &Value) -> String {
    format!(
        r#"mode = "verify-ne"
[system]
a = [[1.0, 1.0], [0.0, 2.0]]
b = [[[1.0], [0.0]], [[0.0], [1.0]]]
c = [[[1.0, 0.0]], [[0.0, 1.0]]]
[costs]
r = {}
q = {}
[solution]
x = {}
k = {}
"#,
        r["r"], q, r["x"], r["k"]
    )
}

#[test]
fn verify_ne_accepts_solution_and_rejects_perturbed_costs() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&invgame("solve-mb", &fixture("mb_2player.toml"), tmp.path(), &[])), 0);
    let r = read_json(&tmp.path().join("result.json"));

    let good = write(tmp.path(), "good.toml", &verify_config(&r, &r["q"]));
    let o = invgame("verify-ne", &good, &tmp.path().join("good"), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_json(&tmp.path().join("good/result.json"))["certificate"]["passed"].as_bool().unwrap());

    let mut q = r["q"].clone();
    q[0][0][0] = Value::from(q[0][0][0].as_f64().unwrap() + 1.0);
    let bad = write(tmp.path(), "bad.toml", &verify_config(&r, &q));
    assert_eq!(code(&invgame("verify-ne", &bad, &tmp.path().join("bad"), &[])), 1);
}

const FAMILY: &str = r#"mode = "family"
[system]
a = [[1.0, 1.0], [0.0, 2.0]]
b = [[[1.0], [0.0]], [[0.0], [1.0]]]
c = [[[1.0, 0.0]], [[0.0, 1.0]]]
[family]
result = "prior/result.json"
"#;

#[test]
fn family_certifies_random_draws() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&invgame("solve-mb", &fixture("mb_2player.toml"), &tmp.path().join("prior"), &[])), 0);
    let cfg = write(tmp.path(), "family.toml", &format!("{FAMILY}draws = 5\nseed = 3\n"));
    let o = invgame("family", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&tmp.path().join("out/result.json"));
    assert_eq!(r["draws"].as_array().unwrap().len(), 5);
    assert_eq!(r["failed_draws"].as_array().unwrap().len(), 0);
}

#[test]
fn family_rejects_diagonal_trade_off() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&invgame("solve-mb", &fixture("mb_2player.toml"), &tmp.path().join("prior"), &[])), 0);
    let text = format!("{FAMILY}delta_r = [[[[[0.5]], [[1.0]]], [[[1.0]], [[0.0]]]]]\n");
    let cfg = write(tmp.path(), "family.toml", &text);
    assert_eq!(code(&invgame("family", &cfg, &tmp.path().join("out"), &[])), 2);
}

#[test]
fn distributed_run_logs_protocol_messages() {
    let tmp = TempDir::new().unwrap();
    let o = invgame("solve-dist", &fixture("dist_3player.toml"), tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let msgs = fs::read_to_string(tmp.path().join("messages.jsonl")).unwrap();
    let parsed: Vec<Value> = msgs.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(parsed.iter().any(|m| m["action"] == "start-phase"));
    assert!(parsed.iter().any(|m| m["action"] == "update-q"));
    let r = read_json(&tmp.path().join("result.json"));
    assert_eq!(r["cross_agent_reads"], 0);
}

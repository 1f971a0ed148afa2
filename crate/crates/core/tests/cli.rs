use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_swarmchain");

const SCENARIO: &str = r#"{"seed": 4, "miners": 3, "events": [
  {"atTick": 1, "action": {"submitTx": {"sender": "alice", "contract": "counter", "method": "increment"}}},
  {"atTick": 2, "action": {"submitTx": {"sender": "alice", "contract": "counter", "method": "increment"}}},
  {"atTick": 3, "action": {"submitTx": {"sender": "bob", "contract": "counter", "method": "increment"}}}
]}"#;

fn swarmchain(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn scenario(dir: &Path) -> String {
    let path = dir.join("scenario.json");
    fs::write(&path, SCENARIO).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_prints_a_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let a = swarmchain(&["run", "--config", &cfg]);
    assert!(a.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["perMiner"]["miner-1"]["contractStates"]["counter"]["count"], 3);
    let b = swarmchain(&["run", "--config", &cfg]);
    assert_eq!(stdout(&a), stdout(&b));

    let out = dir.path().join("report.json");
    let c = swarmchain(&["run", "--config", &cfg, "--report", out.to_str().unwrap()]);
    assert!(c.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), stdout(&a));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let a = stdout(&swarmchain(&["run", "--config", &cfg, "--seed", "4"]));
    let b = stdout(&swarmchain(&["run", "--config", &cfg]));
    assert_eq!(a, b);
}

#[test]
fn dump_verify_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let chain = dir.path().join("chain.jsonl");
    let chain = chain.to_str().unwrap();
    assert!(swarmchain(&["dump", "--config", &cfg, "--miner", "miner-2", "--out", chain]).status.success());

    let v = swarmchain(&["verify", chain]);
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
    assert!(stdout(&v).starts_with("ok: "));

    let r = swarmchain(&["replay-states", chain]);
    assert!(r.status.success());
    assert_eq!(stdout(&r).trim(), r#"{"counter":{"count":3}}"#);

    // Wrong difficulty: the file no longer validates.
    let strict = swarmchain(&["verify", chain, "--difficulty", "30"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn tampered_chain_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path());
    let path = dir.path().join("chain.jsonl");
    assert!(swarmchain(&["dump", "--config", &cfg, "--miner", "miner-1", "--out", path.to_str().unwrap()])
        .status
        .success());
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    assert!(lines.len() >= 2);
    lines[1] = lines[1].replacen("\"minerId\":\"", "\"minerId\":\"x", 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let v = swarmchain(&["verify", path.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&v.stderr).contains("line 2"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "miners": 2, "blockCap": 1.5}"#).unwrap();
    let o = swarmchain(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blockCap"));

    assert_eq!(swarmchain(&["run", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(swarmchain(&["submit", "--method", "increment"]).status.code(), Some(2));
    assert_eq!(swarmchain(&["frobnicate"]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(swarmchain(&["verify", garbage.to_str().unwrap()]).status.code(), Some(1));

    let cfg = scenario(dir.path());
    let out = dir.path().join("x.jsonl");
    let o = swarmchain(&["dump", "--config", &cfg, "--miner", "ghost", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn interactive_session() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.json");
    fs::write(&cfg, r#"{"seed": 1, "miners": 2}"#).unwrap();
    let mut child = Command::new(BIN)
        .args(["run", "--config", cfg.to_str().unwrap(), "--interactive"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(
            b"submit --method increment\nsubmit --method increment --sender bob\nbogus\ntick 2\nrun\nreport\nquit\n",
        )
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("submitted "));
    assert!(lines[1].starts_with("submitted "));
    assert_eq!(lines[2], "tick 2");
    assert!(lines[3].contains("converged=true"));
    let report: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
    assert_eq!(report["perMiner"]["miner-2"]["contractStates"]["counter"]["count"], 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn bundled_scenario_converges() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/four_miners.json");
    let o = swarmchain(&["run", "--config", path.to_str().unwrap()]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["converged"], true);
    assert!(report["perMiner"].get("miner-4").is_none());
    assert_eq!(report["perMiner"]["late"]["contractStates"]["counter"]["count"], 4);
}

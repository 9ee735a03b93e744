use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn agentrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentrade")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        r#"[run]
symbol = "BTCUSDT"
start = "2025-01-05T00:00:00Z"
end = "2025-02-05T00:00:00Z"

[data]
m15 = "data/btcusdt_15m.csv"
evidence = "data/evidence.jsonl"

[schedule]
kind = "fixed_count"
n = 12
"#,
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn synth_backtest_report_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = agentrade(&["synth", "--out", data.to_str().unwrap(), "--bars", "2976"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("btcusdt_15m.csv").is_file());

    let cfg = write_config(tmp.path());
    let o = agentrade(&["ingest", "--config", &cfg]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("m15"), "{}", stdout(&o));

    let runs = tmp.path().join("runs");
    for memory in ["on", "off"] {
        let o = agentrade(&["backtest", "--config", &cfg, "--memory", memory, "--out", runs.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("12 epochs"), "{}", stdout(&o));
    }
    let on = runs.join("stub__rules-v1__mem-on");
    let off = runs.join("stub__rules-v1__mem-off");
    for f in ["trades.csv", "equity.csv", "events.jsonl", "decisions.jsonl", "metrics.csv", "run.json", "config.toml"] {
        assert!(on.join(f).is_file(), "missing {f}");
    }
    assert!(!off.join("memory.jsonl").exists());

    let o = agentrade(&["report", "--runs", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(runs.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("Provider,Model,Memory,Trades,"));

    let o = agentrade(&["replay", "--log", on.join("events.jsonl").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("matches recorded metrics"));
}

#[test]
fn replay_flags_tampered_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(agentrade(&["synth", "--out", data.to_str().unwrap(), "--bars", "2976"]).status.success());
    let cfg = write_config(tmp.path());
    let runs = tmp.path().join("runs");
    assert!(agentrade(&["backtest", "--config", &cfg, "--policy", "abstain", "--out", runs.to_str().unwrap()]).status.success());
    let dir = runs.join("stub__rules-v1__mem-on");
    let path = dir.join("metrics.csv");
    let text = fs::read_to_string(&path).unwrap().replace(",10000,", ",10001,");
    fs::write(&path, text).unwrap();
    let o = agentrade(&["replay", "--log", dir.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("mismatch"), "{}", stdout(&o));
}

#[test]
fn bad_config_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[run]\nsymbol = \"BTCUSDT\"\nstart = \"2025-02-01T00:00:00Z\"\nend = \"2025-01-01T00:00:00Z\"\n[data]\nm15 = \"x.csv\"\n").unwrap();
    let o = agentrade(&["backtest", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.end must be after run.start"));
}

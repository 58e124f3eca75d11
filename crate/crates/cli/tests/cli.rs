use std::path::Path;
use std::process::{Command, Output};

fn qkdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SHORT: &str = r#"
schema_version = 1
name = "short"
duration_s = 20
seed = 8

[topology]
preset = "diamond"

[engine]
sample_interval_s = 5

[[event]]
at_s = 0
kind = "start_qkd"

[[event]]
at_s = 4
kind = "relay_request"
src = "S"
dst = "D"
bits = 512
every_s = 4
"#;

fn write_scenario(dir: &Path, text: &str) -> String {
    let p = dir.join("s.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn presets_lists_and_prints() {
    let o = qkdnet(&["presets"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for n in ["cambridge", "diamond", "chain"] {
        assert!(s.contains(n), "{s}");
    }
    let o = qkdnet(&["presets", "cambridge"]);
    assert!(o.status.success());
    qkdnet::netgraph::load_topology(&stdout(&o)).unwrap();
    assert_eq!(qkdnet(&["presets", "atlantis"]).status.code(), Some(1));
}

#[test]
fn budget_reports_losses() {
    let o = qkdnet(&["budget", "--link", "Anna-Bob"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("2.801 dB"), "{}", stdout(&o));
    let o = qkdnet(&[
        "budget",
        "--switch",
        "bbn",
        "--tx",
        "Anna",
        "--rx",
        "Boris",
        "--enclaves",
        "10",
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(
        s.contains("14.300 dB") && s.contains("45 links as a full mesh") && s.contains("10 through"),
        "{s}"
    );
    assert_eq!(qkdnet(&["budget", "--link", "Nope"]).status.code(), Some(1));
}

#[test]
fn run_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SHORT);
    let out = dir.path().join("out");
    let o = qkdnet(&[
        "run",
        "--scenario",
        &sc,
        "--out",
        out.to_str().unwrap(),
        "--format",
        "records",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("relay sessions"));
    let records = out.join("records.jsonl");
    let o = qkdnet(&["verify", records.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ok:"));

    // replay one pad draw: verify must refuse
    let text = std::fs::read_to_string(&records).unwrap();
    let consume = text.lines().find(|l| l.contains("\"op\":\"consume\"")).unwrap().to_owned();
    std::fs::write(&records, format!("{text}{consume}\n")).unwrap();
    let o = qkdnet(&["verify", records.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("violation"));
}

#[test]
fn csv_output_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SHORT);
    let csv = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--scenario", &sc, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(qkdnet(&args).status.success());
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = csv("a", &[]);
    assert_eq!(a, csv("b", &[]));
    assert_ne!(a, csv("c", &["--seed", "99"]));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("time_s,link_id,sifted_bps,qber,secret_bps,reservoir_bits\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 4);
}

#[test]
fn preset_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnet(&[
        "run",
        "--preset",
        "diamond",
        "--duration",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("S-R1"));
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_scenario(dir.path(), &SHORT.replace("dst = \"D\"", "dst = \"Q\""));
    let o = qkdnet(&["run", "--scenario", &bad, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown node `Q`"));

    assert_eq!(qkdnet(&["run", "--scenario", "/no/such/file.toml"]).status.code(), Some(1));
    assert_eq!(qkdnet(&["run"]).status.code(), Some(1));
    assert_eq!(
        qkdnet(&["run", "--format", "xml", "--preset", "diamond"]).status.code(),
        Some(1)
    );
    assert_eq!(qkdnet(&["verify", "/no/such/records.jsonl"]).status.code(), Some(1));
    assert!(qkdnet(&["--help"]).status.success());
}

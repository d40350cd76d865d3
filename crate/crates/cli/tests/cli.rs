use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use seqoed::campaign::{CampaignState, Status};
use seqoed::io;
use seqoed_cli::args::Cli;
use seqoed_cli::commands;

fn run(args: &[&str]) -> seqoed::Result<String> {
    let cli = Cli::try_parse_from(std::iter::once("seqoed").chain(args.iter().copied())).expect("arguments parse");
    let mut out = Vec::new();
    commands::run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn theta_file(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("truth.json");
    fs::write(&path, serde_json::to_string(&io::theta_tot_fixture()).unwrap()).unwrap();
    path
}

#[test]
fn replay_tot_matches_reference_errors_and_is_deterministic() {
    let a = run(&["replay-paper", "--stage", "tot", "--json"]).unwrap();
    let b = run(&["replay-paper", "--stage", "tot", "--json"]).unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let row = &v[0];
    for j in 0..2 {
        let got = row["rmse"][j].as_f64().unwrap();
        let want = row["reference"]["rmse"][j].as_f64().unwrap();
        assert!((got / want - 1.0).abs() < 0.02, "{got} vs {want}");
    }
    let table = run(&["replay-paper", "--stage", "tot"]).unwrap();
    assert!(table.starts_with("stage"));
    assert!(table.lines().nth(1).unwrap().starts_with("tot"));
}

#[test]
fn new_propose_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    let out = run(&["campaign", "new", "--initial-design", "init", "--out", p(&c)]).unwrap();
    assert!(out.contains("ready_to_propose"), "{out}");
    assert!(run(&["campaign", "new", "--initial-design", "init", "--out", p(&c)]).is_err());

    let out = run(&["campaign", "propose", p(&c)]).unwrap();
    let rows = out
        .lines()
        .skip_while(|l| !l.trim_start().starts_with('#'))
        .skip(1)
        .take_while(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit()))
        .count();
    assert!((1..=3).contains(&rows), "{out}");
    let pending = run(&["campaign", "export", p(&c), "--pending"]).unwrap();
    assert_eq!(io::read_design(&pending).unwrap().len(), rows);
    let measured = run(&["campaign", "export", p(&c)]).unwrap();
    assert_eq!(io::read_measurements(&measured).unwrap(), io::fixture("init").unwrap());
}

#[test]
fn malformed_measurements_leave_the_campaign_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    let design = dir.path().join("d.csv");
    fs::write(&design, "l,P\n0.5,100000\n0.2,300000\n").unwrap();
    run(&["campaign", "new", "--initial-design", p(&design), "--out", p(&c)]).unwrap();
    let before = fs::read(&c).unwrap();

    let bad = dir.path().join("bad.csv");
    let header = io::CSV_HEADER.join(",");
    for body in [
        format!("{header}\ninit,0.5,0.5,100000,100000,1.2,360,0.0015,0.03\ninit,0.2,0.2,300000,300000,0.4,390,0.0015,0.03\n"),
        format!("{header}\ninit,0.5,0.5,100000,100000,abc,360,0.0015,0.03\n"),
        "l,P\n0.5,1e5\n".to_string(),
        String::new(),
    ] {
        fs::write(&bad, body).unwrap();
        let e = run(&["campaign", "record", p(&c), "--measurements", p(&bad)]).unwrap_err();
        assert_eq!(e.kind(), "parse", "{e}");
        assert_eq!(fs::read(&c).unwrap(), before);
    }
    // well formed but for another point
    fs::write(
        &bad,
        format!("{header}\ninit,0.5,0.5,100000,100000,0.6,360,0.0015,0.03\ninit,0.3,0.3,300000,300000,0.4,390,0.0015,0.03\n"),
    )
    .unwrap();
    let e = run(&["campaign", "record", p(&c), "--measurements", p(&bad)]).unwrap_err();
    assert_eq!(e.kind(), "invalid");
    assert_eq!(fs::read(&c).unwrap(), before);
}

#[test]
fn record_then_propose_from_a_planned_design() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    run(&["campaign", "new", "--initial-design", "init", "--out", p(&c)]).unwrap();
    // restart the same campaign from planned points and feed the measured table back
    let planned = dir.path().join("planned.csv");
    fs::write(&planned, io::write_design(&io::planned_design(&io::fixture("init").unwrap()))).unwrap();
    let c2 = dir.path().join("c2.json");
    run(&["campaign", "new", "--initial-design", p(&planned), "--out", p(&c2)]).unwrap();
    let m = dir.path().join("m.csv");
    fs::write(&m, io::write_measurements(&io::fixture("init").unwrap())).unwrap();
    let out = run(&["campaign", "record", p(&c2), "--measurements", p(&m)]).unwrap();
    assert!(out.contains("ready_to_propose"), "{out}");
    let a = CampaignState::load(&c).unwrap();
    let b = CampaignState::load(&c2).unwrap();
    assert_eq!(a.measurements, b.measurements);
    assert_eq!(run(&["campaign", "propose", p(&c)]).unwrap(), run(&["campaign", "propose", p(&c2)]).unwrap());
}

#[test]
fn simulated_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let truth = theta_file(dir.path());
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let c = dir.path().join(name);
        run(&["campaign", "new", "--initial-design", "init", "--out", p(&c)]).unwrap();
        outputs.push(run(&["campaign", "run-sim", p(&c), "--truth", p(&truth), "--seed", "3"]).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    let s = CampaignState::from_json(std::str::from_utf8(&a).unwrap()).unwrap();
    assert!(s.status.is_terminal());
    assert!(s.design_size() <= 27);
    assert!(s.history.iter().all(|h| h.batch.len() <= 3));
    let e = run(&["campaign", "run-sim", p(&dir.path().join("a.json")), "--truth", p(&truth)]).unwrap_err();
    assert_eq!(e.kind(), "state");
}

#[test]
fn assess_writes_metrics_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    run(&["campaign", "new", "--initial-design", "oed3", "--out", p(&c)]).unwrap();
    let out_dir = dir.path().join("metrics");
    let out = run(&[
        "assess", p(&c), "--sampling", "--n-sam", "20", "--seed", "1", "--reference", "tot", "--out-dir", p(&out_dir),
    ])
    .unwrap();
    assert!(out.contains("sig_sam"), "{out}");
    let lin = fs::read_to_string(out_dir.join("sigma_lin.csv")).unwrap();
    let lines: Vec<&str> = lin.lines().collect();
    assert_eq!(lines[0], "l,sigma_v,sigma_T");
    assert_eq!(lines.len(), 202);
    assert_eq!(lines[1], "0,0,0");
    assert_eq!(*lines.last().unwrap(), "1,0,0");
    assert!(out_dir.join("sigma_sam.csv").exists());
    let m: commands::Assessment = serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.metrics.size, 15);
    assert_eq!(m.state_hash, CampaignState::load(&c).unwrap().state_hash());
}

#[test]
fn show_reports_status() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    run(&["campaign", "new", "--initial-design", "init", "--out", p(&c)]).unwrap();
    let s = run(&["campaign", "show", p(&c)]).unwrap();
    assert!(s.starts_with("status ready_to_propose"));
    let j = run(&["campaign", "show", p(&c), "--json"]).unwrap();
    let state = CampaignState::from_json(&j).unwrap();
    assert_eq!(state.status, Status::ReadyToPropose);
}

#[test]
fn binary_reports_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_seqoed"))
        .args(["campaign", "propose", p(&dir.path().join("missing.json"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "io");

    let c = dir.path().join("c.json");
    fs::write(&c, "{\"schema_version\": 99}").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_seqoed"))
        .args(["campaign", "show", p(&c)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "schema_version");
}

#[test]
fn binary_output_is_deterministic() {
    let run_bin = || {
        Command::new(env!("CARGO_BIN_EXE_seqoed"))
            .args(["replay-paper", "--stage", "oed1"])
            .output()
            .unwrap()
    };
    let a = run_bin();
    let b = run_bin();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

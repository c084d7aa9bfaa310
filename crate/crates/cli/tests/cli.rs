use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use snap_core::netsim::{run_backbone_sim, ScenarioConfig};
use snap_core::overlay::{build_overlay, peers, LevelPolicy, OverlayDoc};
use snap_core::PeerId;

fn snap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snap")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn build_json(args: &[&str]) -> Value {
    let mut all = vec!["build"];
    all.extend_from_slice(args);
    let o = snap(&all);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_overlay(dir: &Path, n: usize) -> PathBuf {
    let o = snap(&["build", "--n", &n.to_string(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    dir.join("overlay.json")
}

fn trace_rows(path: &Path) -> Vec<[u64; 4]> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# snap oracle digest="));
    text.lines()
        .skip(2)
        .map(|l| {
            let v: Vec<u64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

#[test]
fn build_stamps() {
    let d = build_json(&["--n", "16"]);
    let s = &d["stamp"];
    assert_eq!(s["P"], 4);
    assert!(s["iset_sizes"].as_array().unwrap().iter().all(|x| x == 15));
    assert!(s["table_max"].as_u64().unwrap() <= 7);
    assert_eq!(s["prop2_ok"], true);
    assert_eq!(d["manifest"]["config_digest"].as_str().unwrap().len(), 64);

    assert_eq!(build_json(&["--n", "2"])["stamp"]["P"], 1);
    let single = build_json(&["--n", "20", "--policy", "single-level"]);
    assert_eq!(single["stamp"]["extra_levels"], serde_json::json!([3]));
}

#[test]
fn build_round_trips_through_document() {
    for n in [3usize, 16, 20, 37] {
        let d = build_json(&["--n", &n.to_string()]);
        let doc: OverlayDoc = serde_json::from_value(d["overlay"].clone()).unwrap();
        let direct = build_overlay(&peers(0..n as u32), &LevelPolicy::Auto).unwrap();
        assert!(doc.to_overlay().unwrap().same_structure(&direct), "N={n}");
    }
}

#[test]
fn build_is_deterministic() {
    assert_eq!(snap(&["build", "--n", "23"]).stdout, snap(&["build", "--n", "23"]).stdout);
}

#[test]
fn build_rejects_bad_input() {
    assert_eq!(code(&snap(&["build", "--n", "1"])), 2);
    assert_eq!(code(&snap(&["build", "--n", "20", "--policy", "sideways"])), 2);
    assert_eq!(code(&snap(&["build", "--n", "21", "--policy", "single-level"])), 2);
}

#[test]
fn oracle_passes_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    for (n, chunks, lag) in [(16usize, 16u64, 4u64), (5, 12, 3)] {
        let dir = tmp.path().join(n.to_string());
        let file = write_overlay(&dir, n);
        let o = snap(&["oracle", file.to_str().unwrap(), "--chunks", &chunks.to_string(), "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains(&format!("lag_min={lag} lag_max={lag}")), "{}", stdout(&o));
        let rows = trace_rows(&dir.join("trace.csv"));
        assert_eq!(rows.len() as u64, chunks * n as u64);
    }
}

#[test]
fn oracle_flags_corrupted_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    let file = write_overlay(tmp.path(), 16);
    let mut d: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    let tree = &mut d["overlay"]["trees"][0];
    let dup = tree["levels"][3][0].clone();
    let old = tree["levels"][4][0].clone();
    tree["levels"][4][0] = dup.clone();
    let parent = tree["parents"].as_object_mut().unwrap().remove(&old.to_string()).unwrap();
    tree["parents"][dup.to_string()] = parent;
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, d.to_string()).unwrap();
    let o = snap(&["oracle", bad.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("appears twice"));

    std::fs::write(&bad, "{").unwrap();
    assert_eq!(code(&snap(&["oracle", bad.to_str().unwrap()])), 2);
}

#[test]
fn oracle_agrees_with_backbone_sim_at_zero_delay() {
    let tmp = tempfile::tempdir().unwrap();
    for n in [6usize, 16, 19] {
        let dir = tmp.path().join(n.to_string());
        let file = write_overlay(&dir, n);
        let o = build_overlay(&peers(0..n as u32), &LevelPolicy::Auto).unwrap();
        let chunks = 3 * o.period() as u64;
        let out = snap(&["oracle", file.to_str().unwrap(), "--chunks", &chunks.to_string(), "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        let slots: BTreeMap<(u64, u32), u64> = trace_rows(&dir.join("trace.csv"))
            .into_iter()
            .map(|[c, p, e, r]| ((c, p as u32), r - e))
            .collect();
        let r = run_backbone_sim(&o, &ScenarioConfig::calibration(n, 0.0, 1.0, chunks)).unwrap();
        assert_eq!(r.playback_delay.len(), slots.len());
        for s in &r.playback_delay {
            let PeerId(p) = s.peer;
            assert_eq!(s.delay, slots[&(s.chunk, p)] as f64, "N={n} chunk {} peer {p}", s.chunk);
        }
    }
}

fn short_hybrid(dir: &Path) -> PathBuf {
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(scenario("hybrid_100.json")).unwrap()).unwrap();
    c["session_length"] = 60.0.into();
    c["max_peers"] = 40.into();
    let path = dir.join("short.json");
    std::fs::write(&path, c.to_string()).unwrap();
    path
}

#[test]
fn simulate_churn_free_matches_formula() {
    let tmp = tempfile::tempdir().unwrap();
    let o = snap(&["simulate", scenario("churn_free_16.json").to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    // K = 4, d = t = 0.5
    assert_eq!(s["playback_delay"]["max"], 4.0);
    assert_eq!(s["lost"], 0);
    for q in ["p10", "p50", "p90", "p99"] {
        assert!(s["playback_delay"][q].is_number());
        assert!(s["startup_latency"][q].is_number());
    }
    let digest = s["manifest"]["config_digest"].as_str().unwrap().to_string();
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains(&digest));
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = short_hybrid(tmp.path());
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let o = snap(&["simulate", sc.to_str().unwrap(), "--seed", "9", "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push((
            std::fs::read(dir.join("metrics.csv")).unwrap(),
            std::fs::read(dir.join("summary.json")).unwrap(),
        ));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn simulate_event_log() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = short_hybrid(tmp.path());
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(&sc).unwrap()).unwrap();
    c["log_events"] = true.into();
    std::fs::write(&sc, c.to_string()).unwrap();
    let o = snap(&["simulate", sc.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let log = std::fs::read_to_string(tmp.path().join("events.log")).unwrap();
    assert!(log.starts_with("# snap simulate digest="));
    assert!(log.lines().count() > 100);
}

#[test]
fn simulate_config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(scenario("hybrid_100.json")).unwrap()).unwrap();
    c["p2"] = 1.5.into();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, c.to_string()).unwrap();
    let o = snap(&["simulate", bad.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("p2"));
    assert_eq!(code(&snap(&["simulate", "/nonexistent.json"])), 2);
    let sc = short_hybrid(tmp.path());
    assert_eq!(code(&snap(&["simulate", sc.to_str().unwrap(), "--baseline", "lbtree"])), 2);
}

#[test]
fn sweep_orders_rows_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = short_hybrid(tmp.path());
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let o = snap(&["sweep", sc.to_str().unwrap(), "--vary", "p2=0:0.4:0.2", "--seeds", "2", "--seed", "4", "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        files.push(std::fs::read_to_string(dir.join("sweep.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let keys: Vec<(String, String)> = files[0]
        .lines()
        .skip(2)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[2].to_string())
        })
        .collect();
    let want: Vec<(String, String)> = ["0", "0.2", "0.4"]
        .iter()
        .flat_map(|v| ["4", "5"].map(|s| (v.to_string(), s.to_string())))
        .collect();
    assert_eq!(keys, want);
}

#[test]
fn sweep_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = short_hybrid(tmp.path());
    let dir = tmp.path().join("empty");
    let o = snap(&["sweep", sc.to_str().unwrap(), "--vary", "p2=0.6:0:0.1", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("field,value,seed"));
    for bad in ["link_delay_range=0:1:1", "tier2_mode=1,2", "nope=0:1:1", "p2=0:1:0", "p2"] {
        let o = snap(&["sweep", sc.to_str().unwrap(), "--vary", bad, "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{bad}");
    }
}

#[test]
fn analytic_verdicts() {
    let o = snap(&["analytic", "--n", "16", "--d", "1", "--t", "1"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.starts_with("# snap analytic digest="));
    assert!(out.contains("max_delay,17,8,SBT wins"));
    assert!(out.contains("avg_delay_exact,9.5,5.0625,SBT wins"));
    assert!(stdout(&snap(&["analytic", "--n", "16", "--d", "1", "--t", "0.001"])).contains("OPST wins on max delay"));
    assert!(stdout(&snap(&["analytic", "--n", "2", "--d", "1", "--t", "1"])).contains("max_delay,3,2,"));
    assert_eq!(code(&snap(&["analytic", "--n", "1", "--d", "1", "--t", "1"])), 2);
    assert_eq!(code(&snap(&["analytic", "--n", "4", "--d", "1", "--t", "0"])), 2);
}

#[test]
fn usage_exit_codes() {
    assert_eq!(code(&snap(&[])), 2);
    assert_eq!(code(&snap(&["frobnicate"])), 2);
    assert_eq!(code(&snap(&["build"])), 2);
    assert_eq!(code(&snap(&["--help"])), 0);
    let v = snap(&["build", "--n", "8", "--verbose", "--out-dir", tempfile::tempdir().unwrap().path().to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&v.stderr).contains("wrote"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fa3sim::gantt::{find_overlap, GanttEntry};
use fa3sim::isa::{parse_trace, Role};
use fa3sim::sim::SimResult;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn fa3sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fa3sim")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fa3sim(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn simulate(dir: &Path, workload: &Path, extra: &[&str]) -> SimResult {
    let gen = dir.join("gen");
    let sim = dir.join(format!("sim{}", extra.join("")));
    ok(&["gen-trace", path(workload), "-o", path(&gen)]);
    let mut args: Vec<String> = vec!["simulate".into(), path(&gen.join("trace.txt")).into(), "-o".into(), path(&sim).into()];
    args.extend(extra.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    serde_json::from_str(&std::fs::read_to_string(sim.join("result.json")).unwrap()).unwrap()
}

#[test]
fn gen_trace_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = repo("configs/llama3-8b.cfg");
    ok(&["gen-trace", path(&cfg), "-o", path(&a)]);
    ok(&["gen-trace", path(&cfg), "-o", path(&b)]);
    let ta = std::fs::read_to_string(a.join("trace.txt")).unwrap();
    assert_eq!(ta, std::fs::read_to_string(b.join("trace.txt")).unwrap());
    assert_eq!(parse_trace(&ta).unwrap().blocks.len(), 256);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["workload"]["h_kv"], 8);
}

#[test]
fn missing_workload_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.cfg", "B=1\nL=64\nH_KV=1\nG=1\nD=64\n");
    let out = fa3sim(&["gen-trace", path(&cfg), "-o", path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`S`"));
}

#[test]
fn bad_hardware_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("g");
    ok(&["gen-trace", path(&repo("configs/gqa-small.cfg")), "-o", path(&trace)]);
    // 1 GiB does not split evenly over 80 slices
    let out = fa3sim(&["simulate", path(&trace.join("trace.txt")), "--l2-bytes", "1GiB", "-o", path(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn protocol_violation_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write(dir.path(), "t.txt", "STAGES 1\nTHREAD 0 PRODUCER\nRELEASE_STAGE 0\nTHREAD 0 CONSUMER1\nMB_WAIT 0\n");
    let out = fa3sim(&["simulate", path(&trace), "-o", path(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn deadlock_exits_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write(dir.path(), "t.txt", "STAGES 1\nTHREAD 0 PRODUCER\nTHREAD 0 CONSUMER1\nBAR_WAIT 5 1\n");
    let out = fa3sim(&["simulate", path(&trace), "-o", path(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("deadlock") && err.contains("consumer1") && err.contains("BAR_WAIT 5 1"), "{err}");
}

#[test]
fn ablation_switches_move_counters() {
    let dir = tempfile::tempdir().unwrap();
    let w = repo("configs/gqa-small.cfg");
    let base = simulate(dir.path(), &w, &[]);
    let no_lrc = simulate(dir.path(), &w, &["--no-lrc"]);
    assert!(no_lrc.traffic.l2_read_bytes > base.traffic.l2_read_bytes);
    let seeded = simulate(dir.path(), &w, &["--seed", "9"]);
    assert_eq!(seeded.seed, 9);
}

#[test]
fn analyze_reports_and_forces_ideal() {
    let dir = tempfile::tempdir().unwrap();
    let w = write(dir.path(), "w.cfg", "B=1\nL=65536\nS=65536\nH_KV=8\nG=16\nD=128\n");
    let r: serde_json::Value = serde_json::from_str(&ok(&["analyze", path(&w)])).unwrap();
    assert_eq!(r["regime"], "realistic");
    assert_eq!(r["waves"], 125);
    let f: serde_json::Value = serde_json::from_str(&ok(&["analyze", path(&w), "--force-ideal"])).unwrap();
    assert_eq!(f["regime"], "ideal");
    assert_eq!(f["dram_bytes"], f["dram_ideal_bytes"]);
}

#[test]
fn compare_sweep_tracks_model() {
    let w = repo("configs/gqa-small.cfg");
    assert_eq!(
        ok(&["compare", path(&w)]),
        "L,S,regime,model_l2,sim_l2,model_dram,sim_dram,rel_err,dram_rel_err,error\n"
    );
    let csv = ok(&["compare", path(&w), "--ls", "256", "--ls", "512", "--ls", "1024"]);
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let err: f64 = row[7].parse().unwrap();
        assert!(err <= 0.05, "{row:?}");
    }
}

#[test]
fn compare_regime_flips_at_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let w = write(dir.path(), "w.cfg", "B=1\nL=64\nS=64\nH_KV=1\nG=1\nD=16\n");
    // smallest L2 the geometry allows; half of it is effective
    let csv = ok(&["compare", path(&w), "--l2-bytes", "163840", "--point", "64:1279", "--point", "64:1280"]);
    let regimes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(regimes, ["ideal", "realistic"]);
}

#[test]
fn gantt_export_for_one_sm() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &repo("configs/gqa-small.cfg"), &[]);
    let result = dir.path().join("sim").join("result.json");
    let entries: Vec<GanttEntry> = serde_json::from_str(&ok(&["gantt", path(&result), "--sm", "0"])).unwrap();
    assert!(entries.iter().all(|e| e.sm == 0));
    let lanes: std::collections::BTreeSet<Role> = entries.iter().map(|e| e.warpgroup).collect();
    assert_eq!(lanes.len(), 3);
    assert!(find_overlap(&entries, |e| (e.warpgroup, e.engine)).is_none());
    let csv = ok(&["gantt", path(&result), "--sm", "0", "--blocks", "0", "--format", "csv"]);
    assert!(csv.starts_with("sm,block,warpgroup,engine,start,end,label\n"));
    assert_eq!(csv.lines().count(), entries.len() + 1);
    assert_eq!(ok(&["gantt", path(&result), "--sm", "999"]).trim(), "[]");
}

#[test]
fn event_log_translates_to_the_same_trace() {
    let dir = tempfile::tempdir().unwrap();
    let w = repo("configs/gqa-small.cfg");
    let gen = dir.path().join("gen");
    let back = dir.path().join("back");
    ok(&["gen-trace", path(&w), "-o", path(&gen), "--event-log"]);
    ok(&["translate", path(&gen.join("events.bin")), path(&w), "-o", path(&back)]);
    assert_eq!(std::fs::read(gen.join("trace.txt")).unwrap(), std::fs::read(back.join("trace.txt")).unwrap());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bench() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bench.json")
}

fn tems(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tems"))
        .args(args)
        .env_remove("TEMS_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn tree_info_prints_counts() {
    let out = ok(&tems(&["tree-info", "--config", bench().to_str().unwrap()]));
    assert_eq!(out.lines().next().unwrap(), "scenarios: 3, state nodes: 31, naive full-branching: 9");
    let json = ok(&tems(&["tree-info", "--config", bench().to_str().unwrap(), "--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["state_nodes"], 31);
}

#[test]
fn run_twice_gives_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bench();
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&tems(&[
            "run", "--config", cfg.to_str().unwrap(), "--episodes", "1", "--seed", "1", "--out", out.to_str().unwrap(),
        ]));
        assert!(!out.join("INCOMPLETE").exists());
        let files = read_dir_sorted(&out.join("traces"));
        assert_eq!(files.len(), 1);
        traces.push(std::fs::read(&files[0]).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    let text = String::from_utf8(traces[0].clone()).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="));
    assert_eq!(
        lines.next().unwrap(),
        "t,x[0],x[1],z[0],z[1],u[0],dbar[0],dbar[1],viol[0],t_primary_ms,t_ancillary_ms"
    );
    // timing columns stay empty without --timing
    assert!(lines.all(|l| l.ends_with(",,")));

    let plot_dir = read_dir_sorted(&dir.path().join("a/plots"))[0].clone();
    let names: Vec<String> = read_dir_sorted(&plot_dir)
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"state_c_A.csv".to_string()));
    let series = std::fs::read_to_string(plot_dir.join("input_feed.csv")).unwrap();
    let rows: Vec<&str> = series.lines().skip(2).collect();
    assert_eq!(rows.len(), text.lines().count() - 3);
    assert!(rows[0].ends_with(",0.0000000000000000e0,2.0000000000000000e0"));
}

#[test]
fn compare_writes_one_row_per_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let stdout = ok(&tems(&[
        "compare", "--config", bench().to_str().unwrap(), "--seed", "7", "--episodes", "2", "--out", out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("Scenarios"));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    let scenarios: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(scenarios, ["9", "1", "3"]);
    let jsonl = std::fs::read_to_string(out.join("summaries.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 6);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["master_seed"], 7);
        assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn bad_config_fails_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(bench()).unwrap()).unwrap();
    v["model"].as_object_mut().unwrap().remove("input_bounds");
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = tems(&["tree-info", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.input_bounds"));

    let out = tems(&["run", "--config", "/nonexistent/x.json"]);
    assert!(!out.status.success());
}

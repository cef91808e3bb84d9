use std::path::Path;

use tems::config::{load_config, parse_config, ExperimentConfig};
use tems::controllers::SchemeKind;
use tems::Error;

fn bench_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/bench.json"))
}

fn poly_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/polymerization.json"))
}

fn bench_text() -> String {
    std::fs::read_to_string(bench_path()).unwrap()
}

fn config_error(text: &str) -> (String, String) {
    match parse_config(text) {
        Err(Error::Config { path, message }) => (path, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

fn edit(f: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(&bench_text()).unwrap();
    f(&mut v);
    v.to_string()
}

#[test]
fn shipped_config_round_trips() {
    let cfg = load_config(bench_path()).unwrap();
    let again = parse_config(&cfg.to_json()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.hash(), again.hash());
}

#[test]
fn shipped_config_tree_info() {
    let cfg = load_config(bench_path()).unwrap();
    let info = cfg.tree_info().unwrap();
    assert_eq!(info.line(), "scenarios: 3, state nodes: 31, naive full-branching: 9");
}

#[test]
fn shipped_schemes_scenario_counts() {
    let cfg = load_config(bench_path()).unwrap();
    let counts: Vec<(SchemeKind, usize)> = cfg
        .build_schemes()
        .unwrap()
        .iter()
        .map(|s| (s.pair.kind, s.pair.scenario_count()))
        .collect();
    assert_eq!(
        counts,
        vec![(SchemeKind::MultiStage, 9), (SchemeKind::Tube, 1), (SchemeKind::Tems, 3)]
    );
}

#[test]
fn polymerization_fixture() {
    let cfg = load_config(poly_path()).unwrap();
    assert_eq!(cfg.tree.horizon, 20);
    assert_eq!(cfg.model.dt, Some(50.0));
    assert_eq!(cfg.tree.robust_horizon, 1);
    let info = cfg.tree_info().unwrap();
    assert_eq!(info.scenarios, 9);
    assert_eq!(info.naive_full_branching, 59_049);
    let ms = cfg.schemes.iter().find(|s| s.kind == SchemeKind::MultiStage).unwrap();
    assert_eq!(cfg.realizations(ms).unwrap().len(), 27);
    // scenario list, not the bound, decides the k0 levels
    let tems = cfg.scheme_spec(None).unwrap();
    let r = cfg.realizations(tems).unwrap();
    assert!(r.vectors.iter().any(|v| v[1] == 9.1));
    assert!(!r.vectors.iter().any(|v| v[1] == 9.7));
    match cfg.benchmark() {
        Err(Error::Config { path, .. }) => assert_eq!(path, "model.name"),
        other => panic!("{other:?}"),
    }
    let again: ExperimentConfig = parse_config(&cfg.to_json()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn missing_input_bounds_names_the_field() {
    let text = edit(|v| {
        v["model"].as_object_mut().unwrap().remove("input_bounds");
    });
    let (path, message) = config_error(&text);
    assert_eq!(path, "model.input_bounds");
    assert!(message.contains("missing field"));
}

#[test]
fn unknown_keys_are_rejected_with_path() {
    let text = edit(|v| {
        v["tree"]["horizn"] = 3.into();
    });
    let (path, message) = config_error(&text);
    assert_eq!(path, "tree.horizn");
    assert!(message.contains("unknown field"));
}

#[test]
fn unknown_model_name() {
    let (path, message) = config_error(&edit(|v| v["model"]["name"] = "cstr".into()));
    assert_eq!(path, "model.name");
    assert!(message.contains("cstr"));
}

#[test]
fn out_of_range_values() {
    let cases: Vec<(Box<dyn Fn(&mut serde_json::Value)>, &str)> = vec![
        (Box::new(|v| v["tree"]["robust_horizon"] = 11.into()), "tree.robust_horizon"),
        (Box::new(|v| v["tree"]["horizon"] = 0.into()), "tree.horizon"),
        (Box::new(|v| v["model"]["dt"] = (-1.0).into()), "model.dt"),
        (Box::new(|v| v["model"]["input_bounds"][0] = serde_json::json!([2.0, 0.0])), "model.input_bounds[0]"),
        (Box::new(|v| v["primary"]["delta"] = serde_json::json!([-0.1])), "primary.delta"),
        (Box::new(|v| v["ancillary"]["q"] = serde_json::json!([1.0])), "ancillary.q"),
        (Box::new(|v| v["uncertainty"][0]["nominal"] = 3.0.into()), "uncertainty[0]"),
        (Box::new(|v| v["schemes"][1]["name"] = "multi_stage".into()), "schemes[1].name"),
        (Box::new(|v| v["simulation"]["grid"]["points"] = serde_json::json!([10, 10])), "simulation.grid.points"),
    ];
    for (f, expected) in cases {
        let (path, _) = config_error(&edit(f));
        assert_eq!(path, expected);
    }
    let (path, _) = config_error(&edit(|v| v["tree"]["horizon"] = "ten".into()));
    assert_eq!(path, "tree.horizon");
}

#[test]
fn hash_tracks_content() {
    let a = parse_config(&bench_text()).unwrap();
    let b = parse_config(&edit(|v| v["simulation"]["seed"] = 8.into())).unwrap();
    assert_eq!(a.hash().len(), 64);
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash(), parse_config(&bench_text()).unwrap().hash());
}

#[test]
fn calibration_reference_is_resolved_and_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let report = serde_json::json!({
        "constraints": ["c_A_max"],
        "safety_factor": 1.0,
        "max_violation": [0.02],
        "delta": [0.02],
        "rounds": [],
        "verification": null
    });
    std::fs::write(dir.path().join("tightening.json"), report.to_string()).unwrap();
    let text = edit(|v| {
        v["primary"].as_object_mut().unwrap().remove("delta");
        v["primary"]["calibration"] = "tightening.json".into();
    });
    let path = dir.path().join("c.json");
    std::fs::write(&path, text).unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.primary_delta().unwrap(), vec![0.02]);

    let both = edit(|v| v["primary"]["calibration"] = "x.json".into());
    assert_eq!(config_error(&both).0, "primary");
}

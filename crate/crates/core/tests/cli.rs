use std::fs;
use std::path::Path;

use urbangraph::cli::{main_with_args, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use urbangraph::dataset::write_simulation;
use urbangraph::sim::{simulate, ScenarioConfig};

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("urbangraph").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn noise_free_single_agent_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("run"));
    let mut cfg = ScenarioConfig::preset("town", 7, 1, 30.0).unwrap();
    cfg.lidar.noise_sigma = 0.0;
    write_simulation(&simulate(&cfg).unwrap(), "town", &data).unwrap();

    assert_eq!(cli(&["run", "--dataset", s(&data), "--out", s(&out), "--deterministic"]), EXIT_OK);
    for f in ["graph.txt", "scenegraph.json", "summary.json", "bandwidth.json", "agent0/traj_est.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = tmp.path().join("report.json");
    assert_eq!(cli(&["eval", "--run", s(&out), "--dataset", s(&data), "--report", s(&report)]), EXIT_OK);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let ate = m["ate_mean_m"].as_f64().unwrap();
    assert!(ate < 0.5, "ate {ate}");
    assert!(m["bandwidth_bytes_per_agent"]["0"].as_u64().unwrap() > 0);

    let exported = tmp.path().join("sg.json");
    assert_eq!(cli(&["export", "--run", s(&out), "--format", "json", "--out", s(&exported)]), EXIT_OK);
    assert_eq!(fs::read(&exported).unwrap(), fs::read(out.join("scenegraph.json")).unwrap());
}

#[test]
fn partial_toml_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out, conf) = (tmp.path().join("d"), tmp.path().join("r"), tmp.path().join("c.toml"));
    assert_eq!(cli(&["simulate", "--agents", "1", "--duration", "4", "--out", s(&data)]), EXIT_OK);
    fs::write(&conf, "seed = 3\n[server]\nf_max = 0.1\n[frontend.keyframe]\nkf_dist = 4.0\n").unwrap();
    assert_eq!(cli(&["run", "--dataset", s(&data), "--config", s(&conf), "--out", s(&out)]), EXIT_OK);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    // 32 m of driving at one keyframe per 4 m
    let kfs = summary["keyframes"].as_u64().unwrap();
    assert!((8..=10).contains(&kfs), "{kfs} keyframes");

    fs::write(&conf, "[server]\nf_max = \"high\"\n").unwrap();
    assert_eq!(cli(&["run", "--dataset", s(&data), "--config", s(&conf), "--out", s(&out)]), EXIT_DATA);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(cli(&["eval", "--run", s(&missing), "--dataset", s(&missing)]), EXIT_DATA);
    assert_eq!(cli(&["run", "--dataset", s(&missing), "--out", s(&tmp.path().join("r"))]), EXIT_DATA);
    assert_eq!(cli(&["simulate", "--world-preset", "moon", "--out", s(&tmp.path().join("d"))]), EXIT_DATA);
    assert_eq!(cli(&["simulate", "--bogus", "--out", "x"]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&[]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(cli(&["simulate", "--seed", "9", "--agents", "2", "--duration", "3", "--out", s(d)]), EXIT_OK);
    }
    for f in ["manifest.txt", "world.json", "agent0/scans.bin", "agent1/detections.bin", "agent1/gt.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

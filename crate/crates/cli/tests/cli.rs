use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rangepose"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(dim: u8, noise: f64, duration: f64) -> Value {
    let (anchors, sensors, trajectory) = if dim == 2 {
        (
            json!([
                [0, 0],
                [7, 0],
                [7, 8],
                [0, 8],
                [3.5, 0],
                [7, 4],
                [3.5, 8],
                [0, 4]
            ]),
            json!([[0.3, 0.0], [-0.3, 0.0]]),
            json!({"kind": "circle", "radius": 2.0, "angular_rate": 0.25}),
        )
    } else {
        (
            json!([
                [0, 0, 0],
                [7, 0, 0],
                [7, 8, 0],
                [0, 8, 0],
                [0, 0, 3.5],
                [7, 0, 3.5],
                [7, 8, 3.5],
                [0, 8, 3.5]
            ]),
            json!([[0.5, 0, 0], [0, 0.5, 0], [-0.5, 0, 0]]),
            json!({"kind": "circle", "radius": 2.0, "angular_rate": 0.25}),
        )
    };
    let anchors: Vec<Value> = anchors
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, p)| json!({"id": i, "position": p}))
        .collect();
    let sensors: Vec<Value> = sensors
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"id": i, "lever_arm": l, "sigma": 0.1}))
        .collect();
    json!({
        "dim": dim,
        "anchors": anchors,
        "sensors": sensors,
        "trajectory": trajectory,
        "duration": duration,
        "noise_std": noise,
        "seed": 3
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn lines(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn sha(p: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

#[test]
fn simulate_writes_versioned_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sc.json", &scenario(2, 0.1, 4.0));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "simulate",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--seed",
            "11",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["measurements.jsonl", "truth.jsonl"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f}");
    }
    let m = lines(&a.join("measurements.jsonl"));
    assert_eq!(m.len(), 68);
    for key in [
        "schema_version",
        "t",
        "sensor_id",
        "anchor_id",
        "range",
        "sigma",
    ] {
        assert!(m[0].get(key).is_some(), "{key}");
    }
    let t = lines(&a.join("truth.jsonl"));
    assert!(t.len() > 400);
    assert!(t[0]["orientation"].is_number());

    let c = dir.path().join("c");
    run(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&c),
        "--seed",
        "12",
    ]);
    assert_ne!(
        sha(&a.join("measurements.jsonl")),
        sha(&c.join("measurements.jsonl"))
    );
}

#[test]
fn missing_anchors_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = scenario(3, 0.1, 2.0);
    sc.as_object_mut().unwrap().remove("anchors");
    let cfg = write(dir.path(), "sc.json", &sc);
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("anchors"), "{}", stderr(&o));
}

#[test]
fn noiseless_batch_reports_zero_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sc.json", &scenario(3, 0.0, 4.0));
    run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    let est = dir.path().join("est.jsonl");
    let o = run(&[
        "estimate",
        "--config",
        s(&cfg),
        "--measurements",
        s(&dir.path().join("measurements.jsonl")),
        "--mode",
        "batch",
        "--out",
        s(&est),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let cost: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("final cost: "))
        .expect("summary has the final cost")
        .parse()
        .unwrap();
    assert!(cost < 1e-10, "{out}");
    let rep = run(&[
        "evaluate",
        "--estimates",
        s(&est),
        "--truth",
        s(&dir.path().join("truth.jsonl")),
    ]);
    assert!(rep.status.success(), "{}", stderr(&rep));
    let r: Value = serde_json::from_str(&stdout(&rep)).unwrap();
    assert!(r["position_rmse"].as_f64().unwrap() < 1e-6);
    assert!(r["orientation_rmse"].as_f64().unwrap() < 1e-5);
}

#[test]
fn fixed_lag_emits_one_estimate_per_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sc.json", &scenario(2, 0.1, 8.0));
    run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    let est = dir.path().join("fls.jsonl");
    let o = run(&[
        "estimate",
        "--config",
        s(&cfg),
        "--measurements",
        s(&dir.path().join("measurements.jsonl")),
        "--mode",
        "fls",
        "--out",
        s(&est),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n = lines(&dir.path().join("measurements.jsonl")).len();
    let filtered = lines(&est);
    assert_eq!(filtered.len(), n);
    assert_eq!(filtered[0]["covariance"].as_array().unwrap().len(), 36);
    assert_eq!(lines(&dir.path().join("fls.smoothed.jsonl")).len(), n);
}

#[test]
fn dropout_covariance_peaks_inside_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = scenario(2, 0.1, 20.0);
    sc["dropouts"] = json!([[8.0, 13.0]]);
    let cfg = write(dir.path(), "sc.json", &sc);
    run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    let est = dir.path().join("est.jsonl");
    let o = run(&[
        "estimate",
        "--config",
        s(&cfg),
        "--measurements",
        s(&dir.path().join("measurements.jsonl")),
        "--out",
        s(&est),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (t_peak, _) = lines(&est)
        .iter()
        .map(|r| {
            let c = r["covariance"].as_array().unwrap();
            let tr: f64 = (0..6).map(|i| c[i * 6 + i].as_f64().unwrap()).sum();
            (r["t"].as_f64().unwrap(), tr)
        })
        .fold((0.0, 0.0), |best, x| if x.1 > best.1 { x } else { best });
    assert!(t_peak > 8.0 && t_peak < 13.0, "peak at {t_peak}");
}

#[test]
fn unobservable_geometry_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = scenario(3, 0.1, 2.0);
    for sensor in sc["sensors"].as_array_mut().unwrap() {
        sensor["lever_arm"] = json!([0.0, 0.0, 0.0]);
    }
    let cfg = write(dir.path(), "sc.json", &sc);
    let meas = dir.path().join("m.jsonl");
    std::fs::write(
        &meas,
        "{\"t\":0,\"sensor_id\":0,\"anchor_id\":0,\"range\":3,\"sigma\":0.1}\n",
    )
    .unwrap();
    let o = run(&[
        "estimate",
        "--config",
        s(&cfg),
        "--measurements",
        s(&meas),
        "--out",
        s(&dir.path().join("e.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn malformed_measurements_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sc.json", &scenario(2, 0.1, 2.0));
    let meas = dir.path().join("m.jsonl");
    std::fs::write(
        &meas,
        "{\"t\":0,\"sensor_id\":0,\"anchor_id\":0,\"range\":3,\"sigma\":0.1}\n{oops\n",
    )
    .unwrap();
    let o = run(&[
        "estimate",
        "--config",
        s(&cfg),
        "--measurements",
        s(&meas),
        "--out",
        s(&dir.path().join("e.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

fn state_line(t: f64, x: f64) -> String {
    format!(
        "{{\"schema_version\":1,\"t\":{t},\"position\":[{x},1.0],\"orientation\":0.3,\"twist\":[0.1,0.0,0.0]}}\n"
    )
}

#[test]
fn evaluate_identity_and_shift() {
    let dir = tempfile::tempdir().unwrap();
    let truth: String = (0..20)
        .map(|k| state_line(k as f64 * 0.1, k as f64 * 0.01))
        .collect();
    let shifted: String = (0..20)
        .map(|k| state_line(k as f64 * 0.1, k as f64 * 0.01 + 0.1))
        .collect();
    let tp = dir.path().join("t.jsonl");
    let sp = dir.path().join("s.jsonl");
    std::fs::write(&tp, &truth).unwrap();
    std::fs::write(&sp, &shifted).unwrap();
    for (est, want) in [(&tp, 0.0), (&sp, 0.1)] {
        let o = run(&[
            "evaluate",
            "--estimates",
            s(est),
            "--truth",
            s(&tp),
            "--alignment",
            "time-interpolated",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert!((r["position_rmse"].as_f64().unwrap() - want).abs() < 1e-9);
        assert!(r["orientation_rmse"].as_f64().unwrap() < 1e-12);
    }
    let few: String = (0..5).map(|k| state_line(k as f64 * 0.1, 0.0)).collect();
    std::fs::write(&sp, few).unwrap();
    let o = run(&["evaluate", "--estimates", s(&sp), "--truth", s(&tp)]);
    assert_eq!(o.status.code(), Some(2));
}

#[derive(Debug, PartialEq, serde::Serialize, serde::Deserialize)]
struct Row {
    lever_m: f64,
    sigma_m: f64,
    pos_rmse_mean: f64,
    pos_rmse_std: f64,
    ori_rmse_mean: f64,
    ori_rmse_std: f64,
    runs: usize,
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "scenario": scenario(2, 0.1, 3.0),
        "levers": [0.1, 0.5, 1.0],
        "noises": [0.0, 0.05, 0.1],
        "runs": 2
    });
    let cfg = write(dir.path(), "sweep.json", &spec);
    let csv_path = dir.path().join("grid.csv");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&csv_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("spearman"), "{}", stdout(&o));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "lever_m,sigma_m,pos_rmse_mean,pos_rmse_std,ori_rmse_mean,ori_rmse_std,runs"
    );
    let rows: Vec<Row> = csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.runs == 2));
    assert!(rows
        .iter()
        .all(|r| r.pos_rmse_mean.is_finite() && r.ori_rmse_std >= 0.0));
    // Re-serializing the parsed rows reproduces the file byte for byte.
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).unwrap();
    }
    assert_eq!(String::from_utf8(w.into_inner().unwrap()).unwrap(), text);
}

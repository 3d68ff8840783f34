use std::fs;
use std::path::Path;

use clap::CommandFactory;
use label_align::cli::{self, Cli};
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["label-align"];
    full.extend_from_slice(args);
    let code = cli::run_to(full, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> String {
    let (code, out) = run(&["synth", "--images", "3", "--buildings", "4", "--seed", "42", "--out", s(dir)]);
    assert_eq!(code, 0);
    out
}

#[test]
fn synth_fixture_summary_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let v = json(&fixture(&a));
    assert_eq!(v["images"], 3);
    assert_eq!(v["instances"], 12);
    assert_eq!(v["seed"], 42);
    fixture(&b);
    for f in ["manifest.json", "annotations.json", "channels/img_0_footprint_evidence.pgm", "channels/img_2_roof_evidence.pgm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_without_noise_has_zero_displacement() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, out) = run(&["synth", "--images", "2", "--nu", "0", "--out", s(tmp.path())]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["mean_initial_displacement"], 0.0);
}

#[test]
fn synth_rejects_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth", "--out", s(tmp.path()), "--height-range", "1"]).0, cli::EXIT_USAGE);
    assert_eq!(run(&["synth", "--out", s(tmp.path()), "--nu=-1"]).0, cli::EXIT_USAGE);
}

#[test]
fn one_step_alignment_ignores_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    fixture(&ds);
    let p1 = tmp.path().join("p1.json");
    let p2 = tmp.path().join("p2.json");
    let base = ["align", "--dataset", s(&ds), "--steps", "1"];
    let (c1, o1) = run(&[&base[..], &["--delta", "0.7", "--out", s(&p1)]].concat());
    let (c2, o2) = run(&[&base[..], &["--delta", "1.3", "--out", s(&p2)]].concat());
    assert_eq!((c1, c2), (0, 0));
    let preds = |p: &Path| json(&fs::read_to_string(p).unwrap())["predictions"].clone();
    assert_eq!(preds(&p1), preds(&p2));
    assert_eq!(json(&o1)["per_step_mean_epe"], json(&o2)["per_step_mean_epe"]);
}

#[test]
fn ideal_oracle_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    fixture(&ds);
    let (code, out) = run(&["align", "--dataset", s(&ds), "--predictor", "oracle"]);
    assert_eq!(code, 0);
    let v = json(&out);
    assert_eq!(v["final_mean_epe_footprint"], 0.0);
    assert_eq!(v["per_step_mean_epe"].as_array().unwrap().len(), 6);
    // effective config is echoed to a file and into the predictions
    let cfg = json(&fs::read_to_string(ds.join("config.json")).unwrap());
    assert_eq!(cfg["config"]["predictor"]["kind"], "oracle");
    let preds = json(&fs::read_to_string(ds.join("predictions.json")).unwrap());
    assert_eq!(preds["config"], cfg["config"]);

    let (code, out) = run(&["evaluate", "--dataset", s(&ds)]);
    assert_eq!(code, 0);
    let m = json(&out);
    assert_eq!(m["mf"], 1.0);
    assert_eq!(m["mi"], 1.0);
    assert_eq!(m["ale"], 0.0);
    let csv = fs::read_to_string(ds.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("roof_f1,"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn config_file_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    fixture(&ds);
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"predictor": {"kind": "oracle", "oracle": {"kappa": 0.5}}, "schedule": {"steps": 2}}"#).unwrap();
    let (code, out) = run(&["align", "--dataset", s(&ds), "--config", s(&cfg), "--steps", "3"]);
    assert_eq!(code, 0);
    let v = json(&out);
    assert_eq!(v["config"]["schedule"]["steps"], 3);
    assert_eq!(v["config"]["predictor"]["oracle"]["kappa"], 0.5);
    assert_eq!(v["per_step_mean_epe"].as_array().unwrap().len(), 4);
}

#[test]
fn strict_mode_exits_on_flagged_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    fixture(&ds);
    // a 1 px search window cannot reach labels displaced by ~20 px
    let args = ["align", "--dataset", s(&ds), "--search-radius", "1"];
    assert_eq!(run(&args).0, 0);
    assert_eq!(run(&[&args[..], &["--strict"]].concat()).0, cli::EXIT_FLAGGED);
    let preds = json(&fs::read_to_string(ds.join("predictions.json")).unwrap());
    assert!(preds["predictions"][0]["flags"].as_array().unwrap().iter().any(|f| f == "window_boundary"));
}

#[test]
fn evaluate_shifted_footprints() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    fixture(&ds);
    let ann = json(&fs::read_to_string(ds.join("annotations.json")).unwrap());
    let shift = |ring: &Value, dx: f64| -> Value {
        Value::Array(
            ring.as_array()
                .unwrap()
                .iter()
                .map(|p| serde_json::json!([p[0].as_f64().unwrap() + dx, p[1].as_f64().unwrap()]))
                .collect(),
        )
    };
    let preds: Vec<Value> = ann["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            serde_json::json!({
                "id": r["id"], "footprint": shift(&r["footprint"], 5.0), "roof": r["roof"],
                "o_hat": r["o_vec"], "flags": []
            })
        })
        .collect();
    let path = tmp.path().join("shifted.json");
    let file = serde_json::json!({"format_version": "1", "config": {}, "predictions": preds});
    fs::write(&path, file.to_string()).unwrap();
    let (code, out) = run(&["evaluate", "--dataset", s(&ds), "--predictions", s(&path), "--out", s(tmp.path())]);
    assert_eq!(code, 0);
    assert!((json(&out)["mean_epe_footprint"].as_f64().unwrap() - 5.0).abs() < 1e-9);

    // an empty polygon is rejected by id
    let mut bad = file.clone();
    bad["predictions"][3]["footprint"] = serde_json::json!([]);
    fs::write(&path, bad.to_string()).unwrap();
    assert_eq!(run(&["evaluate", "--dataset", s(&ds), "--predictions", s(&path)]).0, cli::EXIT_MISMATCH);

    // a missing id is an id mismatch
    let mut short = file;
    short["predictions"].as_array_mut().unwrap().pop();
    fs::write(&path, short.to_string()).unwrap();
    assert_eq!(run(&["evaluate", "--dataset", s(&ds), "--predictions", s(&path)]).0, cli::EXIT_MISMATCH);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["align", "--dataset", s(&tmp.path().join("nope"))]).0, cli::EXIT_IO);
}

#[test]
fn analyze_grid() {
    let (code, out) = run(&["analyze", "--grid", "--delta", "0.5", "--steps", "5"]);
    assert_eq!(code, 0);
    assert_eq!(out, "delta,steps,energy\n0.5,5,1.9375\n");
    let (_, out) = run(&["analyze", "--grid", "--delta", "1", "--steps", "10"]);
    assert!(out.contains("1,10,10.0000"));
    let (_, out) = run(&["analyze", "--grid", "--delta", "0.5,1", "--steps", "1,5"]);
    assert_eq!(out.lines().count(), 5);
    assert_eq!(run(&["analyze", "--grid", "--delta", "0", "--steps", "5"]).0, cli::EXIT_USAGE);
    assert_eq!(run(&["analyze", "--grid", "--steps", "5"]).0, cli::EXIT_USAGE);
}

#[test]
fn analyze_oracle_ring() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let (code, _) = run(&["synth", "--images", "20", "--out", s(&ds)]);
    assert_eq!(code, 0);
    let traj = tmp.path().join("traj.jsonl");
    let (code, _) = run(&[
        "align", "--dataset", s(&ds), "--predictor", "oracle", "--rho", "2", "--steps", "60", "--trajectories", s(&traj),
    ]);
    assert_eq!(code, 0);
    let out_dir = tmp.path().join("analysis");
    let (code, out) = run(&["analyze", "--trajectories", s(&traj), "--dataset", s(&ds), "--out", s(&out_dir)]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["regime"], "converged ring");
    let report = json(&fs::read_to_string(out_dir.join("oscillation.json")).unwrap());
    assert_eq!(report["regime_label"], "converged ring");
    let csv = fs::read_to_string(out_dir.join("per_step.csv")).unwrap();
    assert!(csv.starts_with("t,mean_epe,step_energy,running_mean\n"));
    assert_eq!(csv.lines().count(), 61);
    assert!(fs::read_to_string(out_dir.join("energy_scatter.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn help_lists_flags_with_defaults() {
    let mut cmd = Cli::command();
    let help = cmd.find_subcommand_mut("align").unwrap().render_long_help().to_string();
    for flag in ["--delta", "--steps", "--tta", "--kappa", "--rho", "--beta", "--strict", "--config"] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(help.contains("[default: 5]") && help.contains("[default: 200]"));
    let help = cmd.find_subcommand_mut("synth").unwrap().render_long_help().to_string();
    assert!(help.contains("[default: 20,60]") && help.contains("LABEL_ALIGN_DATA"));
}

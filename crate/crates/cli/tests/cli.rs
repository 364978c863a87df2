use std::path::Path;
use std::process::Command;

use r2n2::experiments::PlotKind;
use r2n2_cli::plot::{emit_plot, render_plot};

fn r2n2() -> Command {
    Command::new(env!("CARGO_BIN_EXE_r2n2"))
}

fn write_config(dir: &Path, json: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, json).unwrap();
    p
}

const SMALL_LINEAR: &str = r#"{"dataset": {"samples": 20}, "training": {"epochs": 40}}"#;

#[test]
fn convergence_lines_draws_one_polyline_per_series() {
    let csv = "series,k,mean,min,max\na,0,1,1,1\na,1,0.1,0.1,0.1\nb,0,1,1,1\nb,1,0.5,0.5,0.5\n";
    let svg = render_plot(csv, PlotKind::ConvergenceLines, None).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg, render_plot(csv, PlotKind::ConvergenceLines, None).unwrap());
}

#[test]
fn empty_csv_is_an_error() {
    for kind in [PlotKind::ScatterRatio, PlotKind::ConvergenceLines, PlotKind::ErrorVsH] {
        assert!(render_plot("", kind, None).is_err());
        assert!(render_plot("series,k,mean\n", kind, None).is_err());
    }
}

#[test]
fn error_vs_h_has_slope_guide() {
    let csv = "sample_id,h,k,error_r2n2,error_rk3\n0,0.01,1,1e-6,1e-8\n1,0.1,1,1e-3,1e-4\n2,0.1,2,5,5\n";
    let with = render_plot(csv, PlotKind::ErrorVsH, Some(4.0)).unwrap();
    let without = render_plot(csv, PlotKind::ErrorVsH, None).unwrap();
    assert!(with.contains("slope 4"));
    assert_eq!(with.matches("stroke-dasharray").count(), 1);
    assert_eq!(without.matches("stroke-dasharray").count(), 0);
    // Only k = 1 rows: two samples per error column.
    assert_eq!(without.matches("<circle").count(), 4);
}

#[test]
fn emit_plot_writes_next_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ratios.csv");
    std::fs::write(&csv, "sample_id,matrix,ratio\n0,A1,0.9\n1,A2,1.1\n").unwrap();
    let svg = emit_plot(&csv, PlotKind::ScatterRatio, None).unwrap();
    assert_eq!(svg, dir.path().join("ratios.svg"));
    let text = std::fs::read_to_string(svg).unwrap();
    assert_eq!(text.matches("<circle").count(), 2);
    assert!(emit_plot(&dir.path().join("missing.csv"), PlotKind::ScatterRatio, None).is_err());
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LINEAR);
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = dir.path().join(name);
        let status = r2n2()
            .args(["run", "fig4b", "--seed", "5", "--threads", threads, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(out);
    }
    for f in ["ratios.csv", "r2n2_history.csv", "ratios.svg", "r2n2_params.json", "dataset.json"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        assert_eq!(a, std::fs::read(outputs[1].join(f)).unwrap(), "{f}");
        assert_eq!(a, std::fs::read(outputs[2].join(f)).unwrap(), "{f}");
    }
    let ratios = std::fs::read_to_string(outputs[0].join("ratios.csv")).unwrap();
    // 6 held-out right-hand sides for each of three matrices plus the header.
    assert_eq!(ratios.lines().count(), 1 + 3 * 6);
    let history = std::fs::read_to_string(outputs[0].join("r2n2_history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,test_loss"));
    assert_eq!(history.lines().count(), 41);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outputs[0].join("r2n2_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs_completed"], 40);
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outputs[0].join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 5);

    let out = r2n2()
        .args(["certify", "--matrix", "A1", "--params"])
        .arg(outputs[0].join("r2n2_params.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let cert: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(cert["norm"].as_f64().unwrap() > 0.0);
    assert_eq!(cert["zeta"].as_array().unwrap().len(), 4);
}

#[test]
fn config_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"training": {"epochs": "lots"}}"#);
    let cases: Vec<Vec<std::ffi::OsString>> = vec![
        vec!["run".into(), "fig99".into()],
        vec!["run".into(), "fig4a".into(), "--config".into(), bad.into_os_string()],
        vec!["run".into(), "fig4a".into(), "--config".into(), dir.path().join("nope.json").into_os_string()],
        vec!["run".into(), "fig4a".into(), "--threads".into(), "0".into()],
        vec!["run".into(), "fig4a".into(), "--seed".into(), "minus-one".into()],
        vec!["certify".into(), "--params".into(), "missing.json".into(), "--matrix".into(), "A1".into()],
        vec!["frobnicate".into()],
    ];
    for args in cases {
        let out = r2n2().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(3), "{args:?}");
    }
}

#[test]
fn unknown_matrix_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": {"samples": 10}, "training": {"epochs": 2}}"#);
    let out = dir.path().join("run");
    let status = r2n2().args(["run", "fig4a", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = r2n2()
        .args(["certify", "--matrix", "A20", "--params"])
        .arg(out.join("r2n2_params.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn divergence_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"samples": 20}, "training": {"epochs": 200, "adam": {"lr": 50.0}}}"#,
    );
    let out = dir.path().join("run");
    let status = r2n2()
        .args(["run", "fig5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("r2n2_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["diverged"], true);
}

#[test]
fn grad_check_passes() {
    let out = r2n2().args(["grad-check", "--count", "9", "--seed", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("9 configs"));
}

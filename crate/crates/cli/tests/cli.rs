//! End-to-end tests of the `avq` binary: exit codes, file outputs and
//! reproducibility.

use std::path::Path;
use std::process::Command;

fn avq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_avq"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "calibration_samples": 2,
        "hessian_samples": 2,
        "eval_samples": 1,
        "texture_size": 32,
        "uv_vertices": 2048,
        "seed": 5,
        "output_dir": dir.join("out"),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_subcommand_reports_100_fps() {
    let out = avq()
        .args(["pipeline", "--frames", "64"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["fps"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!((v["steady_state_interval_ms"].as_f64().unwrap() - 10.0).abs() < 1e-9);
    assert!((v["single_frame_latency_ms"].as_f64().unwrap() - 21.5).abs() < 1e-9);
}

#[test]
fn pipeline_gantt_csv_export() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("gantt.csv");
    let out = avq()
        .args([
            "pipeline",
            "--frames",
            "16",
            "--transmit",
            "0",
            "--gantt-csv",
        ])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("frame,stage,start_ms,end_ms"));
    // 16 frames x 6 stage rows + header
    assert_eq!(text.lines().count(), 16 * 6 + 1);
}

#[test]
fn invalid_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"alpha": 3.0}"#).unwrap();
    let out = avq()
        .args(["run-all", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_model_dir_exits_with_code_2() {
    let out = avq()
        .args(["run-all", "--model-dir", "/nonexistent/model"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_all_writes_validated_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |tag: &str| -> Vec<u8> {
        let out_dir = dir.path().join(format!("out_{tag}"));
        let status = avq()
            .args(["run-all", "--config"])
            .arg(&cfg)
            .args(["-o"])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "run-all failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        for f in ["report.json", "manifest.json", "plan.json", "schedule.csv", "mask.tar1"] {
            assert!(out_dir.join(f).exists(), "{f} missing");
        }
        assert!(out_dir.join("quantized/manifest.json").exists());
        // The report satisfies the shipped schema.
        let report: avq_cli::report::EvalReport =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
                .unwrap();
        avq_cli::report::validate_report(&report).unwrap();
        std::fs::read(out_dir.join("report.json")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b, "same config and seeds must produce byte-identical reports");
}

#[test]
fn quantize_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("q");
    let status = avq()
        .args(["quantize", "--config"])
        .arg(&cfg)
        .arg("-o")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "quantize failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let qm = avq_cli::modelio::load_quantized(&out_dir.join("quantized")).unwrap();
    assert_eq!(qm.layers.len(), 6);
    let eval = avq()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("-o")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(v["views"].as_array().unwrap().len() == 1);
}

#[test]
fn calibrate_and_smooth_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cal_dir = dir.path().join("cal");
    let status = avq()
        .args(["calibrate", "--config"])
        .arg(&cfg)
        .arg("-o")
        .arg(&cal_dir)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(cal_dir.join("calibration.tar1").exists());
    assert!(cal_dir.join("calibration_stats.json").exists());

    let smooth_dir = dir.path().join("smooth");
    let status = avq()
        .args(["smooth", "--config"])
        .arg(&cfg)
        .arg("-o")
        .arg(&smooth_dir)
        .output()
        .unwrap();
    assert!(status.status.success());
    let plan = avq_cli::modelio::load_plan(&smooth_dir.join("plan.json")).unwrap();
    assert_eq!(plan.layers.len(), 6);
    assert!(avq_cli::modelio::load_model(&smooth_dir.join("smoothed")).is_ok());
}

#[test]
fn simulate_subcommand_emits_report() {
    let out = avq()
        .args([
            "simulate",
            "--combining",
            "on",
            "--precision",
            "int4",
            "--clock-hz",
            "500000000",
            "--calibration-samples",
            "2",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "simulate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["combining"], serde_json::Value::Bool(true));
    assert!(v["latency_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(v["per_layer"].as_array().unwrap().len(), 6);
}

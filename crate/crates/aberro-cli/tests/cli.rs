//! End-to-end tests of the command-line surfaces: file formats, exit
//! codes, and byte-level determinism of reports.

use std::path::Path;
use std::process::Command;

fn aberro() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aberro"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = aberro().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = aberro()
        .args(["ece", "--logits", "/nonexistent.tnsr", "--labels", "/nonexistent.tnsr"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn optics_metrics_report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let r1 = dir.path().join("a.json");
    let r2 = dir.path().join("b.json");
    for r in [&r1, &r2] {
        let out = aberro()
            .args(["optics-metrics", "--zernike", "0.1,-0.2,0.3", "--no-timestamp", "--report"])
            .arg(r)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read(&r1), read(&r2));
    let json: serde_json::Value = serde_json::from_slice(&read(&r1)).unwrap();
    assert!(json["strehl"].as_f64().unwrap() < 1.0);
    assert!(json["mtf_half_nyquist"].is_f64());
    assert!(json["oig"].is_f64());
    assert!(json.get("timestamp_unix").is_none());
}

#[test]
fn synth_ece_calibrate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");

    // synth: files + manifest appear.
    let out = aberro()
        .args(["synth", "--seed", "42", "--n", "8", "--half-range", "0.15", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("0000_logits.tnsr").exists());
    assert!(data.join("0007_image.tnsr").exists());

    // ece on one generated instance at its recorded optimal temperature.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    let t_true = manifest["instances"][0]["true_optimal_t"].as_f64().unwrap();
    let ece_report = dir.path().join("ece.json");
    let out = aberro()
        .args(["ece", "--temperature", &t_true.to_string(), "--no-timestamp"])
        .arg("--logits")
        .arg(data.join("0000_logits.tnsr"))
        .arg("--labels")
        .arg(data.join("0000_labels.tnsr"))
        .arg("--report")
        .arg(&ece_report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&read(&ece_report)).unwrap();
    assert!(json["mece"].as_f64().unwrap() < 0.08);
    assert_eq!(json["reliability"]["n_bins"].as_u64(), Some(10));

    // ts calibration produces a loadable model and a report.
    let model = dir.path().join("model.json");
    let out = aberro()
        .args(["calibrate", "ts", "--seed", "1"])
        .arg("--train")
        .arg(&data)
        .arg("--out")
        .arg(&model)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model_json: serde_json::Value = serde_json::from_slice(&read(&model)).unwrap();
    assert_eq!(model_json["variant"].as_str(), Some("ts"));
    assert!(model_json["t"].as_f64().unwrap() > 0.0);
    assert!(model_json["config_hash"].as_str().unwrap().len() == 64);

    let report = dir.path().join("report.json");
    let out = aberro()
        .args(["report", "--no-timestamp"])
        .arg("--data")
        .arg(&data)
        .arg("--model")
        .arg(&model)
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(json["instances"].as_u64(), Some(8));
    assert!(json["mean_miou"].as_f64().unwrap() > 0.0);
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    for d in [&d1, &d2] {
        let out = aberro()
            .args(["synth", "--seed", "7", "--n", "3", "--half-range", "0.2", "--out"])
            .arg(d)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for name in ["manifest.json", "0000_logits.tnsr", "0002_image.tnsr", "0001_labels.tnsr"] {
        assert_eq!(read(&d1.join(name)), read(&d2.join(name)), "{name}");
    }
}

#[test]
fn degrade_round_trip_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.pgm");
    let output = dir.path().join("out.pgm");

    // A 64×64 checkerboard-ish 8-bit PGM.
    let mut bytes = b"P5\n64 64\n255\n".to_vec();
    for i in 0..64usize {
        for j in 0..64usize {
            bytes.push(if (i / 8 + j / 8) % 2 == 0 { 220 } else { 40 });
        }
    }
    std::fs::write(&input, &bytes).unwrap();

    let out = aberro()
        .args(["degrade", "--zernike", "0.1,0.2,-0.1"])
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let degraded = std::fs::read(&output).unwrap();
    assert!(degraded.starts_with(b"P5"));
    // Blur must change the payload but keep the header geometry.
    assert_ne!(degraded, bytes);
    assert_eq!(degraded.len(), bytes.len());
}

#[test]
fn xi_on_tensors_and_fit_sensitivity() {
    let dir = tempfile::tempdir().unwrap();

    // Write x/y tensors for a strictly monotone series of length 9:
    // ξ = 1 − 3/(n+1) = 0.7.
    let write_series = |name: &str, data: &[f32]| {
        let mut bytes = b"TNSR".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(1u8); // float32
        bytes.push(1u8); // rank 1
        bytes.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        path
    };
    let x: Vec<f32> = (0..9).map(|i| i as f32).collect();
    let y: Vec<f32> = x.iter().map(|v| v * 2.0 + 1.0).collect();
    let xp = write_series("x.tnsr", &x);
    let yp = write_series("y.tnsr", &y);
    let report = dir.path().join("xi.json");
    let out = aberro()
        .args(["xi", "--no-timestamp"])
        .arg("--x")
        .arg(&xp)
        .arg("--y")
        .arg(&yp)
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert!((json["xi"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert!((json["pearson_rho"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    // fit-sensitivity on generated data; keep the MC budget small here.
    let n = 40;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| 0.5 * (-8.0 * (x - 0.2)).exp() + 0.1 * x + 0.3)
        .collect();
    let series = serde_json::json!({
        "schema": 1,
        "x": xs,
        "y": ys,
        "sigma_y": vec![1e-3; n],
    });
    let series_path = dir.path().join("series.json");
    std::fs::write(&series_path, serde_json::to_string(&series).unwrap()).unwrap();
    let fit_report = dir.path().join("fit.json");
    let out = aberro()
        .args(["fit-sensitivity", "--mc", "100", "--k", "1.96", "--seed", "3", "--no-timestamp"])
        .arg("--series")
        .arg(&series_path)
        .arg("--report")
        .arg(&fit_report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&read(&fit_report)).unwrap();
    let beta: Vec<f64> = json["beta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((beta[1] - -8.0).abs() < 0.5, "β₂ = {}", beta[1]);
    assert!((beta[3] - 0.1).abs() < 0.05, "β₄ = {}", beta[3]);
    assert_eq!(json["band"].as_array().unwrap().len(), 201);

    // Determinism of the full fit report.
    let fit_report2 = dir.path().join("fit2.json");
    let out = aberro()
        .args(["fit-sensitivity", "--mc", "100", "--k", "1.96", "--seed", "3", "--no-timestamp"])
        .arg("--series")
        .arg(&series_path)
        .arg("--report")
        .arg(&fit_report2)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&fit_report), read(&fit_report2));
}

//! End-to-end checks of the fybench binary: golden outputs for the small
//! subcommands, pinned CSV schemas, manifests, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn fybench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fybench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn first_line(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().next().unwrap_or_default().to_string()
}

#[test]
fn map_golden_uniform_softmax() {
    let out = fybench(&["map", "--mapping", "softmax", "--scores", "0,0,0"]);
    assert_eq!(stdout(&out).trim(), "0.333333,0.333333,0.333333");
}

#[test]
fn map_golden_sparsemax_zeros() {
    let out = fybench(&["map", "--mapping", "sparsemax", "--scores", "2,1.5,-1"]);
    assert_eq!(stdout(&out).trim(), "0.750000,0.250000,0.000000");
}

#[test]
fn loss_golden_softmax() {
    let out = fybench(&[
        "loss", "--loss", "softmax", "--scores", "0,0,0", "--label", "0",
    ]);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "loss=1.098612");
    assert_eq!(lines.next().unwrap(), "gradient=-0.666667,0.333333,0.333333");
}

#[test]
fn jacobian_spectral_golden() {
    let out = fybench(&[
        "jacobian", "--mapping", "sparsemax", "--scores", "0.5,0.4,0.45,-5", "--spectral",
    ]);
    let text = stdout(&out);
    assert!(
        text.starts_with("spectral_norm=1.000000000"),
        "unexpected output: {text}"
    );
}

#[test]
fn usage_errors_exit_2() {
    let out = fybench(&["map", "--mapping", "nope", "--scores", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fybench(&["loss", "--loss", "softmax", "--scores", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"seed\": 1, \"unknown_key\": true}").unwrap();
    let out = fybench(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // a valid file missing the needed section is also a config error
    std::fs::write(&cfg, "{\"seed\": 1}").unwrap();
    let out = fybench(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = fybench(&[
        "train",
        "--config",
        dir.path().join("absent.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_outputs_schema_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "seed": 7,
            "dataset": {
                "source": "synthetic",
                "n_users": 40,
                "n_items": 30,
                "d": 4,
                "interactions_per_user": 8
            },
            "train": {
                "loss": "softmax",
                "learning_rate": 0.3,
                "epochs": 2,
                "batch_size": 32,
                "cutoffs": [5, 10]
            }
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = fybench(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        first_line(&out_dir.join("epochs.csv")),
        "epoch,train_loss,score_evals,precision_at_5,recall_at_5,ndcg_at_5,\
         precision_at_10,recall_at_10,ndcg_at_10,top1_error,diverged"
            .replace(" ", "")
    );
    assert_eq!(first_line(&out_dir.join("epochs_timing.csv")), "epoch,wall_time_s");
    assert!(out_dir.join("model.ckpt").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn biasvar_and_bench_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "seed": 3,
            "biasvar": {
                "schemes": ["ssm"],
                "k_values": [5],
                "proposals": ["uniform"],
                "c": 8,
                "trials": 100,
                "profiles": 1
            },
            "bench": {
                "losses": ["ssm-simple"],
                "c_values": [64, 128],
                "n": 20,
                "runs": 3
            }
        })
        .to_string(),
    )
    .unwrap();
    let bv = dir.path().join("bv");
    let out = fybench(&["biasvar", "--config", cfg.to_str().unwrap(), "--out", bv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        first_line(&bv.join("biasvar.csv")),
        "scheme,k,proposal,s_id,bias_asym,bias_curv,variance,emp_bias,emp_variance,emp_std_error"
    );

    let bn = dir.path().join("bn");
    let out = fybench(&["bench", "--config", cfg.to_str().unwrap(), "--out", bn.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first_line(&bn.join("bench.csv")), "loss,c,score_evals,fitted_slope");
    assert_eq!(first_line(&bn.join("bench_timing.csv")), "loss,c,median_time_s");
}

#[test]
fn calibration_gradient_dumps_show_zero_structure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "seed": 11,
            "calibration": {
                "mappings": ["softmax", "sparsemax"],
                "c": 6,
                "trials": 200,
                "gradient_dump_examples": 12
            }
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = fybench(&[
        "calibration",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let exact_zeros = |name: &str| -> usize {
        std::fs::read_to_string(out_dir.join(format!("gradients_{name}.csv")))
            .unwrap()
            .lines()
            .flat_map(|l| l.split(','))
            .filter(|f| *f == "0")
            .count()
    };
    assert_eq!(exact_zeros("softmax"), 0, "softmax dump has exact zeros");
    assert!(exact_zeros("sparsemax") > 0, "sparsemax dump lacks exact zeros");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("calibration.json")).unwrap())
            .unwrap();
    let probes = report["order_probes"].as_array().unwrap();
    assert_eq!(probes[0]["mapping"], "softmax");
    assert_eq!(probes[0]["tie_witness_found"], false);
    assert_eq!(probes[1]["mapping"], "sparsemax");
    assert_eq!(probes[1]["tie_witness_found"], true);
    for p in probes {
        assert_eq!(p["inversion_found"], false);
    }
}

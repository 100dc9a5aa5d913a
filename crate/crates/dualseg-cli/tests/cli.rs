//! End-to-end command tests on miniature configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualseg"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("command failed to launch")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny config: small phantoms are impossible (the region of interest must
/// fit), so we shrink counts/steps/widths instead.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "profile": "desk",
  "data": { "labeled": 2, "unlabeled": 2, "validation": 1, "test": 2, "seed": 123 },
  "train": {
    "steps": 6,
    "patch_side": 12,
    "val_cadence": 3,
    "network": {
      "input_side": 48,
      "enc_channels": [2, 4, 6, 6, 8, 8],
      "deconv_channels": [2, 2],
      "dec_channels": [6, 6, 4, 4],
      "dropout_rate": 0.5
    },
    "heads": { "conv_channels": [2, 4, 6, 6], "ce_extra_channels": 4 },
    "bayesian": { "passes": 2 },
    "loss": { "t_max": 4 }
  },
  "seeds": [7]
}"#,
    )
    .unwrap();
    path
}

fn manifest_hash(dir: &Path) -> String {
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    manifest["extra"]["data_hash"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_samples_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data1 = tmp.path().join("d1");
    let out = run(dualseg().args([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data1.to_str().unwrap(),
    ]));
    assert_success(&out);
    assert!(data1.join("labeled/sample_000/volume.f32").exists());
    assert!(data1.join("labeled/sample_001/mask.u8").exists());
    assert!(data1.join("unlabeled/sample_001/meta.json").exists());
    assert!(!data1.join("unlabeled/sample_000/mask.u8").exists());
    assert!(data1.join("test/sample_001/mask.u8").exists());

    // refuse to overwrite without --force
    let out = run(dualseg().args([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data1.to_str().unwrap(),
    ]));
    assert!(!out.status.success());

    // rerun with the same seed: identical manifest hash
    let data2 = tmp.path().join("d2");
    let out = run(dualseg().args([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data2.to_str().unwrap(),
    ]));
    assert_success(&out);
    assert_eq!(manifest_hash(&data1), manifest_hash(&data2));
}

#[test]
fn gen_data_rejects_small_volumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"phantom": {"side": 32}}"#).unwrap();
    let out = run(dualseg().args([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]));
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2), "schema errors exit with code 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config"), "machine-readable category: {stderr}");
}

#[test]
fn train_eval_infer_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert_success(&run(dualseg().args([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ])));

    let run_dir = tmp.path().join("run");
    let out = run(dualseg().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    assert_success(&out);
    assert!(run_dir.join("history.csv").exists());
    assert!(run_dir.join("checkpoint/net1.bin").exists());

    // history CSV has the documented column schema
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("step,l_sup,l_intra,l_inter,l_lcont,l_ncont,l_disc,val_dsc,param_distance"));

    // resume continues step numbering
    let out = run(dualseg().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--resume",
        "--steps",
        "8",
    ]));
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("resuming at step 6"), "{stdout}");
    assert!(stdout.contains("now at step 8"), "{stdout}");

    // evaluation emits per-volume rows plus a summary row
    let eval_dir = tmp.path().join("eval");
    let out = run(dualseg().args([
        "eval",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]));
    assert_success(&out);
    let csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert!(csv.starts_with("# dualseg-eval-v1"));
    assert!(csv.lines().count() >= 5, "{csv}");
    assert!(csv.contains("summary,"));

    // truth-vs-truth: perfect scores
    let truth_dir = tmp.path().join("eval_truth");
    let out = run(dualseg().args([
        "eval",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        truth_dir.to_str().unwrap(),
        "--use-truth",
    ]));
    assert_success(&out);
    let csv = fs::read_to_string(truth_dir.join("eval.csv")).unwrap();
    for line in csv.lines().skip(2).take(2) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1], "1.000000", "{line}");
        assert_eq!(fields[2], "0.000000", "{line}");
    }

    // compare mode reports a paired t-test
    let cmp_dir = tmp.path().join("eval_cmp");
    let out = run(dualseg().args([
        "eval",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        cmp_dir.to_str().unwrap(),
        "--compare",
        run_dir.to_str().unwrap(),
    ]));
    assert_success(&out);
    let csv = fs::read_to_string(cmp_dir.join("eval.csv")).unwrap();
    assert!(csv.contains("t_test,"), "{csv}");

    // inference writes the probability volume, mask and renders
    let infer_dir = tmp.path().join("infer");
    let out = run(dualseg().args([
        "infer",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--volume",
        data.join("test/sample_000").to_str().unwrap(),
        "--out",
        infer_dir.to_str().unwrap(),
        "--render-slices",
    ]));
    assert_success(&out);
    assert!(infer_dir.join("probability/volume.f32").exists());
    assert!(infer_dir.join("probability/mask.u8").exists());
    let ppm = fs::read(infer_dir.join("midslice_z.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
}

#[test]
fn grad_check_passes_and_reports() {
    let out = run(dualseg().args(["grad-check"]));
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for component in ["sup", "intra", "inter", "lcont", "ncont"] {
        assert!(stdout.contains(component), "missing {component}: {stdout}");
    }
    assert!(stdout.contains("all 5 components within 1e-4"), "{stdout}");
}

#[test]
fn ablate_emits_one_row_per_toggle_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert_success(&run(dualseg().args([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ])));
    let out_dir = tmp.path().join("ablation");
    let out = run(dualseg().args([
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "4",
    ]));
    assert_success(&out);
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    // header comment + column header + 7 ladder rows
    assert_eq!(rows.len(), 9, "{table}");
    assert!(rows[2].starts_with("sup,2,2,"));
    assert!(rows[8].starts_with("sup+intra+inter+lcont+ncont,"));
}

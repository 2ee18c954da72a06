//! Behavioral tests for the command-line surface: exit codes, determinism,
//! and the per-command contracts that do not need a trained autoencoder.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disguise_core::codec::Autoencoder;
use disguise_core::diffcore::Tensor;
use disguise_core::fixtures::uniform_image;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_disguise"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn disguise")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        want,
        "exit code {got}, want {want}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_spec(dir: &Path, corpus: usize, triples: usize) -> PathBuf {
    let spec = serde_json::json!({
        "height": 16, "width": 16,
        "corpus_count": corpus, "triple_count": triples, "texture_seed": 3,
        "glyph": {
            "center_x": 0.42, "center_y": 0.5, "size": 0.6, "thickness": 0.12,
            "color": [0.9, 0.1, 0.1], "alpha": 0.9
        }
    });
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

/// Hashes every file under a directory except manifest files (which carry
/// wall-clock time).
fn dir_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(dir).unwrap().display().to_string();
                if name.ends_with("manifest.json") {
                    continue;
                }
                let bytes = fs::read(&path).unwrap();
                let digest = format!("{:x}", md5ish(&bytes));
                out.insert(name, digest);
            }
        }
    }
    out
}

/// Cheap stable content fingerprint for test comparisons.
fn md5ish(bytes: &[u8]) -> u128 {
    let mut h: u128 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u128;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[test]
fn fixtures_generate_verify_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), 6, 2);
    let spec = spec.to_str().unwrap();

    assert_code(&run(&["fixtures", "--spec", spec, "--out", "fx1"], tmp.path()), 0);
    assert_code(&run(&["fixtures", "--spec", spec, "--out", "fx2"], tmp.path()), 0);
    assert_eq!(dir_digest(&tmp.path().join("fx1")), dir_digest(&tmp.path().join("fx2")));

    assert_code(&run(&["fixtures", "--verify", "--out", "fx1"], tmp.path()), 0);
    // Break the directory: verify must fail with a data error.
    fs::remove_file(tmp.path().join("fx1/corpus/corpus_0001.dtns")).unwrap();
    assert_code(&run(&["fixtures", "--verify", "--out", "fx1"], tmp.path()), 2);
}

#[test]
fn fixtures_missing_spec_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(&run(&["fixtures", "--spec", "absent.json", "--out", "fx"], tmp.path()), 1);
    assert_code(&run(&["fixtures", "--out", "fx"], tmp.path()), 1);
}

#[test]
fn train_ae_is_deterministic_and_validates_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), 6, 1);
    assert_code(&run(&["fixtures", "--spec", spec.to_str().unwrap(), "--out", "fx"], tmp.path()), 0);

    let train = |out: &str| {
        run(
            &[
                "train-ae", "--corpus", "fx/corpus", "--epochs", "2", "--lr", "0.003",
                "--batch", "4", "--seed", "9", "--out", out,
            ],
            tmp.path(),
        )
    };
    assert_code(&train("w1.dwgt"), 0);
    assert_code(&train("w2.dwgt"), 0);
    assert_eq!(
        fs::read(tmp.path().join("w1.dwgt")).unwrap(),
        fs::read(tmp.path().join("w2.dwgt")).unwrap(),
        "same flags and seed must give bit-identical weights"
    );
    let log: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("w1.trainlog.json")).unwrap()).unwrap();
    assert_eq!(log["epoch_loss"].as_array().unwrap().len(), 2);

    let bad = run(
        &["train-ae", "--corpus", "fx/corpus", "--epochs", "0", "--out", "w3.dwgt"],
        tmp.path(),
    );
    assert_code(&bad, 1);
}

#[test]
fn forge_identical_target_and_base_converges_immediately() {
    let tmp = tempfile::tempdir().unwrap();
    let ae = Autoencoder::random_init(1);
    ae.save(tmp.path().join("w.dwgt")).unwrap();
    let img = uniform_image(5, 16, 16, 3);
    img.save_dtns(tmp.path().join("x.dtns")).unwrap();

    let out = run(
        &[
            "forge", "--weights", "w.dwgt", "--target", "x.dtns", "--base", "x.dtns",
            "--alpha", "100", "--gamma1", "0.01", "--gamma2", "0.01", "--max-epochs", "5",
            "--out", "run",
        ],
        tmp.path(),
    );
    assert_code(&out, 0);
    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("run/result.json")).unwrap()).unwrap();
    assert_eq!(result["converged"], serde_json::json!(true));
    assert_eq!(result["epochs_run"], serde_json::json!(0));
    let x_d = Tensor::load_dtns(tmp.path().join("run/x_d.dtns")).unwrap();
    assert_eq!(x_d, img);
}

#[test]
fn forge_aborts_with_exit_3_on_non_finite_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ae = Autoencoder::random_init(1);
    // Absurd kernel scale overflows the encoder activations to infinity.
    for v in ae.enc[3].kernel.data_mut() {
        *v = 3.0e38;
    }
    for v in ae.enc[3].bias.data_mut() {
        *v = 3.0e38;
    }
    ae.save(tmp.path().join("w.dwgt")).unwrap();
    uniform_image(6, 16, 16, 3).save_dtns(tmp.path().join("c.dtns")).unwrap();
    uniform_image(7, 16, 16, 3).save_dtns(tmp.path().join("b.dtns")).unwrap();

    let out = run(
        &[
            "forge", "--weights", "w.dwgt", "--target", "c.dtns", "--base", "b.dtns",
            "--alpha", "1", "--gamma1", "0.001", "--gamma2", "0.001", "--max-epochs", "10",
            "--out", "run",
        ],
        tmp.path(),
    );
    assert_code(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("non-finite"), "stderr: {stderr}");
}

#[test]
fn screen_flags_planted_target_and_rejects_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let ae = Autoencoder::random_init(2);
    ae.save(tmp.path().join("w.dwgt")).unwrap();
    let target = uniform_image(8, 16, 16, 3);
    target.save_dtns(tmp.path().join("target.dtns")).unwrap();
    fs::create_dir(tmp.path().join("data")).unwrap();
    for i in 0..4 {
        uniform_image(20 + i, 16, 16, 3)
            .save_dtns(tmp.path().join(format!("data/img_{i}.dtns")))
            .unwrap();
    }
    target.save_dtns(tmp.path().join("data/planted.dtns")).unwrap();

    let out = run(
        &[
            "screen", "--weights", "w.dwgt", "--target", "target.dtns", "--dataset", "data",
            "--gamma2", "0.0001", "--out", "report.json",
        ],
        tmp.path(),
    );
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    let suspects: Vec<&str> = report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["suspect"] == serde_json::json!(true))
        .map(|e| e["id"].as_str().unwrap())
        .collect();
    assert_eq!(suspects, vec!["planted"]);

    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = run(
        &[
            "screen", "--weights", "w.dwgt", "--target", "target.dtns", "--dataset", "empty",
            "--gamma2", "0.1", "--out", "r.json",
        ],
        tmp.path(),
    );
    assert_code(&out, 1);
}

#[test]
fn exam_calibration_thresholds_and_recon_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let ae = Autoencoder::random_init(3);
    ae.save(tmp.path().join("w.dwgt")).unwrap();
    fs::create_dir(tmp.path().join("data")).unwrap();
    fs::create_dir(tmp.path().join("known")).unwrap();
    let mut images = Vec::new();
    for i in 0..3 {
        let img = uniform_image(40 + i, 16, 16, 3);
        img.save_dtns(tmp.path().join(format!("data/s{i}.dtns"))).unwrap();
        images.push(img);
    }
    for i in 0..2 {
        uniform_image(50 + i, 16, 16, 3)
            .save_dtns(tmp.path().join(format!("known/k{i}.dtns")))
            .unwrap();
    }

    // zeta = 0 flags everything (every loss is >= 0).
    let out = run(
        &[
            "exam", "--weights", "w.dwgt", "--dataset", "data", "--zeta", "0",
            "--out", "all.json", "--dump-recon", "recons",
        ],
        tmp.path(),
    );
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("all.json")).unwrap()).unwrap();
    assert!(report["entries"].as_array().unwrap().iter().all(|e| e["is_disguise"] == serde_json::json!(true)));

    // Dumped reconstructions match the in-process tensors bit-exactly.
    for (i, img) in images.iter().enumerate() {
        let want = ae.reconstruct(img).unwrap();
        let got = Tensor::load_dtns(tmp.path().join(format!("recons/recon_s{i}.dtns"))).unwrap();
        assert_eq!(want, got, "recon dump for s{i} differs");
    }

    // Calibration: zeta equals the minimum reconstruction loss over the
    // known-disguise directory.
    let out = run(
        &[
            "exam", "--weights", "w.dwgt", "--dataset", "data", "--calibrate", "known",
            "--out", "cal.json",
        ],
        tmp.path(),
    );
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("cal.json")).unwrap()).unwrap();
    let mut want_zeta = f64::INFINITY;
    for i in 0..2 {
        let img = Tensor::load_dtns(tmp.path().join(format!("known/k{i}.dtns"))).unwrap();
        let recon = ae.reconstruct(&img).unwrap();
        want_zeta = want_zeta.min(disguise_core::distances::d1(&recon, &img).unwrap());
    }
    assert!((report["zeta"].as_f64().unwrap() - want_zeta).abs() < 1e-12);

    // Both or neither threshold source is a usage error.
    let out = run(
        &["exam", "--weights", "w.dwgt", "--dataset", "data", "--out", "x.json"],
        tmp.path(),
    );
    assert_code(&out, 1);
    let out = run(
        &[
            "exam", "--weights", "w.dwgt", "--dataset", "data", "--zeta", "0.1",
            "--calibrate", "known", "--out", "x.json",
        ],
        tmp.path(),
    );
    assert_code(&out, 1);
}

#[test]
fn eval_computes_metrics_and_validates_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let report = serde_json::json!({
        "zeta": 0.5,
        "entries": [
            { "id": "d0", "loss": 0.9, "is_disguise": true },
            { "id": "d1", "loss": 0.7, "is_disguise": true },
            { "id": "c0", "loss": 0.1, "is_disguise": false },
            { "id": "c1", "loss": 0.2, "is_disguise": false },
        ],
    });
    fs::write(tmp.path().join("report.json"), serde_json::to_vec(&report).unwrap()).unwrap();
    let labels = serde_json::json!({ "d0": "disguise", "d1": "disguise", "c0": "clean", "c1": "clean" });
    fs::write(tmp.path().join("labels.json"), serde_json::to_vec(&labels).unwrap()).unwrap();

    let out = run(
        &["eval", "--report", "report.json", "--labels", "labels.json", "--out", "metrics.json"],
        tmp.path(),
    );
    assert_code(&out, 0);
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["auroc"], serde_json::json!(1.0));
    assert_eq!(metrics["false_negative_count"], serde_json::json!(0));
    assert_eq!(metrics["false_positive_count"], serde_json::json!(0));

    // Unlabeled sample -> data error.
    let labels = serde_json::json!({ "d0": "disguise" });
    fs::write(tmp.path().join("labels.json"), serde_json::to_vec(&labels).unwrap()).unwrap();
    let out = run(
        &["eval", "--report", "report.json", "--labels", "labels.json", "--out", "m2.json"],
        tmp.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn convert_round_trip_and_extension_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let img = uniform_image(60, 12, 9, 3);
    img.save_dtns(tmp.path().join("a.dtns")).unwrap();

    assert_code(&run(&["convert", "--in", "a.dtns", "--out", "a.png"], tmp.path()), 0);
    assert_code(&run(&["convert", "--in", "a.png", "--out", "b.dtns"], tmp.path()), 0);
    let back = Tensor::load_dtns(tmp.path().join("b.dtns")).unwrap();
    assert_eq!(back.dims(), img.dims());
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
    }

    assert_code(&run(&["convert", "--in", "a.dtns", "--out", "a.gif"], tmp.path()), 1);
    assert_code(&run(&["convert", "--in", "missing.dtns", "--out", "c.png"], tmp.path()), 1);
}

#[test]
fn corrupt_weights_are_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("w.dwgt"), b"DWGZ nonsense").unwrap();
    uniform_image(1, 16, 16, 3).save_dtns(tmp.path().join("t.dtns")).unwrap();
    fs::create_dir(tmp.path().join("data")).unwrap();
    uniform_image(2, 16, 16, 3).save_dtns(tmp.path().join("data/a.dtns")).unwrap();
    let out = run(
        &[
            "screen", "--weights", "w.dwgt", "--target", "t.dtns", "--dataset", "data",
            "--gamma2", "0.1", "--out", "r.json",
        ],
        tmp.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_code(&run(&["--help"], tmp.path()), 0);
    assert_code(&run(&["--version"], tmp.path()), 0);
    let out = run(&["nonsense-subcommand"], tmp.path());
    assert_code(&out, 1);
}

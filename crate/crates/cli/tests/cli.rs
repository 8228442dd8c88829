use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecvae::data::{synthetic_blobs, write_idx, PixelEncoding};
use ecvae::pipeline::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

fn ecvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecvae")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ecvae(args);
    assert!(
        out.status.success(),
        "ecvae {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ecvae(args).status.code().unwrap()
}

/// Three-class 12x12 synthetic dataset in MNIST file layout.
fn write_data(dir: &Path) {
    let train = synthetic_blobs(3, 40, 12, 1).unwrap();
    let test = synthetic_blobs(3, 10, 12, 2).unwrap();
    write_idx(&train, &dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), PixelEncoding::UByte).unwrap();
    write_idx(&test, &dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), PixelEncoding::UByte).unwrap();
}

const TINY: &[&str] = &[
    "--latent-dim",
    "4",
    "--batch-size",
    "16",
    "--set",
    "stem_channels=4",
    "--set",
    "deep_channels=8",
    "--set",
    "classifier_hidden=16",
];

struct Run {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        write_data(&data);
        let out = tmp.path().join("run");
        Self { _tmp: tmp, data, out }
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    fn train(&self, out: &Path, extra: &[&str]) -> String {
        let mut args = vec!["train", "--data", Self::s(&self.data), "--out", Self::s(out), "--epochs", "3", "--seed", "7"];
        args.extend_from_slice(TINY);
        args.extend_from_slice(extra);
        ok(&args)
    }

    fn out(&self) -> &str {
        Self::s(&self.out)
    }
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let r = Run::new();
    let log = r.train(&r.out, &[]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 3);
    for f in ["model.ec", "loss.csv", "config.txt"] {
        assert!(r.out.join(f).exists(), "{f}");
    }

    ok(&["calibrate", "--out", r.out(), "--k", "3", "--percentile", "90"]);
    let params = std::fs::read_to_string(r.out.join("params.txt")).unwrap();
    assert!(params.contains("k = 3"), "{params}");
    assert!(r.out.join("index.ec").exists());

    let eval = ok(&[
        "evaluate",
        "--out",
        r.out(),
        "--modes",
        "baseline,support,recon,combined",
        "--attack",
        "bim",
        "--epsilon",
        "0.2",
        "--expand",
    ]);
    assert_eq!(eval.lines().filter(|l| l.contains("F_IK")).count(), 4);
    for mode in ["baseline_softmax", "support_only", "reconstruction_only", "combined"] {
        let json = std::fs::read_to_string(r.out.join(format!("acm_{mode}.json"))).unwrap();
        assert!(json.contains("\"f_ik\"") && json.contains("\"a_not_ik\""));
        assert!(json.contains("attacked_subset"));
        let csv = std::fs::read_to_string(r.out.join(format!("assertions_{mode}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 60);
    }
    let report = ok(&["report", "--out", r.out()]);
    assert_eq!(report.lines().count(), 5);
    assert!(report.contains("combined"));
}

#[test]
fn baseline_coverage_is_matched_to_combined() {
    let r = Run::new();
    r.train(&r.out, &[]);
    ok(&["calibrate", "--out", r.out(), "--k", "3", "--percentile", "90"]);
    ok(&["evaluate", "--out", r.out(), "--attack", "none"]);
    let f_ik = |mode: &str| -> f64 {
        let text = std::fs::read_to_string(r.out.join(format!("acm_{mode}.json"))).unwrap();
        let line = text.lines().find(|l| l.contains("\"f_ik\"")).unwrap();
        line.split(':').nth(1).unwrap().trim().trim_end_matches(',').parse().unwrap()
    };
    assert!((f_ik("baseline_softmax") - f_ik("combined")).abs() <= 0.01 + 1.0 / 30.0);
}

#[test]
fn training_is_reproducible_and_lambda_zero_drops_the_class_term() {
    let r = Run::new();
    let a = r.out.join("a");
    let b = r.out.join("b");
    r.train(&a, &[]);
    r.train(&b, &[]);
    let la = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(la, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("model.ec")).unwrap(), std::fs::read(b.join("model.ec")).unwrap());

    // Rerunning from the snapshot alone reproduces the run.
    let c = r.out.join("c");
    ok(&["train", "--config", a.join("config.txt").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(la, std::fs::read_to_string(c.join("loss.csv")).unwrap());

    let plain = r.out.join("plain");
    r.train(&plain, &["--lambda-c", "0"]);
    let text = std::fs::read_to_string(plain.join("loss.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for row in text.lines().skip(1) {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[col("total")] - v[col("reconstruction")] - v[col("kl")]).abs() < 1e-6 * v[col("total")].abs());
        assert!(v[col("classification")] > 0.0);
    }
}

#[test]
fn calibration_is_deterministic() {
    let r = Run::new();
    r.train(&r.out, &[]);
    ok(&["calibrate", "--out", r.out(), "--k", "3"]);
    let first = std::fs::read(r.out.join("params.txt")).unwrap();
    let index = std::fs::read(r.out.join("index.ec")).unwrap();
    ok(&["calibrate", "--out", r.out(), "--k", "3"]);
    assert_eq!(first, std::fs::read(r.out.join("params.txt")).unwrap());
    assert_eq!(index, std::fs::read(r.out.join("index.ec")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("percentile_n = 99"), "{text}");
}

#[test]
fn attack_export_feeds_evaluation_with_flags() {
    let r = Run::new();
    r.train(&r.out, &[]);
    ok(&["calibrate", "--out", r.out(), "--k", "3"]);
    ok(&["attack", "--out", r.out(), "--attack", "fgsm", "--expand"]);
    let images = r.out.join("attacked-images-idx3-float");
    let labels = r.out.join("attacked-labels-idx1-ubyte");
    let flags = r.out.join("attacked-flags-idx1-ubyte");
    let eval_out = r.out.join("eval");
    std::fs::create_dir_all(&eval_out).unwrap();
    for f in ["model.ec", "index.ec", "params.txt"] {
        std::fs::copy(r.out.join(f), eval_out.join(f)).unwrap();
    }
    ok(&[
        "evaluate",
        "--config",
        r.out.join("config.txt").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
        "--attack",
        "none",
        "--modes",
        "combined",
        "--test-images",
        images.to_str().unwrap(),
        "--test-labels",
        labels.to_str().unwrap(),
        "--test-flags",
        flags.to_str().unwrap(),
    ]);
    let json = std::fs::read_to_string(eval_out.join("acm_combined.json")).unwrap();
    assert!(json.contains("\"total\": 60"), "{json}");
    assert!(json.contains("attacked_subset"));
}

#[test]
fn infer_prints_assertions_and_dumps_exemplars() {
    let r = Run::new();
    r.train(&r.out, &[]);
    ok(&["calibrate", "--out", r.out(), "--k", "4"]);
    let test_images = r.data.join(TEST_IMAGES);
    let dump = r.out.join("dump");
    let text = ok(&[
        "infer",
        "--out",
        r.out(),
        "--input",
        test_images.to_str().unwrap(),
        "--item",
        "5",
        "--dump-exemplars",
        dump.to_str().unwrap(),
    ]);
    assert!(text.starts_with("image 5: "), "{text}");
    assert_eq!(text.lines().filter(|l| l.contains("neighbor id")).count(), 4);
    let exemplars = std::fs::read_dir(&dump)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("exemplar_5_"))
        .count();
    assert_eq!(exemplars, 4);
    assert!(dump.join("input_5.png").exists() && dump.join("recon_5.png").exists());

    // The dumped PNG is itself a valid input and asserts identically.
    let again = ok(&["infer", "--out", r.out(), "--input", dump.join("input_5.png").to_str().unwrap()]);
    let tag = |s: &str| s.split_whitespace().nth(2).unwrap().to_string();
    assert_eq!(tag(&again), tag(&text));

    let all = ok(&["infer", "--out", r.out(), "--input", test_images.to_str().unwrap(), "--mode", "support"]);
    assert_eq!(all.lines().filter(|l| l.starts_with("image ")).count(), 30);
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let r = Run::new();
    let missing = r.out.join("nothing");
    // Missing model checkpoint.
    assert_eq!(code(&["calibrate", "--data", Run::s(&r.data), "--out", missing.to_str().unwrap()]), 4);
    // Unknown config key and bad flag values.
    assert_eq!(code(&["train", "--out", r.out(), "--set", "epochz=3"]), 2);
    assert_eq!(code(&["train", "--out", r.out(), "--validation-fraction", "2"]), 2);
    assert_eq!(code(&["evaluate", "--out", r.out(), "--modes", "bogus"]), 2);
    // Missing dataset.
    assert_eq!(code(&["train", "--data", missing.to_str().unwrap(), "--out", r.out()]), 3);
    // Missing config file.
    assert_eq!(code(&["train", "--config", missing.join("c.txt").to_str().unwrap()]), 2);
    // Unreadable inference input.
    r.train(&r.out, &[]);
    ok(&["calibrate", "--out", r.out(), "--k", "2"]);
    let bogus = r.out.join("bogus.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    assert_eq!(code(&["infer", "--out", r.out(), "--input", bogus.to_str().unwrap()]), 3);
    assert_eq!(code(&["report", "--out", missing.to_str().unwrap()]), 1);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectralnet::npy;
use spectralnet::{haar_inverse, MetricsReport, Subbands, Tensor};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectralnet"))
        .args(args)
        .env("SPECTRALNET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16x16x8 cube whose labeled pixels carry one of `classes` noisy spectral
/// signatures, split into vertical stripes.
fn scene(dir: &Path, classes: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (m, n, r) = (16, 16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigs: Vec<Vec<f64>> = (0..classes).map(|_| (0..r).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let mut data = Vec::with_capacity(m * n * r);
    let mut labels = Vec::with_capacity(m * n);
    for _ in 0..m {
        for col in 0..n {
            let k = col * classes / n;
            data.extend(sigs[k].iter().map(|v| v + 0.05 * rng.random_range(-1.0..1.0)));
            labels.push(k as i32 + 1);
        }
    }
    let (d, l) = (dir.join("cube.npy"), dir.join("gt.npy"));
    npy::write_f64_file(&d, &[m, n, r], &data).unwrap();
    npy::write_i32_file(&l, &[m, n], &labels).unwrap();
    (d, l)
}

/// Small network so a training epoch takes milliseconds.
fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, r#"{"stage_channels": [4, 8], "dense_width": 8, "dropout": [0.1, 0.1], "batch_size": 8}"#).unwrap();
    p
}

fn prepare(dir: &Path, classes: usize) -> PathBuf {
    let (d, l) = scene(dir, classes, 5);
    let out = dir.join("run");
    let cfg = small_config(dir);
    let o =
        bin(&["preprocess", "--data", s(&d), "--labels", s(&l), "--patch", "8", "--out", s(&out), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn train(dir: &Path, out: &Path, epochs: &str) -> Output {
    let cfg = small_config(dir);
    bin(&["train", "--epochs", epochs, "--seed", "3", "--out", s(out), "--config", s(&cfg)])
}

fn run_json(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap()
}

#[test]
fn preprocess_writes_a_cache_and_reuses_it() {
    let dir = tempfile::tempdir().unwrap();
    let (d, l) = scene(dir.path(), 4, 1);
    let out = dir.path().join("run");
    let args = ["preprocess", "--data", s(&d), "--labels", s(&l), "--bands", "3", "--patch", "8", "--out", s(&out)];
    let first = bin(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    for f in ["reduced.npy", "labels.npy", "patches.json", "fa.json"] {
        assert!(out.join("preprocess").join(f).is_file(), "{f}");
    }
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("preprocess/fa.json")).unwrap()).unwrap();
    assert_eq!((side["bands"].as_u64(), side["patch"].as_u64()), (Some(3), Some(8)));
    assert_eq!(npy::read_file(out.join("preprocess/reduced.npy")).unwrap().shape, vec![16, 16, 3]);
    let before = fs::read(out.join("preprocess/reduced.npy")).unwrap();

    let second = bin(&args);
    assert!(second.status.success());
    assert!(stdout(&second).contains("cache hit"), "{}", stdout(&second));
    assert_eq!(fs::read(out.join("preprocess/reduced.npy")).unwrap(), before);
    assert_eq!(run_json(&out)["preprocess"]["config"]["bands"], 3);
    assert!(!out.join(".lock").exists());

    // A changed setting invalidates the cache.
    let third =
        bin(&["preprocess", "--data", s(&d), "--labels", s(&l), "--bands", "2", "--patch", "8", "--out", s(&out)]);
    assert!(third.status.success());
    assert!(!stdout(&third).contains("cache hit"));
}

#[test]
fn missing_labels_fail_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (d, _) = scene(dir.path(), 4, 1);
    let out = dir.path().join("run");
    let o = bin(&["preprocess", "--data", s(&d), "--labels", s(&dir.path().join("nope.npy")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.npy"));
    assert!(!out.exists());
}

#[test]
fn train_before_preprocess_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &dir.path().join("run"), "1");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("preprocess"));
}

#[test]
fn one_epoch_gives_one_history_row_and_seeded_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (ra, rb) = (prepare(&a, 4), prepare(&b, 4));
    for out in [&ra, &rb] {
        let o = train(dir.path(), out, "1");
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("final train accuracy"));
    }
    let history = fs::read_to_string(ra.join("train/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
    assert!(history.starts_with("epoch,loss,train_acc\n1,"));
    assert_eq!(history, fs::read_to_string(rb.join("train/history.csv")).unwrap());
    let (ha, hb) =
        (run_json(&ra)["train"]["checkpoint_hash"].clone(), run_json(&rb)["train"]["checkpoint_hash"].clone());
    assert!(ha.is_string());
    assert_eq!(ha, hb);
    assert_eq!(run_json(&ra)["train"]["config"]["epochs"], 1);
}

#[test]
fn evaluate_reports_and_rejects_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let four = dir.path().join("four");
    let three = dir.path().join("three");
    fs::create_dir_all(&four).unwrap();
    fs::create_dir_all(&three).unwrap();
    let (r4, r3) = (prepare(&four, 4), prepare(&three, 3));
    for out in [&r4, &r3] {
        assert!(train(dir.path(), out, "2").status.success());
    }
    let cfg = small_config(dir.path());

    let o = bin(&["evaluate", "--out", s(&r4), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for line in ["Overall accuracy (%)", "Average accuracy (%)", "Kappa accuracy (%)"] {
        assert!(text.contains(line), "{text}");
    }
    let json = fs::read_to_string(r4.join("evaluate/metrics.json")).unwrap();
    let report: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string_pretty(&report).unwrap() + "\n", json);
    assert_eq!(report.per_class.len(), 4);
    assert!(report.test_loss.is_some());
    let csv = fs::read_to_string(r4.join("evaluate/confusion.csv")).unwrap();
    assert!(csv.contains("Class 4"));
    assert!(r4.join("evaluate/report.txt").is_file());

    // The 4-class checkpoint against the 3-class cache.
    let foreign = r4.join("train/checkpoint");
    let o = bin(&["evaluate", "--out", s(&r3), "--config", s(&cfg), "--checkpoint", s(&foreign)]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("class count is 4") && err.contains("expects 3"), "{err}");
    assert!(!r3.join("evaluate").exists());
}

#[test]
fn decompose_writes_every_subband() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = dir.path().join("img.npy");
    npy::write_f64_file(&input, &[64, 64], &img).unwrap();
    let out = dir.path().join("run");
    let o = bin(&["decompose", "--input", s(&input), "--levels", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let files: Vec<String> =
        fs::read_dir(out.join("decompose")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".pgm")).count(), 16);
    assert_eq!(files.iter().filter(|f| f.ends_with(".npy")).count(), 16);
    for t in 1..=4 {
        let side = 64 >> t;
        for band in ["LL", "LH", "HL", "HH"] {
            let arr = npy::read_file(out.join(format!("decompose/level{t}_{band}.npy"))).unwrap();
            assert_eq!(arr.shape, vec![1, side, side]);
            let pgm = fs::read(out.join(format!("decompose/level{t}_{band}.pgm"))).unwrap();
            let header = format!("P5\n{side} {side}\n255\n");
            assert!(pgm.starts_with(header.as_bytes()));
            assert_eq!(pgm.len(), header.len() + side * side);
        }
    }

    // Rebuild the image from the coarsest LL and every detail band.
    let load = |name: String| {
        let a = npy::read_file(out.join("decompose").join(name)).unwrap();
        Tensor::new(a.shape, a.data).unwrap()
    };
    let mut image = load("level4_LL.npy".into());
    for t in (1..=4).rev() {
        let bands = Subbands {
            ll: image,
            lh: load(format!("level{t}_LH.npy")),
            hl: load(format!("level{t}_HL.npy")),
            hh: load(format!("level{t}_HH.npy")),
        };
        image = haar_inverse(&bands).unwrap();
    }
    let err = image.data().iter().zip(&img).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-10, "reconstruction error {err}");
}

#[test]
fn constant_images_have_blank_detail_bands() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.npy");
    npy::write_f64_file(&input, &[16, 16, 2], &[0.75; 512]).unwrap();
    let out = dir.path().join("run");
    let o = bin(&["decompose", "--input", s(&input), "--levels", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for t in 1..=2 {
        for band in ["LH", "HL", "HH"] {
            let pgm = fs::read(out.join(format!("decompose/level{t}_{band}.pgm"))).unwrap();
            let side = 16 >> t;
            let pixels = &pgm[pgm.len() - 2 * side * side..];
            assert!(pixels.iter().all(|&p| p == 0), "level{t}_{band}");
            let arr = npy::read_file(out.join(format!("decompose/level{t}_{band}.npy"))).unwrap();
            assert!(arr.data.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn too_many_levels_names_the_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("img.npy");
    npy::write_f64_file(&input, &[24, 24], &[1.0; 576]).unwrap();
    let out = dir.path().join("run");
    let o = bin(&["decompose", "--input", s(&input), "--levels", "5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at most 3 levels"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn exploding_learning_rate_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepare(dir.path(), 4);
    let cfg = small_config(dir.path());
    let o = bin(&["train", "--epochs", "3", "--lr", "1e200", "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!out.join("train").exists());
}

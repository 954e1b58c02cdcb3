use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cxr(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn cxr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: &str = "input_size=32\nwidth=8\nblocks=1\nmax_epochs=1\n";

fn small_dataset(dir: &Path) {
    let o = cxr(dir, &["gen-data", "--n", "5", "--size", "32", "--seed", "3", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
}

#[test]
fn gen_data_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = cxr(d.path(), &["gen-data", "--n", "10", "--seed", "1", "--out", "d"]);
        assert_eq!(code(&o), 0);
    }
    let ta = tree(&a.path().join("d"));
    assert_eq!(ta.len(), 30 * 2 + 2);
    assert!(ta.contains_key(Path::new("run.txt")));
    assert_eq!(ta, tree(&b.path().join("d")));
}

#[test]
fn bad_flags_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cxr(d.path(), &["gen-data", "--n", "2", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&cxr(d.path(), &["gen-data", "--out", "x"])), 1);
    assert!(!d.path().join("x").exists());
    assert_eq!(code(&cxr(d.path(), &["grad-check", "--op", "nope", "--out", "g"])), 1);
    assert_eq!(code(&cxr(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&cxr(d.path(), &["--help"])), 0);
}

#[test]
fn grad_check_conv2d() {
    let d = tempfile::tempdir().unwrap();
    let o = cxr(d.path(), &["grad-check", "--op", "conv2d", "--trials", "20", "--out", "g"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("conv2d: max relative error"), "{stdout}");
    let csv = std::fs::read_to_string(d.path().join("g/gradcheck.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",true"));
}

#[test]
fn runtime_failure_exits_two_and_cleans_up() {
    let d = tempfile::tempdir().unwrap();
    let o = cxr(d.path(), &["crossval", "--manifest", "missing.csv", "--out", "cv"]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("cv").exists());
    // A pre-existing directory keeps its old files but loses the new ones.
    std::fs::create_dir(d.path().join("kept")).unwrap();
    std::fs::write(d.path().join("kept/old.txt"), "x").unwrap();
    assert_eq!(code(&cxr(d.path(), &["train-seg", "--manifest", "missing.csv", "--out", "kept"])), 2);
    let left: Vec<_> = tree(&d.path().join("kept")).into_keys().collect();
    assert_eq!(left, vec![PathBuf::from("old.txt")]);
}

#[test]
fn config_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    std::fs::write(d.path().join("bad.cfg"), "colour=red\n").unwrap();
    let o = cxr(
        d.path(),
        &["crossval", "--manifest", "data/manifest.csv", "--config", "bad.cfg", "--out", "cv"],
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cxr(
        d.path(),
        &["crossval", "--manifest", "data/manifest.csv", "--prep", "sharpen", "--out", "cv"],
    );
    assert_eq!(code(&o), 1);
}

fn parse_metrics(path: &Path) -> BTreeMap<(String, String), (f64, u64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "label,metric,value,half_width,n,degenerate");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), (f[2].parse().unwrap(), f[4].parse().unwrap()))
        })
        .collect()
}

#[test]
fn crossval_evaluate_saliency_report() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let o = cxr(
        d.path(),
        &[
            "crossval", "--scheme", "segmented", "--prep", "original", "--family", "fire", "--manifest",
            "data/manifest.csv", "--seed", "7", "--config", "small.cfg", "--out", "cv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cv = d.path().join("cv");
    for f in ["metrics.csv", "confusion.csv", "roc_micro.csv", "folds.csv", "fold4.ckpt", "fold0_log.csv", "run.txt"] {
        assert!(cv.join(f).is_file(), "{f}");
    }
    let run = std::fs::read_to_string(cv.join("run.txt")).unwrap();
    assert!(run.contains("--seed 7") && run.contains("--scheme segmented"));

    // Overall row is the support-weighted mean of the class rows.
    let m = parse_metrics(&cv.join("metrics.csv"));
    for metric in ["accuracy", "precision", "sensitivity", "f1", "specificity"] {
        let (mut num, mut den) = (0.0, 0.0);
        for class in ["COVID19", "MERS", "SARS"] {
            let (v, n) = m[&(class.to_string(), metric.to_string())];
            num += n as f64 * v;
            den += n as f64;
        }
        let overall = m[&("overall".to_string(), metric.to_string())].0;
        assert!((overall - num / den).abs() < 1e-12, "{metric}");
    }

    let o = cxr(
        d.path(),
        &["evaluate", "--manifest", "data/manifest.csv", "--checkpoints", "cv", "--seed", "7", "--out", "ev"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "confusion.csv", "predictions.csv"] {
        assert_eq!(
            std::fs::read(cv.join(f)).unwrap(),
            std::fs::read(d.path().join("ev").join(f)).unwrap(),
            "{f}"
        );
    }

    let o = cxr(
        d.path(),
        &[
            "saliency", "--checkpoint", "cv/fold0.ckpt", "--manifest", "data/manifest.csv", "--limit", "2", "--method",
            "grad-cam", "--out", "sal",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("sal/covid19_0000.cam.pgm").is_file());
    assert_eq!(std::fs::read_to_string(d.path().join("sal/saliency.csv")).unwrap().lines().count(), 3);

    let o = cxr(d.path(), &["report", "--crossval", "cv", "--saliency", "sal", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let index = std::fs::read_to_string(d.path().join("rep/index.txt")).unwrap();
    for f in ["metrics.csv", "confusion.csv", "roc_micro.csv", "saliency/covid19_0001.cam.pgm"] {
        assert!(index.lines().any(|l| l == f), "{f} not in {index}");
    }
}

#[test]
fn parallel_crossval_matches_serial() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    for (out, jobs) in [("s", "1"), ("p", "3")] {
        let o = cxr(
            d.path(),
            &[
                "crossval", "--manifest", "data/manifest.csv", "--config", "small.cfg", "--jobs", jobs, "--out", out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (mut s, mut p) = (tree(&d.path().join("s")), tree(&d.path().join("p")));
    s.remove(Path::new("run.txt"));
    p.remove(Path::new("run.txt"));
    assert_eq!(s, p);
}

#[test]
fn seg_then_masked_classifier() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    std::fs::write(d.path().join("seg.cfg"), "input_size=32\nbase_channels=4\ndepth=2\nmax_epochs=1\n").unwrap();
    let o = cxr(
        d.path(),
        &["train-seg", "--manifest", "data/manifest.csv", "--config", "seg.cfg", "--out", "seg"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.path().join("seg/log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,lr,action\n"));
    let o = cxr(
        d.path(),
        &[
            "train-cls", "--manifest", "data/manifest.csv", "--scheme", "segmented", "--masks-from", "seg/unet.ckpt",
            "--config", "small.cfg", "--out", "cls",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("cls/classifier.ckpt").is_file());
    assert!(d.path().join("cls/val/metrics.csv").is_file());
}

#[test]
fn preprocess_writes_manifest_or_channels() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let o = cxr(
        d.path(),
        &["preprocess", "--manifest", "data/manifest.csv", "--prep", "clahe", "--segmented", "--out", "pp"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(d.path().join("pp/manifest.csv")).unwrap();
    assert_eq!(m.lines().count(), 16);
    let o = cxr(
        d.path(),
        &["preprocess", "--manifest", "data/manifest.csv", "--prep", "three-channel", "--out", "p3"],
    );
    assert_eq!(code(&o), 0);
    assert!(d.path().join("p3/images/mers_0002_c2.pgm").is_file());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn textspot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textspot")).args(args).output().expect("run textspot")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    v.sort();
    v
}

const TINY_CFG: &str = "\
# small enough for a test
fpn_channels = 8
head_hidden = 8
lines = 1,1
font_size = 10,12
checkpoint_every = 0
";

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = textspot(&["gen", "--out", p(d), "--count", "3", "--seed", "42", "--size", "64x96"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = tree(&a);
    assert_eq!(files.len(), 7);
    assert_eq!(files, tree(&b));
    let ppm = &files.iter().find(|(n, _)| n == "000000.ppm").unwrap().1;
    assert!(ppm.starts_with(b"P6\n96 64\n255\n"));
    let sidecar: serde_json::Value = serde_json::from_slice(&files.iter().find(|(n, _)| n == "000000.json").unwrap().1).unwrap();
    let b0 = &sidecar["boxes"][0];
    for key in ["cx", "cy", "w", "h", "theta_deg", "transcript", "char_centers"] {
        assert!(!b0[key].is_null(), "missing {key}");
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_speed = 3\n").unwrap();
    let o = textspot(&["gen", "--out", p(&tmp.path().join("d")), "--count", "1", "--seed", "1", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_speed"));

    fs::write(&cfg, "lr = fast\n").unwrap();
    let o = textspot(&["gen", "--out", p(&tmp.path().join("d")), "--count", "1", "--seed", "1", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);

    let o = textspot(&["gen", "--out", p(&tmp.path().join("d")), "--count", "1", "--seed", "1", "--size", "12"]);
    assert_eq!(code(&o), 2);

    let o = textspot(&["train", "--data", "x", "--out", "y", "--bogus"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let o = textspot(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 3);
    let o = textspot(&["eval", "--ckpt", p(&missing), "--data", p(&missing)]);
    assert_eq!(code(&o), 3);
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let o = textspot(&["infer", "--ckpt", p(&junk), "--image", p(&missing)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn train_finetune_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let cfg = d("tiny.cfg");
    fs::write(&cfg, TINY_CFG).unwrap();
    let o = textspot(&["gen", "--out", p(&d("data")), "--count", "4", "--seed", "7", "--size", "64x64", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0);

    let o = textspot(&["train", "--data", p(&d("data")), "--out", p(&d("m.ckpt")), "--config", p(&cfg), "--epochs", "2", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d("m.ckpt.metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["steps"], 2);
    assert_eq!(lines[1]["epoch"], 2);
    assert_eq!(&fs::read(d("m.ckpt")).unwrap()[..4], b"TXSP");

    let o = textspot(&["finetune", "--ckpt", p(&d("m.ckpt")), "--data", p(&d("data")), "--epochs", "1", "--out", p(&d("f.ckpt"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d("f.ckpt.metrics.jsonl")).unwrap().lines().count(), 1);

    let o = textspot(&["eval", "--ckpt", p(&d("f.ckpt")), "--data", p(&d("data")), "--report", p(&d("r.json")), "--threshold", "0.0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("r.json")).unwrap()).unwrap();
    for key in ["localization_ap", "end_to_end_ap", "f_score", "tp", "fp", "fn", "iou_threshold"] {
        assert!(!r[key].is_null(), "missing {key}");
    }
    assert_eq!(r["images"].as_array().unwrap().len(), 4);

    let o = textspot(&[
        "infer", "--ckpt", p(&d("f.ckpt")), "--image", p(&d("data/000000.ppm")),
        "--overlay", p(&d("o.ppm")), "--json", p(&d("o.json")), "--threshold", "0.0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(d("o.ppm")).unwrap().starts_with(b"P6\n64 64\n255\n"));
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("o.json")).unwrap()).unwrap();
    assert!(j["detections"].is_array());

    let o = textspot(&["eval", "--ckpt", p(&d("f.ckpt")), "--data", p(&d("data")), "--iou", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let cfg = d("tiny.cfg");
    fs::write(&cfg, TINY_CFG).unwrap();
    textspot(&["gen", "--out", p(&d("data")), "--count", "2", "--seed", "3", "--size", "64x64", "--config", p(&cfg)]);
    for out in ["a.ckpt", "b.ckpt"] {
        let o = textspot(&["train", "--data", p(&d("data")), "--out", p(&d(out)), "--config", p(&cfg), "--epochs", "1"]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(d("a.ckpt")).unwrap(), fs::read(d("b.ckpt")).unwrap());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fsayolo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsayolo")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn assert_clean_failure(out: &Output, code: i32) {
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {err}");
    assert!(!err.contains("panicked"), "{err}");
    if code != 2 {
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            let bytes = std::fs::read(&p).unwrap();
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out.push(("classes.txt".into(), std::fs::read(dir.join("classes.txt")).unwrap()));
    out
}

#[test]
fn gen_twice_writes_identical_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    ok(fsayolo(&["gen", "--out", "a", "--n", "5", "--seed", "11"], tmp.path()));
    ok(fsayolo(&["gen", "--out", "b", "--n", "5", "--seed", "11"], tmp.path()));
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert_eq!(a.len(), 11);
    assert!(a == b);
}

#[test]
fn untrained_checkpoint_detects_evaluates_and_dumps_uniform_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(fsayolo(&["gen", "--out", "d", "--n", "2", "--seed", "5"], dir));
    ok(fsayolo(&["train", "--data", "d", "--epochs", "0", "--out", "m.ckpt"], dir));
    assert!(dir.join("m.ckpt").is_file());

    let stdout = ok(fsayolo(&["eval", "--data", "d", "--ckpt", "m.ckpt", "--csv", "e.csv"], dir));
    assert!(stdout.contains("map50"), "{stdout}");
    let csv = std::fs::read_to_string(dir.join("e.csv")).unwrap();
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval_header.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), golden.lines().next());
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 8);
    assert_eq!(row[0], 2.0);
    assert!(row[2..6].iter().all(|v| (0.0..=1.0).contains(v)));

    let image = "d/images/scene_00000.ppm";
    ok(fsayolo(&["detect", "--image", image, "--ckpt", "m.ckpt", "--out", "o", "--dump-attention", "att"], dir));
    assert!(dir.join("o/scene_00000.txt").is_file());
    assert!(dir.join("o/scene_00000.annotated.ppm").is_file());
    let mut maps: Vec<_> = std::fs::read_dir(dir.join("att")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    maps.sort();
    assert_eq!(maps, ["attention_p2.ppm", "attention_p3.ppm", "attention_p4.ppm", "attention_p5.ppm"]);
    for m in maps {
        let img = fsayolo::data::RgbImage::read(&dir.join("att").join(m)).unwrap();
        assert!(img.data.iter().all(|&v| v == 128 || v == 127));
    }
}

#[test]
fn missing_input_exits_3_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    assert_clean_failure(&fsayolo(&["eval", "--data", "nowhere", "--ckpt", "none.ckpt"], tmp.path()), 3);
    assert_clean_failure(&fsayolo(&["detect", "--image", "none.ppm", "--ckpt", "none.ckpt"], tmp.path()), 3);
}

#[test]
fn malformed_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    ok(fsayolo(&["gen", "--out", "d", "--n", "1"], tmp.path()));
    std::fs::write(tmp.path().join("bad.cfg"), "input_size = banana\n").unwrap();
    assert_clean_failure(&fsayolo(&["train", "--data", "d", "--config", "bad.cfg", "--out", "m.ckpt"], tmp.path()), 3);
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    ok(fsayolo(&["gen", "--out", "d", "--n", "1"], tmp.path()));
    std::fs::write(tmp.path().join("m.ckpt"), b"FSAYOLO\0garbage").unwrap();
    assert_clean_failure(&fsayolo(&["eval", "--data", "d", "--ckpt", "m.ckpt"], tmp.path()), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_clean_failure(&fsayolo(&["gen", "--out", "d", "--bogus"], tmp.path()), 2);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(fsayolo(&["gradcheck"], tmp.path()));
    assert!(stdout.contains(", 0 failed"), "{stdout}");
}

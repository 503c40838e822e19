use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn patchrot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchrot")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = patchrot(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn truncated_cifar_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("short.bin");
    fs::write(&file, [0u8; 100]).unwrap();
    let data = format!("cifar:{}", s(&file));
    let out = patchrot(&["pretrain", "--data", &data, "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error (data)"));
}

#[test]
fn bad_flags_and_values_exit_with_usage_error() {
    assert_eq!(patchrot(&["pretrain", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let bad_ratio = patchrot(&["pretrain", "--data", "synthetic:4:16", "--ratio", "1.5", "--out", out]);
    assert_eq!(bad_ratio.status.code(), Some(2));
    let bad_variant = patchrot(&["generate", "--data", "synthetic:4:16", "--variant", "jigsaw", "--out", out]);
    assert_eq!(bad_variant.status.code(), Some(2));
    let config = dir.path().join("c.txt");
    fs::write(&config, "unknown_key=1\n").unwrap();
    let bad_key = patchrot(&["pretrain", "--data", "synthetic:4:16", "--config", s(&config), "--out", out]);
    assert_eq!(bad_key.status.code(), Some(2));
}

#[test]
fn generate_relnet_writes_four_pairs_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["generate", "--data", "synthetic:5:16", "--variant", "patch-relnet", "--out", s(dir.path())]);
    assert_eq!(value(&stdout, "entries"), "20");
    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next().unwrap(), "entry,image,pair_image,label,variant,top,left,height,width");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 9);
        assert!(dir.path().join(f[1]).exists() && dir.path().join(f[2]).exists());
        assert_eq!(f[4], "patch-relnet");
    }
}

/// pretrain -> linear-eval -> evaluate -> export, returning every artifact.
fn pipeline(root: &Path, seed: &str, config: Option<&Path>) -> (Vec<(String, Vec<u8>)>, String) {
    let pre = root.join("pre");
    let mut args = vec!["pretrain", "--data", "synthetic:8:16", "--epochs", "2", "--batch-size", "16", "--out", s(&pre)];
    if let Some(c) = config {
        args.extend(["--config", s(c)]);
    } else {
        args.extend(["--seed", seed]);
    }
    let pretrain_out = ok(&args);
    let lin = root.join("lin");
    let ckpt = pre.join("last.ckpt");
    let stdout = ok(&[
        "linear-eval", "--checkpoint", s(&ckpt), "--train", "synthetic:16:16", "--test", "synthetic:8:16",
        "--epochs", "3", "--seed", seed, "--out", s(&lin),
    ]);
    let model = lin.join("model.ckpt");
    let eval = ok(&["evaluate", "--checkpoint", s(&model), "--data", "synthetic:8:16", "--split", "test"]);
    assert_eq!(value(&eval, "accuracy"), value(&stdout, "test_accuracy"));
    let emb = root.join("emb.csv");
    ok(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", "synthetic:4:16", "--out", s(&emb)]);

    let files = [
        pre.join("best.ckpt"), pre.join("last.ckpt"), pre.join("metrics_ssl.csv"), pre.join("config.txt"),
        model, lin.join("metrics_linear-eval.csv"), emb,
    ];
    let artifacts = files
        .iter()
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(f).unwrap()))
        .collect();
    (artifacts, pretrain_out)
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, _) = pipeline(a.path(), "11", None);
    let (second, _) = pipeline(b.path(), "11", None);
    assert_eq!(first, second);
    let (other, _) = pipeline(c.path(), "12", None);
    assert_ne!(first[1], other[1]);
}

#[test]
fn printed_header_round_trips_as_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, stdout) = pipeline(a.path(), "5", None);
    let header: String = stdout
        .lines()
        .take_while(|l| !l.starts_with("final_loss="))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(header.contains("seed=5"));
    let config = b.path().join("header.txt");
    fs::write(&config, header).unwrap();
    let (second, _) = pipeline(b.path(), "5", Some(&config));
    assert_eq!(first, second);
}

#[test]
fn gradcam_writes_three_images() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--data", "synthetic:4:16", "--epochs", "1", "--out", s(&pre)]);
    let cam = dir.path().join("cam");
    let stdout = ok(&[
        "gradcam", "--checkpoint", s(&pre.join("best.ckpt")), "--data", "synthetic:4:16", "--index", "1",
        "--class", "6", "--out", s(&cam),
    ]);
    assert!(stdout.contains("placement="));
    for f in ["input.ppm", "heatmap.ppm", "overlay.ppm"] {
        assert!(fs::read(cam.join(f)).unwrap().starts_with(b"P6"));
    }
    let bad = patchrot(&[
        "gradcam", "--checkpoint", s(&pre.join("best.ckpt")), "--data", "synthetic:4:16", "--class", "8", "--out",
        s(&cam),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

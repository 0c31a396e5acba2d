use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nqe::data::load_image;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn nqe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nqe")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nqe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    nqe(args).status.code().unwrap()
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn asset(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name).display().to_string()
}

fn config(name: &str) -> String {
    root().join("configs").join(name).display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}



#[test]
fn cost_reports_the_reference_cells() {
    let mixed = ok(&["cost", "--F", "64", "--precision", "mixed", "--manifest", "/dev/null"]);
    for cell in ["1.073", "0.210", "0.287"] {
        assert!(mixed.contains(cell), "{cell} missing from\n{mixed}");
    }
    let binary = ok(&["cost", "--F", "64", "--precision", "binary", "--manifest", "/dev/null"]);
    for cell in ["0.774", "0.125", "0.137"] {
        assert!(binary.contains(cell), "{cell} missing from\n{binary}");
    }
    let json = ok(&["cost", "--F", "64", "--json", "--manifest", "/dev/null"]);
    let records: Vec<Value> = json.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let total = records.last().unwrap();
    assert_eq!(total["record"], "total");
    assert_eq!(total["memory_mb"], 1.073);
    assert_eq!(total["mac_bit_g"], 0.21);
    assert_eq!(total["bops_g"], 0.287);
    assert!(records[..records.len() - 1].iter().all(|r| r["record"] == "layer"));
}

#[test]
fn tables_match_the_golden_file() {
    let golden = include_str!("golden/tables.txt");
    let a = ok(&["tables", "--manifest", "/dev/null"]);
    let b = ok(&["tables", "--manifest", "/dev/null"]);
    assert_eq!(a, b);
    assert_eq!(a, golden);
    let appendix = ok(&["tables", "--appendix-a", "--manifest", "/dev/null"]);
    for cell in [
        "0.262", "1.049", "4.194", "0.016", "0.066", "0.018", "0.070", "0.270", "0.253", "1.003", "3.997",
    ] {
        assert!(appendix.contains(cell), "{cell} missing");
    }
    assert!(!appendix.contains("BOPs"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["cost", "--no-such-flag"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["import", "--weights", "/definitely/missing.nqew"]), 2);
    assert_eq!(code(&["cost", "--precision", "ternary", "--manifest", "/dev/null"]), 2);
    assert_eq!(code(&["cost", "--F", "6", "--manifest", "/dev/null"]), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nf = 8\nwings = 2\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--out", s(&dir.path().join("run"))]), 2);
    let garbage = dir.path().join("garbage.nqew");
    std::fs::write(&garbage, b"NQEW not really").unwrap();
    assert_eq!(code(&["import", "--weights", s(&garbage)]), 2);
    // Output into a directory that does not exist is a runtime fault.
    assert_eq!(code(&["export", "--config", &config("compress-demo.toml"), "--out", "/no/such/dir/w.nqew"]), 3);
}

/// Fresh folded model with a 32×32-patch decoder.
fn demo_weights(dir: &Path) -> PathBuf {
    let w = dir.join("demo.nqew");
    ok(&["export", "--config", &config("compress-demo.toml"), "--fold", "--out", s(&w)]);
    w
}

#[test]
fn compress_then_decompress_keeps_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let w = demo_weights(dir.path());
    let image = asset("test64.png");
    let bits = dir.path().join("test.nqeb");
    let report: Value = serde_json::from_str(&ok(&["compress", "--weights", s(&w), "--image", &image, "--out", s(&bits)])).unwrap();
    assert_eq!(report["patches"], 4);
    assert_eq!(report["payload_bits"], 4 * 32);
    // 32 bits per 32×32 patch at F = 8.
    assert_eq!(report["bpp"], 32.0 / 1024.0);

    for variant in ["purenet", "pi", "bbd"] {
        let png = dir.path().join(format!("{variant}.png"));
        ok(&[
            "decompress", "--weights", s(&w), "--input", s(&bits), "--out", s(&png), "--variant", variant,
            "--reference", &image,
        ]);
        let decoded = load_image(&png).unwrap();
        assert_eq!(decoded.shape(), load_image(Path::new(&image)).unwrap().shape());
    }

    // The integer-only encoder writes the same bytes.
    let int_bits = dir.path().join("int.nqeb");
    ok(&["compress", "--weights", s(&w), "--image", &image, "--out", s(&int_bits), "--integer"]);
    assert_eq!(std::fs::read(&bits).unwrap(), std::fs::read(&int_bits).unwrap());

    // Damaged streams are rejected as invalid input.
    let mut bytes = std::fs::read(&bits).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x10;
    let bad = dir.path().join("bad.nqeb");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(code(&["decompress", "--weights", s(&w), "--input", s(&bad), "--out", s(&dir.path().join("x.png"))]), 2);
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&["decompress", "--weights", s(&w), "--input", s(&bad), "--out", s(&dir.path().join("x.png"))]), 2);
}

#[test]
fn indivisible_images_need_crop() {
    let dir = tempfile::tempdir().unwrap();
    let w = demo_weights(dir.path());
    let img = dir.path().join("odd.png");
    image::RgbImage::from_pixel(40, 70, image::Rgb([10, 200, 30])).save(&img).unwrap();
    let out = dir.path().join("odd.nqeb");
    assert_eq!(code(&["compress", "--weights", s(&w), "--image", s(&img), "--out", s(&out)]), 2);
    let report: Value = serde_json::from_str(&ok(&[
        "compress", "--weights", s(&w), "--image", s(&img), "--out", s(&out), "--crop",
    ]))
    .unwrap();
    assert_eq!((report["height"].as_u64(), report["width"].as_u64()), (Some(64), Some(32)));
}

fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn manifests_record_digests() {
    let dir = tempfile::tempdir().unwrap();
    let w = demo_weights(dir.path());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("demo.nqew.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "export");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["outputs"][0]["sha256"], sha256(&w));
    assert_eq!(manifest["inputs"][0]["sha256"], sha256(Path::new(&config("compress-demo.toml"))));
    assert!(manifest["config"]["model"]["decoder"].is_object());

    // Replaying the recorded argv reproduces the artifact.
    let argv: Vec<String> = manifest["argv"].as_array().unwrap()[1..].iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let before = sha256(&w);
    std::fs::remove_file(&w).unwrap();
    ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(sha256(&w), before);

    // Commands without an output file print the manifest to stderr.
    let out = nqe(&["cost"]);
    let m: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(m["command"], "cost");
    assert_eq!(m["config"]["args"]["f"], 64);
}

fn tiny_classify_config(dir: &Path, seed_line: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        format!(
            r#"task = "classify"
{seed_line}

[model]
f = 8
input_size = 8
classes = 2

[train]
batch_size = 32
epochs_stage1 = 2
epochs_stage2 = 1
lr_init = 0.003
lr_decay = 0.8
decay_period = 5
augmentation = false

[data]
train = 64
test = 32
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn training_is_reproducible_and_feeds_lower_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_classify_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--seed", "3"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "3"]);
    for f in ["weights.nqew", "log.jsonl", "summary.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(sha256(&a.join("weights.nqew")), sha256(&b.join("weights.nqew")));
    assert_eq!(sha256(&a.join("log.jsonl")), sha256(&b.join("log.jsonl")));
    let log = std::fs::read_to_string(a.join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let w = a.join("weights.nqew");
    let lowered = dir.path().join("model.nqel");
    let widths = ok(&["lower", "--weights", s(&w), "--out", s(&lowered), "--json"]);
    assert!(widths.lines().any(|l| l.contains("\"bsn\"")));
    assert!(dir.path().join("model.nqel.manifest.json").exists());

    let img = dir.path().join("in.png");
    image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 90])).save(&img).unwrap();
    let trace = dir.path().join("trace.jsonl");
    let r: Value = serde_json::from_str(&ok(&[
        "infer", "--lowered", s(&lowered), "--image", s(&img), "--trace", s(&trace), "--manifest", "/dev/null",
    ]))
    .unwrap();
    assert_eq!(r["values"].as_array().unwrap().len(), 2);
    assert!(r["class"].as_u64().unwrap() < 2);
    let code: Value = serde_json::from_str(&ok(&[
        "infer", "--lowered", s(&lowered), "--image", s(&img), "--output", "code", "--manifest", "/dev/null",
    ]))
    .unwrap();
    assert_eq!(code["bits"].as_str().unwrap().len(), 32);
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 5);
    // Wrong input size.
    assert_eq!(
        code_of_infer(&lowered, &asset("test64.png")),
        2,
        "64x64 image into an 8x8 model"
    );

    // Float and integer evaluation agree on the folded model.
    let float: Value = serde_json::from_str(&ok(&["eval", "--weights", s(&w), "--config", s(&cfg), "--manifest", "/dev/null"])).unwrap();
    let int: Value = serde_json::from_str(&ok(&[
        "eval", "--weights", s(&w), "--config", s(&cfg), "--integer", "--manifest", "/dev/null",
    ]))
    .unwrap();
    assert_eq!(float["accuracy"], int["accuracy"]);
}

fn code_of_infer(lowered: &Path, image: &str) -> i32 {
    code(&["infer", "--lowered", s(lowered), "--image", image, "--manifest", "/dev/null"])
}

#[test]
fn configuration_seed_wins_over_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_classify_config(dir.path(), "seed = 5");
    let a = dir.path().join("a");
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--seed", "9"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = demo_weights(dir.path());
    let stripped = dir.path().join("stripped.nqew");
    let topo = dir.path().join("topology.toml");
    ok(&["export", "--weights", s(&w), "--out", s(&stripped), "--no-proxies", "--topology", s(&topo)]);
    let info: Value = serde_json::from_str(&ok(&["import", "--weights", s(&stripped), "--json", "--manifest", "/dev/null"])).unwrap();
    assert_eq!(info["has_proxies"], false);
    assert_eq!(info["folded"], true);
    assert_eq!(info["code_bits"], 32);
    assert!(info["decoder"].is_object());
    assert!(std::fs::read_to_string(&topo).unwrap().contains("conv1"));
    assert!(std::fs::metadata(&stripped).unwrap().len() < std::fs::metadata(&w).unwrap().len());

    // Same bitstream from the stripped file.
    let image = asset("test64.png");
    let (b1, b2) = (dir.path().join("1.nqeb"), dir.path().join("2.nqeb"));
    ok(&["compress", "--weights", s(&w), "--image", &image, "--out", s(&b1)]);
    ok(&["compress", "--weights", s(&stripped), "--image", &image, "--out", s(&b2)]);
    assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());

    let text = ok(&["import", "--weights", s(&w), "--manifest", "/dev/null"]);
    assert!(text.contains("folded true"));
}

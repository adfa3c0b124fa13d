use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stpl::data::read_dataset;

const TOY: &str = r#"
[model]
frames_in = 10
frames_out = 10
hidden_spatial = 4
hidden_temporal = 4
num_tau_blocks = 1

[train]
epochs = 2
batch_size = 8

[data]
num_digits = 1
canvas = 16
digit_size = 8
seq_len = 20
train_sequences = 32
test_sequences = 8
"#;

fn stpl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stpl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stpl(dir, args);
    assert!(
        out.status.success(),
        "stpl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temp dir with the toy config, rendered digits and generated data.
fn toy_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.toml"), TOY).unwrap();
    ok(dir.path(), &["--config", "toy.toml", "synth-digits", "--count", "50"]);
    ok(dir.path(), &["--config", "toy.toml", "generate-data"]);
    dir
}

fn kv(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .to_string()
}

#[test]
fn generate_data_size_and_determinism() {
    let dir = toy_workspace();
    let train = dir.path().join("data/train.stpl");
    let first = fs::read(&train).unwrap();
    assert_eq!(first.len(), 34 + 32 * 20 * 16 * 16 * 4);
    assert_eq!(read_dataset(&train).unwrap().shape(), [32, 20, 1, 16, 16]);
    ok(dir.path(), &["--config", "toy.toml", "generate-data"]);
    assert_eq!(fs::read(&train).unwrap(), first);
    let test = fs::read(dir.path().join("data/test.stpl")).unwrap();
    assert_eq!(test.len(), 34 + 8 * 20 * 16 * 16 * 4);
    assert!(dir.path().join("runs/default/effective-generate-data.toml").exists());
}

#[test]
fn missing_idx_files_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stpl(dir.path(), &["--set", "paths.mnist_dir=nowhere", "generate-data"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-images-idx3-ubyte") && err.contains("t10k-images-idx3-ubyte"), "{err}");
}

#[test]
fn config_errors_exit_2_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--set", "model.no_such_key=1", "train"][..],
        &["--set", "train.batch_size=0", "train"][..],
        &["--set", "model.frames_in=15", "train"][..],
        &["--config", "absent.toml", "train"][..],
    ] {
        let out = stpl(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = stpl(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3), "missing dataset is a data error");
}

#[test]
fn untrained_evaluate_is_finite() {
    let dir = toy_workspace();
    let text = ok(dir.path(), &["--config", "toy.toml", "evaluate", "--untrained"]);
    for k in ["mse", "mae", "ssim", "psnr"] {
        assert!(kv(&text, k).parse::<f64>().unwrap().is_finite(), "{k}");
    }
    let csv = fs::read_to_string(dir.path().join("runs/default/eval-test_frames.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn train_then_evaluate_agree_on_val_mse() {
    let dir = toy_workspace();
    ok(dir.path(), &["--config", "toy.toml", "--out", "run", "train"]);
    let run = dir.path().join("run");
    let log = fs::read_to_string(run.join("run_log.csv")).unwrap();
    let last = log.lines().last().unwrap().split(',').nth(2).unwrap().to_string();
    let text = ok(dir.path(), &["--config", "toy.toml", "--out", "run", "evaluate", "--split", "val"]);
    assert_eq!(kv(&text, "mse"), last);
    assert!(run.join("checkpoints/epoch-0002.ckpt").exists());
    assert!(run.join("effective-train.toml").exists());

    let again = stpl(dir.path(), &["--config", "toy.toml", "--out", "run", "train"]);
    assert_eq!(again.status.code(), Some(2));
    ok(
        dir.path(),
        &["--config", "toy.toml", "--out", "run", "--set", "train.epochs=3", "train", "--resume"],
    );
    let log = fs::read_to_string(run.join("run_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(run.join("checkpoints/epoch-0003.ckpt").exists());
}

#[test]
fn predict_forty_frames_recursively() {
    let dir = toy_workspace();
    let text = ok(
        dir.path(),
        &["--config", "toy.toml", "predict", "--untrained", "--horizon", "40", "--sequences", "2"],
    );
    assert!(text.contains("4 forward call(s)"), "{text}");
    let out = dir.path().join("runs/default/predict");
    for seq in ["seq-0000", "seq-0001"] {
        let frames: Vec<_> = fs::read_dir(out.join(seq)).unwrap().collect();
        assert_eq!(frames.len(), 40);
        let strip = fs::read(out.join(format!("{seq}-strip.pgm"))).unwrap();
        let img = stpl_cli::pgm::read_pgm(&strip).unwrap();
        assert_eq!((img.width, img.height), (40 * 18 - 2, 4 * 18 - 2));
    }
    let f = stpl_cli::pgm::read_pgm(&fs::read(out.join("seq-0000/frame-0039.pgm")).unwrap()).unwrap();
    assert_eq!((f.width, f.height), (16, 16));
}

#[test]
fn ablate_emits_five_rows_with_single_flag_diffs() {
    let dir = toy_workspace();
    ok(dir.path(), &["--config", "toy.toml", "--set", "train.epochs=1", "--out", "abl", "ablate"]);
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_sa", "no_da", "no_ddr", "conv_baseline"]);
    let hashes: Vec<&str> = rows.iter().map(|r| r.split(',').nth(3).unwrap()).collect();
    assert_ne!(hashes[0], hashes[3]);

    let load = |v: &str| -> toml::Table {
        let text = fs::read_to_string(dir.path().join(format!("abl/ablate/{v}/effective-train.toml"))).unwrap();
        let mut t: toml::Table = text.parse().unwrap();
        t.remove("paths");
        t
    };
    let (mut full, no_ddr) = (load("full"), load("no_ddr"));
    assert_ne!(full, no_ddr);
    full["loss"]
        .as_table_mut()
        .unwrap()
        .insert("ddr_enabled".into(), toml::Value::Boolean(false));
    assert_eq!(full, no_ddr);
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "full.toml"] {
        let cfg = stpl_cli::RunConfig::load(Some(&root.join(name)), &[], None, None).unwrap();
        assert_eq!(cfg.train.lr, 0.01, "{name}");
    }
}

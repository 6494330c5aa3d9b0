use std::path::Path;
use std::process::{Command, Output};

use ledcnet::data::synthetic::{shape_tiles, write_dataset};
use ledcnet::data::{read_rgb, write_png, Split};

fn ledcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ledcnet")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_command_exits_one_with_usage() {
    let o = ledcnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("Usage"), "{}", text(&o.stderr));
    assert_eq!(ledcnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = ledcnet(&["eval", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("missing checkpoint_path"));

    let o = ledcnet(&["train", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("missing manifest_path"));

    let o = ledcnet(&["train", "--manifest", "/no/such/manifest.json", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("manifest_path does not exist"));

    let o = ledcnet(&["profile", "--set", "train.nope=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("train.nope"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = ledcnet(&["profile", "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
}

#[test]
fn profile_prints_json_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = ledcnet(&[
        "profile",
        "--preset",
        "toy",
        "--set",
        "profile.input_size=64",
        "--set",
        "profile.iters=1",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let json_end = stdout.find("\n}").expect("json object") + 2;
    let j: serde_json::Value = serde_json::from_str(&stdout[..json_end]).unwrap();
    assert!(j["params"].as_u64().unwrap() > 0);
    assert!(j["fps"]["fps"].as_f64().unwrap() > 0.0);
    assert!(stdout[json_end..].contains("toy"));
    assert!(out.join("profile.json").exists());
}

#[test]
fn effective_config_follows_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "preset = toy\ntrain.epochs = 7\ntrain.lr = 0.01\n").unwrap();
    let out = dir.path().join("o");
    let o = ledcnet(&[
        "profile",
        "--config",
        s(&cfg),
        "--set",
        "train.lr=0.02",
        "--seed",
        "9",
        "--set",
        "profile.iters=0",
        "--set",
        "profile.input_size=32",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let echo = std::fs::read_to_string(out.join("effective.cfg")).unwrap();
    for line in ["train.epochs = 7", "train.lr = 0.02", "train.seed = 9", "train.batch_size = 8"] {
        assert!(echo.lines().any(|l| l == line), "{line} not in\n{echo}");
    }
    // The echo is itself a valid config file that reproduces the run.
    let again = dir.path().join("again");
    let o = ledcnet(&["profile", "--config", s(&out.join("effective.cfg")), "--preset", "toy", "--out", s(&again)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(std::fs::read_to_string(again.join("effective.cfg")).unwrap(), echo);
}

#[test]
fn train_eval_predict_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&dir.path().join("data"), &shape_tiles(4, 32, 8), &[Split::Train, Split::Val]).unwrap();
    let run = dir.path().join("run");
    let common = ["--preset", "toy", "--set", "data.tiling.tile_size=32"];
    let mut args = vec!["train", "--manifest", s(&manifest), "--set", "train.epochs=2", "--out", s(&run)];
    args.extend(common);
    let o = ledcnet(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout).lines().filter(|l| l.starts_with(['0', '1'])).count(), 2);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,val_OA,val_meanF1,val_mIoU\n"));
    let best = run.join("best.ckpt");
    assert!(best.exists() && run.join("last.ckpt").exists());

    let ev = dir.path().join("eval");
    let mut args = vec!["eval", "--manifest", s(&manifest), "--checkpoint", s(&best), "--out", s(&ev)];
    args.extend(common);
    let o = ledcnet(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("miou"));
    assert!(ev.join("metrics.txt").exists() && ev.join("metrics.json").exists());

    let scene = dir.path().join("scene.png");
    write_png(&scene, &shape_tiles(1, 48, 3)[0].image).unwrap();
    let pr = dir.path().join("pred");
    let mut args = vec!["predict", "--checkpoint", s(&best), "--input", s(&scene), "--set", "predict.overlap=8", "--out", s(&pr)];
    args.extend(common);
    let o = ledcnet(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let rgb = read_rgb(&pr.join("scene_rgb.png")).unwrap();
    assert_eq!((rgb.height(), rgb.width()), (48, 48));
    assert!(pr.join("scene_index.png").exists());

    let mut args = vec!["predict", "--checkpoint", s(&best), "--out", s(&pr)];
    args.extend(common);
    let o = ledcnet(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("missing input"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eam")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TINY: [&str; 10] = ["--synthetic", "2,6,32", "--epochs", "1", "--c2", "4", "--c-prime", "8", "--batch", "4"];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(&["--seed", "7", "--out", out]);
    args.extend_from_slice(extra);
    eam(&args)
}

#[test]
fn missing_out_is_a_usage_error() {
    let mut args = vec!["train"];
    args.extend_from_slice(&TINY);
    let o = eam(&args);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("--out"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(eam(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(eam(&["train", "--strategy", "nope", "--out", "x"]).status.code(), Some(2));
    assert_eq!(eam(&["train", "--synthetic", "2,6", "--out", "x"]).status.code(), Some(2));
    assert_eq!(eam(&["train", "--lr", "-1", "--synthetic", "2,6,32", "--out", "x"]).status.code(), Some(2));
    assert_eq!(eam(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(eam(&["gradcheck", "--op", "nope"]).status.code(), Some(2));
    assert_eq!(eam(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_single_op_and_impossible_tolerance() {
    let o = eam(&["gradcheck", "--op", "conv2d"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.contains("PASS") || l.contains("FAIL")).count(), 1);

    let o = eam(&["gradcheck", "--op", "sigmoid", "--tol", "1e-12"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn train_writes_outputs_deterministically_and_checkpoint_serves_other_commands() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = train_into(a.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    for f in ["model.eamc", "metrics.csv", "curves.csv"] {
        assert!(a.path().join(f).is_file(), "{f} missing");
    }
    assert_eq!(train_into(b.path(), &[]).status.code(), Some(0));
    let metrics = fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.path().join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.path().join("model.eamc")).unwrap(),
        fs::read(b.path().join("model.eamc")).unwrap()
    );
    let metrics = String::from_utf8(metrics).unwrap();
    assert!(metrics.starts_with("split,ratio,strategy,variant,accuracy\n0,50:50,eam+aspp+gap,icbam,"));
    assert!(String::from_utf8_lossy(&o.stdout).contains(metrics.lines().nth(1).unwrap()));
    let curves = fs::read_to_string(a.path().join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,train_loss,val_loss,train_acc,val_acc\n0,"));

    let model = a.path().join("model.eamc");
    let model = model.to_str().unwrap();
    let mut eval = vec!["evaluate", "--model", model];
    eval.extend_from_slice(&TINY);
    eval.extend_from_slice(&["--seed", "7"]);
    let o = eam(&eval);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let accuracy = metrics.lines().nth(1).unwrap().rsplit(',').next().unwrap();
    assert!(String::from_utf8_lossy(&o.stdout).contains(&format!("accuracy={accuracy}")));

    eval.extend_from_slice(&["--variant", "cbam"]);
    let o = eam(&eval);
    assert_eq!(o.status.code(), Some(1));
    let msg = text(&o);
    assert!(msg.contains("cbam") && msg.contains("icbam"), "{msg}");

    let img = a.path().join("img.ppm");
    let sample = &eam_core::training::synth_dataset(2, 1, 32, 0).unwrap()[0];
    eam_core::imageio::write_ppm(&img, &sample.to_rgb()).unwrap();
    let cam_dir = a.path().join("cam");
    let (img, cam) = (img.to_str().unwrap(), cam_dir.to_str().unwrap());
    let o = eam(&["gradcam", "--model", model, "--image", img, "--class", "1", "--level", "3", "--out", cam]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let (w, h, gray) = eam_core::imageio::read_pgm(&cam_dir.join("heatmap.pgm")).unwrap();
    assert_eq!((w, h, gray.len()), (32, 32, 1024));
    let overlay = eam_core::imageio::read_ppm(&cam_dir.join("overlay.ppm")).unwrap();
    assert_eq!((overlay.width, overlay.height), (32, 32));
    assert_eq!(eam(&["gradcam", "--model", model, "--image", img, "--class", "2", "--out", cam]).status.code(), Some(2));
    assert_eq!(eam(&["gradcam", "--model", model, "--image", img, "--class", "0", "--level", "6", "--out", cam]).status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.eamc");
    fs::write(&path, b"NOPE0000").unwrap();
    let mut args = vec!["evaluate", "--model", path.to_str().unwrap()];
    args.extend_from_slice(&TINY);
    let o = eam(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("not an EAMC file"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nsynthetic=2,6,32\nepochs=1\nc2=4\nc_prime=8\nstrategy=gap\nvariant=cbam\n").unwrap();
    let out = dir.path().join("out");
    let o = eam(&["train", "--config", cfg.to_str().unwrap(), "--variant", "icbam", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains(",gap,icbam,"), "{metrics}");

    fs::write(&cfg, "epochz=1\n").unwrap();
    let o = eam(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("epochz"));
}

#[test]
fn ablate_subset_gives_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--strategies", "eam+aspp+gap", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(&TINY);
    let o = eam(&args);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsplat")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short synthetic bundle in `dir/bundle`.
fn small_bundle(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("synth.toml");
    fs::write(&cfg, format!("frame_count = 6\n{extra}")).unwrap();
    let bundle = dir.join("bundle");
    let o = semsplat(&["generate", "--config", arg(&cfg), "--out", arg(&bundle)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    bundle
}

#[test]
fn generate_run_eval() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), "");
    let out = dir.path().join("run");
    let o = semsplat(&["run", "--bundle", arg(&bundle), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traj = fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().filter(|l| !l.starts_with('#')).count(), 6);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["frame_count"], 6);
    assert_eq!(report["frames"].as_array().unwrap().len(), 6);
    assert!(out.join("renders/rgb/000005.pfm").exists());

    let o = semsplat(&["eval", "--bundle", arg(&bundle), "--result", arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("ATE RMSE") && table.contains("LPIPS"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["ate_rmse", "psnr", "ssim", "depth_l1", "seg_l1"] {
        assert!(m[key].is_f64(), "{key} missing");
    }
    assert_eq!(m["per_frame"].as_array().unwrap().len(), 6);
}

#[test]
fn eval_rejects_a_short_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), "");
    let out = dir.path().join("run");
    let o = semsplat(&["run", "--bundle", arg(&bundle), "--out", arg(&out), "--no-renders"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = out.join("trajectory.txt");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).take(4).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    let o = semsplat(&["eval", "--bundle", arg(&bundle), "--result", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains('4') && err.contains('6'), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn eval_without_renders_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), "");
    let out = dir.path().join("run");
    semsplat(&["run", "--bundle", arg(&bundle), "--out", arg(&out), "--no-renders"]);
    let o = semsplat(&["eval", "--bundle", arg(&bundle), "--result", arg(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(semsplat(&[]).status.code(), Some(1));
    assert_eq!(semsplat(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(semsplat(&["eval", "--bundle", "x"]).status.code(), Some(1));
    assert_eq!(semsplat(&["--help"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_semsplat"))
        .env("SEMSPLAT_THREADS", "many")
        .args(["generate", "--out", "/nonexistent/never"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SEMSPLAT_THREADS"));
}

#[test]
fn bad_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = semsplat(&["run", "--bundle", arg(&missing), "--out", arg(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "frame_count = 6\nno_such_key = 1\n").unwrap();
    let o = semsplat(&["generate", "--config", arg(&cfg), "--out", arg(&dir.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn ablate_tabulates_three_settings() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(dir.path(), "label_flip_rate = 0.2\n");
    let out = dir.path().join("ablate");
    let o = semsplat(&["ablate", "--bundle", arg(&bundle), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["no-seg", "seg", "seg+consistency"]);
    assert_eq!(fs::read_to_string(out.join("ablation.txt")).unwrap(), table);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
    for name in names {
        assert!(out.join(name).join("trajectory.txt").exists());
    }
}

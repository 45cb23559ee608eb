use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatalign"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn splatalign")
}

fn synth_small(dir: &Path) {
    fs::write(
        dir.join("spec.toml"),
        "views = 3\nwidth = 48\nheight = 40\nmatches_per_pair = 80\n",
    )
    .unwrap();
    let out = run(&["synth", "--spec", "spec.toml", "--seed", "3", "--out", "scene"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("scene/manifest.toml").exists());
}

#[test]
fn version_lists_formats() {
    let out = bin().arg("--version").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains(env!("CARGO_PKG_VERSION")), "{text}");
}

#[test]
fn staged_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth_small(d);
    let steps: &[&[&str]] = &[
        &["coarse", "--manifest", "scene/manifest.toml", "--out", "pw"],
        &["sync", "--pairwise", "pw", "--out", "poses.txt", "--views", "3"],
        &["confidence", "--manifest", "scene/manifest.toml", "--poses", "poses.txt", "--out", "conf", "--K", "16"],
        &["refine", "--manifest", "scene/manifest.toml", "--poses", "poses.txt", "--out", "ref", "--rounds", "1"],
    ];
    for args in steps {
        let out = run(args, d);
        assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    }
    assert!(d.join("pw/pairs.txt").exists());
    assert!(d.join("conf/conf_000.pfm").exists());
    assert!(d.join("ref/poses.txt").exists());
    assert!(d.join("ref/depth_002.pfm").exists());
    assert!(d.join("poses.config.toml").exists());
}

#[test]
fn pipeline_resume_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth_small(d);
    let out = run(&["--threads", "2", "pipeline", "--manifest", "scene/manifest.toml", "--out", "run"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read_to_string(d.join("run/report.txt")).unwrap();
    assert!(first.contains("ate"), "{first}");
    let out = run(&["pipeline", "--manifest", "scene/manifest.toml", "--out", "run", "--resume"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second = fs::read_to_string(d.join("run/report.txt")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn missing_input_names_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["coarse", "--manifest", "nope/manifest.toml", "--out", "pw"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage coarse failed"), "{err}");

    let out = run(&["pipeline", "--manifest", "nope/manifest.toml", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage"));
}

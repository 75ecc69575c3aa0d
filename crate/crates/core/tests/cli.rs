use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-bridge"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(
        &p,
        r#"{
  "world": { "k": 2, "frames": 3, "height": 8, "width": 8 },
  "ddim": { "t_infer": 10 },
  "bridge": { "task": "control" },
  "ablation": { "tasks": ["control"], "strategies": ["idm_only", "sequential"], "alphas": [0.25], "task_alphas": {} },
  "seeds": [0, 1],
  "out_dir": "out"
}"#,
    )
    .unwrap();
    p
}

#[test]
fn help_documents_flags() {
    let out = bin().args(["ablate", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--alpha", "--strategy", "--steps", "--out-dir"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let top = String::from_utf8_lossy(&bin().arg("--help").output().unwrap().stdout).into_owned();
    for sub in ["generate", "invert", "bridge", "ablate", "metrics"] {
        assert!(top.contains(sub));
    }
}

#[test]
fn bad_alpha_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["bridge", "--alpha", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bridge.alpha"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"world": {"kk": 3}}"#).unwrap();
    let out = run(&["generate", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kk"));
    let out = run(&["generate", "--strategy", "zigzag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bridge.strategy"));
    let out = run(&["generate", "--steps", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ddim.t_infer"));
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = run(&["generate", "--config", cfg, "--seed", "7", "--out-dir", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut n = 0;
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
        n += 1;
    }
    // sequential trace: five stages, each a raw file plus three frames
    assert_eq!(n, 5 * 4 + 1);
}

#[test]
fn ablate_writes_artifacts_and_metrics_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let o = run(&["ablate", "--config", cfg], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let report = latent_bridge::harness::RunReport::load(&out.join("report.json")).unwrap();
    assert_eq!(report.records.len(), 4);
    assert!(out.join("report.csv").exists());
    let cell = out.join("cells/control/sequential/alpha_0.25/seed_1");
    assert!(cell.join("final_f00.pgm").exists());

    let raw = cell.join("final.raw");
    let o = run(&["metrics", "--config", cfg, "--seed", "1", "--clip", raw.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rec = report
        .records
        .iter()
        .find(|r| r.strategy == latent_bridge::Strategy::Sequential && r.seed == 1)
        .unwrap();
    let m = rec.metrics.as_ref().unwrap();
    let fc = v[0]["metrics"]["frame_consistency"].as_f64().unwrap();
    let ce = v[0]["metrics"]["control_match_error"].as_f64().unwrap();
    // dumps store f32 values
    assert!((fc - m.frame_consistency).abs() < 1e-5);
    assert!((ce - m.control_match_error.unwrap()).abs() < 1e-5);

    let o = run(&["invert", "--config", cfg, "--clip", raw.to_str().unwrap(), "--out-dir", "inv"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["branches"]["image"]["latent_corr"]["value"].is_number());
    assert!(dir.path().join("inv/vid_inverted.raw").exists());
}

#[test]
fn dumped_clips_reload_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = latent_bridge::harness::RunConfig::from_json(
        r#"{"world": {"k": 2, "frames": 3, "height": 8, "width": 8}, "ddim": {"t_infer": 10}}"#,
    )
    .unwrap();
    let run = latent_bridge::harness::run_single(&cfg, latent_bridge::Strategy::Sequential).unwrap();
    latent_bridge::harness::dump_trace(dir.path(), &run.trace).unwrap();
    for (name, clip) in run.trace.stages() {
        let back = latent_bridge::harness::clipio::read_raw(&dir.path().join(format!("{name}.raw"))).unwrap();
        assert_eq!(back, latent_bridge::harness::clipio::quantize(clip), "{name}");
    }
}

#[test]
fn cell_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("one.json"),
        r#"{"world": {"k": 2, "frames": 1, "height": 8, "width": 8}, "ddim": {"t_infer": 5},
            "ablation": {"tasks": ["generation"], "strategies": ["idm_only"], "task_alphas": {}}, "seeds": [0]}"#,
    )
    .unwrap();
    let o = run(&["ablate", "--config", "one.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("out/report.json").exists());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[schedule]
kind = "cosine"
steps = 12

[model]
hidden = 8

[pretrain]
steps = 100
batch_size = 32
smoothing_window = 5

[finetune]
rounds = 3
trajectories_per_prompt = 4
eval_samples_per_prompt = 4

[scope]
probe_batch = 8
refresh_every = 2

[seeds]
ablation = [5]

[ablate]
grid = ["full", "adaptive", "fixed:5,10"]

[analysis]
mc_samples = 2000
"#;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adascope"))
        .args(args)
        .env("ADASCOPE_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg.to_string_lossy().into_owned())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let (dir, _) = setup();
    let out = dir.path().join("out");
    assert_eq!(run(&out, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&out, &["pretrain", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&out, &["finetune", "--scope", "sideways"]).status.code(), Some(2));
    assert_eq!(run(&out, &["finetune", "--reward", "beauty"]).status.code(), Some(2));
    assert_eq!(run(&out, &[]).status.code(), Some(2));
    assert_eq!(run(&out, &["--help"]).status.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn missing_config_exits_3_without_outputs() {
    let (dir, _) = setup();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.toml");
    let o = run(&out, &["pretrain", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn invalid_config_lists_every_key() {
    let (dir, _) = setup();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[finetune]\nrounds = 2\nlernrate = 1\n[scope]\nrho = 0.1\nwindoww = 3\n").unwrap();
    let o = run(&out, &["finetune", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("finetune.lernrate") && err.contains("scope.windoww"), "{err}");
    fs::write(&bad, "[finetune]\nclip = 5.0\n[scope]\nwindow = 0\n").unwrap();
    let o = run(&out, &["finetune", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("finetune.clip") && err.contains("scope.window"), "{err}");
    assert!(!out.exists());
}

#[test]
fn runtime_errors_exit_4() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = run(&out, &["finetune", "--config", &cfg, "--checkpoint", "/nonexistent/ck.json"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = run(&out, &["report", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn pretrain_twice_gives_identical_checkpoints() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let ck = out.join("pretrain/seed-1/checkpoint.json");
    assert!(run(&out, &["pretrain", "--config", &cfg, "--seed", "1"]).status.success());
    let first = fs::read(&ck).unwrap();
    assert!(run(&out, &["pretrain", "--config", &cfg, "--seed", "1"]).status.success());
    assert_eq!(fs::read(&ck).unwrap(), first);
    assert!(out.join("pretrain/seed-1/manifest.json").is_file());
}

#[test]
fn finetune_from_checkpoint_with_flags() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    assert!(run(&out, &["pretrain", "--config", &cfg, "--seed", "2"]).status.success());
    let ck = out.join("pretrain/seed-2/checkpoint.json");
    let args = [
        "finetune",
        "--config",
        &cfg,
        "--seed",
        "2",
        "--scope",
        "fixed:5,10",
        "--reward",
        "compress",
        "--rounds",
        "2",
        "--checkpoint",
        ck.to_str().unwrap(),
    ];
    let o = run(&out, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = out.join("finetune/fixed-5-10/seed-2");
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,mean_reward,std_reward,grad_steps_cum,scope_start,scope_end,diversity,wallclock_s"
    );
    assert_eq!(lines.count(), 2);
    let config = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(config.contains("name = \"compress\"") && config.contains("scope = \"fixed:5,10\""));
    assert!(!run_dir.join("pretrained.json").exists());
}

#[test]
fn ablate_probe_corr_report() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = run(&out, &["ablate", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    for slug in ["full", "adaptive", "fixed-5-10"] {
        assert!(out.join("ablate").join(slug).join("seed-5/metrics.csv").is_file(), "{slug}");
    }
    assert!(out.join("ablate/summary.csv").is_file());
    assert!(run(&out, &["probe-scope", "--config", &cfg, "--seed", "5"]).status.success());
    let probe = fs::read_to_string(out.join("probe-scope/seed-5/probe-z0.csv")).unwrap();
    assert!(probe.starts_with("k,delta_s_raw,delta_s_smoothed,delta_p_raw,delta_p_smoothed,d_s,d_p\n"));
    assert!(run(&out, &["analyze-corr", "--config", &cfg]).status.success());
    let corr = fs::read_to_string(out.join("analyze-corr/corr.csv")).unwrap();
    assert!(corr.starts_with("t,tau,i,j,corr_analytic,corr_mc,std_error,uncertainty\n"));
    let o = run(&out, &["report", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["summary.csv", "reward.svg", "reward_vs_steps.svg", "gains.svg", "uncertainty.svg", "manifest.json"] {
        assert!(out.join("report").join(f).is_file(), "{f}");
    }
    let mut entries: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, ["ablate", "analyze-corr", "probe-scope", "report"]);
}

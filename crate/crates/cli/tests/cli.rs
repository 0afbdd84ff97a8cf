//! Command-line contract: exit codes, artifact layout and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_fmwc");

const TINY: &str = r#"{
  "seed": 3,
  "train": {
    "architecture": {"hidden": 16},
    "inference_width": 8,
    "batch": 64,
    "iterations": 40,
    "probe_every": 20,
    "probe_samples": 100,
    "probe_steps": 8
  },
  "sampler": {"samples": 120, "steps": 8},
  "output_dir": "out"
}"#;

fn fmwc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("FMWC_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fmwc(dir, args);
    assert!(
        out.status.success(),
        "fmwc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), TINY).unwrap();
    dir
}

fn trained(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", "run.json", "--out", name];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name).join("model.fmwc.json")
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Data lines of a table, without the provenance and column header.
fn body(p: impl AsRef<Path>) -> Vec<String> {
    read(p).lines().skip(2).map(str::to_string).collect()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = workspace();
    let out = fmwc(dir.path(), &["train", "--config", "absent.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fmwc(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fmwc(dir.path(), &["nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = workspace();
    std::fs::write(dir.path().join("bad.json"), "{\"seed\": \"x\"}").unwrap();
    let out = fmwc(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_is_a_numeric_failure() {
    let dir = workspace();
    let cfg = TINY.replace("\"batch\": 64", "\"batch\": 64, \"lr\": 1e12");
    std::fs::write(dir.path().join("bad.json"), cfg).unwrap();
    let out = fmwc(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mode_fm_trains_the_deterministic_baseline() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "fm", &["--mode", "fm"]);
    let json: serde_json::Value = serde_json::from_str(&read(ckpt)).unwrap();
    assert_eq!(json["model"]["kind"], "fm");
    assert_eq!(json["members"].as_array().unwrap().len(), 1);
    assert_eq!(json["members"][0]["alpha"]["value"], 0.0);
    let cfg: serde_json::Value = serde_json::from_str(&read(dir.path().join("fm/run.json"))).unwrap();
    assert_eq!(cfg["train"]["kl_weight"], 0.0);
}

#[test]
fn members_flag_builds_an_ensemble() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "ens", &["--mode", "fm", "--members", "2"]);
    let json: serde_json::Value = serde_json::from_str(&read(ckpt)).unwrap();
    assert_eq!(json["model"]["kind"], "ensemble");
    assert_eq!(json["members"].as_array().unwrap().len(), 2);
    assert_ne!(json["members"][0], json["members"][1]);
}

#[test]
fn identical_config_gives_identical_checkpoint_bytes() {
    let dir = workspace();
    let a = trained(dir.path(), "a", &[]);
    let b = trained(dir.path(), "b", &[]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a/train_log.csv")).unwrap(),
        std::fs::read(dir.path().join("b/train_log.csv")).unwrap()
    );
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = workspace();
    let out = Command::new(BIN)
        .args(["train", "--config", "run.json", "--out", "s"])
        .current_dir(dir.path())
        .env("FMWC_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let log = read(dir.path().join("s/train_log.csv"));
    assert!(log.starts_with("# schema=1 config_hash="));
    assert!(log.lines().next().unwrap().contains(" seed=11 "));
    let cfg: serde_json::Value = serde_json::from_str(&read(dir.path().join("s/run.json"))).unwrap();
    assert_eq!(cfg["train"]["seed"], 11);

    let bad = Command::new(BIN)
        .args(["train", "--config", "run.json"])
        .current_dir(dir.path())
        .env("FMWC_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn zero_samples_give_empty_valid_files() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    let c = ckpt.to_str().unwrap();
    ok(
        dir.path(),
        &[
            "generate",
            "--checkpoint",
            c,
            "--n",
            "0",
            "--out",
            "g",
            "--dump-trajectories",
        ],
    );
    for f in ["samples.csv", "variance.csv", "trajectories.csv", "quality.csv"] {
        let text = read(dir.path().join("g").join(f));
        assert_eq!(text.lines().count(), 2, "{f}");
        assert!(text.starts_with("# schema=1 "), "{f}");
    }
}

#[test]
fn map_decoder_writes_one_variance_sequence_per_sample() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    let c = ckpt.to_str().unwrap();
    ok(
        dir.path(),
        &["generate", "--checkpoint", c, "--n", "7", "--steps", "5", "--out", "g"],
    );
    let rows = body(dir.path().join("g/variance.csv"));
    assert_eq!(rows.len(), 7 * 5);
    for (r, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], (r / 5).to_string());
        assert_eq!(cells[1], (r % 5).to_string());
        assert!(cells[4].parse::<f64>().unwrap() >= 0.0);
    }
    assert_eq!(body(dir.path().join("g/samples.csv")).len(), 7);
}

#[test]
fn online_controller_without_damping_matches_uniform_bytes() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    let c = ckpt.to_str().unwrap();
    let cfg = TINY.replace(
        "\"output_dir\"",
        "\"controller\": {\"rate\": 0.3, \"boost\": 1.0, \"late\": 0.6, \"gain\": 0.0}, \"output_dir\"",
    );
    std::fs::write(dir.path().join("k0.json"), cfg).unwrap();
    let args = |ctrl: &'static str, out: &'static str| {
        vec![
            "generate",
            "--checkpoint",
            c,
            "--config",
            "k0.json",
            "--n",
            "30",
            "--controller",
            ctrl,
            "--out",
            out,
        ]
    };
    ok(dir.path(), &args("uniform", "u"));
    ok(dir.path(), &args("online", "o"));
    let coords = |d: &str| -> Vec<String> {
        body(dir.path().join(d).join("samples.csv"))
            .iter()
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(coords("u"), coords("o"));
}

#[test]
fn corrupt_or_future_checkpoints_exit_with_four() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    let text = read(&ckpt);
    std::fs::write(dir.path().join("cut.fmwc.json"), &text[..text.len() / 2]).unwrap();
    let out = fmwc(dir.path(), &["generate", "--checkpoint", "cut.fmwc.json", "--n", "2"]);
    assert_eq!(out.status.code(), Some(4));
    std::fs::write(
        dir.path().join("next.fmwc.json"),
        text.replacen("\"schema\": 1", "\"schema\": 2", 1),
    )
    .unwrap();
    let out = fmwc(dir.path(), &["generate", "--checkpoint", "next.fmwc.json", "--n", "2"]);
    assert_eq!(out.status.code(), Some(4));
    let out = fmwc(dir.path(), &["generate", "--checkpoint", "absent.fmwc.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_run_directory_reports_no_runs() {
    let dir = workspace();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = fmwc(dir.path(), &["report", "--run", "empty"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs found"));
}

#[test]
fn report_refuses_mismatched_schema() {
    let dir = workspace();
    let runs = dir.path().join("runs");
    std::fs::create_dir(&runs).unwrap();
    let table = "table,method,scoring,metric,value,trajectories,flops_ratio\nquality,fm,map,misplacement,0.05,1,1\n";
    std::fs::write(
        runs.join("a.csv"),
        format!("# schema=1 config_hash=aa seed=0 table=quality\n{table}"),
    )
    .unwrap();
    std::fs::write(
        runs.join("b.csv"),
        format!("# schema=2 config_hash=bb seed=0 table=quality\n{table}"),
    )
    .unwrap();
    let out = fmwc(dir.path(), &["report", "--run", "runs"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!runs.join("report.csv").exists());
}

#[test]
fn report_reproduces_stored_rows_and_figures() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    let c = ckpt.to_str().unwrap();
    ok(
        dir.path(),
        &[
            "filter",
            "--checkpoint",
            c,
            "--n",
            "80",
            "--out",
            "runs/filter",
            "--keep",
            "0.9",
        ],
    );
    ok(
        dir.path(),
        &[
            "adapt",
            "--checkpoint",
            c,
            "--n",
            "40",
            "--budgets",
            "2,4",
            "--out",
            "runs/adapt",
        ],
    );
    ok(
        dir.path(),
        &[
            "diagnose",
            "--checkpoint",
            c,
            "--n",
            "40",
            "--points",
            "40",
            "--reference",
            "16",
            "--probes",
            "1,2",
            "--grid",
            "6",
            "--field-t",
            "0.25",
            "--out",
            "runs/diag",
        ],
    );
    let stored: Vec<String> = ["adapt/adapt.csv", "diag/diagnose.csv", "filter/filtering.csv"]
        .iter()
        .flat_map(|f| body(dir.path().join("runs").join(f)))
        .collect();
    let kept = body(dir.path().join("runs/filter/kept.csv"));
    assert_eq!(kept.len(), 72);

    let out = ok(dir.path(), &["report", "--run", "runs", "--figures"]);
    let merged = body(dir.path().join("runs/report.csv"));
    assert_eq!(merged, stored);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("temporal_ratio"));
    assert!(stdout.contains("misplacement"));

    let field = read(dir.path().join("runs/figures/variance_divergence_field.svg"));
    assert!(field.contains("std norm of velocity at t = 0.25"));
    assert!(field.contains("|divergence| at t = 0.25"));
    assert_eq!(field.matches("fill=\"#").count(), 2 * 36);
    assert!(dir.path().join("runs/figures/auprc.svg").is_file());
    assert!(dir.path().join("runs/figures/quality_vs_steps.svg").is_file());

    // A second report over the same directory ignores its own output.
    ok(dir.path(), &["report", "--run", "runs"]);
    assert_eq!(body(dir.path().join("runs/report.csv")), stored);
}

#[test]
fn score_recomputes_stored_readouts() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    let c = ckpt.to_str().unwrap();
    ok(dir.path(), &["generate", "--checkpoint", c, "--n", "60", "--out", "g"]);
    ok(dir.path(), &["score", "--run", "g", "--fit-head"]);
    let samples = body(dir.path().join("g/samples.csv"));
    let scores = body(dir.path().join("g/scores.csv"));
    assert_eq!(samples.len(), scores.len());
    for (s, r) in samples.iter().zip(&scores) {
        let s: Vec<&str> = s.split(',').collect();
        let r: Vec<&str> = r.split(',').collect();
        assert_eq!(&s[4..7], &r[1..4]);
        let p: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert!(dir.path().join("g/head.json").is_file());
}

#[test]
fn baseline_checkpoints_filter_by_dispersion() {
    let dir = workspace();
    let mc = trained(dir.path(), "mc", &["--mode", "mc-dropout", "--dropout", "0.1"]);
    ok(
        dir.path(),
        &[
            "filter",
            "--checkpoint",
            mc.to_str().unwrap(),
            "--n",
            "40",
            "--out",
            "f",
        ],
    );
    let rows = body(dir.path().join("f/filtering.csv"));
    let disp = rows.iter().find(|r| r.contains(",dispersion,auprc,")).unwrap();
    let cells: Vec<&str> = disp.split(',').collect();
    assert_eq!(cells[1], "mc_dropout");
    assert_eq!(cells[5], "5");
}

#[test]
fn edit_writes_success_rates() {
    let dir = workspace();
    let ckpt = trained(dir.path(), "m", &[]);
    ok(
        dir.path(),
        &[
            "edit",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--edits",
            "20",
            "--out",
            "e",
            "--mask",
            "x",
        ],
    );
    let rows = body(dir.path().join("e/editing.csv"));
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r.contains("success_rate")) {
        let v: f64 = r.split(',').nth(4).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

use std::path::Path;
use std::process::{Command, Output};

fn hetpfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetpfl"))
        .args(args)
        .env_remove("HETPFL_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bundled_config() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic.json").to_string()
}

/// The bundled config shrunk to a quick single-seed run.
const QUICK: [&str; 12] = [
    "--seeds", "0", "--rounds", "2", "--synthetic-n", "900", "--fusion-epochs", "5", "--eval-grid", "50",
    "--allow-nonstandard-epochs", "--tau-c=3",
];

fn quick_run(dir: &Path, extra: &[&str]) -> Output {
    let cfg = bundled_config();
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", cfg.as_str(), "--out", out];
    args.extend(QUICK);
    args.extend(["--tau-p", "3"]);
    args.extend(extra);
    hetpfl(&args)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn hv_worked_example() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "pts.csv", "0.2,0.4\n0.4,0.2\n");
    let o = hetpfl(&["hv", &p]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<Vec<f64>> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!((lines[0][0] - 0.60).abs() < 1e-12);
    assert!((lines[1][3] - 0.12).abs() < 1e-12);
    assert!((lines[2][3] - 0.12).abs() < 1e-12);
}

#[test]
fn hv_of_empty_file_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "empty.csv", "");
    let o = hetpfl(&["hv", &p]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "hv 0");
}

#[test]
fn hv_point_outside_box_contributes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "pts.csv", "0.5,0.5\n1.2,0.1\n");
    let o = hetpfl(&["hv", &p]);
    assert!(o.status.success());
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert_eq!(last.split_whitespace().last().unwrap(), "0");
}

#[test]
fn hv_malformed_input_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [("text.csv", "x,y\n"), ("wide.csv", "0.1,0.2,0.3\n"), ("nan.csv", "NaN,0.1\n")] {
        let p = write(tmp.path(), name, text);
        assert_eq!(hetpfl(&["hv", &p]).status.code(), Some(2), "{name}");
    }
    let p = write(tmp.path(), "ok.csv", "0.1,0.2\n");
    assert_eq!(hetpfl(&["hv", &p, "--r", "1"]).status.code(), Some(2));
    assert_eq!(hetpfl(&["hv", &p, "--r", "0,1"]).status.code(), Some(2));
}

#[test]
fn unknown_flag_and_bad_config_are_usage_errors() {
    assert_eq!(hetpfl(&["run", "--no-such-flag"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "bad.json", r#"{"clients": 3, "surprise": true}"#);
    let o = hetpfl(&["run", &p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
    let p = write(tmp.path(), "zero.json", r#"{"clients": 0}"#);
    assert_eq!(hetpfl(&["run", &p]).status.code(), Some(2));
    assert_eq!(hetpfl(&["run", "/nonexistent/config.json"]).status.code(), Some(2));
}

#[test]
fn run_writes_outputs_and_eval_reproduces_them() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let o = quick_run(&dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("global HV"));
    for f in ["config.json", "summary.json", "seed-0/checkpoint.json", "seed-0/telemetry.jsonl", "seed-0/report.json", "seed-0/front-global.csv", "seed-0/front-local-0.csv"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["local_hv"]["mean"].as_f64().unwrap() > 0.0);
    assert!(summary["global_hv"]["mean"].as_f64().unwrap() > 0.0);

    let run = dir.to_str().unwrap();
    let o = hetpfl(&["eval", run, "--m", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["front-global.csv", "front-local-0.csv", "front-local-1.csv", "front-local-2.csv"] {
        assert_eq!(
            std::fs::read(dir.join("seed-0").join(f)).unwrap(),
            std::fs::read(dir.join("eval-m50/seed-0").join(f)).unwrap(),
            "{f}"
        );
    }

    let hv_at = |m: &str| -> f64 {
        let o = hetpfl(&["eval", run, "--m", m]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("eval-m{m}/seed-0/report.json"))).unwrap())
                .unwrap();
        r["global"]["hv"].as_f64().unwrap()
    };
    assert!(hv_at("10") <= hv_at("1000") + 1e-12);
}

#[test]
fn rerun_gives_identical_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(quick_run(&a, &[]).status.success());
    assert!(quick_run(&b, &[]).status.success());
    assert_eq!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(b.join("summary.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("seed-0/checkpoint.json")).unwrap(),
        std::fs::read(b.join("seed-0/checkpoint.json")).unwrap()
    );
}

#[test]
fn nonstandard_epochs_warn_and_proceed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundled_config();
    let out = tmp.path().join("run");
    let mut args = vec!["run", cfg.as_str(), "--out", out.to_str().unwrap()];
    args.extend(&QUICK[..10]);
    args.extend(["--tau-c", "2", "--tau-p", "2"]);
    let o = hetpfl(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: tau_c + tau_p = 4"), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("tau_c + tau_p"));
}

#[test]
fn environment_sets_default_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundled_config();
    let mut args = vec!["run", cfg.as_str()];
    args.extend(QUICK);
    args.extend(["--tau-p", "3"]);
    let o = Command::new(env!("CARGO_BIN_EXE_hetpfl"))
        .args(&args)
        .env("HETPFL_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].as_ref().unwrap().path().join("summary.json").exists());
}

#[test]
fn corrupt_checkpoint_fails_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert!(quick_run(&dir, &[]).status.success());
    let ckpt = dir.join("seed-0/checkpoint.json");
    let text = std::fs::read_to_string(&ckpt).unwrap();
    std::fs::write(&ckpt, text.replacen("\"rounds\":2", "\"rounds\":3", 1)).unwrap();
    let o = hetpfl(&["eval", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    std::fs::remove_file(&ckpt).unwrap();
    assert_eq!(hetpfl(&["eval", dir.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn gen_data_output_loads_as_csv_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = hetpfl(&["gen-data", "--n", "600", "--seed", "3", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(data.join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 601);
    assert_eq!(text.lines().next().unwrap(), "x1,x2,group,label");

    let cfg = write(
        tmp.path(),
        "csv.json",
        r#"{"dataset": {"kind": "csv", "path": "data/data.csv", "schema": "data/schema.json"},
            "clients": 2, "seeds": [0], "eval_grid": 20, "allow_nonstandard_epochs": true,
            "training": {"rounds": 1, "tau_c": 2, "tau_p": 2, "fusion_epochs": 2}}"#,
    );
    let out = tmp.path().join("run");
    let o = hetpfl(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("seed-0/front-local-1.csv").exists());
}

#[test]
fn gradcheck_passes_on_clean_tree() {
    let o = hetpfl(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("sigmoid") && text.contains("fusion_chain") && text.contains("nes_toy"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn bundled_config_completes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundled_config();
    let out = tmp.path().join("run");
    let o = hetpfl(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).is_empty(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 5);
    for key in ["local_hv", "global_hv"] {
        let mean = summary[key]["mean"].as_f64().unwrap();
        assert!(mean > 0.0 && mean <= 1.0, "{key} {mean}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundled_config();
    let mut dirs = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("t{threads}"));
        let mut args = vec!["run", cfg.as_str(), "--out", out.to_str().unwrap()];
        args.extend(QUICK);
        args.extend(["--tau-p", "3"]);
        let o = Command::new(env!("CARGO_BIN_EXE_hetpfl"))
            .args(&args)
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        dirs.push(out);
    }
    for f in ["summary.json", "seed-0/checkpoint.json", "seed-0/telemetry.jsonl", "seed-0/front-global.csv"] {
        assert_eq!(std::fs::read(dirs[0].join(f)).unwrap(), std::fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
}

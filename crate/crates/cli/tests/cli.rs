mod common;

use common::{dir_contents, gbdsde, small_json, stderr, stdout, write_config};
use serde_json::{json, Value};

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

fn run_small(dir: &std::path::Path, name: &str, v: &Value, cmd: &str) -> std::process::Output {
    let cfg = write_config(dir, &format!("{name}.json"), v);
    let out = dir.join(name);
    gbdsde(&[cmd, "--config", path(&cfg), "--out", path(&out)])
}

fn validate(dir: &std::path::Path, name: &str, v: &Value) -> Value {
    let cfg = write_config(dir, &format!("{name}.json"), v);
    let o = gbdsde(&["validate", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn default_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = gbdsde(&["run-suite", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains(", 0 failed"));
    for f in ["report.json", "summary.csv", "config.json", "gbdsde_solution.csv", "representation.csv", "hunt_paths.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], json!(true));
    for check in ["gbm-mean-zero", "hunt-bracket", "gspde-contraction", "gbdsde-contraction", "comparison-shift", "comparison-raise"] {
        assert!(
            report["checks"].as_array().unwrap().iter().any(|c| c["check"] == json!(check)),
            "{check} not reported"
        );
    }
}

#[test]
fn every_subcommand_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in gbdsde_cli::commands::SUITE {
        let o = run_small(tmp.path(), cmd, &small_json(), cmd);
        assert!(matches!(o.status.code(), Some(0) | Some(1)), "{cmd}: {}", stderr(&o));
        let r = gbdsde_cli::report::read_report(&tmp.path().join(cmd)).unwrap();
        assert_eq!(r.command, cmd);
        assert!(!r.checks.is_empty(), "{cmd} ran no checks");
    }
}

#[test]
fn contraction_violation_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_json();
    v["scenarios"]["matrices"] = json!([[[2.0]]]);
    let o = run_small(tmp.path(), "big", &v, "solve-gspde");
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("contraction"), "{err}");
    assert!(!tmp.path().join("big").exists());
}

#[test]
fn unknown_keys_and_missing_fields_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_json();
    v["gbm"]["pathz"] = json!(3);
    let o = run_small(tmp.path(), "typo", &v, "simulate-gbm");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field `pathz`"), "{}", stderr(&o));

    let mut v = small_json();
    v["problem"].as_object_mut().unwrap().remove("terminal");
    let o = run_small(tmp.path(), "missing", &v, "simulate-gbm");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing field `terminal`"), "{}", stderr(&o));

    let mut v = small_json();
    v["schema"] = json!("other/1");
    let o = run_small(tmp.path(), "schema", &v, "simulate-gbm");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_reports_positive_margins() {
    let o = gbdsde(&["validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for k in ["gspde", "bdsde"] {
        assert!(v[k]["margin"].as_f64().unwrap() > 0.0);
        let kappa = v[k]["kappa"].as_f64().unwrap();
        assert!(kappa > 0.0 && kappa < 1.0);
    }
}

#[test]
fn margins_shrink_with_sigma_bar() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_json();
    v["problem"]["g"][0]["terms"][1]["z_coeff"] = json!(0.5);
    let base = validate(tmp.path(), "base", &v);
    v["scenarios"]["matrices"] = json!([[[1.0]], [[2.0]]]);
    let doubled = validate(tmp.path(), "doubled", &v);
    let alpha = base["gspde"]["alpha_bar"].as_f64().unwrap();
    let big_lambda = base["Lambda"].as_f64().unwrap();
    assert_eq!(base["sigma_bar"], json!(1.0));
    assert_eq!(doubled["sigma_bar"], json!(2.0));
    let shrink = |k: &str| base[k]["margin"].as_f64().unwrap() - doubled[k]["margin"].as_f64().unwrap();
    assert!((shrink("gspde") - 3.0 * alpha).abs() < 1e-12);
    assert!((shrink("bdsde") - 3.0 * alpha * big_lambda).abs() < 1e-12);
}

#[test]
fn non_convergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_json();
    v["pde"]["max_iter"] = json!(1);
    let o = run_small(tmp.path(), "short", &v, "solve-gspde");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("did not converge"));
}

#[test]
fn failing_check_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_json();
    v["hunt"]["bracket"]["tolerance"] = json!(0.0);
    let o = run_small(tmp.path(), "strict", &v, "simulate-hunt");
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL hunt-bracket"));
    let r = gbdsde_cli::report::read_report(&tmp.path().join("strict")).unwrap();
    assert!(!r.pass);
}

#[test]
fn report_merge() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = run_small(tmp.path(), "ok", &small_json(), "simulate-hunt");
    assert_eq!(ok.status.code(), Some(0));
    let mut v = small_json();
    v["hunt"]["bracket"]["tolerance"] = json!(0.0);
    run_small(tmp.path(), "bad", &v, "simulate-hunt");
    let (a, b) = (tmp.path().join("ok"), tmp.path().join("bad"));

    let one = gbdsde(&["report-merge", path(&a)]);
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout(&one), std::fs::read_to_string(a.join("summary.csv")).unwrap());

    let twice = gbdsde(&["report-merge", path(&a), path(&a)]);
    let lines: Vec<String> = stdout(&twice).lines().map(String::from).collect();
    let single: Vec<String> = stdout(&one).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2 * single.len() - 1);
    assert_eq!(lines[1..single.len()], lines[single.len()..]);

    let merged = tmp.path().join("merged.csv");
    let mixed = gbdsde(&["report-merge", path(&a), path(&b), "--out", path(&merged)]);
    assert_eq!(mixed.status.code(), Some(0));
    let text = std::fs::read_to_string(&merged).unwrap();
    assert!(text.lines().any(|l| l.ends_with(",true")));
    assert!(text.lines().any(|l| l.ends_with(",false")));

    std::fs::write(b.join("report.json"), "{\"schema\": 3}").unwrap();
    let broken = gbdsde(&["report-merge", path(&a), path(&b)]);
    assert_eq!(broken.status.code(), Some(2));
    assert!(stderr(&broken).contains("malformed report"));

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(gbdsde(&["report-merge", path(&empty)]).status.code(), Some(2));
}

#[test]
fn seed_override_keeps_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", &small_json());
    let mut reports = Vec::new();
    for seed in ["1", "2"] {
        let out = tmp.path().join(seed);
        let o = gbdsde(&["simulate-hunt", "--config", path(&cfg), "--seed", seed, "--out", path(&out)]);
        assert!(matches!(o.status.code(), Some(0) | Some(1)));
        reports.push(gbdsde_cli::report::read_report(&out).unwrap());
    }
    assert_eq!(reports[0].config_hash, reports[1].config_hash);
    assert_eq!((reports[0].seed, reports[1].seed), (1, 2));
    assert_ne!(
        dir_contents(&tmp.path().join("1")).iter().find(|f| f.0 == "hunt_paths.csv"),
        dir_contents(&tmp.path().join("2")).iter().find(|f| f.0 == "hunt_paths.csv")
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.json", &small_json());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = gbdsde(&["--threads", "1", "solve-gspde", "--config", path(&cfg), "--out", path(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = gbdsde(&["solve-gspde", "--threads", "2", "--config", path(&cfg), "--out", path(&b)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(dir_contents(&a), dir_contents(&b));
    assert_eq!(gbdsde(&["--threads", "0", "validate"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(gbdsde(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(gbdsde(&["report-merge"]).status.code(), Some(2));
    assert_eq!(gbdsde(&["--help"]).status.code(), Some(0));
    let o = gbdsde(&["validate", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/config.json"));
}

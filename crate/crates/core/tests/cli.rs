mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;
use devsafe::cli::{apply_override, load_config, report_from_summary};
use devsafe::experiment::{base_model, load_or_generate, parse_summary_statistics, run_experiment, write_experiment};
use devsafe::Error;
use serde_json::json;

fn devsafe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_devsafe"))
        .args(args)
        .env("DEVSAFE_THREADS", "1")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, v: &serde_json::Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.display().to_string()
}

#[test]
fn overrides_follow_dotted_paths() {
    let mut v = json!({"solver": {"eta": 0.1, "batch": {"pairs": 4}}, "seeds": [0, 1]});
    apply_override(&mut v, "solver.eta=0.5").unwrap();
    apply_override(&mut v, "solver.batch.pairs=16").unwrap();
    apply_override(&mut v, "seeds.1=7").unwrap();
    apply_override(&mut v, "method=rm").unwrap();
    assert_eq!(v, json!({"solver": {"eta": 0.5, "batch": {"pairs": 16}}, "seeds": [0, 7], "method": "rm"}));
    assert!(apply_override(&mut v, "seeds.9=1").is_err());
    assert!(apply_override(&mut v, "novalue").is_err());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config_json();
    v["solver"]["gamma1"] = json!(1.5);
    let path = write_config(dir.path(), &v);
    match load_config(Path::new(&path), &[], None) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "solver.gamma1"),
        other => panic!("{other:?}"),
    }
    v["solver"]["gamma1"] = json!(0.9);
    v["solver"]["typo"] = json!(1);
    let path = write_config(dir.path(), &v);
    match load_config(Path::new(&path), &[], None) {
        Err(Error::Config { field, .. }) => assert!(field.starts_with("solver"), "{field}"),
        other => panic!("{other:?}"),
    }
    let empty = load_config(Path::new(&path), &["solver.typo=null".into()], Some(&[]));
    assert!(matches!(empty, Err(Error::Config { .. })));
}

#[test]
fn report_counts_retained_seeds() {
    let mut s = String::from("seed,selected_step,test_dev_safety_acc,test_delta_acc,retained\n");
    for (i, ds) in [0.01, -0.02, 0.0, 0.03, 0.05].iter().enumerate() {
        s += &format!("{i},10,{ds},0.1,{}\n", u8::from(*ds >= 0.0));
    }
    let r = report_from_summary(&s).unwrap();
    assert_eq!(r.seeds, 5);
    assert_eq!(r.retention_ratio, 0.8);
    assert!((r.delta_acc_mean - 0.1).abs() < 1e-15);
}

#[test]
fn zero_iterations_is_identity_development() {
    let mut cfg = small_config();
    cfg.solver.iterations = 0;
    let scenario = load_or_generate(&cfg.scenario).unwrap();
    let base = base_model(&cfg, &scenario).unwrap();
    let res = run_experiment(&cfg, &scenario, &base, 1).unwrap();
    let s = &res.rounds[0].summary;
    assert_eq!(s.retention_ratio, 1.0);
    assert_eq!(s.delta_acc_mean, 0.0);
    for r in &s.rows {
        assert_eq!(r.test_dev_safety_acc, 0.0);
        assert_eq!(r.test_dev_safety_ce, 0.0);
        assert_eq!(r.test_delta_acc, 0.0);
    }
    assert!(res.rounds[0].runs.iter().all(|r| r.model == base));
}

/// Values of `column` at `step` in a trajectory CSV.
fn trajectory_value(csv: &str, step: u64, column: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let c = header.iter().position(|h| *h == column).unwrap();
    lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0].parse::<u64>().unwrap() == step)
        .map(|f| f[c].parse().unwrap())
        .unwrap()
}

#[test]
fn develop_verb_writes_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config_json());
    let out = dir.path().join("run");
    let o = devsafe(&["develop", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3,4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).take_while(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    // statistics recomputed from each trajectory at its kept step
    let mut ds = Vec::new();
    let mut da = Vec::new();
    for r in &rows {
        let traj = fs::read_to_string(out.join(format!("trajectory_seed{}.csv", r[0]))).unwrap();
        let step: u64 = r[1].parse().unwrap();
        ds.push(trajectory_value(&traj, step, "test_dev_safety_acc"));
        da.push(trajectory_value(&traj, step, "test_delta_acc"));
        assert!(out.join(format!("model_seed{}.json", r[0])).exists());
    }
    let stats = parse_summary_statistics(&summary).unwrap();
    let get = |k: &str| stats.iter().find(|(n, _)| n == k).unwrap().1;
    let retained = ds.iter().filter(|&&v| v >= 0.0).count() as f64 / ds.len() as f64;
    assert_eq!(get("retention_ratio"), retained);
    let (mean, std) = devsafe::experiment::mean_std(&da);
    assert_eq!(get("delta_acc_mean"), mean);
    assert_eq!(get("delta_acc_std"), std);

    let o = devsafe(&["report", "--summary", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("retention ratio"));
}

#[test]
fn verbs_exit_nonzero_on_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config_json();
    v["seeds"] = json!([]);
    let cfg = write_config(dir.path(), &v);
    let o = devsafe(&["develop", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds"));
    let o = devsafe(&["develop", "--config", "/nonexistent.json", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = devsafe(&["frobnicate"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn generate_train_base_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, serde_json::to_string(&small_spec()).unwrap()).unwrap();
    let scen = dir.path().join("scenario");
    let o = devsafe(&["generate", "--config", spec.to_str().unwrap(), "--out", scen.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut v = small_config_json();
    v["scenario"] = json!({ "path": scen });
    let cfg = write_config(dir.path(), &v);
    let base = dir.path().join("base");
    let o = devsafe(&["train-base", "--config", &cfg, "--out", base.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = base.join("base_model.json");

    let kkt = dir.path().join("kkt.json");
    let o = devsafe(&["kkt", "--config", &cfg, "--model", model.to_str().unwrap(), "--out", kkt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&kkt).unwrap()).unwrap();
    // at w_old every constraint is exactly tight
    assert_eq!(r["violation"], json!(0.0));

    let heads = dir.path().join("heads.json");
    let o = devsafe(&["diagnose-heads", "--config", &cfg, "--out", heads.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(&heads).unwrap()).unwrap();
    assert!(d["sigma_min_with_heads"].as_f64().unwrap() >= d["sigma_min_shared"].as_f64().unwrap() - 1e-8);
    assert_eq!(d["lemma2"]["holds"], json!(true));
}

#[test]
fn experiment_writer_lays_out_rounds() {
    let mut cfg = small_config();
    cfg.solver.iterations = 10;
    cfg.seeds = vec![0];
    let scenario = load_or_generate(&cfg.scenario).unwrap();
    let base = base_model(&cfg, &scenario).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let res = run_experiment(&cfg, &scenario, &base, 1).unwrap();
    write_experiment(dir.path(), &cfg, &scenario, &res).unwrap();
    assert!(dir.path().join("summary.csv").exists());
    assert!(dir.path().join("base_model.json").exists());
}

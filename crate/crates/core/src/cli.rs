//! Command-line verbs behind the `devsafe` binary.
//!
//! Every verb reads one JSON config; `--override a.b.c=value` edits it
//! before validation and `--seeds 0,1,2` replaces the seed list.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::data::{self, ScenarioSpec};
use crate::error::{Error, Result};
use crate::experiment::{
    base_model, build_development, load_or_generate, mean_std, parse_summary_statistics, run_experiment, worker_count,
    write_experiment, ExperimentConfig, ModelFile,
};
use crate::metrics::{constraint_jacobian_sigma_min, lemma2_check, retention_ratio, Lemma2Report};
use crate::model::ParamVector;
use crate::optimizer::{kkt_report, KktReport};

#[derive(Debug, Parser)]
#[command(name = "devsafe", version, about = "Retention-constrained development of contrastive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario from a scenario spec and save it.
    Generate(CommonArgs),
    /// Train the base model of an experiment config and save it.
    TrainBase(CommonArgs),
    /// Run one development round for every seed.
    Develop(CommonArgs),
    /// Run chained development rounds (`rounds` in the config).
    Multiround(CommonArgs),
    /// Recompute retention ratio and ΔAcc mean (std) from a summary.csv.
    Report(ReportArgs),
    /// KKT residuals of a model on the first round's problem.
    Kkt(ModelArgs),
    /// Constraint-Jacobian conditioning with and without task heads.
    DiagnoseHeads(ModelArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// `dotted.path=value`; the value is parsed as JSON, else taken as a string.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// A summary.csv, or a directory containing one.
    #[arg(long)]
    pub summary: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Model to inspect; the config's base model when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Sets `path` (dot-separated, numeric segments index arrays) in `root`.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("--override", format!("expected KEY=VALUE, got `{assignment}`")))?;
    if key.is_empty() {
        return Err(Error::config("--override", "empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(key, format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                let Value::Object(map) = cur else { unreachable!() };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(Error::config(key, format!("`{part}` is inside a scalar"))),
        };
    }
    Ok(())
}

fn read_json(path: &Path, overrides: &[String]) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        field: "<file>".into(),
        msg: e.to_string(),
    })?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        field: "<json>".into(),
        msg: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    Ok(v)
}

fn typed<T: serde::de::DeserializeOwned>(v: Value, path: &Path) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let field = e.path().to_string();
        Error::Config {
            field: if field == "." { path.display().to_string() } else { field },
            msg: e.into_inner().to_string(),
        }
    })
}

/// Loads an experiment config with overrides and an optional seed list.
pub fn load_config(path: &Path, overrides: &[String], seeds: Option<&[u64]>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = typed(read_json(path, overrides)?, path)?;
    if let Some(s) = seeds {
        cfg.seeds = s.to_vec();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn cmd_generate(a: &CommonArgs) -> Result<()> {
    let spec: ScenarioSpec = typed(read_json(&a.config, &a.overrides)?, &a.config)?;
    let scenario = data::generate_scenario(&spec)?;
    data::save_scenario(&scenario, &a.out)?;
    let sizes = scenario.split_sizes();
    println!(
        "wrote {} records (train {}, val {}, test {}) to {}",
        scenario.records.len(),
        sizes.train,
        sizes.val,
        sizes.test,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train_base(a: &CommonArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides, a.seeds.as_deref())?;
    let scenario = load_or_generate(&cfg.scenario)?;
    let (p, report) = data::make_base_model(&scenario, &cfg.model, &cfg.base)?;
    fs::create_dir_all(&a.out)?;
    ModelFile::from_params(&p).save(&a.out.join("base_model.json"))?;
    write_json(&a.out.join("base_report.json"), &report)?;
    println!(
        "base model: protected accuracy {:.4}, final loss {:.6}",
        report.protected_accuracy, report.final_loss
    );
    Ok(())
}

fn develop(a: &CommonArgs, require_rounds: bool) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides, a.seeds.as_deref())?;
    if require_rounds && cfg.rounds.len() < 2 {
        return Err(Error::config("rounds", "multiround needs at least two targets"));
    }
    if !require_rounds && cfg.rounds.len() > 1 {
        return Err(Error::config("rounds", "develop runs one round; use multiround"));
    }
    let scenario = load_or_generate(&cfg.scenario)?;
    let base = base_model(&cfg, &scenario)?;
    let res = run_experiment(&cfg, &scenario, &base, worker_count())?;
    write_experiment(&a.out, &cfg, &scenario, &res)?;
    for (r, round) in res.rounds.iter().enumerate() {
        let s = &round.summary;
        println!(
            "round {} target {}: retention {:.4}, ΔAcc {:.4} ({:.4})",
            r + 1,
            round.target,
            s.retention_ratio,
            s.delta_acc_mean,
            s.delta_acc_std
        );
    }
    Ok(())
}

pub fn cmd_develop(a: &CommonArgs) -> Result<()> {
    develop(a, false)
}

pub fn cmd_multiround(a: &CommonArgs) -> Result<()> {
    develop(a, true)
}

/// Aggregates recomputed from the per-seed rows of a summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seeds: usize,
    pub retention_ratio: f64,
    pub delta_acc_mean: f64,
    pub delta_acc_std: f64,
}

pub fn report_from_summary(text: &str) -> Result<Report> {
    let rows: Vec<&str> = text.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    let header: Vec<&str> = text.lines().next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Parse {
            path: "summary.csv".into(),
            line: 1,
            field: name.into(),
            msg: "missing column".into(),
        })
    };
    let (ds, da) = (col("test_dev_safety_acc")?, col("test_delta_acc")?);
    let mut dev = Vec::new();
    let mut delta = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        let get = |c: usize, name: &str| -> Result<f64> {
            f.get(c).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: "summary.csv".into(),
                line: i as u64 + 2,
                field: name.into(),
                msg: "not a number".into(),
            })
        };
        dev.push(get(ds, "test_dev_safety_acc")?);
        delta.push(get(da, "test_delta_acc")?);
    }
    let (mean, std) = mean_std(&delta);
    Ok(Report {
        seeds: dev.len(),
        retention_ratio: retention_ratio(&dev)?,
        delta_acc_mean: mean,
        delta_acc_std: std,
    })
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let path = if a.summary.is_dir() { a.summary.join("summary.csv") } else { a.summary.clone() };
    let text = fs::read_to_string(&path)?;
    let r = report_from_summary(&text)?;
    let stored = parse_summary_statistics(&text)?;
    println!("seeds            {}", r.seeds);
    println!("retention ratio  {:.4}", r.retention_ratio);
    println!("ΔAcc(target)     {:.4} ({:.4})", r.delta_acc_mean, r.delta_acc_std);
    for (k, v) in stored {
        let mine = match k.as_str() {
            "retention_ratio" => r.retention_ratio,
            "delta_acc_mean" => r.delta_acc_mean,
            "delta_acc_std" => r.delta_acc_std,
            _ => continue,
        };
        if (mine - v).abs() > 1e-12 * (1.0 + v.abs()) {
            return Err(Error::Invariant(format!("stored {k} = {v} but rows give {mine}")));
        }
    }
    Ok(())
}

fn model_for(cfg: &ExperimentConfig, path: Option<&Path>, scenario: &data::Scenario) -> Result<ParamVector> {
    match path {
        Some(p) => ModelFile::load(p)?.into_params(),
        None => base_model(cfg, scenario),
    }
}

fn first_round(a: &ModelArgs) -> Result<(ExperimentConfig, ParamVector, crate::experiment::Development)> {
    let cfg = load_config(&a.config, &a.overrides, None)?;
    let scenario = load_or_generate(&cfg.scenario)?;
    let w = model_for(&cfg, a.model.as_deref(), &scenario)?;
    let targets = cfg.targets(&scenario);
    let dev = build_development(
        &scenario,
        &w,
        targets[0],
        &targets[1..],
        cfg.constraint_samples,
        cfg.external_pairs,
        cfg.negatives,
        cfg.solver.tau,
        cfg.solver.tau0,
        cfg.seeds[0],
    )?;
    Ok((cfg, w, dev))
}

pub fn cmd_kkt(a: &ModelArgs) -> Result<KktReport> {
    let (cfg, w, dev) = first_round(a)?;
    let r = kkt_report(&dev.problem, &w.flatten(), cfg.solver.beta)?;
    println!("objective        {:.6e}", r.objective);
    println!("stationarity     {:.6e}", r.stationarity);
    println!("violation        {:.6e}", r.violation);
    println!("complementarity  {:.6e}", r.complementarity);
    if let Some(out) = &a.out {
        write_json(out, &r)?;
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadDiagnosis {
    pub sigma_min_shared: f64,
    pub sigma_min_with_heads: Option<f64>,
    pub lemma2: Option<Lemma2Report>,
}

pub fn cmd_diagnose_heads(a: &ModelArgs) -> Result<HeadDiagnosis> {
    let (_, w, dev) = first_round(a)?;
    let specs = &dev.problem.specs;
    let shared = constraint_jacobian_sigma_min(&w, specs, false)?;
    let (with_heads, lemma2) = if w.shape().heads_enabled {
        let l2 = if w.low_rank_updates_vanish() { Some(lemma2_check(&w, specs)?) } else { None };
        (Some(constraint_jacobian_sigma_min(&w, specs, true)?), l2)
    } else {
        (None, None)
    };
    println!("sigma_min without heads  {:.6e}", shared);
    if let Some(s) = with_heads {
        println!("sigma_min with heads     {:.6e}", s);
    }
    if let Some(l) = &lemma2 {
        println!("head bound: lambda_min {:.6e} >= {:.6e}: {}", l.lhs, l.rhs, l.holds);
    }
    let d = HeadDiagnosis {
        sigma_min_shared: shared,
        sigma_min_with_heads: with_heads,
        lemma2,
    };
    if let Some(out) = &a.out {
        write_json(out, &d)?;
    }
    Ok(d)
}

/// Process exit code for an error: 2 for bad configs or inputs, 3 for
/// divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::Develop(a) => cmd_develop(a),
        Command::Multiround(a) => cmd_multiround(a),
        Command::Report(a) => cmd_report(a),
        Command::Kkt(a) => cmd_kkt(a).map(|_| ()),
        Command::DiagnoseHeads(a) => cmd_diagnose_heads(a).map(|_| ()),
    }
}

/// Parses `args`, runs the verb and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

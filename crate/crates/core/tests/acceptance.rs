//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. Runs without the libtest harness so the lines are always
//! shown.

#![allow(clippy::excessive_precision)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use devsafe::cli::load_config;
use devsafe::data::{generate_scenario, load_scenario, save_scenario};
use devsafe::experiment::{
    all_task_train_dev_safety, base_model, load_or_generate, run_experiment, worker_count, write_experiment, ExperimentConfig,
    ExperimentResult, Method, Summary,
};
use devsafe::metrics::{lemma1_bound, Lemma1Inputs};
use devsafe::optimizer::{run, theorem_preset, EtaMode, GenericProblem, PresetBatches, SolverConfig, TheoremInputs};

type Criterion = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    load_config(&config_path(name), &[], None).unwrap()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let worst = gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let ok = worst.iter().all(|(_, e)| *e <= FD_TOL) && secs < 60.0;
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(ok, format!("max rel err over {FD_INSTANCES} instances: {}; {secs:.1}s", parts.join(", ")))
}

fn criterion_2() -> Outcome {
    let (mut one, mut traj) = (0.0f64, 0.0f64);
    for seed in 0..4 {
        let (a, b) = collapse_errors(seed, 100);
        one = one.max(a);
        traj = traj.max(b);
    }
    outcome(one <= 1e-12 && traj <= 1e-10, format!("one step {one:.1e} (<= 1e-12), 100-step trajectory {traj:.1e} (<= 1e-10)"))
}

fn criterion_3() -> Outcome {
    let (mut p, mut c) = (0.0f64, 0.0f64);
    for (seed, g1, g2) in [(0, 0.3, 0.6), (1, 0.1, 0.25), (2, 0.5, 0.05), (3, 0.9, 0.9)] {
        let (a, b) = contraction_errors(seed, g1, g2, 50);
        p = p.max(a);
        c = c.max(b);
    }
    outcome(
        p <= 1e-12 && c <= 1e-12,
        format!("pair averages {p:.1e}, constraint averages {c:.1e} relative to |u0 - g| over 50 steps"),
    )
}

fn quadratic(dim: usize) -> GenericProblem {
    if dim == 2 {
        GenericProblem::new(2, |w| {
            let d = [w[0] - 1.0, w[1] - 1.0];
            Ok((0.5 * (d[0] * d[0] + d[1] * d[1]), d.to_vec()))
        })
        .with_constraint(|w| Ok((w[0], vec![1.0, 0.0])))
    } else {
        GenericProblem::new(1, |w| Ok(((w[0] - 1.0).powi(2), vec![2.0 * (w[0] - 1.0)]))).with_constraint(|w| Ok((w[0], vec![1.0])))
    }
}

/// First step at which violation <= 1e-3 and stationarity <= 1e-2, plus the
/// final report.
fn kkt_run(dim: usize, cfg: &SolverConfig) -> (Option<u64>, f64, f64) {
    let out = run(&quadratic(dim), cfg, vec![0.0; dim]).unwrap();
    let hit = out
        .trajectory
        .iter()
        .find(|l| l.kkt.violation <= 1e-3 && l.kkt.stationarity <= 1e-2)
        .map(|l| l.step);
    let last = &out.trajectory.last().unwrap().kkt;
    (hit, last.violation, last.stationarity)
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let cfg = SolverConfig { log_every: 1, ..full_info_config(1e-3, 1e4, 5000) };
    let mut ok = true;
    let mut parts = Vec::new();
    for dim in [2, 1] {
        let (hit, v, s) = kkt_run(dim, &cfg);
        ok &= hit.is_some();
        let at = hit.map_or("never".to_string(), |t| format!("at step {t}"));
        parts.push(format!("{dim}-D reached {at}, final violation {v:.1e} stationarity {s:.1e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 10.0;
    // With theta < 1 the same step size and penalty converge.
    let damped = SolverConfig { theta: 0.1, ..cfg };
    let (h2, _, _) = kkt_run(2, &damped);
    let (h1, _, _) = kkt_run(1, &damped);
    let mut detail = format!("{}; {secs:.1}s", parts.join("; "));
    if !ok {
        detail += "\n      note: full-information mode is gradient descent on the penalty with eta*beta/m = 10 > 2, so the \
                   iterates oscillate across w1 = 0 instead of converging";
    }
    detail += &format!(
        "\n      note: theta = 0.1 at the same eta and beta reaches the thresholds at steps {:?} (2-D) and {:?} (1-D)",
        h2, h1
    );
    outcome(ok, detail)
}

fn criterion_5() -> Outcome {
    let (lemma, sigma) = head_bound_margins(50);
    outcome(
        lemma >= -1e-8 && sigma >= -1e-8,
        format!("min lhs - rhs {lemma:.3e}, min sigma_min(heads) - sigma_min(shared) {sigma:.3e} over 50 instances"),
    )
}

/// Penalty and RM runs on the desk-scale scenario.
struct Desk {
    penalty: ExperimentResult,
    penalty_100: Summary,
    rm: Vec<(f64, Summary)>,
    secs: f64,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let t = Instant::now();
        let cfg = load("develop.json");
        let scenario = load_or_generate(&cfg.scenario).unwrap();
        let base = base_model(&cfg, &scenario).unwrap();
        let threads = worker_count();
        let go = |c: &ExperimentConfig| run_experiment(c, &scenario, &base, threads).unwrap();
        let penalty = go(&cfg);
        let few = ExperimentConfig { constraint_samples: Some(100), ..cfg.clone() };
        let penalty_100 = go(&few).rounds.remove(0).summary;
        let rm = [0.1, 1.0, 10.0]
            .iter()
            .map(|&alpha| {
                let c = ExperimentConfig { method: Method::Rm, alpha, ..cfg.clone() };
                (alpha, go(&c).rounds.remove(0).summary)
            })
            .collect();
        Desk {
            penalty,
            penalty_100,
            rm,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

fn criterion_6() -> Outcome {
    let g2 = g2_with_nonpositive_averages(20);
    // A converged run: decaying step size and exact constraint averages.
    let mut cfg = load("develop.json");
    cfg.solver.eta_mode = EtaMode::Cosine;
    cfg.constraint_samples = Some(1000);
    cfg.solver.batch.constraint_samples = Some(1000);
    cfg.seeds = vec![1, 2];
    let scenario = load_or_generate(&cfg.scenario).unwrap();
    let base = base_model(&cfg, &scenario).unwrap();
    let res = run_experiment(&cfg, &scenario, &base, worker_count()).unwrap();
    let (mut worst, mut satisfied, mut decayed, mut active) = (0.0f64, 0, 0, 0);
    for run in &res.rounds[0].runs {
        let last = run.trajectory.last().unwrap();
        for (k, &h) in last.kkt.h.iter().enumerate() {
            if h > 0.0 {
                active += 1;
                continue;
            }
            satisfied += 1;
            let peak = run.trajectory.iter().map(|l| l.effective_weights[k]).fold(0.0, f64::max);
            if peak > 0.0 {
                decayed += 1;
                worst = worst.max(last.effective_weights[k] / peak);
            } else {
                worst = worst.max(last.effective_weights[k]);
            }
        }
    }
    outcome(
        g2 == 0.0 && worst <= 0.01 && decayed > 0,
        format!(
            "max |G2| with u <= 0: {g2:e}; {satisfied} satisfied constraints ({decayed} with a positive peak) end at \
             {worst:.1e} of peak (<= 1e-2); {active} active constraints keep their multipliers"
        ),
    )
}

fn criterion_7() -> Outcome {
    let d = desk();
    let s = &d.penalty.rounds[0].summary;
    let min_train = s.rows.iter().map(|r| r.train_dev_safety_ce).fold(f64::INFINITY, f64::min);
    let a = min_train >= -1e-3;
    let b = s.retention_ratio >= d.penalty_100.retention_ratio;
    let c = s.delta_acc_mean > 0.0;
    let fails = |s: &Summary| s.rows.iter().filter(|r| r.test_dev_safety_acc < 0.0).count();
    let rm_fails: usize = d.rm.iter().map(|(_, s)| fails(s)).sum();
    let pen_fails = fails(s);
    let dd = rm_fails >= 1 && pen_fails < rm_fails;
    let time = d.secs <= 600.0;
    let rm_ret: Vec<String> = d.rm.iter().map(|(a, s)| format!("alpha {a}: {}", s.retention_ratio)).collect();
    outcome(
        a && b && c && dd && time,
        format!(
            "(a) min train DevSafety(ce) {min_train:.2e} {}; (b) retention 4k {} vs 100 {} {}; (c) mean dAcc {:.4} {}; \
             (d) failing cells RM {rm_fails}/15 vs penalty {pen_fails}/5 {} [RM retention {}]; {:.0}s",
            mark(a),
            s.retention_ratio,
            d.penalty_100.retention_ratio,
            mark(b),
            s.delta_acc_mean,
            mark(c),
            mark(dd),
            rm_ret.join(", "),
            d.secs
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn theorem_inputs(epsilon: f64, delta: f64) -> TheoremInputs {
    TheoremInputs {
        epsilon,
        delta,
        tau: 0.05,
        c_g: 0.5,
        l_g: 1.0,
        l_grad_g: 1.0,
        sigma_grad_g: 1.0,
        l_h: 1.0,
        l_grad_h: 1.0,
        sigma_h: 1.0,
        sigma_grad_h: 1.0,
        iteration_scale: 1.0,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_8() -> Outcome {
    const B: PresetBatches = PresetBatches {
        pairs: 8,
        text_negatives: 16,
        image_negatives: 16,
        constraints: 2,
        constraint_samples: 32,
    };
    // (epsilon, delta, beta, theta, gamma, eta) from a 50-digit evaluation
    let frozen = [
        (0.1, 0.5, 20.0, 3.7202380952380952381e-8, 7.4404761904761904762e-9, 7.5939042124974519413e-13),
        (0.05, 0.5, 40.0, 2.3251488095238095238e-9, 4.6502976190476190476e-10, 2.3730950664054537317e-14),
        (0.2, 0.25, 20.0, 1.4880952380952380952e-7, 2.9761904761904761905e-8, 3.0375616849989807765e-12),
    ];
    let mut worst = 0.0f64;
    for (eps, delta, beta, theta, gamma, eta) in frozen {
        let s = theorem_preset(&theorem_inputs(eps, delta), &B, 10, 5).unwrap();
        for (a, b) in [(s.beta, beta), (s.theta, theta), (s.gamma, gamma), (s.eta, eta), (s.beta, 1.0 / (eps * delta))] {
            worst = worst.max(rel(a, b));
        }
    }
    let mut doubling = 0.0f64;
    for eps in [0.4, 0.1, 0.03] {
        let a = theorem_preset(&theorem_inputs(eps, 0.5), &B, 10, 5).unwrap();
        let b = theorem_preset(&theorem_inputs(eps / 2.0, 0.5), &B, 10, 5).unwrap();
        doubling = doubling.max(rel(b.beta, 2.0 * a.beta));
    }
    outcome(
        worst <= 1e-12 && doubling <= 1e-12,
        format!("max rel err {worst:.1e}; beta(eps/2)/beta(eps) - 2 rel {doubling:.1e}"),
    )
}

fn criterion_9() -> Outcome {
    let base = Lemma1Inputs {
        n: vec![10_000],
        m: 5,
        delta: 0.05,
        c: 1.0,
        alpha: 0.5,
    };
    let v = lemma1_bound(&base).unwrap()[0];
    let err = rel(v, 0.072552472614374585101);
    let grid: Vec<usize> = (1..=10).map(|i| 1000 * i * i).collect();
    let g = lemma1_bound(&Lemma1Inputs { n: grid, ..base }).unwrap();
    let mono = g.windows(2).all(|w| w[1] < w[0]);
    outcome(err <= 1e-12 && mono, format!("bound {v:.16} (rel err {err:.1e}); decreasing on 10-point grid: {mono}"))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let scenario = load_or_generate(&cfg.scenario).unwrap();
    let base = base_model(&cfg, &scenario).unwrap();
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let res = run_experiment(&cfg, &scenario, &base, 1).unwrap();
        let out = dir.path().join(name);
        write_experiment(&out, &cfg, &scenario, &res).unwrap();
        outs.push(out);
    }
    let mut files = vec!["summary.csv".to_string()];
    files.extend(cfg.seeds.iter().map(|s| format!("trajectory_seed{s}.csv")));
    let same = files
        .iter()
        .all(|f| std::fs::read(outs[0].join(f)).unwrap() == std::fs::read(outs[1].join(f)).unwrap());

    let resume = [(0, 1), (1, 23), (2, 59)].iter().all(|&(s, k)| checkpoint_resume_matches(s, k));

    let s = generate_scenario(&small_spec()).unwrap();
    let (a, b) = (dir.path().join("sa"), dir.path().join("sb"));
    save_scenario(&s, &a).unwrap();
    save_scenario(&load_scenario(&a).unwrap(), &b).unwrap();
    let round_trip = same_scenario_files(&a, &b);
    outcome(
        same && resume && round_trip,
        format!("repeat run byte-identical: {same}; checkpoint resume bit-exact: {resume}; scenario round trip: {round_trip}"),
    )
}

fn criterion_11() -> Outcome {
    let cfg = load("multiround.json");
    let scenario = load_or_generate(&cfg.scenario).unwrap();
    let base = base_model(&cfg, &scenario).unwrap();
    let res = run_experiment(&cfg, &scenario, &base, worker_count()).unwrap();
    let last = res.rounds.last().unwrap();
    let protects_first = last.tasks.contains(&res.rounds[0].target);
    let (mut vs_prev, mut vs_base) = (f64::INFINITY, f64::INFINITY);
    for (run, w_old) in last.runs.iter().zip(&last.w_olds) {
        vs_prev = vs_prev.min(all_task_train_dev_safety(&scenario, &run.model, w_old, cfg.solver.tau0).unwrap());
        vs_base = vs_base.min(all_task_train_dev_safety(&scenario, &run.model, &base, cfg.solver.tau0).unwrap());
    }
    let gains: Vec<String> = res.rounds.iter().map(|r| format!("{:.3}", r.summary.delta_acc_mean)).collect();
    outcome(
        res.rounds.len() == 2 && protects_first && vs_prev >= -1e-3 && vs_base >= -1e-3,
        format!(
            "targets {} then {}; round-2 constraints include round-1 target: {protects_first}; min all-task train \
             DevSafety(ce) vs round-1 model {vs_prev:.2e}, vs base {vs_base:.2e}; mean dAcc per round [{}]",
            res.rounds[0].target,
            res.rounds[1].target,
            gains.join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("gradient suite", criterion_1),
        ("estimator collapse", criterion_2),
        ("moving-average contraction", criterion_3),
        ("analytic KKT instances", criterion_4),
        ("task-head singular value property", criterion_5),
        ("effective-weight semantics", criterion_6),
        ("desk-scale retention experiment", criterion_7),
        ("theorem-preset arithmetic", criterion_8),
        ("sample-size bound calculator", criterion_9),
        ("determinism and persistence", criterion_10),
        ("multi-round protocol", criterion_11),
    ];
    // ACCEPTANCE_ONLY=4,6 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| outcome(false, "panicked".into()));
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status} {name} ({:.1}s): {}", i + 1, t.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}

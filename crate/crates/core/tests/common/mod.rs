#![allow(dead_code)]

use std::sync::Arc;

use devsafe::baselines::WcclData;
use devsafe::losses::{ConstraintSpec, PairSet};
use devsafe::model::{random_params, Activation, ModelShape, ParamVector};
use devsafe::rng::{normal, uniform, StreamRng};
use rand::SeedableRng;

pub fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut StreamRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * normal(r)).collect()
}

/// A small random shape; odd seeds get a tanh hidden layer.
pub fn shape(seed: u64, classes: usize) -> ModelShape {
    ModelShape {
        d_x: 4,
        d_t: 3,
        d_h: if seed % 2 == 1 { 3 } else { 0 },
        d_1: 4,
        d_2: 3,
        r: 1,
        num_classes: classes,
        heads_enabled: true,
        activation: if seed % 2 == 1 { Activation::Tanh } else { Activation::Identity },
    }
}

/// Random parameters with every block (including `U_k`) perturbed.
pub fn dense_params(shape: ModelShape, seed: u64) -> ParamVector {
    let p = random_params(shape, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let data: Vec<f64> = p.as_slice().iter().map(|v| v + 0.3 * normal(&mut r)).collect();
    p.with_data(data).unwrap()
}

pub struct Instance {
    pub shape: ModelShape,
    pub w: ParamVector,
    pub w_old: ParamVector,
    pub pairs: PairSet,
    pub specs: Vec<ConstraintSpec>,
    pub wccl: WcclData,
    pub class_texts: Arc<Vec<Vec<f64>>>,
    pub tau0: f64,
}

/// A random retention instance: a handful of global-contrast target pairs
/// and one constraint per protected class.
pub fn instance(seed: u64) -> Instance {
    let classes = 3;
    let shape = shape(seed, classes);
    let mut r = rng(seed);
    let tau = uniform(&mut r, 0.2, 1.0);
    let tau0 = uniform(&mut r, 0.2, 1.0);
    let n_img = 5;
    let n_txt = 4;
    let images: Vec<Vec<f64>> = (0..n_img).map(|_| gaussian(&mut r, shape.d_x, 1.0)).collect();
    let texts: Vec<Vec<f64>> = (0..n_txt).map(|_| gaussian(&mut r, shape.d_t, 1.0)).collect();
    let positives = [(0, 0), (1, 1), (2, 1)];
    let pairs = PairSet::global(images.clone(), texts.clone(), &positives, tau).unwrap();
    let class_texts = Arc::new((0..classes).map(|_| gaussian(&mut r, shape.d_t, 1.0)).collect::<Vec<_>>());
    let w_old = dense_params(shape.clone(), seed + 1000);
    let w = dense_params(shape.clone(), seed + 2000);
    let specs: Vec<ConstraintSpec> = (0..2)
        .map(|k| {
            let xs = (0..3).map(|_| gaussian(&mut r, shape.d_x, 1.0)).collect();
            ConstraintSpec::new(&w_old, k, xs, class_texts.clone(), tau0).unwrap()
        })
        .collect();
    let wccl = WcclData::new(
        images,
        texts,
        &[(0, 0)],
        Arc::new(vec![0, 2, 3]),
        Arc::new(vec![0, 3, 4]),
        &[vec![(1, 1)], vec![(2, 2), (3, 3)]],
        tau,
    )
    .unwrap();
    Instance {
        shape,
        w,
        w_old,
        pairs,
        specs,
        wccl,
        class_texts,
        tau0,
    }
}

/// Parameters of `like` with `data` swapped in.
pub fn at(like: &ParamVector, data: &[f64]) -> ParamVector {
    like.with_data(data.to_vec()).unwrap()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const FD_INSTANCES: u64 = 20;

fn fd_rel_err(w: &ParamVector, analytic: &[f64], f: impl Fn(&ParamVector) -> f64) -> f64 {
    let fd = devsafe_testkit::finite_diff_grad(|x| f(&at(w, x)), w.as_slice(), FD_STEP);
    devsafe_testkit::vec_rel_err(analytic, &fd, 1e-8)
}

/// Worst relative error between analytic and central-difference gradients
/// of each differentiable quantity over `FD_INSTANCES` random instances.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    use devsafe::baselines::{grad_rm_objective, grad_wccl_objective};
    use devsafe::losses::{grad_h, grad_phi, mean_ce_with_grad, weighted_contrastive};

    let mut worst = vec![("L_ctr", 0.0f64), ("ce", 0.0), ("h", 0.0), ("phi", 0.0), ("rm", 0.0), ("wccl", 0.0)];
    let mut bump = |i: usize, e: f64| worst[i].1 = worst[i].1.max(e);
    for seed in 0..FD_INSTANCES {
        let inst = instance(seed);
        let w = &inst.w;
        let pair = (seed as usize) % inst.pairs.len();

        let (_, g) = weighted_contrastive(w, &inst.pairs, &[(pair, 1.0)]).unwrap();
        bump(0, fd_rel_err(w, &g, |p| weighted_contrastive(p, &inst.pairs, &[(pair, 1.0)]).unwrap().0));

        let x = inst.specs[0].samples[0].clone();
        let label = (seed as usize) % inst.shape.num_classes;
        let ce = |p: &ParamVector, g: Option<(&mut [f64], f64)>| {
            mean_ce_with_grad(p, &[x.as_slice()], label, &inst.class_texts, inst.tau0, g).unwrap()[0]
        };
        let mut g = vec![0.0; w.len()];
        ce(w, Some((&mut g, 1.0)));
        bump(1, fd_rel_err(w, &g, |p| ce(p, None)));

        let spec = &inst.specs[(seed as usize) % inst.specs.len()];
        let (_, g) = grad_h(w, spec, None).unwrap();
        bump(2, fd_rel_err(w, &g, |p| grad_h(p, spec, None).unwrap().0));

        let beta = 10.0;
        let (_, g) = grad_phi(w, &inst.pairs, &inst.specs, beta).unwrap();
        bump(3, fd_rel_err(w, &g, |p| grad_phi(p, &inst.pairs, &inst.specs, beta).unwrap().0));

        let alpha = 0.5 + seed as f64 * 0.1;
        let (_, g) = grad_rm_objective(w, &inst.pairs, &inst.specs, alpha).unwrap();
        bump(4, fd_rel_err(w, &g, |p| grad_rm_objective(p, &inst.pairs, &inst.specs, alpha).unwrap().0));

        let alpha = (seed as f64 + 0.5) / FD_INSTANCES as f64;
        let (_, g) = grad_wccl_objective(w, &inst.wccl, alpha).unwrap();
        bump(5, fd_rel_err(w, &g, |p| grad_wccl_objective(p, &inst.wccl, alpha).unwrap().0));
    }
    worst
}

pub fn retention_problem(inst: &Instance) -> devsafe::optimizer::RetentionProblem {
    devsafe::optimizer::RetentionProblem::new(inst.shape.clone(), inst.pairs.clone(), inst.specs.clone()).unwrap()
}

pub fn full_info_config(eta: f64, beta: f64, iterations: u64) -> devsafe::optimizer::SolverConfig {
    devsafe::optimizer::SolverConfig {
        iterations,
        eta,
        beta,
        log_every: iterations.max(1),
        ..Default::default()
    }
    .full_information()
}

/// `(one-step error of v against ∇Φ(w⁰), worst per-step error of the solver
/// trajectory against plain gradient descent on Φ over `steps` steps)`.
pub fn collapse_errors(seed: u64, steps: u64) -> (f64, f64) {
    use devsafe::losses::grad_phi;
    use devsafe::optimizer::Solver;
    let inst = instance(seed);
    let problem = retention_problem(&inst);
    let (eta, beta) = (0.01, 20.0);
    let cfg = full_info_config(eta, beta, steps);
    let w0 = inst.w.flatten();
    let mut solver = Solver::new(&problem, &cfg, w0.clone()).unwrap();
    solver.step().unwrap();
    let (_, g0) = grad_phi(&inst.w, &inst.pairs, &inst.specs, beta).unwrap();
    let one = devsafe_testkit::vec_rel_err(&solver.state().v, &g0, 1e-300);

    let mut solver = Solver::new(&problem, &cfg, w0.clone()).unwrap();
    let mut w = w0;
    let mut worst = 0.0f64;
    for _ in 0..steps {
        solver.step().unwrap();
        let (_, g) = grad_phi(&at(&inst.w, &w), &inst.pairs, &inst.specs, beta).unwrap();
        for (x, gi) in w.iter_mut().zip(&g) {
            *x -= eta * gi;
        }
        worst = worst.max(devsafe_testkit::vec_rel_err(solver.params(), &w, 1e-300));
    }
    (one, worst)
}

/// Worst deviation of `‖uᵗ − g(w)‖` from `(1−γ)ᵗ‖u⁰ − g(w)‖` over `steps`
/// steps with `η = 0`, relative to `‖u⁰ − g(w)‖`, for the pair averages and
/// the constraint averages.
pub fn contraction_errors(seed: u64, gamma1: f64, gamma2: f64, steps: u64) -> (f64, f64) {
    use devsafe::losses::{constraint_h, g1, g2};
    use devsafe::optimizer::Solver;
    let inst = instance(seed);
    let problem = retention_problem(&inst);
    let cfg = devsafe::optimizer::SolverConfig {
        iterations: steps,
        eta: 0.0,
        beta: 5.0,
        gamma1,
        gamma2,
        theta: 0.5,
        ..Default::default()
    };
    let w = &inst.w;
    let n = inst.pairs.len();
    let g_pairs: Vec<f64> = (0..n)
        .flat_map(|i| [g1(w, &inst.pairs, i, None).unwrap(), g2(w, &inst.pairs, i, None).unwrap()])
        .collect();
    let g_cons: Vec<f64> = inst.specs.iter().map(|s| constraint_h(w, s, None).unwrap()).collect();

    let solver = Solver::new(&problem, &cfg, w.flatten()).unwrap();
    let mut ck = solver.checkpoint();
    let mut r = rng(seed + 77);
    for i in 0..n {
        ck.state.u1[i] = Some(g_pairs[2 * i] * uniform(&mut r, 0.3, 3.0));
        ck.state.u2[i] = Some(g_pairs[2 * i + 1] * uniform(&mut r, 0.3, 3.0));
    }
    for (k, h) in g_cons.iter().enumerate() {
        ck.state.u_c[k] = Some(h + uniform(&mut r, -1.0, 1.0));
    }
    let mut solver = Solver::from_checkpoint(&problem, ck).unwrap();
    let dist = |s: &Solver<'_, devsafe::optimizer::RetentionProblem>| {
        let st = s.state();
        let u: Vec<f64> = (0..n).flat_map(|i| [st.u1[i].unwrap(), st.u2[i].unwrap()]).collect();
        let pairs = devsafe::linalg::norm(&u.iter().zip(&g_pairs).map(|(a, b)| a - b).collect::<Vec<_>>());
        let uc = st.constraint_averages();
        let cons = devsafe::linalg::norm(&uc.iter().zip(&g_cons).map(|(a, b)| a - b).collect::<Vec<_>>());
        (pairs, cons)
    };
    let (p0, c0) = dist(&solver);
    let (mut wp, mut wc) = (0.0f64, 0.0f64);
    for t in 1..=steps {
        solver.step().unwrap();
        assert_eq!(solver.params(), w.as_slice(), "η = 0 must leave w unchanged");
        let (pt, ct) = dist(&solver);
        let ep = p0 * (1.0 - gamma1).powi(t as i32);
        let ec = c0 * (1.0 - gamma2).powi(t as i32);
        wp = wp.max((pt - ep).abs() / p0);
        wc = wc.max((ct - ec).abs() / c0);
    }
    (wp, wc)
}

/// Over `n` random points with `U_k = 0` and random `V_k`: the smallest
/// `lhs − rhs` of the head lemma and the smallest
/// `σ_min(with heads) − σ_min(without heads)`.
pub fn head_bound_margins(n: u64) -> (f64, f64) {
    use devsafe::metrics::{constraint_jacobian_sigma_min, lemma2_check};
    let (mut lemma, mut sigma) = (f64::INFINITY, f64::INFINITY);
    for seed in 0..n {
        let inst = instance(seed);
        let p = random_params(inst.shape.clone(), seed + 500).unwrap();
        assert!(p.low_rank_updates_vanish());
        let specs: Vec<ConstraintSpec> = inst
            .specs
            .iter()
            .map(|s| ConstraintSpec::new(&inst.w_old, s.task, s.samples.clone(), s.class_texts.clone(), s.tau0).unwrap())
            .collect();
        let r = lemma2_check(&p, &specs).unwrap();
        lemma = lemma.min(r.lhs - r.rhs);
        let with = constraint_jacobian_sigma_min(&p, &specs, true).unwrap();
        let without = constraint_jacobian_sigma_min(&p, &specs, false).unwrap();
        sigma = sigma.min(with - without);
    }
    (lemma, sigma)
}

/// Largest `G2` entry produced when every average is `≤ 0`, over random
/// instances and batches.
pub fn g2_with_nonpositive_averages(n: u64) -> f64 {
    use devsafe::estimators::{constraint_step, g2_estimator, EstimatorState};
    let mut worst = 0.0f64;
    for seed in 0..n {
        let inst = instance(seed);
        let mut r = rng(seed + 9);
        let m = inst.specs.len();
        let mut state = EstimatorState::new(inst.pairs.len(), m);
        for k in 0..m {
            state.u_c[k] = Some(-uniform(&mut r, 0.0, 2.0) * (k % 2) as f64);
        }
        let tasks: Vec<usize> = (0..m).collect();
        let batches: Vec<Vec<usize>> = inst.specs.iter().map(|s| (0..s.len()).collect()).collect();
        let g = g2_estimator(&state, &inst.w, &inst.specs, &tasks, &batches, 1e6).unwrap();
        worst = g.iter().fold(worst, |a, v| a.max(v.abs()));
        // a step at w_old keeps every average at or below zero
        let mut st = state.clone();
        let (g, _) = constraint_step(&mut st, &inst.w_old, &inst.specs, &tasks, &batches, 0.5, 1e6).unwrap();
        assert!(st.u_c.iter().all(|u| u.unwrap() <= 0.0));
        worst = g.iter().fold(worst, |a, v| a.max(v.abs()));
    }
    worst
}

/// A scaled-down default scenario for fast tests.
pub fn small_spec() -> devsafe::data::ScenarioSpec {
    devsafe::data::ScenarioSpec {
        train_per_class: 150,
        target_train: 12,
        external_pairs: 12,
        val_per_class: 40,
        test_per_class: 60,
        negative_multiplier: 2,
        ..Default::default()
    }
}

/// True when both directories hold the same scenario files byte for byte.
pub fn same_scenario_files(a: &std::path::Path, b: &std::path::Path) -> bool {
    use devsafe::data::{MANIFEST_FILE, SAMPLES_FILE};
    [MANIFEST_FILE, SAMPLES_FILE]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}

/// A quick penalty experiment on [`small_spec`] as JSON.
pub fn small_config_json() -> serde_json::Value {
    serde_json::json!({
        "scenario": { "generate": serde_json::to_value(small_spec()).unwrap() },
        "model": {
            "d_x": 12, "d_t": 12, "d_h": 0, "d_1": 12, "d_2": 16, "r": 2,
            "num_classes": 6, "heads_enabled": true, "activation": "identity"
        },
        "method": "penalty",
        "solver": {
            "iterations": 40, "eta": 0.2, "beta": 1000.0, "gamma1": 0.9, "gamma2": 0.9, "theta": 0.1,
            "batch": { "pairs": 8, "text_negatives": 16, "image_negatives": 16, "constraint_samples": 10 },
            "tau": 0.05, "tau0": 0.05, "log_every": 10
        },
        "seeds": [0, 1, 2],
        "constraint_samples": 100
    })
}

pub fn small_config() -> devsafe::experiment::ExperimentConfig {
    devsafe::experiment::ExperimentConfig::from_json(&small_config_json().to_string()).unwrap()
}

/// Runs a minibatch solve straight through and again with a save/load break
/// after `split` steps; true when parameters, state and logs agree bit for bit.
pub fn checkpoint_resume_matches(seed: u64, split: u64) -> bool {
    use devsafe::optimizer::{BatchSizes, Checkpoint, Solver, SolverConfig};
    let inst = instance(seed);
    let problem = retention_problem(&inst);
    let cfg = SolverConfig {
        iterations: 60,
        eta: 0.01,
        beta: 20.0,
        seed: 11 + seed,
        log_every: 7,
        batch: BatchSizes {
            pairs: Some(2),
            text_negatives: Some(1),
            image_negatives: Some(1),
            constraints: Some(1),
            constraint_samples: Some(2),
        },
        ..Default::default()
    };
    let w0 = inst.w.flatten();
    let mut quiet = |_: &[f64], _: &mut devsafe::optimizer::StepLog| Ok(());
    let straight = Solver::new(&problem, &cfg, w0.clone()).unwrap().run_to_end(&mut quiet).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut first = Solver::new(&problem, &cfg, w0).unwrap();
    first.advance(split, &mut quiet).unwrap();
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let resumed = Solver::from_checkpoint(&problem, Checkpoint::load(&path).unwrap())
        .unwrap()
        .run_to_end(&mut quiet)
        .unwrap();

    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    bits(&straight.params) == bits(&resumed.params)
        && straight.state == resumed.state
        && serde_json::to_string(&straight.trajectory).unwrap() == serde_json::to_string(&resumed.trajectory).unwrap()
}

mod common;

use common::*;
use devsafe::optimizer::{kkt_report, run, GenericProblem, Solver, SolverConfig};

#[test]
fn full_information_step_is_penalty_gradient() {
    for seed in 0..4 {
        let (one, traj) = collapse_errors(seed, 100);
        assert!(one <= 1e-12, "seed {seed}: one-step error {one:e}");
        assert!(traj <= 1e-10, "seed {seed}: trajectory error {traj:e}");
    }
}

#[test]
fn moving_averages_contract_geometrically() {
    for (seed, g1, g2) in [(0, 0.3, 0.6), (1, 0.1, 0.25), (2, 0.5, 0.05)] {
        let (p, c) = contraction_errors(seed, g1, g2, 50);
        assert!(p <= 1e-12 && c <= 1e-12, "seed {seed}: {p:e} {c:e}");
    }
}

fn quadratic_2d() -> GenericProblem {
    GenericProblem::new(2, |w| {
        let d = [w[0] - 1.0, w[1] - 1.0];
        Ok((0.5 * (d[0] * d[0] + d[1] * d[1]), d.to_vec()))
    })
    .with_constraint(|w| Ok((w[0], vec![1.0, 0.0])))
}

#[test]
fn penalty_gradient_vanishes_when_constraints_are_satisfied() {
    let p = quadratic_2d();
    let cfg = SolverConfig { iterations: 1, eta: 0.1, beta: 1e4, ..Default::default() }.full_information();
    let mut s = Solver::new(&p, &cfg, vec![-0.5, 0.0]).unwrap();
    s.step().unwrap();
    // v is exactly the objective gradient at w0 = (-0.5, 0)
    assert_eq!(s.state().v, vec![-1.5, -1.0]);
}

#[test]
fn kkt_report_on_known_point() {
    let p = quadratic_2d();
    let r = kkt_report(&p, &[0.0, 1.0], 1e4).unwrap();
    assert_eq!(r.violation, 0.0);
    assert_eq!(r.complementarity, 0.0);
    assert_eq!(r.stationarity, 1.0);
    let cfg = SolverConfig { theta: 0.1, ..full_info_config(1e-3, 1e4, 5000) };
    let out = run(&p, &cfg, vec![0.0, 0.0]).unwrap();
    let last = out.trajectory.last().unwrap();
    assert!(last.kkt.violation <= 1e-3 && last.kkt.stationarity <= 1e-2);
    assert!((last.kkt.lambda[0] - 1.0).abs() < 1e-2);
}

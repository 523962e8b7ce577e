//! The solver on min ½‖w − (1, 1)‖² s.t. w₁ ≤ 0, whose KKT point is (0, 1)
//! with multiplier 1. Shows the residual triple over the run and how the
//! momentum weight θ matters when η·β is large.
//!
//!     cargo run --release --example kkt_toy

use devsafe::optimizer::{run, GenericProblem, SolverConfig};

fn problem() -> GenericProblem {
    GenericProblem::new(2, |w| {
        let d = [w[0] - 1.0, w[1] - 1.0];
        Ok((0.5 * (d[0] * d[0] + d[1] * d[1]), d.to_vec()))
    })
    .with_constraint(|w| Ok((w[0], vec![1.0, 0.0])))
}

fn main() -> devsafe::Result<()> {
    for theta in [1.0, 0.1] {
        let cfg = SolverConfig {
            iterations: 5000,
            eta: 1e-3,
            beta: 1e4,
            log_every: 500,
            ..SolverConfig::default()
        }
        .full_information();
        let cfg = SolverConfig { theta, ..cfg };
        let out = run(&problem(), &cfg, vec![0.0, 0.0])?;
        println!("theta = {theta}");
        println!("{:>6} {:>12} {:>12} {:>12} {:>10}", "step", "stationarity", "violation", "compl.", "lambda");
        for l in &out.trajectory {
            println!(
                "{:>6} {:>12.3e} {:>12.3e} {:>12.3e} {:>10.4}",
                l.step, l.kkt.stationarity, l.kkt.violation, l.kkt.complementarity, l.kkt.lambda[0]
            );
        }
        println!("final w = ({:.5}, {:.5})\n", out.params[0], out.params[1]);
    }
    Ok(())
}

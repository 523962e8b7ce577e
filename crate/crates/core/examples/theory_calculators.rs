//! Step-size and penalty schedule implied by the convergence analysis, and
//! the sample-size bound on how far empirical retention can be from true
//! retention.
//!
//!     cargo run --release --example theory_calculators

use devsafe::metrics::{lemma1_bound, Lemma1Inputs};
use devsafe::optimizer::{theorem_preset, PresetBatches, SolverConfig, TheoremInputs};

fn main() -> devsafe::Result<()> {
    let batches = PresetBatches {
        pairs: 8,
        text_negatives: 16,
        image_negatives: 16,
        constraints: 2,
        constraint_samples: 32,
    };
    println!("{:>8} {:>6} {:>8} {:>12} {:>12} {:>12} {:>14}", "eps", "delta", "beta", "theta", "gamma", "eta", "T");
    for (eps, delta) in [(0.2, 0.5), (0.1, 0.5), (0.05, 0.5), (0.1, 0.25)] {
        let inp = TheoremInputs {
            epsilon: eps,
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
        };
        let s = theorem_preset(&inp, &batches, 10, 5)?;
        println!(
            "{eps:>8} {delta:>6} {:>8} {:>12.3e} {:>12.3e} {:>12.3e} {:>14}",
            s.beta, s.theta, s.gamma, s.eta, s.iterations
        );
        let mut cfg = SolverConfig::default();
        s.apply(&mut cfg);
        assert_eq!(cfg.beta, s.beta);
    }

    let n: Vec<usize> = [100, 1_000, 4_000, 10_000, 100_000].to_vec();
    let bound = lemma1_bound(&Lemma1Inputs {
        n: n.clone(),
        m: 5,
        delta: 0.05,
        c: 1.0,
        alpha: 0.5,
    })?;
    println!("\nretention gap bound (m = 5, confidence 95%)");
    for (n, b) in n.iter().zip(&bound) {
        println!("  n = {n:>7}: {b:.5}");
    }
    Ok(())
}

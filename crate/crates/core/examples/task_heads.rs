//! Smallest singular value of the constraint Jacobian with and without the
//! per-task low-rank heads, at the trained base model, plus the lower bound
//! the heads guarantee.
//!
//!     cargo run --release --example task_heads

use std::path::Path;

use devsafe::cli::load_config;
use devsafe::experiment::{base_model, build_development, load_or_generate};
use devsafe::metrics::{constraint_jacobian_sigma_min, lemma2_check};

fn main() -> devsafe::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/develop.json");
    let mut cfg = load_config(&path, &[], None)?;
    cfg.constraint_samples = Some(500);
    let scenario = load_or_generate(&cfg.scenario)?;
    let w = base_model(&cfg, &scenario)?;
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
        0,
    )?;
    let specs = &dev.problem.specs;
    let shared = constraint_jacobian_sigma_min(&w, specs, false)?;
    let heads = constraint_jacobian_sigma_min(&w, specs, true)?;
    println!("protected tasks {:?}", dev.tasks);
    println!("sigma_min shared blocks only {shared:.6e}");
    println!("sigma_min with task heads    {heads:.6e}");
    let r = lemma2_check(&w, specs)?;
    println!("lambda_min with heads {:.6e} >= bound {:.6e}: {}", r.lhs, r.rhs, r.holds);
    for (k, (v, u)) in r.v_terms.iter().zip(&r.u_terms).enumerate() {
        println!("  task {}: |grad_W h V|^2 {v:.3e}  |grad_W h^T U|^2 {u:.3e}", dev.tasks[k]);
    }
    Ok(())
}

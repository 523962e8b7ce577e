//! Interrupts a minibatch run, saves a checkpoint, resumes from the file and
//! confirms the result is bit-identical to an uninterrupted run.
//!
//!     cargo run --release --example checkpoint_resume

use std::path::Path;

use devsafe::cli::load_config;
use devsafe::experiment::{base_model, build_development, load_or_generate};
use devsafe::optimizer::{Checkpoint, Solver, StepLog};

fn main() -> devsafe::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/develop.json");
    let mut cfg = load_config(&path, &[], None)?;
    cfg.solver.iterations = 200;
    let scenario = load_or_generate(&cfg.scenario)?;
    let w_old = base_model(&cfg, &scenario)?;
    let targets = cfg.targets(&scenario);
    let dev = build_development(
        &scenario,
        &w_old,
        targets[0],
        &targets[1..],
        cfg.constraint_samples,
        cfg.external_pairs,
        cfg.negatives,
        cfg.solver.tau,
        cfg.solver.tau0,
        0,
    )?;
    let mut quiet = |_: &[f64], _: &mut StepLog| Ok(());

    let straight = Solver::new(&dev.problem, &cfg.solver, w_old.flatten())?.run_to_end(&mut quiet)?;

    let file = std::env::temp_dir().join("devsafe_example_checkpoint.json");
    let mut first = Solver::new(&dev.problem, &cfg.solver, w_old.flatten())?;
    first.advance(77, &mut quiet)?;
    first.checkpoint().save(&file)?;
    println!("saved step {} to {}", first.step_count(), file.display());
    drop(first);

    let resumed = Solver::from_checkpoint(&dev.problem, Checkpoint::load(&file)?)?.run_to_end(&mut quiet)?;
    let identical = straight.params.iter().zip(&resumed.params).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("resumed to step {}; parameters bit-identical: {identical}", cfg.solver.iterations);
    std::fs::remove_file(&file)?;
    Ok(())
}

//! Two chained development rounds: the second round protects the class the
//! first round improved. Reports the all-class training DevSafety of the
//! final model.
//!
//!     cargo run --release --example multiround

use std::path::Path;

use devsafe::cli::load_config;
use devsafe::experiment::{all_task_train_dev_safety, base_model, load_or_generate, run_experiment};

fn main() -> devsafe::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/multiround.json");
    let cfg = load_config(&path, &[], Some(&[0]))?;
    let scenario = load_or_generate(&cfg.scenario)?;
    let base = base_model(&cfg, &scenario)?;
    let res = run_experiment(&cfg, &scenario, &base, 1)?;
    for (r, round) in res.rounds.iter().enumerate() {
        let row = &round.summary.rows[0];
        println!(
            "round {}: target {} protecting {:?}  test DevSafety(acc) {:+.4}  test dAcc {:+.4}",
            r + 1,
            round.target,
            round.tasks,
            row.test_dev_safety_acc,
            row.test_delta_acc
        );
    }
    let last = res.rounds.last().unwrap();
    let (run, w_old) = (&last.runs[0], &last.w_olds[0]);
    let vs_prev = all_task_train_dev_safety(&scenario, &run.model, w_old, cfg.solver.tau0)?;
    let vs_base = all_task_train_dev_safety(&scenario, &run.model, &base, cfg.solver.tau0)?;
    println!("all-class train DevSafety(ce): vs round-1 model {vs_prev:+.5}, vs base model {vs_base:+.5}");
    Ok(())
}

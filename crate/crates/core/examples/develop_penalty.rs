//! One development round with the penalty solver on the desk-scale
//! scenario: improve the rare target class while every protected class keeps
//! its training loss.
//!
//!     cargo run --release --example develop_penalty [seeds, e.g. 0,1]

use std::path::Path;

use devsafe::cli::load_config;
use devsafe::experiment::{base_model, load_or_generate, run_experiment};

fn main() -> devsafe::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.trim().parse().expect("seed")).collect())
        .unwrap_or_else(|| vec![0]);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/develop.json");
    let cfg = load_config(&path, &[], Some(&seeds))?;
    let scenario = load_or_generate(&cfg.scenario)?;
    let base = base_model(&cfg, &scenario)?;
    let res = run_experiment(&cfg, &scenario, &base, 1)?;
    let round = &res.rounds[0];
    println!("target class {}  protected {:?}", round.target, round.tasks);

    for run in &round.runs {
        println!("\nseed {}", run.seed);
        println!("{:>6} {:>10} {:>10} {:>10} {:>12}", "step", "objective", "max h", "val dAcc", "max weight");
        for l in &run.trajectory {
            let max_h = l.kkt.h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_w = l.effective_weights.iter().cloned().fold(0.0, f64::max);
            println!(
                "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>12.3}",
                l.step,
                l.kkt.objective,
                max_h,
                l.metric("val_delta_acc").unwrap_or(f64::NAN),
                max_w
            );
        }
        let sel = run.selected_log().map_or(0, |l| l.step);
        println!(
            "kept step {sel}: test DevSafety(acc) {:+.4}, test dAcc {:+.4}",
            run.selected_metric("test_dev_safety_acc"),
            run.selected_metric("test_delta_acc")
        );
    }
    let s = &round.summary;
    println!("\nretention ratio {}  mean dAcc {:.4}  std {:.4}", s.retention_ratio, s.delta_acc_mean, s.delta_acc_std);
    Ok(())
}

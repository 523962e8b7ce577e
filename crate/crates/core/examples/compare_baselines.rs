//! Penalty solver against the regularized baseline (RM) at several weights,
//! weighted contrastive learning (WCCL), and plain fine-tuning, on one seed.
//!
//!     cargo run --release --example compare_baselines

use std::path::Path;

use devsafe::cli::load_config;
use devsafe::experiment::{base_model, load_or_generate, run_experiment, ExperimentConfig, Method};

fn main() -> devsafe::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/develop.json");
    let mut cfg = load_config(&path, &[], Some(&[0]))?;
    cfg.solver.iterations = 500;
    let scenario = load_or_generate(&cfg.scenario)?;
    let base = base_model(&cfg, &scenario)?;

    let variants: Vec<(String, ExperimentConfig)> = vec![
        ("penalty".into(), cfg.clone()),
        ("rm alpha=0.1".into(), ExperimentConfig { method: Method::Rm, alpha: 0.1, ..cfg.clone() }),
        ("rm alpha=1".into(), ExperimentConfig { method: Method::Rm, alpha: 1.0, ..cfg.clone() }),
        ("rm alpha=10".into(), ExperimentConfig { method: Method::Rm, alpha: 10.0, ..cfg.clone() }),
        ("wccl alpha=0.5".into(), ExperimentConfig { method: Method::Wccl, alpha: 0.5, ..cfg.clone() }),
        ("finetune".into(), ExperimentConfig { method: Method::Finetune, ..cfg.clone() }),
    ];
    println!("{:<16} {:>22} {:>22} {:>10}", "method", "train DevSafety(ce)", "test DevSafety(acc)", "test dAcc");
    for (name, c) in variants {
        let res = run_experiment(&c, &scenario, &base, 1)?;
        let row = &res.rounds[0].summary.rows[0];
        println!(
            "{:<16} {:>22.5} {:>22.4} {:>10.4}",
            name, row.train_dev_safety_ce, row.test_dev_safety_acc, row.test_delta_acc
        );
    }
    Ok(())
}

//! Trains the old model on the protected classes and reports per-class
//! accuracy; the rare target classes stay weak.
//!
//!     cargo run --release --example train_base

use devsafe::data::{generate_scenario, make_base_model, BaseTrainConfig, ScenarioSpec};
use devsafe::model::{Activation, ModelShape};

fn main() -> devsafe::Result<()> {
    let spec = ScenarioSpec {
        target_offset: 4.0,
        text_noise: 0.1,
        ..ScenarioSpec::default()
    };
    let scenario = generate_scenario(&spec)?;
    let shape = ModelShape {
        d_x: 12,
        d_t: 12,
        d_h: 0,
        d_1: 12,
        d_2: 16,
        r: 2,
        num_classes: 6,
        heads_enabled: true,
        activation: Activation::Identity,
    };
    let (w, report) = make_base_model(&scenario, &shape, &BaseTrainConfig::default())?;
    println!("parameters {}  final loss {:.4}", w.len(), report.final_loss);
    for (k, acc) in report.class_accuracy.iter().enumerate() {
        let tag = if spec.targets.contains(&k) { "target" } else { "protected" };
        println!("class {k} ({tag:>9}): train accuracy {acc:.3}");
    }
    println!("protected accuracy {:.3}", report.protected_accuracy);
    println!("heads start at U = 0: {}", w.low_rank_updates_vanish());
    Ok(())
}

//! Generates the default synthetic scenario, saves it, and reloads it.
//!
//!     cargo run --release --example generate_scenario [out_dir]

use std::path::PathBuf;

use devsafe::data::{generate_scenario, load_scenario, save_scenario, ScenarioSpec, Split};

fn main() -> devsafe::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("devsafe_scenario"));
    let spec = ScenarioSpec {
        target_offset: 4.0,
        text_noise: 0.1,
        ..ScenarioSpec::default()
    };
    let s = generate_scenario(&spec)?;
    println!("classes {}  targets {:?}  protected {:?}", spec.num_classes, spec.targets, spec.protected_classes());
    for k in 0..spec.num_classes {
        println!(
            "class {k}: train {:>5}  val {:>4}  test {:>5}  external {:>4}",
            s.class_samples(Split::Train, k).len(),
            s.class_samples(Split::Val, k).len(),
            s.class_samples(Split::Test, k).len(),
            s.external(k).len()
        );
    }
    println!("negative pairs {}", s.negatives().len());
    println!("nearest-class-mean accuracy {:.3}", s.nearest_mean_accuracy()?);

    save_scenario(&s, &out)?;
    let back = load_scenario(&out)?;
    assert_eq!(back.records, s.records);
    println!("saved to {} and reloaded ({} records)", out.display(), back.records.len());
    Ok(())
}

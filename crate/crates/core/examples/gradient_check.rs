//! Checks the analytic gradient of the penalty objective against central
//! finite differences on a random model and random constraint data.
//!
//!     cargo run --release --example gradient_check

use std::sync::Arc;

use devsafe::losses::{grad_phi, penalty_phi, ConstraintSpec, PairSet};
use devsafe::model::{Activation, ModelShape, ParamVector};
use devsafe::rng::{normal, stream, Stream};
use devsafe_testkit::{finite_diff_grad, vec_rel_err};

fn main() -> devsafe::Result<()> {
    let shape = ModelShape {
        d_x: 5,
        d_t: 4,
        d_h: 3,
        d_1: 4,
        d_2: 4,
        r: 2,
        num_classes: 3,
        heads_enabled: true,
        activation: Activation::Tanh,
    };
    let mut rng = stream(1, Stream::Data);
    let mut vec = |d: usize| -> Vec<f64> { (0..d).map(|_| normal(&mut rng)).collect() };
    let w_old = ParamVector::init(shape.clone(), 3)?;
    let w = w_old.with_data(w_old.as_slice().iter().map(|x| x + 0.1 * normal(&mut stream(9, Stream::Init))).collect())?;
    let class_texts = Arc::new((0..3).map(|_| vec(4)).collect::<Vec<_>>());
    let images = (0..6).map(|_| vec(5)).collect();
    let texts = (0..6).map(|_| vec(4)).collect();
    let pairs = PairSet::global(images, texts, &[(0, 0), (1, 1), (2, 2), (3, 3)], 0.5)?;
    let specs = (1..3)
        .map(|k| ConstraintSpec::new(&w_old, k, (0..4).map(|_| vec(5)).collect(), class_texts.clone(), 0.7))
        .collect::<devsafe::Result<Vec<_>>>()?;

    let beta = 50.0;
    let (phi, g) = grad_phi(&w, &pairs, &specs, beta)?;
    let fd = finite_diff_grad(|x| penalty_phi(&w.with_data(x.to_vec()).unwrap(), &pairs, &specs, beta).unwrap(), w.as_slice(), 1e-5);
    println!("Phi = {phi:.6}, {} parameters", g.len());
    println!("relative error against finite differences: {:.2e}", vec_rel_err(&g, &fd, 1e-12));
    Ok(())
}

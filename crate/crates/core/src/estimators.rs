//! Moving-average state of the penalty solver: `u_1i`, `u_2i` per pair, `u_k`
//! per constraint, and the momentum vector `v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, is_finite};
use crate::losses::{accumulate_grad_h, pair_estimates_with_grad, plus, ConstraintSpec, PairDraw, PairSet};
use crate::model::ParamVector;

fn check_rate(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(name, format!("must lie in (0, 1], got {v}")))
    }
}

/// Entries are `None` until their index is first sampled; the first sample
/// initializes the average to the estimate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub u1: Vec<Option<f64>>,
    pub u2: Vec<Option<f64>>,
    pub u_c: Vec<Option<f64>>,
    /// Empty until the first momentum update.
    pub v: Vec<f64>,
    pub t: u64,
}

impl EstimatorState {
    pub fn new(n_pairs: usize, m: usize) -> Self {
        EstimatorState {
            u1: vec![None; n_pairs],
            u2: vec![None; n_pairs],
            u_c: vec![None; m],
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.u1.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.u_c.len()
    }

    /// `u_k` values with never-sampled constraints reported as 0.
    pub fn constraint_averages(&self) -> Vec<f64> {
        self.u_c.iter().map(|u| u.unwrap_or(0.0)).collect()
    }

    fn pair_u(&self, i: usize) -> Result<(f64, f64)> {
        match (self.u1.get(i).copied().flatten(), self.u2.get(i).copied().flatten()) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Ok((a, b)),
            (Some(a), Some(b)) => Err(Error::Invariant(format!("nonpositive average for pair {i}: ({a}, {b})"))),
            _ => Err(Error::Invariant(format!("average for pair {i} used before initialization"))),
        }
    }
}

/// `u ← (1−γ)u + γ ĝ` for the sampled pairs; first samples set `u = ĝ`.
pub fn update_pair_averages(
    state: &mut EstimatorState,
    batch: &[usize],
    gamma1: f64,
    g1: &[f64],
    g2: &[f64],
) -> Result<()> {
    check_rate("gamma1", gamma1)?;
    if batch.len() != g1.len() || batch.len() != g2.len() {
        return Err(Error::Shape("batch and estimate lengths differ".into()));
    }
    for ((&i, &a), &b) in batch.iter().zip(g1).zip(g2) {
        if i >= state.n_pairs() {
            return Err(Error::Shape(format!("pair index {i} out of range")));
        }
        state.u1[i] = Some(blend(state.u1[i], a, gamma1));
        state.u2[i] = Some(blend(state.u2[i], b, gamma1));
    }
    Ok(())
}

/// `u_k ← (1−γ2)u_k + γ2 ĥ_k` for the sampled constraints.
pub fn update_constraint_averages(state: &mut EstimatorState, tasks: &[usize], gamma2: f64, h: &[f64]) -> Result<()> {
    check_rate("gamma2", gamma2)?;
    if tasks.len() != h.len() {
        return Err(Error::Shape("task and estimate lengths differ".into()));
    }
    for (&k, &hk) in tasks.iter().zip(h) {
        if k >= state.num_constraints() {
            return Err(Error::Shape(format!("constraint index {k} out of range")));
        }
        state.u_c[k] = Some(blend(state.u_c[k], hk, gamma2));
    }
    Ok(())
}

fn blend(old: Option<f64>, est: f64, gamma: f64) -> f64 {
    match old {
        Some(u) if gamma < 1.0 => (1.0 - gamma) * u + gamma * est,
        _ => est,
    }
}

/// `G1 = (τ/|B|) Σ_i (∇ĝ_1i/u_1i + ∇ĝ_2i/u_2i)` with the current averages.
pub fn g1_estimator(state: &EstimatorState, p: &ParamVector, set: &PairSet, draws: &[PairDraw]) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(Error::Estimator("empty pair batch".into()));
    }
    let c = set.tau / draws.len() as f64;
    let mut g = vec![0.0; p.len()];
    pair_estimates_with_grad(
        p,
        set,
        draws,
        |i, _, _| {
            let (a, b) = state.pair_u(i)?;
            Ok((c / a, c / b))
        },
        &mut g,
    )?;
    Ok(g)
}

/// One objective half-step: evaluates `ĝ` on the draws, updates `u_1, u_2`,
/// then returns `G1` formed with the updated averages.
pub fn objective_step(
    state: &mut EstimatorState,
    p: &ParamVector,
    set: &PairSet,
    draws: &[PairDraw],
    gamma1: f64,
) -> Result<Vec<f64>> {
    check_rate("gamma1", gamma1)?;
    if draws.is_empty() {
        return Err(Error::Estimator("empty pair batch".into()));
    }
    let c = set.tau / draws.len() as f64;
    let mut g = vec![0.0; p.len()];
    pair_estimates_with_grad(
        p,
        set,
        draws,
        |i, ga, gb| {
            update_pair_averages(state, &[i], gamma1, &[ga], &[gb])?;
            let (a, b) = state.pair_u(i)?;
            Ok((c / a, c / b))
        },
        &mut g,
    )?;
    Ok(g)
}

/// `G2 = (1/|B_c|) Σ_{k∈B_c} β[u_k]_+ ∇ĥ_k` with the current averages.
/// `batches[j]` is the minibatch `B_k` for `tasks[j]`.
pub fn g2_estimator(
    state: &EstimatorState,
    p: &ParamVector,
    specs: &[ConstraintSpec],
    tasks: &[usize],
    batches: &[Vec<usize>],
    beta: f64,
) -> Result<Vec<f64>> {
    check_constraint_batch(specs, tasks, batches)?;
    let mut g = vec![0.0; p.len()];
    let scale = beta / tasks.len() as f64;
    for (&k, bk) in tasks.iter().zip(batches) {
        let w = scale * plus(state.u_c[k].unwrap_or(0.0));
        if w > 0.0 {
            accumulate_grad_h(p, &specs[k], Some(bk), w, &mut g)?;
        }
    }
    Ok(g)
}

fn check_constraint_batch(specs: &[ConstraintSpec], tasks: &[usize], batches: &[Vec<usize>]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Estimator("empty constraint batch".into()));
    }
    if tasks.len() != batches.len() {
        return Err(Error::Shape("one minibatch per sampled constraint is required".into()));
    }
    if let Some(&k) = tasks.iter().find(|&&k| k >= specs.len()) {
        return Err(Error::Shape(format!("constraint index {k} out of range")));
    }
    Ok(())
}

/// One constraint half-step: evaluates `ĥ_k` with its gradient, updates `u_k`,
/// and returns `G2` weighted by the updated averages plus the `ĥ_k` values.
pub fn constraint_step(
    state: &mut EstimatorState,
    p: &ParamVector,
    specs: &[ConstraintSpec],
    tasks: &[usize],
    batches: &[Vec<usize>],
    gamma2: f64,
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_constraint_batch(specs, tasks, batches)?;
    constraint_step_with(state, p.len(), tasks, batches, gamma2, beta, |k, bk| {
        crate::losses::grad_h(p, &specs[k], Some(bk))
    })
}

/// [`constraint_step`] over an arbitrary `(ĥ_k, ∇ĥ_k)` oracle.
pub fn constraint_step_with<H>(
    state: &mut EstimatorState,
    dim: usize,
    tasks: &[usize],
    batches: &[Vec<usize>],
    gamma2: f64,
    beta: f64,
    mut oracle: H,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    H: FnMut(usize, &[usize]) -> Result<(f64, Vec<f64>)>,
{
    check_rate("gamma2", gamma2)?;
    if tasks.is_empty() {
        return Err(Error::Estimator("empty constraint batch".into()));
    }
    if tasks.len() != batches.len() {
        return Err(Error::Shape("one minibatch per sampled constraint is required".into()));
    }
    let mut g = vec![0.0; dim];
    let mut hs = Vec::with_capacity(tasks.len());
    let scale = beta / tasks.len() as f64;
    for (&k, bk) in tasks.iter().zip(batches) {
        let (h, gk) = oracle(k, bk)?;
        if gk.len() != dim {
            return Err(Error::Shape(format!("constraint {k} gradient has length {}, expected {dim}", gk.len())));
        }
        update_constraint_averages(state, &[k], gamma2, &[h])?;
        let w = scale * plus(state.u_c[k].unwrap());
        if w > 0.0 {
            axpy(&mut g, w, &gk);
        }
        hs.push(h);
    }
    Ok((g, hs))
}

/// `v ← (1−θ)v + θ(G1+G2)`; the first call sets `v = G1+G2`.
pub fn update_momentum(state: &mut EstimatorState, g1: &[f64], g2: &[f64], theta: f64) -> Result<()> {
    check_rate("theta", theta)?;
    if g1.len() != g2.len() || (!state.v.is_empty() && state.v.len() != g1.len()) {
        return Err(Error::Shape("gradient lengths differ".into()));
    }
    if state.v.is_empty() {
        state.v = g1.iter().zip(g2).map(|(a, b)| a + b).collect();
    } else if theta == 1.0 {
        for ((v, a), b) in state.v.iter_mut().zip(g1).zip(g2) {
            *v = a + b;
        }
    } else {
        for ((v, a), b) in state.v.iter_mut().zip(g1).zip(g2) {
            *v = (1.0 - theta) * *v + theta * (a + b);
        }
    }
    if !is_finite(&state.v) {
        return Err(Error::Invariant("momentum became non-finite".into()));
    }
    Ok(())
}

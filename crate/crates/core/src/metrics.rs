//! Developmental-safety metrics and constraint-geometry diagnostics.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, pairwise_sum};
use crate::losses::{grad_h, mean_ce_with_grad, plus, ConstraintSpec};
use crate::model::{class_text_passes, predict, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ZeroOne,
    Ce,
}

/// Held-out samples of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub label: usize,
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub tasks: Vec<LabeledSet>,
    pub target: LabeledSet,
    pub class_texts: Arc<Vec<Vec<f64>>>,
    pub tau0: f64,
}

/// Mean loss of `p` on one labeled set.
pub fn set_loss(p: &ParamVector, set: &LabeledSet, class_texts: &[Vec<f64>], tau0: f64, kind: LossKind) -> Result<f64> {
    if set.samples.is_empty() {
        return Err(Error::Metric(format!("empty evaluation set for class {}", set.label)));
    }
    let xs: Vec<&[f64]> = set.samples.iter().map(|s| s.as_slice()).collect();
    match kind {
        LossKind::Ce => {
            let l = mean_ce_with_grad(p, &xs, set.label, class_texts, tau0, None)?;
            Ok(pairwise_sum(&l) / l.len() as f64)
        }
        LossKind::ZeroOne => Ok(1.0 - accuracy_on(p, &xs, set.label, class_texts)?),
    }
}

fn accuracy_on(p: &ParamVector, xs: &[&[f64]], label: usize, class_texts: &[Vec<f64>]) -> Result<f64> {
    let classes = class_text_passes(p, class_texts)?;
    let mut correct = 0usize;
    for x in xs {
        let e = crate::model::encode_image(p, x)?;
        let s: Vec<f64> = classes.iter().map(|c| dot(e.values(), c.embedding())).collect();
        if predict(&s)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}

/// Fraction of `set` classified correctly.
pub fn accuracy(p: &ParamVector, set: &LabeledSet, class_texts: &[Vec<f64>]) -> Result<f64> {
    if set.samples.is_empty() {
        return Err(Error::Metric(format!("empty evaluation set for class {}", set.label)));
    }
    let xs: Vec<&[f64]> = set.samples.iter().map(|s| s.as_slice()).collect();
    accuracy_on(p, &xs, set.label, class_texts)
}

/// Per-task mean losses on the protected evaluation sets.
pub fn task_losses(p: &ParamVector, eval: &EvalSets, kind: LossKind) -> Result<Vec<f64>> {
    if eval.tasks.is_empty() {
        return Err(Error::Metric("no protected tasks".into()));
    }
    eval.tasks
        .iter()
        .map(|s| set_loss(p, s, &eval.class_texts, eval.tau0, kind))
        .collect()
}

/// `min_k (old_k − new_k)`.
pub fn dev_safety_from_losses(old: &[f64], new: &[f64]) -> Result<f64> {
    if old.is_empty() || old.len() != new.len() {
        return Err(Error::Metric("loss vectors must be nonempty and of equal length".into()));
    }
    Ok(old.iter().zip(new).map(|(o, n)| o - n).fold(f64::INFINITY, f64::min))
}

pub fn dev_safety(w_new: &ParamVector, w_old: &ParamVector, eval: &EvalSets, kind: LossKind) -> Result<f64> {
    dev_safety_from_losses(&task_losses(w_old, eval, kind)?, &task_losses(w_new, eval, kind)?)
}

/// Fraction of runs with `DevSafety ≥ 0`.
pub fn retention_ratio(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("retention ratio of no runs".into()));
    }
    Ok(values.iter().filter(|&&v| v >= 0.0).count() as f64 / values.len() as f64)
}

pub fn delta_target_acc(w_new: &ParamVector, w_old: &ParamVector, eval: &EvalSets) -> Result<f64> {
    Ok(accuracy(w_new, &eval.target, &eval.class_texts)? - accuracy(w_old, &eval.target, &eval.class_texts)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Inputs {
    /// `n_k` per task.
    pub n: Vec<usize>,
    pub m: usize,
    pub delta: f64,
    /// Rademacher constant `C` in `R_n ≤ C n^{-α}`.
    pub c: f64,
    pub alpha: f64,
}

/// Per-task slack `4C/n_k^α + 2√(ln(2m/δ)/(2n_k))`.
pub fn lemma1_bound(inp: &Lemma1Inputs) -> Result<Vec<f64>> {
    if !(inp.delta > 0.0 && inp.delta < 1.0) {
        return Err(Error::config("delta", "must lie in (0, 1)"));
    }
    if !(inp.c >= 0.0 && inp.c.is_finite()) {
        return Err(Error::config("c", "must be >= 0"));
    }
    if !(inp.alpha > 0.0 && inp.alpha <= 0.5) {
        return Err(Error::config("alpha", "must lie in (0, 0.5]"));
    }
    if inp.m == 0 || inp.n.is_empty() || inp.n.contains(&0) {
        return Err(Error::config("n", "need m >= 1 and every n_k >= 1"));
    }
    let log_term = (2.0 * inp.m as f64 / inp.delta).ln();
    Ok(inp
        .n
        .iter()
        .map(|&n| {
            let n = n as f64;
            4.0 * inp.c / n.powf(inp.alpha) + 2.0 * (log_term / (2.0 * n)).sqrt()
        })
        .collect())
}

/// Eigenvalues (ascending) of the Gram matrix `JᵀJ` of the given columns.
pub fn gram_eigenvalues(columns: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = columns.len();
    if m == 0 {
        return Err(Error::Metric("no constraint gradients".into()));
    }
    let gram = DMatrix::from_fn(m, m, |i, j| dot(&columns[i], &columns[j]));
    let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Smallest singular value of the matrix with the given columns.
pub fn sigma_min_of_columns(columns: &[Vec<f64>]) -> Result<f64> {
    Ok(gram_eigenvalues(columns)?[0].max(0.0).sqrt())
}

/// Full-data constraint gradients. With `heads = false` only the shared
/// block `(u, W)` is kept.
pub fn constraint_jacobian(p: &ParamVector, specs: &[ConstraintSpec], heads: bool) -> Result<Vec<Vec<f64>>> {
    if specs.is_empty() {
        return Err(Error::Metric("no constraints".into()));
    }
    let shared = p.layout().shared();
    specs
        .iter()
        .map(|s| {
            let (_, g) = grad_h(p, s, None)?;
            Ok(if heads { g } else { g[shared.clone()].to_vec() })
        })
        .collect()
}

pub fn constraint_jacobian_sigma_min(p: &ParamVector, specs: &[ConstraintSpec], heads: bool) -> Result<f64> {
    if heads && !p.shape().heads_enabled {
        return Err(Error::Precondition("model has no task heads".into()));
    }
    sigma_min_of_columns(&constraint_jacobian(p, specs, heads)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    /// `λ_min` of the augmented Gram matrix.
    pub lhs: f64,
    /// `λ_min(∇hᵀ∇h) + min_k min{‖∇_W h_k V_k‖², ‖∇_W h_kᵀ U_k‖²}`.
    pub rhs: f64,
    pub holds: bool,
    pub base_lambda_min: f64,
    /// `‖∇_W h_k V_k‖_F²` per constraint.
    pub v_terms: Vec<f64>,
    /// `‖∇_W h_kᵀ U_k‖_F²` per constraint.
    pub u_terms: Vec<f64>,
    /// `λ_min(∇hᵀ∇h) + min_k v_k + min_k u_k`.
    pub proof_bound: f64,
}

/// One constraint's head factors: `U` is `d_2 × r`, `V` is `d_1 × r`.
pub struct HeadFactors<'a> {
    pub u: &'a [f64],
    pub v: &'a [f64],
}

/// Lemma check from gradients `∇h_k(w)` with the `W` block at `w_block`
/// (row-major `d_2 × d_1`), where each `ĥ_k(ŵ) = h_k(W + U_kV_kᵀ, u)`.
/// The augmented gradient appends `∇_W h_k V_k` and `∇_W h_kᵀ U_k` in
/// constraint `k`'s own head block.
pub fn lemma2_from_gradients(
    grads: &[Vec<f64>],
    w_block: Range<usize>,
    d_2: usize,
    d_1: usize,
    r: usize,
    heads: &[HeadFactors<'_>],
) -> Result<Lemma2Report> {
    let m = grads.len();
    if m == 0 || heads.len() != m {
        return Err(Error::Metric("one head per constraint gradient is required".into()));
    }
    if w_block.len() != d_2 * d_1 {
        return Err(Error::Shape("W block size mismatch".into()));
    }
    for (k, h) in heads.iter().enumerate() {
        if h.u.len() != d_2 * r || h.v.len() != d_1 * r {
            return Err(Error::Shape(format!("head {k} has the wrong shape")));
        }
        let mut uv_max = 0.0f64;
        for i in 0..d_2 {
            for j in 0..d_1 {
                let s: f64 = (0..r).map(|c| h.u[i * r + c] * h.v[j * r + c]).sum();
                uv_max = uv_max.max(s.abs());
            }
        }
        if uv_max != 0.0 {
            return Err(Error::Precondition(format!("U_{k} V_{k}ᵀ is not zero")));
        }
    }
    let block = d_2 * r + d_1 * r;
    let mut aug = Vec::with_capacity(m);
    let mut v_terms = Vec::with_capacity(m);
    let mut u_terms = Vec::with_capacity(m);
    for (k, g) in grads.iter().enumerate() {
        let gw = &g[w_block.clone()];
        // ∇_W h_k V_k : d_2 × r
        let mut gv = vec![0.0; d_2 * r];
        for i in 0..d_2 {
            for c in 0..r {
                gv[i * r + c] = (0..d_1).map(|j| gw[i * d_1 + j] * heads[k].v[j * r + c]).sum();
            }
        }
        // ∇_W h_kᵀ U_k : d_1 × r
        let mut gu = vec![0.0; d_1 * r];
        for j in 0..d_1 {
            for c in 0..r {
                gu[j * r + c] = (0..d_2).map(|i| gw[i * d_1 + j] * heads[k].u[i * r + c]).sum();
            }
        }
        v_terms.push(dot(&gv, &gv));
        u_terms.push(dot(&gu, &gu));
        let mut col = g.clone();
        col.resize(g.len() + m * block, 0.0);
        let off = g.len() + k * block;
        col[off..off + d_2 * r].copy_from_slice(&gv);
        col[off + d_2 * r..off + block].copy_from_slice(&gu);
        aug.push(col);
    }
    let base = gram_eigenvalues(grads)?[0];
    let lhs = gram_eigenvalues(&aug)?[0];
    let min_of = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let stmt = v_terms.iter().zip(&u_terms).map(|(a, b)| a.min(*b)).fold(f64::INFINITY, f64::min);
    let rhs = base + stmt;
    Ok(Lemma2Report {
        lhs,
        rhs,
        holds: lhs >= rhs - 1e-8,
        base_lambda_min: base,
        proof_bound: base + min_of(&v_terms) + min_of(&u_terms),
        v_terms,
        u_terms,
    })
}

/// Lemma check at a model point whose task heads satisfy `U_kV_kᵀ = 0`.
/// Constraint `k` is paired with the head of its class.
pub fn lemma2_check(p: &ParamVector, specs: &[ConstraintSpec]) -> Result<Lemma2Report> {
    let shape = p.shape();
    if !shape.heads_enabled {
        return Err(Error::Precondition("model has no task heads".into()));
    }
    if !p.low_rank_updates_vanish() {
        return Err(Error::Precondition("U_k V_kᵀ must vanish for every head".into()));
    }
    let grads = constraint_jacobian(p, specs, false)?;
    let layout = p.layout();
    let heads = specs
        .iter()
        .map(|s| {
            Ok(HeadFactors {
                u: p.head_u(s.task).ok_or_else(|| Error::Shape(format!("no head for task {}", s.task)))?,
                v: p.head_v(s.task).ok_or_else(|| Error::Shape(format!("no head for task {}", s.task)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    lemma2_from_gradients(&grads, layout.head_w.clone(), shape.d_2, shape.d_1, shape.r, &heads)
}

/// `β[u_k]_+` per constraint.
pub fn effective_weights(u: &[f64], beta: f64) -> Vec<f64> {
    u.iter().map(|&v| beta * plus(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_examples() {
        assert_eq!(retention_ratio(&[0.1, -0.2, 0.0, 0.3, 0.05]).unwrap(), 0.8);
        assert_eq!(retention_ratio(&[-1.0, -0.1]).unwrap(), 0.0);
        assert_eq!(retention_ratio(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(retention_ratio(&[]).is_err());
    }

    #[test]
    fn dev_safety_hand_example() {
        let d = dev_safety_from_losses(&[0.5, 0.5], &[0.4, 0.6]).unwrap();
        assert!((d + 0.1).abs() < 1e-15);
    }

    #[test]
    fn effective_weight_examples() {
        assert_eq!(effective_weights(&[-1.0, 0.2], 100.0), vec![0.0, 20.0]);
        assert_eq!(effective_weights(&[-1.0, 0.0], 100.0), vec![0.0, 0.0]);
        assert_eq!(effective_weights(&[0.5, 0.2], 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn sigma_min_simple() {
        assert!((sigma_min_of_columns(&[vec![0.0, 1.0, 0.0]]).unwrap() - 1.0).abs() < 1e-15);
        let cols = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert!((sigma_min_of_columns(&cols).unwrap() - 1.0).abs() < 1e-15);
        assert!(sigma_min_of_columns(&[]).is_err());
    }

    #[test]
    fn sample_bound_vanishes_with_n() {
        let b = lemma1_bound(&Lemma1Inputs {
            n: vec![100, 1_000_000_000_000],
            m: 1,
            delta: 0.5,
            c: 0.0,
            alpha: 0.5,
        })
        .unwrap();
        assert!(b[1] < 1e-5 && b[1] < b[0]);
    }
}

//! Weighting baselines: a fixed-weight regularization method (RM), a weighted
//! combination of contrastive losses (WCCL), and plain finetuning (RM with
//! `α = 0`). All run on the same solver loop with the penalty term disabled.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{objective_step, EstimatorState};
use crate::linalg::{axpy, pairwise_sum};
use crate::losses::{
    accumulate_grad_h, grad_f, mean_ce_with_grad, weighted_contrastive, ConstraintSpec, PairContext, PairDraw, PairSet,
    Pool,
};
use crate::model::ParamVector;
use crate::optimizer::{run_with_monitor, Monitor, Problem, RetentionProblem, RunOutput, SolverConfig, StepDraws};
use crate::rng::{sample_without_replacement, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Rm,
    Wccl,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    #[serde(default)]
    pub alpha: f64,
    pub solver: SolverConfig,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BaselineKind::Rm if !(self.alpha >= 0.0 && self.alpha.is_finite()) => {
                Err(Error::config("alpha", "RM weight must be >= 0"))
            }
            BaselineKind::Wccl if !(0.0..=1.0).contains(&self.alpha) => {
                Err(Error::config("alpha", "WCCL weight must lie in [0, 1]"))
            }
            _ => self.solver.validate(),
        }
    }
}

/// Mean live cross-entropy over `D_k`, with `grad += scale · ∇`.
fn mean_ce(p: &ParamVector, spec: &ConstraintSpec, grad: Option<(&mut [f64], f64)>) -> Result<f64> {
    let xs: Vec<&[f64]> = spec.samples.iter().map(|s| s.as_slice()).collect();
    let l = mean_ce_with_grad(p, &xs, spec.task, &spec.class_texts, spec.tau0, grad)?;
    Ok(pairwise_sum(&l) / l.len() as f64)
}

/// `F + α (1/m) Σ_k L_k(w, D_k)` (live losses only).
pub fn rm_objective(p: &ParamVector, pairs: &PairSet, specs: &[ConstraintSpec], alpha: f64) -> Result<f64> {
    grad_rm_objective(p, pairs, specs, alpha).map(|(v, _)| v)
}

pub fn grad_rm_objective(
    p: &ParamVector,
    pairs: &PairSet,
    specs: &[ConstraintSpec],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(alpha >= 0.0) {
        return Err(Error::config("alpha", "RM weight must be >= 0"));
    }
    let (f, mut g) = grad_f(p, pairs)?;
    if alpha == 0.0 || specs.is_empty() {
        return Ok((f, g));
    }
    let w = alpha / specs.len() as f64;
    let mut terms = Vec::with_capacity(specs.len());
    for s in specs {
        terms.push(mean_ce(p, s, Some((&mut g, w)))?);
    }
    Ok((f + w * pairwise_sum(&terms), g))
}

/// Target pairs plus one pair group per protected task over a unified
/// registry. A task-`k` pair contrasts against every registry entry outside
/// task `k` plus its own positive.
#[derive(Debug, Clone)]
pub struct WcclData {
    pub set: PairSet,
    /// Indices of target pairs in `set`.
    pub target: Vec<usize>,
    /// Indices of each task's pairs in `set`.
    pub tasks: Vec<Vec<usize>>,
}

impl WcclData {
    /// `target_pairs` use the given pools; `task_pairs[k]` lists `(image,
    /// text)` registry indices for task `k`.
    pub fn new(
        images: Vec<Vec<f64>>,
        texts: Vec<Vec<f64>>,
        target_pairs: &[(usize, usize)],
        target_text_pool: Arc<Vec<usize>>,
        target_image_pool: Arc<Vec<usize>>,
        task_pairs: &[Vec<(usize, usize)>],
        tau: f64,
    ) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut target = Vec::new();
        for &(x, t) in target_pairs {
            target.push(pairs.len());
            pairs.push(PairContext {
                index: pairs.len(),
                image: x,
                text: t,
                text_pool: Pool::new(target_text_pool.clone(), (!target_text_pool.contains(&t)).then_some(t)),
                image_pool: Pool::new(target_image_pool.clone(), (!target_image_pool.contains(&x)).then_some(x)),
            });
        }
        let mut tasks = Vec::new();
        for group in task_pairs {
            let own_x: BTreeSet<usize> = group.iter().map(|p| p.0).collect();
            let own_t: BTreeSet<usize> = group.iter().map(|p| p.1).collect();
            let tx: Arc<Vec<usize>> = Arc::new((0..texts.len()).filter(|t| !own_t.contains(t)).collect());
            let ix: Arc<Vec<usize>> = Arc::new((0..images.len()).filter(|x| !own_x.contains(x)).collect());
            let mut idx = Vec::new();
            for &(x, t) in group {
                idx.push(pairs.len());
                pairs.push(PairContext {
                    index: pairs.len(),
                    image: x,
                    text: t,
                    text_pool: Pool::new(tx.clone(), Some(t)),
                    image_pool: Pool::new(ix.clone(), Some(x)),
                });
            }
            if idx.is_empty() {
                return Err(Error::Shape("every WCCL task needs at least one pair".into()));
            }
            tasks.push(idx);
        }
        if target.is_empty() {
            return Err(Error::Shape("WCCL needs target pairs".into()));
        }
        Ok(WcclData {
            set: PairSet::new(images, texts, pairs, tau)?,
            target,
            tasks,
        })
    }

    fn weights(&self, alpha: f64) -> Vec<(usize, f64)> {
        let mut w = Vec::new();
        let nt = self.target.len() as f64;
        if alpha < 1.0 {
            w.extend(self.target.iter().map(|&i| (i, (1.0 - alpha) / nt)));
        }
        if alpha > 0.0 && !self.tasks.is_empty() {
            let m = self.tasks.len() as f64;
            for group in &self.tasks {
                let nk = group.len() as f64;
                w.extend(group.iter().map(|&i| (i, alpha / (m * nk))));
            }
        }
        w
    }
}

/// `α · mean_k L_ctr(D_k) + (1 − α) · L_ctr(target)`.
pub fn wccl_objective(p: &ParamVector, data: &WcclData, alpha: f64) -> Result<f64> {
    grad_wccl_objective(p, data, alpha).map(|(v, _)| v)
}

pub fn grad_wccl_objective(p: &ParamVector, data: &WcclData, alpha: f64) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", "WCCL weight must lie in [0, 1]"));
    }
    let w = data.weights(alpha);
    if w.is_empty() {
        return Ok((0.0, vec![0.0; p.len()]));
    }
    weighted_contrastive(p, &data.set, &w)
}

/// RM or plain finetuning as a solver problem. Constraints remain visible for
/// diagnostics; the solver's penalty term is switched off.
pub struct RmProblem<'a> {
    pub base: &'a RetentionProblem,
    pub alpha: f64,
}

impl Problem for RmProblem<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn num_pairs(&self) -> usize {
        self.base.num_pairs()
    }
    fn pool_sizes(&self, i: usize) -> (usize, usize) {
        self.base.pool_sizes(i)
    }
    fn num_constraints(&self) -> usize {
        self.base.num_constraints()
    }
    fn constraint_len(&self, k: usize) -> usize {
        self.base.constraint_len(k)
    }

    fn objective_estimate(
        &self,
        w: &[f64],
        draws: &StepDraws,
        state: &mut EstimatorState,
        gamma1: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        let mut g = self.base.objective_estimate(w, draws, state, gamma1, rng)?;
        if self.alpha > 0.0 && !draws.tasks.is_empty() {
            let p = self.base.params(w)?;
            let scale = self.alpha / draws.tasks.len() as f64;
            for (&k, bk) in draws.tasks.iter().zip(&draws.task_batches) {
                accumulate_grad_h(&p, &self.base.specs[k], Some(bk), scale, &mut g)?;
            }
        }
        Ok(g)
    }

    fn constraint_estimate(&self, w: &[f64], k: usize, batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        self.base.constraint_estimate(w, k, batch)
    }

    fn objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        grad_rm_objective(&self.base.params(w)?, &self.base.pairs, &self.base.specs, self.alpha)
    }

    fn kkt_objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.base.objective_full(w)
    }
}

/// WCCL as a solver problem. `B` is drawn from target pairs; protected pairs
/// are drawn through the sampled tasks `B_c` and their minibatches `B_k`.
pub struct WcclProblem<'a> {
    pub base: &'a RetentionProblem,
    pub data: &'a WcclData,
    pub alpha: f64,
    pub text_negatives: Option<usize>,
    pub image_negatives: Option<usize>,
}

impl WcclProblem<'_> {
    fn check(&self) -> Result<()> {
        if self.data.target.len() != self.base.num_pairs() {
            return Err(Error::Shape("WCCL target pairs must match the base problem".into()));
        }
        if self.data.tasks.len() != self.base.num_constraints() {
            return Err(Error::Shape("WCCL needs one pair group per constraint".into()));
        }
        for (k, g) in self.data.tasks.iter().enumerate() {
            if g.len() != self.base.constraint_len(k) {
                return Err(Error::Shape(format!("WCCL task {k} size differs from its constraint set")));
            }
        }
        Ok(())
    }

    fn draw(&self, i: usize, rng: &mut StreamRng) -> PairDraw {
        let c = &self.data.set.pairs[i];
        let (nt, ni) = (c.text_pool.len(), c.image_pool.len());
        PairDraw {
            pair: i,
            text_subset: sample_without_replacement(rng, nt, self.text_negatives.map_or(nt, |s| s.min(nt))),
            image_subset: sample_without_replacement(rng, ni, self.image_negatives.map_or(ni, |s| s.min(ni))),
        }
    }
}

impl Problem for WcclProblem<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn num_pairs(&self) -> usize {
        self.data.target.len()
    }
    fn num_pair_states(&self) -> usize {
        self.data.set.len()
    }
    fn pool_sizes(&self, i: usize) -> (usize, usize) {
        let c = &self.data.set.pairs[self.data.target[i]];
        (c.text_pool.len(), c.image_pool.len())
    }
    fn num_constraints(&self) -> usize {
        self.base.num_constraints()
    }
    fn constraint_len(&self, k: usize) -> usize {
        self.base.constraint_len(k)
    }

    fn objective_estimate(
        &self,
        w: &[f64],
        draws: &StepDraws,
        state: &mut EstimatorState,
        gamma1: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        let p = self.base.params(w)?;
        let target: Vec<PairDraw> = draws
            .pair_draws()
            .into_iter()
            .map(|mut d| {
                d.pair = self.data.target[d.pair];
                d
            })
            .collect();
        let mut g = vec![0.0; p.len()];
        if self.alpha < 1.0 {
            let gt = objective_step(state, &p, &self.data.set, &target, gamma1)?;
            axpy(&mut g, 1.0 - self.alpha, &gt);
        }
        if self.alpha > 0.0 && !draws.tasks.is_empty() {
            let scale = self.alpha / draws.tasks.len() as f64;
            for (&k, bk) in draws.tasks.iter().zip(&draws.task_batches) {
                let ds: Vec<PairDraw> = bk.iter().map(|&j| self.draw(self.data.tasks[k][j], rng)).collect();
                let gk = objective_step(state, &p, &self.data.set, &ds, gamma1)?;
                axpy(&mut g, scale, &gk);
            }
        }
        Ok(g)
    }

    fn constraint_estimate(&self, w: &[f64], k: usize, batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        self.base.constraint_estimate(w, k, batch)
    }

    fn objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        grad_wccl_objective(&self.base.params(w)?, self.data, self.alpha)
    }

    fn kkt_objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.base.objective_full(w)
    }
}

/// Runs a baseline from `w_old` on the problem's data.
pub fn run_baseline(
    cfg: &BaselineConfig,
    base: &RetentionProblem,
    wccl: Option<&WcclData>,
    w_old: &ParamVector,
    monitor: &mut Monitor<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut solver = cfg.solver.clone();
    solver.penalty = false;
    let w0 = w_old.flatten();
    match cfg.kind {
        BaselineKind::Rm | BaselineKind::Finetune => {
            let alpha = if cfg.kind == BaselineKind::Finetune { 0.0 } else { cfg.alpha };
            run_with_monitor(&RmProblem { base, alpha }, &solver, w0, monitor)
        }
        BaselineKind::Wccl => {
            let data = wccl.ok_or_else(|| Error::config("kind", "WCCL requires pair groups for every task"))?;
            let problem = WcclProblem {
                base,
                data,
                alpha: cfg.alpha,
                text_negatives: solver.batch.text_negatives,
                image_negatives: solver.batch.image_negatives,
            };
            problem.check()?;
            run_with_monitor(&problem, &solver, w0, monitor)
        }
    }
}

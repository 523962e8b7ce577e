use crate::error::{Error, Result};
use crate::estimators::{objective_step, EstimatorState};
use crate::losses::{grad_f, grad_h, ConstraintSpec, PairDraw, PairSet};
use crate::model::{ModelShape, ParamVector};
use crate::rng::StreamRng;

/// Everything sampled for one iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepDraws {
    /// `B`, ascending.
    pub pairs: Vec<usize>,
    pub text_subsets: Vec<Vec<usize>>,
    pub image_subsets: Vec<Vec<usize>>,
    /// `B_c`, ascending.
    pub tasks: Vec<usize>,
    /// `B_k` for each entry of `tasks`.
    pub task_batches: Vec<Vec<usize>>,
}

impl StepDraws {
    pub fn pair_draws(&self) -> Vec<PairDraw> {
        self.pairs
            .iter()
            .zip(&self.text_subsets)
            .zip(&self.image_subsets)
            .map(|((&pair, t), i)| PairDraw {
                pair,
                text_subset: t.clone(),
                image_subset: i.clone(),
            })
            .collect()
    }
}

/// A constrained problem `min F(w) s.t. h_k(w) ≤ 0` as seen by the solver.
pub trait Problem {
    fn dim(&self) -> usize;

    /// Size of the index set `B` is drawn from.
    fn num_pairs(&self) -> usize;

    /// Number of per-pair moving averages to allocate.
    fn num_pair_states(&self) -> usize {
        self.num_pairs()
    }

    /// `(|T_i⁻|, |I_i⁻|)` for pair `i`.
    fn pool_sizes(&self, _i: usize) -> (usize, usize) {
        (1, 1)
    }

    fn num_constraints(&self) -> usize;

    /// `n_k`, the number of samples behind constraint `k`.
    fn constraint_len(&self, _k: usize) -> usize {
        1
    }

    /// Stochastic objective gradient for this step. May update the pair
    /// averages in `state`.
    fn objective_estimate(
        &self,
        w: &[f64],
        draws: &StepDraws,
        state: &mut EstimatorState,
        gamma1: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>>;

    /// `(ĥ_k, ∇ĥ_k)` on `batch` (all samples when `None`).
    fn constraint_estimate(&self, w: &[f64], k: usize, batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)>;

    /// Exact value and gradient of the objective being optimized.
    fn objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Objective used for KKT diagnostics; the optimized one by default.
    fn kkt_objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.objective_full(w)
    }

    fn constraint_full(&self, w: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
        self.constraint_estimate(w, k, None)
    }
}

type ValueGrad = Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync>;
type StochasticGrad = Box<dyn Fn(&[f64], &mut StreamRng) -> Result<Vec<f64>> + Send + Sync>;

/// A problem assembled from closures. Constraints are deterministic; the
/// objective gradient is exact unless a stochastic oracle is supplied.
pub struct GenericProblem {
    dim: usize,
    objective: ValueGrad,
    stochastic: Option<StochasticGrad>,
    constraints: Vec<ValueGrad>,
}

impl GenericProblem {
    pub fn new<F>(dim: usize, objective: F) -> Self
    where
        F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync + 'static,
    {
        GenericProblem {
            dim,
            objective: Box::new(objective),
            stochastic: None,
            constraints: Vec::new(),
        }
    }

    pub fn with_constraint<H>(mut self, h: H) -> Self
    where
        H: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync + 'static,
    {
        self.constraints.push(Box::new(h));
        self
    }

    pub fn with_stochastic_objective<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64], &mut StreamRng) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        self.stochastic = Some(Box::new(g));
        self
    }

    fn checked(&self, (v, g): (f64, Vec<f64>)) -> Result<(f64, Vec<f64>)> {
        if g.len() != self.dim {
            return Err(Error::Shape(format!("gradient has length {}, expected {}", g.len(), self.dim)));
        }
        Ok((v, g))
    }
}

impl Problem for GenericProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_pairs(&self) -> usize {
        1
    }

    fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    fn objective_estimate(
        &self,
        w: &[f64],
        _draws: &StepDraws,
        _state: &mut EstimatorState,
        _gamma1: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        match &self.stochastic {
            Some(g) => self.checked((0.0, g(w, rng)?)).map(|(_, g)| g),
            None => self.objective_full(w).map(|(_, g)| g),
        }
    }

    fn constraint_estimate(&self, w: &[f64], k: usize, _batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let h = self
            .constraints
            .get(k)
            .ok_or_else(|| Error::Shape(format!("constraint {k} out of range")))?;
        self.checked(h(w)?)
    }

    fn objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.checked((self.objective)(w)?)
    }
}

/// Target-pair contrastive objective with per-class retention constraints.
#[derive(Debug, Clone)]
pub struct RetentionProblem {
    pub shape: ModelShape,
    pub pairs: PairSet,
    pub specs: Vec<ConstraintSpec>,
}

impl RetentionProblem {
    pub fn new(shape: ModelShape, pairs: PairSet, specs: Vec<ConstraintSpec>) -> Result<Self> {
        shape.validate()?;
        if pairs.is_empty() {
            return Err(Error::Estimator("retention problem needs at least one target pair".into()));
        }
        Ok(RetentionProblem { shape, pairs, specs })
    }

    pub fn params(&self, w: &[f64]) -> Result<ParamVector> {
        ParamVector::unflatten(self.shape.clone(), w.to_vec())
    }
}

impl Problem for RetentionProblem {
    fn dim(&self) -> usize {
        self.shape.layout().len
    }

    fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn pool_sizes(&self, i: usize) -> (usize, usize) {
        let c = &self.pairs.pairs[i];
        (c.text_pool.len(), c.image_pool.len())
    }

    fn num_constraints(&self) -> usize {
        self.specs.len()
    }

    fn constraint_len(&self, k: usize) -> usize {
        self.specs[k].len()
    }

    fn objective_estimate(
        &self,
        w: &[f64],
        draws: &StepDraws,
        state: &mut EstimatorState,
        gamma1: f64,
        _rng: &mut StreamRng,
    ) -> Result<Vec<f64>> {
        let p = self.params(w)?;
        objective_step(state, &p, &self.pairs, &draws.pair_draws(), gamma1)
    }

    fn constraint_estimate(&self, w: &[f64], k: usize, batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let spec = self
            .specs
            .get(k)
            .ok_or_else(|| Error::Shape(format!("constraint {k} out of range")))?;
        grad_h(&self.params(w)?, spec, batch)
    }

    fn objective_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        grad_f(&self.params(w)?, &self.pairs)
    }
}

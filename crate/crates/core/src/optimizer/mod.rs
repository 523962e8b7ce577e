//! The penalty solver loop: sampling, moving averages, momentum, the
//! parameter update, KKT diagnostics and checkpointing.

mod config;
mod preset;
mod problem;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{beta_schedule, eta_schedule, BatchSizes, BetaMode, EtaMode, SolverConfig};
pub use preset::{theorem_preset, PresetBatches, TheoremInputs, TheoremSchedule};
pub use problem::{GenericProblem, Problem, RetentionProblem, StepDraws};

use crate::error::{Error, Result};
use crate::estimators::{constraint_step_with, update_momentum, EstimatorState};
use crate::linalg::{is_finite, norm, pairwise_sum};
use crate::losses::plus;
use crate::rng::{permutation, sample_without_replacement, RunStreams, StreamRng};

pub const CHECKPOINT_VERSION: u32 = 1;
const DIVERGENCE_LIMIT: f64 = 1e12;

/// Approximate-KKT residuals at one point, with `λ_k = (β/m)[h_k]_+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub objective: f64,
    pub stationarity: f64,
    pub violation: f64,
    pub complementarity: f64,
    pub h: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl KktReport {
    /// `Φ = F + (β/2m) Σ [h_k]_+²`.
    pub fn penalty_value(&self, beta: f64) -> f64 {
        if self.h.is_empty() {
            return self.objective;
        }
        let terms: Vec<f64> = self.h.iter().map(|&h| 0.5 * beta * plus(h).powi(2)).collect();
        self.objective + pairwise_sum(&terms) / self.h.len() as f64
    }
}

pub fn kkt_report<P: Problem + ?Sized>(problem: &P, w: &[f64], beta: f64) -> Result<KktReport> {
    let (objective, mut g) = problem.kkt_objective_full(w)?;
    let m = problem.num_constraints();
    let mut h = Vec::with_capacity(m);
    let mut lambda = Vec::with_capacity(m);
    for k in 0..m {
        let (hk, gk) = problem.constraint_full(w, k)?;
        let lk = beta * plus(hk) / m as f64;
        if lk > 0.0 {
            crate::linalg::axpy(&mut g, lk, &gk);
        }
        h.push(hk);
        lambda.push(lk);
    }
    let pos: Vec<f64> = h.iter().map(|&v| plus(v)).collect();
    let violation = norm(&pos);
    let complementarity = pairwise_sum(&lambda.iter().zip(&pos).map(|(l, p)| l * p).collect::<Vec<_>>());
    Ok(KktReport {
        objective,
        stationarity: norm(&g),
        violation,
        complementarity,
        h,
        lambda,
    })
}

/// One logged point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Number of parameter updates performed so far.
    pub step: u64,
    pub epoch: u64,
    pub beta: f64,
    pub eta: f64,
    pub phi: f64,
    pub kkt: KktReport,
    /// `β[u_k]_+` with the current averages.
    pub effective_weights: Vec<f64>,
    /// Extra named values attached by a monitor.
    #[serde(default)]
    pub metrics: Vec<(String, f64)>,
    /// Wall-clock time since the run (or resume) started; not persisted.
    #[serde(skip)]
    pub elapsed_ms: f64,
}

impl StepLog {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Epoch-wise shuffled pair sampler; a trailing partial batch is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSampler {
    order: Vec<usize>,
    pos: usize,
    pub epoch: u64,
}

impl PairSampler {
    pub fn new(n: usize, rng: &mut StreamRng) -> Self {
        PairSampler {
            order: permutation(rng, n),
            pos: 0,
            epoch: 0,
        }
    }

    pub fn next_batch(&mut self, b: usize, rng: &mut StreamRng) -> Vec<usize> {
        let n = self.order.len();
        if self.pos + b > n {
            self.order = permutation(rng, n);
            self.pos = 0;
            self.epoch += 1;
        }
        let mut out = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        out.sort_unstable();
        out
    }
}

/// Full resumable state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: SolverConfig,
    pub params: Vec<f64>,
    pub state: EstimatorState,
    pub streams: RunStreams,
    pub sampler: PairSampler,
    pub trajectory: Vec<StepLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                field: "version".into(),
                msg: format!("unsupported checkpoint version {}", c.version),
            });
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: Vec<f64>,
    pub trajectory: Vec<StepLog>,
    pub state: EstimatorState,
}

impl RunOutput {
    pub fn kkt_reports(&self) -> Vec<&KktReport> {
        self.trajectory.iter().map(|l| &l.kkt).collect()
    }
}

/// Called at each logging step; may attach metrics to the record.
pub type Monitor<'m> = dyn FnMut(&[f64], &mut StepLog) -> Result<()> + 'm;

/// A run in progress.
pub struct Solver<'a, P: Problem + ?Sized> {
    problem: &'a P,
    cfg: SolverConfig,
    w: Vec<f64>,
    state: EstimatorState,
    streams: RunStreams,
    sampler: PairSampler,
    step: u64,
    trajectory: Vec<StepLog>,
    checkpoint_path: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
    started: std::time::Instant,
}

impl<'a, P: Problem + ?Sized> Solver<'a, P> {
    pub fn new(problem: &'a P, cfg: &SolverConfig, w0: Vec<f64>) -> Result<Self> {
        let cfg = cfg.resolved(problem.num_pairs(), problem.num_constraints())?;
        cfg.validate_for(problem.num_pairs(), problem.num_constraints())?;
        if w0.len() != problem.dim() {
            return Err(Error::Shape(format!("initial point has length {}, expected {}", w0.len(), problem.dim())));
        }
        if problem.num_pairs() == 0 {
            return Err(Error::Estimator("problem has no objective samples".into()));
        }
        let mut streams = RunStreams::new(cfg.seed);
        let sampler = PairSampler::new(problem.num_pairs(), &mut streams.pairs);
        Ok(Solver {
            problem,
            state: EstimatorState::new(problem.num_pair_states(), problem.num_constraints()),
            cfg,
            w: w0,
            streams,
            sampler,
            step: 0,
            trajectory: Vec::new(),
            checkpoint_path: None,
            last_checkpoint: None,
            started: std::time::Instant::now(),
        })
    }

    pub fn from_checkpoint(problem: &'a P, ck: Checkpoint) -> Result<Self> {
        if ck.params.len() != problem.dim() {
            return Err(Error::Shape("checkpoint parameters do not match the problem".into()));
        }
        Ok(Solver {
            problem,
            cfg: ck.config,
            w: ck.params,
            state: ck.state,
            streams: ck.streams,
            sampler: ck.sampler,
            step: ck.step,
            trajectory: ck.trajectory,
            checkpoint_path: None,
            last_checkpoint: None,
            started: std::time::Instant::now(),
        })
    }

    /// Periodic checkpoints (per `checkpoint_every`) go to `path`.
    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.w
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn trajectory(&self) -> &[StepLog] {
        &self.trajectory
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.cfg.clone(),
            params: self.w.clone(),
            state: self.state.clone(),
            streams: self.streams.clone(),
            sampler: self.sampler.clone(),
            trajectory: self.trajectory.clone(),
        }
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Divergence {
            step: self.step,
            reason,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    /// Draws `B`, the negative subsets, `B_c` and every `B_k`.
    pub fn sample(&mut self) -> StepDraws {
        let pb = &self.problem;
        let b = self.cfg.batch.pairs.unwrap_or(pb.num_pairs());
        let pairs = self.sampler.next_batch(b, &mut self.streams.pairs);
        let mut text_subsets = Vec::with_capacity(pairs.len());
        let mut image_subsets = Vec::with_capacity(pairs.len());
        for &i in &pairs {
            let (nt, ni) = pb.pool_sizes(i);
            let st = self.cfg.batch.text_negatives.map_or(nt, |s| s.min(nt));
            let si = self.cfg.batch.image_negatives.map_or(ni, |s| s.min(ni));
            text_subsets.push(sample_without_replacement(&mut self.streams.negatives, nt, st));
            image_subsets.push(sample_without_replacement(&mut self.streams.negatives, ni, si));
        }
        let m = pb.num_constraints();
        let (tasks, task_batches) = if m == 0 {
            (Vec::new(), Vec::new())
        } else {
            let bc = self.cfg.batch.constraints.unwrap_or(m);
            let tasks = sample_without_replacement(&mut self.streams.constraints, m, bc);
            let batches = tasks
                .iter()
                .map(|&k| {
                    let nk = pb.constraint_len(k);
                    let bk = self.cfg.batch.constraint_samples.map_or(nk, |s| s.min(nk));
                    sample_without_replacement(&mut self.streams.constraints, nk, bk)
                })
                .collect();
            (tasks, batches)
        };
        StepDraws {
            pairs,
            text_subsets,
            image_subsets,
            tasks,
            task_batches,
        }
    }

    /// One iteration of the algorithm.
    pub fn step(&mut self) -> Result<()> {
        let t = self.step;
        let beta = beta_schedule(t, &self.cfg);
        let eta = eta_schedule(t, &self.cfg);
        let draws = self.sample();
        let g1 = self.problem.objective_estimate(
            &self.w,
            &draws,
            &mut self.state,
            self.cfg.gamma1,
            &mut self.streams.objective,
        )?;
        let g2 = if self.cfg.penalty && !draws.tasks.is_empty() {
            let problem = self.problem;
            let w = &self.w;
            constraint_step_with(
                &mut self.state,
                w.len(),
                &draws.tasks,
                &draws.task_batches,
                self.cfg.gamma2,
                beta,
                |k, bk| problem.constraint_estimate(w, k, Some(bk)),
            )?
            .0
        } else {
            vec![0.0; self.w.len()]
        };
        update_momentum(&mut self.state, &g1, &g2, self.cfg.theta).map_err(|e| match e {
            Error::Invariant(msg) => self.diverged(msg),
            e => e,
        })?;
        if self.cfg.weight_decay > 0.0 {
            let d = 1.0 - eta * self.cfg.weight_decay;
            self.w.iter_mut().for_each(|x| *x *= d);
        }
        for (x, v) in self.w.iter_mut().zip(&self.state.v) {
            *x -= eta * v;
        }
        self.state.t += 1;
        self.step += 1;
        if !is_finite(&self.w) {
            return Err(self.diverged("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Builds the log record for the current iterate.
    pub fn log_now(&self, monitor: &mut Monitor<'_>) -> Result<StepLog> {
        let beta = beta_schedule(self.step, &self.cfg);
        let kkt = kkt_report(self.problem, &self.w, beta)?;
        let phi = kkt.penalty_value(beta);
        if !phi.is_finite() || phi.abs() > DIVERGENCE_LIMIT {
            return Err(self.diverged(format!("penalty objective {phi}")));
        }
        let mut log = StepLog {
            step: self.step,
            epoch: self.sampler.epoch,
            beta,
            eta: eta_schedule(self.step, &self.cfg),
            phi,
            kkt,
            effective_weights: self.state.constraint_averages().iter().map(|&u| beta * plus(u)).collect(),
            metrics: Vec::new(),
            elapsed_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        monitor(&self.w, &mut log)?;
        Ok(log)
    }

    fn should_log(&self) -> bool {
        self.step % self.cfg.log_every == 0 || self.step == self.cfg.iterations
    }

    /// Runs to the iteration budget, logging at step 0, every `log_every`
    /// updates and at the end.
    pub fn run_to_end(mut self, monitor: &mut Monitor<'_>) -> Result<RunOutput> {
        let total = self.cfg.iterations;
        if total > 0 && self.step == 0 && self.trajectory.is_empty() {
            let log = self.log_now(monitor)?;
            self.trajectory.push(log);
        }
        while self.step < total {
            self.step()?;
            if self.should_log() {
                let log = self.log_now(monitor)?;
                self.trajectory.push(log);
            }
            if let (Some(every), Some(path)) = (self.cfg.checkpoint_every, &self.checkpoint_path) {
                if self.step % every == 0 {
                    self.checkpoint().save(path)?;
                    self.last_checkpoint = Some(path.clone());
                }
            }
        }
        Ok(RunOutput {
            params: self.w,
            trajectory: self.trajectory,
            state: self.state,
        })
    }

    /// Runs at most `n` more iterations (logging as usual) and stops.
    pub fn advance(&mut self, n: u64, monitor: &mut Monitor<'_>) -> Result<()> {
        let total = self.cfg.iterations;
        if total > 0 && self.step == 0 && self.trajectory.is_empty() {
            let log = self.log_now(monitor)?;
            self.trajectory.push(log);
        }
        let stop = (self.step + n).min(total);
        while self.step < stop {
            self.step()?;
            if self.should_log() {
                let log = self.log_now(monitor)?;
                self.trajectory.push(log);
            }
        }
        Ok(())
    }
}

/// Runs the solver from `w0` for `cfg.iterations` steps.
pub fn run<P: Problem + ?Sized>(problem: &P, cfg: &SolverConfig, w0: Vec<f64>) -> Result<RunOutput> {
    run_with_monitor(problem, cfg, w0, &mut |_, _| Ok(()))
}

pub fn run_with_monitor<P: Problem + ?Sized>(
    problem: &P,
    cfg: &SolverConfig,
    w0: Vec<f64>,
    monitor: &mut Monitor<'_>,
) -> Result<RunOutput> {
    Solver::new(problem, cfg, w0)?.run_to_end(monitor)
}

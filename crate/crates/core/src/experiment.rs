//! Seeded development runs on a scenario: building the constrained problem
//! for a target class, running a method, picking the model to keep, and
//! writing trajectory and summary CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineConfig, BaselineKind, WcclData};
use crate::data::{self, make_base_model, BaseTrainConfig, Scenario, ScenarioSpec, Split};
use crate::error::{Error, Result};
use crate::losses::{ConstraintSpec, PairContext, PairSet, Pool};
use crate::metrics::{accuracy, dev_safety_from_losses, task_losses, EvalSets, LabeledSet, LossKind};
use crate::model::{ModelShape, ParamVector};
use crate::optimizer::{run_with_monitor, RetentionProblem, RunOutput, SolverConfig, StepLog};
use crate::rng::{self, sample_without_replacement, Stream};

/// Tolerance on train constraint values for an iterate to count as safe.
pub const SAFE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Penalty,
    Rm,
    Wccl,
    Finetune,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Penalty => "penalty",
            Method::Rm => "rm",
            Method::Wccl => "wccl",
            Method::Finetune => "finetune",
        }
    }
}

/// How the model kept from a run is chosen among its logged iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Among iterates that are safe on train (`max h ≤ 1e-3`) and on
    /// validation accuracy, the one with the largest validation target
    /// gain; otherwise the one with the best validation DevSafety.
    #[default]
    BestValDevSafetyThenDeltaAcc,
    LastIterate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSource {
    Path(PathBuf),
    Generate(ScenarioSpec),
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    pub model: ModelShape,
    #[serde(default)]
    pub base: BaseTrainConfig,
    /// Saved base model; trained from `base` when absent.
    #[serde(default)]
    pub base_model: Option<PathBuf>,
    pub method: Method,
    /// Baseline weight (RM: loss weight, WCCL: mixing weight in [0, 1]).
    #[serde(default)]
    pub alpha: f64,
    pub solver: SolverConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Per-task constraint subsample size, drawn per seed; all samples when
    /// absent.
    #[serde(default)]
    pub constraint_samples: Option<usize>,
    /// External target-related pairs added to the objective; all when absent.
    #[serde(default)]
    pub external_pairs: Option<usize>,
    /// Negative pairs used for contrast; all when absent.
    #[serde(default)]
    pub negatives: Option<usize>,
    /// Target class of each development round; the scenario's first target
    /// when empty.
    #[serde(default)]
    pub rounds: Vec<usize>,
    #[serde(default)]
    pub selection: Selection,
    /// Write wall-clock times into trajectories (makes them nondeterministic).
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        self.model.validate()?;
        self.solver.validate().map_err(|e| prefix_field("solver", e))?;
        match self.method {
            Method::Rm if !(self.alpha >= 0.0 && self.alpha.is_finite()) => {
                return Err(Error::config("alpha", "RM weight must be >= 0"))
            }
            Method::Wccl if !(0.0..=1.0).contains(&self.alpha) => {
                return Err(Error::config("alpha", "WCCL weight must lie in [0, 1]"))
            }
            _ => {}
        }
        if self.constraint_samples == Some(0) {
            return Err(Error::config("constraint_samples", "must be >= 1"));
        }
        if let ScenarioSource::Generate(spec) = &self.scenario {
            spec.validate().map_err(|e| prefix_field("scenario.generate", e))?;
            for &t in &self.rounds {
                if t >= spec.num_classes {
                    return Err(Error::config("rounds", format!("class {t} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn targets(&self, scenario: &Scenario) -> Vec<usize> {
        if self.rounds.is_empty() {
            vec![scenario.spec.targets[0]]
        } else {
            self.rounds.clone()
        }
    }
}

fn prefix_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, msg } => Error::Config {
            field: format!("{prefix}.{}", field.trim_start_matches("scenario.")),
            msg,
        },
        e => e,
    }
}

/// A saved model: its shape and flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub shape: ModelShape,
    pub params: Vec<f64>,
}

impl ModelFile {
    pub fn from_params(p: &ParamVector) -> Self {
        ModelFile {
            shape: p.shape().clone(),
            params: p.flatten(),
        }
    }

    pub fn into_params(self) -> Result<ParamVector> {
        ParamVector::unflatten(self.shape, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn load_or_generate(source: &ScenarioSource) -> Result<Scenario> {
    match source {
        ScenarioSource::Path(p) => data::load_scenario(p),
        ScenarioSource::Generate(spec) => data::generate_scenario(spec),
    }
}

/// The base model for a config: loaded if a path is given, trained otherwise.
pub fn base_model(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<ParamVector> {
    match &cfg.base_model {
        Some(path) => {
            let p = ModelFile::load(path)?.into_params()?;
            if p.shape() != &cfg.model {
                return Err(Error::config("base_model", "saved model shape differs from `model`"));
            }
            Ok(p)
        }
        None => Ok(make_base_model(scenario, &cfg.model, &cfg.base)?.0),
    }
}

/// Everything one development round needs for one seed.
#[derive(Debug, Clone)]
pub struct Development {
    pub target: usize,
    /// Protected classes, in constraint order.
    pub tasks: Vec<usize>,
    pub problem: RetentionProblem,
    /// Constraint samples (per task) plus target training images.
    pub train: EvalSets,
    pub val: EvalSets,
    pub test: EvalSets,
}

/// Builds the problem for improving `target` from `w_old` while protecting
/// every other class outside `excluded`. `constraint_samples` subsamples each
/// task's training set with a generator derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn build_development(
    scenario: &Scenario,
    w_old: &ParamVector,
    target: usize,
    excluded: &[usize],
    constraint_samples: Option<usize>,
    external_pairs: Option<usize>,
    negatives: Option<usize>,
    tau: f64,
    tau0: f64,
    seed: u64,
) -> Result<Development> {
    let k_all = scenario.spec.num_classes;
    if target >= k_all {
        return Err(Error::config("rounds", format!("target class {target} out of range")));
    }
    let class_texts = Arc::new(scenario.class_texts());
    let tasks: Vec<usize> = (0..k_all).filter(|&c| c != target && !excluded.contains(&c)).collect();
    if tasks.is_empty() {
        return Err(Error::config("rounds", "no protected classes left"));
    }
    let mut rng = rng::stream(seed, Stream::Data);

    let mut specs = Vec::with_capacity(tasks.len());
    let mut train_sets = Vec::with_capacity(tasks.len());
    for &k in &tasks {
        let all = scenario.class_samples(Split::Train, k);
        let n = constraint_samples.map_or(all.len(), |s| s.min(all.len()));
        let idx = sample_without_replacement(&mut rng, all.len(), n);
        let samples: Vec<Vec<f64>> = idx.iter().map(|&j| all[j].image.clone()).collect();
        specs.push(ConstraintSpec::new(w_old, k, samples.clone(), class_texts.clone(), tau0)?);
        train_sets.push(LabeledSet { label: k, samples });
    }

    let mut objective = scenario.class_samples(Split::Train, target);
    if objective.is_empty() {
        return Err(Error::Generation(format!("class {target} has no training pairs")));
    }
    let external = scenario.external(target);
    let n_ext = external_pairs.map_or(external.len(), |n| n.min(external.len()));
    objective.extend_from_slice(&external[..n_ext]);
    let negs = scenario.negatives();
    let n_neg = negatives.map_or(negs.len(), |n| n.min(negs.len()));
    let mut images: Vec<Vec<f64>> = objective.iter().map(|r| r.image.clone()).collect();
    let mut texts: Vec<Vec<f64>> = objective.iter().map(|r| r.text.clone()).collect();
    images.extend(negs[..n_neg].iter().map(|r| r.image.clone()));
    texts.extend(negs[..n_neg].iter().map(|r| r.text.clone()));
    let pool = Arc::new((0..images.len()).collect::<Vec<_>>());
    let pairs = (0..objective.len())
        .map(|i| PairContext {
            index: i,
            image: i,
            text: i,
            text_pool: Pool::new(pool.clone(), None),
            image_pool: Pool::new(pool.clone(), None),
        })
        .collect();
    let pair_set = PairSet::new(images, texts, pairs, tau)?;
    let problem = RetentionProblem::new(w_old.shape().clone(), pair_set, specs)?;

    let eval = |split: Split| EvalSets {
        tasks: tasks.iter().map(|&k| scenario.labeled_set(split, k)).collect(),
        target: scenario.labeled_set(split, target),
        class_texts: class_texts.clone(),
        tau0,
    };
    let train = EvalSets {
        tasks: train_sets,
        target: scenario.labeled_set(Split::Train, target),
        class_texts: class_texts.clone(),
        tau0,
    };
    let (val, test) = (eval(Split::Val), eval(Split::Test));
    Ok(Development {
        target,
        tasks,
        problem,
        train,
        val,
        test,
    })
}

/// WCCL pair groups over the development's data: each constraint sample is
/// paired with its own text feature.
pub fn wccl_data(scenario: &Scenario, dev: &Development) -> Result<WcclData> {
    let set = &dev.problem.pairs;
    let mut images = set.images.clone();
    let mut texts = set.texts.clone();
    let target_pairs: Vec<(usize, usize)> = set.pairs.iter().map(|c| (c.image, c.text)).collect();
    let base_pool = Arc::new((0..images.len()).collect::<Vec<_>>());
    let mut task_pairs = Vec::with_capacity(dev.tasks.len());
    for (k, spec) in dev.tasks.iter().zip(&dev.problem.specs) {
        let recs = scenario.class_samples(Split::Train, *k);
        let mut group = Vec::with_capacity(spec.len());
        for x in &spec.samples {
            let r = recs
                .iter()
                .find(|r| &r.image == x)
                .ok_or_else(|| Error::Invariant("constraint sample missing from scenario".into()))?;
            group.push((images.len(), texts.len()));
            images.push(r.image.clone());
            texts.push(r.text.clone());
        }
        task_pairs.push(group);
    }
    WcclData::new(images, texts, &target_pairs, base_pool.clone(), base_pool, &task_pairs, set.tau)
}

/// Losses of the old model, cached once per evaluation split.
struct Reference {
    ce: Vec<f64>,
    acc: Vec<f64>,
    target_acc: f64,
}

impl Reference {
    fn new(w_old: &ParamVector, eval: &EvalSets) -> Result<Self> {
        Ok(Reference {
            ce: task_losses(w_old, eval, LossKind::Ce)?,
            acc: task_losses(w_old, eval, LossKind::ZeroOne)?,
            target_acc: accuracy(w_old, &eval.target, &eval.class_texts)?,
        })
    }

    fn dev_safety(&self, p: &ParamVector, eval: &EvalSets, kind: LossKind) -> Result<f64> {
        let old = if kind == LossKind::Ce { &self.ce } else { &self.acc };
        dev_safety_from_losses(old, &task_losses(p, eval, kind)?)
    }

    fn delta_acc(&self, p: &ParamVector, eval: &EvalSets) -> Result<f64> {
        Ok(accuracy(p, &eval.target, &eval.class_texts)? - self.target_acc)
    }
}

/// Metric names attached to every logged step.
pub const METRICS: [&str; 8] = [
    "train_dev_safety_ce",
    "train_dev_safety_acc",
    "val_dev_safety_ce",
    "val_dev_safety_acc",
    "val_delta_acc",
    "test_dev_safety_ce",
    "test_dev_safety_acc",
    "test_delta_acc",
];

/// Outcome of one seeded development run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub trajectory: Vec<StepLog>,
    /// Index into `trajectory` of the kept iterate, if any step was logged.
    pub selected: Option<usize>,
    /// Parameters of the kept model (`w_old` when nothing was logged).
    pub model: ParamVector,
    pub final_params: Vec<f64>,
}

impl SeedRun {
    pub fn selected_log(&self) -> Option<&StepLog> {
        self.selected.map(|i| &self.trajectory[i])
    }

    /// Metric at the kept iterate; 0 when no step was logged (`T = 0`).
    pub fn selected_metric(&self, name: &str) -> f64 {
        self.selected_log().and_then(|l| l.metric(name)).unwrap_or(0.0)
    }
}

/// Index of the kept iterate under `policy`. The starting point (step 0) is
/// only eligible when nothing else was logged.
///
/// Preference: train-feasible and val-safe (best val ΔAcc), then
/// train-feasible (best val DevSafety(acc)), then anything (same key).
pub fn select(trajectory: &[StepLog], policy: Selection) -> Option<usize> {
    if trajectory.is_empty() {
        return None;
    }
    if policy == Selection::LastIterate {
        return Some(trajectory.len() - 1);
    }
    let get = |l: &StepLog, n: &str| l.metric(n).unwrap_or(f64::NEG_INFINITY);
    let feasible = |l: &StepLog| l.kkt.h.iter().all(|&h| h <= SAFE_TOL);
    let safe = |l: &StepLog| feasible(l) && get(l, "val_dev_safety_acc") >= 0.0;
    let candidates: Vec<usize> = {
        let moved: Vec<usize> = (0..trajectory.len()).filter(|&i| trajectory[i].step > 0).collect();
        if moved.is_empty() {
            (0..trajectory.len()).collect()
        } else {
            moved
        }
    };
    let best_by = |pool: &mut dyn Iterator<Item = usize>, key: &str| {
        pool.fold(None, |b: Option<usize>, i| match b {
            Some(b) if get(&trajectory[i], key) <= get(&trajectory[b], key) => Some(b),
            _ => Some(i),
        })
    };
    best_by(&mut candidates.iter().copied().filter(|&i| safe(&trajectory[i])), "val_delta_acc")
        .or_else(|| best_by(&mut candidates.iter().copied().filter(|&i| feasible(&trajectory[i])), "val_dev_safety_acc"))
        .or_else(|| best_by(&mut candidates.iter().copied(), "val_dev_safety_acc"))
}

/// Runs `method` for one seed on a prepared development problem.
pub fn run_seed(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    dev: &Development,
    w_old: &ParamVector,
    seed: u64,
) -> Result<SeedRun> {
    let refs = [
        Reference::new(w_old, &dev.train)?,
        Reference::new(w_old, &dev.val)?,
        Reference::new(w_old, &dev.test)?,
    ];
    let shape = w_old.shape().clone();
    let mut snapshots: Vec<Vec<f64>> = Vec::new();
    let record_clock = cfg.record_wall_clock;
    let mut monitor = |w: &[f64], log: &mut StepLog| -> Result<()> {
        let p = ParamVector::unflatten(shape.clone(), w.to_vec())?;
        let sets = [&dev.train, &dev.val, &dev.test];
        let mut vals = Vec::with_capacity(METRICS.len());
        for (i, name) in ["train", "val", "test"].iter().enumerate() {
            vals.push((format!("{name}_dev_safety_ce"), refs[i].dev_safety(&p, sets[i], LossKind::Ce)?));
            vals.push((format!("{name}_dev_safety_acc"), refs[i].dev_safety(&p, sets[i], LossKind::ZeroOne)?));
            if i > 0 {
                vals.push((format!("{name}_delta_acc"), refs[i].delta_acc(&p, sets[i])?));
            }
        }
        log.metrics = vals;
        if !record_clock {
            log.elapsed_ms = 0.0;
        }
        snapshots.push(w.to_vec());
        Ok(())
    };
    let mut solver = cfg.solver.clone();
    solver.seed = seed;
    let out: RunOutput = match cfg.method {
        Method::Penalty => run_with_monitor(&dev.problem, &solver, w_old.flatten(), &mut monitor)?,
        Method::Rm | Method::Finetune | Method::Wccl => {
            let kind = match cfg.method {
                Method::Rm => BaselineKind::Rm,
                Method::Finetune => BaselineKind::Finetune,
                _ => BaselineKind::Wccl,
            };
            let wccl = if kind == BaselineKind::Wccl { Some(wccl_data(scenario, dev)?) } else { None };
            let bc = BaselineConfig {
                kind,
                alpha: cfg.alpha,
                solver,
            };
            run_baseline(&bc, &dev.problem, wccl.as_ref(), w_old, &mut monitor)?
        }
    };
    let selected = select(&out.trajectory, cfg.selection);
    let model = match selected {
        Some(i) => ParamVector::unflatten(w_old.shape().clone(), snapshots[i].clone())?,
        None => w_old.clone(),
    };
    Ok(SeedRun {
        seed,
        trajectory: out.trajectory,
        selected,
        model,
        final_params: out.params,
    })
}

/// Worker count: `DEVSAFE_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    std::env::var("DEVSAFE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `items` on up to `threads` scoped workers; results keep the
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("worker finished")).collect()
}

/// One round of development across all seeds, each seed starting from its
/// own `w_old`.
pub fn develop_round(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    target: usize,
    excluded: &[usize],
    w_olds: &[ParamVector],
    threads: usize,
) -> Result<Vec<(Development, SeedRun)>> {
    let jobs: Vec<(u64, &ParamVector)> = cfg.seeds.iter().copied().zip(w_olds).collect();
    parallel_map(&jobs, threads, |&(seed, w_old)| -> Result<(Development, SeedRun)> {
        let dev = build_development(
            scenario,
            w_old,
            target,
            excluded,
            cfg.constraint_samples,
            cfg.external_pairs,
            cfg.negatives,
            cfg.solver.tau,
            cfg.solver.tau0,
            seed,
        )?;
        let run = run_seed(cfg, scenario, &dev, w_old, seed)?;
        Ok((dev, run))
    })
    .into_iter()
    .collect()
}

/// Per-seed finals and their aggregates for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub alpha: f64,
    pub target: usize,
    pub rows: Vec<SummaryRow>,
    /// Fraction of seeds with held-out DevSafety(acc) ≥ 0.
    pub retention_ratio: f64,
    pub delta_acc_mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub delta_acc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub selected_step: u64,
    pub train_dev_safety_ce: f64,
    pub train_dev_safety_acc: f64,
    pub val_dev_safety_acc: f64,
    pub val_delta_acc: f64,
    pub test_dev_safety_ce: f64,
    pub test_dev_safety_acc: f64,
    pub test_delta_acc: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(cfg: &ExperimentConfig, target: usize, runs: &[SeedRun]) -> Result<Summary> {
    let rows: Vec<SummaryRow> = runs
        .iter()
        .map(|r| SummaryRow {
            seed: r.seed,
            selected_step: r.selected_log().map_or(0, |l| l.step),
            train_dev_safety_ce: r.selected_metric("train_dev_safety_ce"),
            train_dev_safety_acc: r.selected_metric("train_dev_safety_acc"),
            val_dev_safety_acc: r.selected_metric("val_dev_safety_acc"),
            val_delta_acc: r.selected_metric("val_delta_acc"),
            test_dev_safety_ce: r.selected_metric("test_dev_safety_ce"),
            test_dev_safety_acc: r.selected_metric("test_dev_safety_acc"),
            test_delta_acc: r.selected_metric("test_delta_acc"),
        })
        .collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.test_dev_safety_acc).collect();
    let da: Vec<f64> = rows.iter().map(|r| r.test_delta_acc).collect();
    let (delta_acc_mean, delta_acc_std) = mean_std(&da);
    Ok(Summary {
        method: cfg.method,
        alpha: cfg.alpha,
        target,
        retention_ratio: crate::metrics::retention_ratio(&ds)?,
        delta_acc_mean,
        delta_acc_std,
        rows,
    })
}

/// `{}` formatting: shortest representation that round-trips.
fn num(out: &mut String, v: f64) {
    write!(out, "{v}").unwrap();
}

pub fn summary_csv(s: &Summary) -> String {
    let mut out = String::from(
        "seed,selected_step,train_dev_safety_ce,train_dev_safety_acc,val_dev_safety_acc,val_delta_acc,\
         test_dev_safety_ce,test_dev_safety_acc,test_delta_acc,retained\n",
    );
    for r in &s.rows {
        write!(out, "{},{}", r.seed, r.selected_step).unwrap();
        for v in [
            r.train_dev_safety_ce,
            r.train_dev_safety_acc,
            r.val_dev_safety_acc,
            r.val_delta_acc,
            r.test_dev_safety_ce,
            r.test_dev_safety_acc,
            r.test_delta_acc,
        ] {
            out.push(',');
            num(&mut out, v);
        }
        writeln!(out, ",{}", u8::from(r.test_dev_safety_acc >= 0.0)).unwrap();
    }
    out.push_str("\nstatistic,value\n");
    for (k, v) in [
        ("retention_ratio", s.retention_ratio),
        ("delta_acc_mean", s.delta_acc_mean),
        ("delta_acc_std", s.delta_acc_std),
    ] {
        out.push_str(k);
        out.push(',');
        num(&mut out, v);
        out.push('\n');
    }
    out
}

/// Parses the statistics block of a summary CSV back into `(name, value)`.
pub fn parse_summary_statistics(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines().skip_while(|l| *l != "statistic,value");
    if lines.next().is_none() {
        return Err(Error::Parse {
            path: "summary.csv".into(),
            line: 0,
            field: "statistic".into(),
            msg: "missing statistics block".into(),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap_or((l, ""));
            let v = v.parse::<f64>().map_err(|e| Error::Parse {
                path: "summary.csv".into(),
                line: 0,
                field: k.to_string(),
                msg: e.to_string(),
            })?;
            Ok((k.to_string(), v))
        })
        .collect()
}

/// One row per logged step, fixed column order.
pub fn trajectory_csv(tasks: &[usize], trajectory: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,beta,eta,phi,objective");
    for k in tasks {
        write!(out, ",h_{k}").unwrap();
    }
    for name in METRICS {
        write!(out, ",{name}").unwrap();
    }
    out.push_str(",stationarity,violation,complementarity");
    for k in tasks {
        write!(out, ",weight_{k}").unwrap();
    }
    out.push_str(",wall_ms\n");
    for l in trajectory {
        write!(out, "{},{}", l.step, l.epoch).unwrap();
        for v in [l.beta, l.eta, l.phi, l.kkt.objective] {
            out.push(',');
            num(&mut out, v);
        }
        for v in &l.kkt.h {
            out.push(',');
            num(&mut out, *v);
        }
        for name in METRICS {
            out.push(',');
            if let Some(v) = l.metric(name) {
                num(&mut out, v);
            }
        }
        for v in [l.kkt.stationarity, l.kkt.violation, l.kkt.complementarity] {
            out.push(',');
            num(&mut out, v);
        }
        for v in &l.effective_weights {
            out.push(',');
            num(&mut out, *v);
        }
        out.push(',');
        num(&mut out, l.elapsed_ms.round());
        out.push('\n');
    }
    out
}

/// Writes `trajectory_seed{seed}.csv` and `model_seed{seed}.json` for every
/// run plus `summary.csv` and `summary.json` into `dir`.
pub fn write_round(dir: &Path, tasks: &[usize], runs: &[SeedRun], summary: &Summary) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in runs {
        fs::write(dir.join(format!("trajectory_seed{}.csv", r.seed)), trajectory_csv(tasks, &r.trajectory))?;
        ModelFile::from_params(&r.model).save(&dir.join(format!("model_seed{}.json", r.seed)))?;
    }
    fs::write(dir.join("summary.csv"), summary_csv(summary))?;
    let mut js = serde_json::to_string_pretty(summary)?;
    js.push('\n');
    fs::write(dir.join("summary.json"), js)?;
    Ok(())
}

/// Result of a full (possibly multi-round) experiment.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub base: ParamVector,
    pub rounds: Vec<RoundResult>,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub target: usize,
    pub tasks: Vec<usize>,
    pub runs: Vec<SeedRun>,
    /// The `w_old` each seed started this round from.
    pub w_olds: Vec<ParamVector>,
    pub summary: Summary,
}

/// Runs every round in `cfg` (one round when `rounds` is empty). Round
/// `r + 1` of each seed starts from that seed's model kept in round `r`.
/// Classes targeted in later rounds are not yet protected: the old model has
/// no meaningful performance on them to retain.
pub fn run_experiment(cfg: &ExperimentConfig, scenario: &Scenario, base: &ParamVector, threads: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut w_olds: Vec<ParamVector> = cfg.seeds.iter().map(|_| base.clone()).collect();
    let mut rounds = Vec::new();
    let targets = cfg.targets(scenario);
    for (r, &target) in targets.iter().enumerate() {
        let out = develop_round(cfg, scenario, target, &targets[r + 1..], &w_olds, threads)?;
        let tasks = out.first().map(|(d, _)| d.tasks.clone()).unwrap_or_default();
        let runs: Vec<SeedRun> = out.into_iter().map(|(_, r)| r).collect();
        let summary = summarize(cfg, target, &runs)?;
        let next: Vec<ParamVector> = runs.iter().map(|r| r.model.clone()).collect();
        rounds.push(RoundResult {
            target,
            tasks,
            runs,
            w_olds: std::mem::replace(&mut w_olds, next),
            summary,
        });
    }
    Ok(ExperimentResult {
        base: base.clone(),
        rounds,
    })
}

/// Training DevSafety(ce) of `w_new` against `w_old` over every class,
/// on each class's full training set.
pub fn all_task_train_dev_safety(scenario: &Scenario, w_new: &ParamVector, w_old: &ParamVector, tau0: f64) -> Result<f64> {
    let class_texts = Arc::new(scenario.class_texts());
    let sets: Vec<LabeledSet> = (0..scenario.spec.num_classes).map(|k| scenario.labeled_set(Split::Train, k)).collect();
    let eval = EvalSets {
        tasks: sets,
        target: scenario.labeled_set(Split::Train, 0),
        class_texts,
        tau0,
    };
    dev_safety_from_losses(&task_losses(w_old, &eval, LossKind::Ce)?, &task_losses(w_new, &eval, LossKind::Ce)?)
}

/// Writes `base_model.json` and the rounds: a single round goes straight
/// into `out`, several go to `out/round{r}` plus `multiround.csv` with the
/// all-task train DevSafety(ce) of each seed's final model against its last
/// `w_old` and against the base model.
pub fn write_experiment(out: &Path, cfg: &ExperimentConfig, scenario: &Scenario, res: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(out)?;
    ModelFile::from_params(&res.base).save(&out.join("base_model.json"))?;
    let multi = res.rounds.len() > 1;
    for (r, round) in res.rounds.iter().enumerate() {
        let dir = if multi { out.join(format!("round{}", r + 1)) } else { out.to_path_buf() };
        write_round(&dir, &round.tasks, &round.runs, &round.summary)?;
    }
    if multi {
        let last = res.rounds.last().unwrap();
        let mut s = String::from("seed,dev_safety_ce_vs_previous,dev_safety_ce_vs_base\n");
        for (run, w_old) in last.runs.iter().zip(&last.w_olds) {
            let prev = all_task_train_dev_safety(scenario, &run.model, w_old, cfg.solver.tau0)?;
            let base = all_task_train_dev_safety(scenario, &run.model, &res.base, cfg.solver.tau0)?;
            write!(s, "{},", run.seed).unwrap();
            num(&mut s, prev);
            s.push(',');
            num(&mut s, base);
            s.push('\n');
        }
        fs::write(out.join("multiround.csv"), s)?;
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::preset::TheoremInputs;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Constant,
    /// `β_min + (β − β_min)(1 − cos(πt/T))/2`, rising from `β_min` to `β`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    Constant,
    /// `η_min + (η − η_min)(1 + cos(πt/T))/2`.
    Cosine,
}

/// Minibatch sizes. `None` means the full pool; explicit sizes larger than a
/// per-pair or per-task pool are clamped to that pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSizes {
    /// `|B|`, pairs per step.
    pub pairs: Option<usize>,
    /// `|B_1i|`, texts drawn from each pair's text pool.
    pub text_negatives: Option<usize>,
    /// `|B_2i|`, images drawn from each pair's image pool.
    pub image_negatives: Option<usize>,
    /// `|B_c|`, constraints per step.
    pub constraints: Option<usize>,
    /// `|B_k|`, samples per sampled constraint.
    pub constraint_samples: Option<usize>,
}

impl BatchSizes {
    pub fn full() -> Self {
        BatchSizes::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Iteration budget `T`.
    pub iterations: u64,
    pub eta: f64,
    #[serde(default = "default_eta_mode")]
    pub eta_mode: EtaMode,
    #[serde(default)]
    pub eta_min: f64,
    /// `β` (the final value under the cosine schedule).
    pub beta: f64,
    #[serde(default = "default_beta_mode")]
    pub beta_mode: BetaMode,
    #[serde(default)]
    pub beta_min: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub theta: f64,
    #[serde(default)]
    pub batch: BatchSizes,
    /// Contrastive temperature `τ`.
    pub tau: f64,
    /// Classification temperature `τ0`.
    pub tau0: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Decoupled weight decay coefficient, applied as `w ← w − η·λ·w`.
    #[serde(default)]
    pub weight_decay: f64,
    /// Whether the penalty gradient `G2` enters the update.
    #[serde(default = "default_true")]
    pub penalty: bool,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// When present, `β, θ, γ1, γ2, η, T` are taken from the theorem schedule.
    #[serde(default)]
    pub preset: Option<TheoremInputs>,
}

fn default_eta_mode() -> EtaMode {
    EtaMode::Constant
}
fn default_beta_mode() -> BetaMode {
    BetaMode::Constant
}
fn default_log_every() -> u64 {
    50
}
fn default_true() -> bool {
    true
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            iterations: 1000,
            eta: 1e-2,
            eta_mode: EtaMode::Constant,
            eta_min: 0.0,
            beta: 100.0,
            beta_mode: BetaMode::Constant,
            beta_min: 0.0,
            gamma1: 0.9,
            gamma2: 0.9,
            theta: 0.1,
            batch: BatchSizes::default(),
            tau: 0.05,
            tau0: 0.05,
            seed: 0,
            log_every: 50,
            weight_decay: 0.0,
            penalty: true,
            checkpoint_every: None,
            preset: None,
        }
    }
}

fn rate(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in (0, 1], got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be > 0, got {v}")))
    }
}

fn nonneg(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be >= 0, got {v}")))
    }
}

impl SolverConfig {
    /// Applies the theorem preset (if any) and checks every invariant.
    pub fn resolved(&self, n_pairs: usize, m: usize) -> Result<SolverConfig> {
        let mut c = self.clone();
        if let Some(inputs) = &self.preset {
            let s = super::preset::theorem_preset(inputs, &self.batch_for_preset()?, n_pairs, m)?;
            s.apply(&mut c);
        }
        c.validate()?;
        Ok(c)
    }

    fn batch_for_preset(&self) -> Result<super::preset::PresetBatches> {
        let b = &self.batch;
        let need = |name: &str, v: Option<usize>| {
            v.ok_or_else(|| Error::config(name, "explicit batch sizes are required with a preset"))
        };
        Ok(super::preset::PresetBatches {
            pairs: need("batch.pairs", b.pairs)?,
            text_negatives: need("batch.text_negatives", b.text_negatives)?,
            image_negatives: need("batch.image_negatives", b.image_negatives)?,
            constraints: need("batch.constraints", b.constraints)?,
            constraint_samples: need("batch.constraint_samples", b.constraint_samples)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        nonneg("eta", self.eta)?;
        nonneg("eta_min", self.eta_min)?;
        if self.eta_min > self.eta {
            return Err(Error::config("eta_min", "must not exceed eta"));
        }
        nonneg("beta", self.beta)?;
        nonneg("beta_min", self.beta_min)?;
        if self.beta_mode == BetaMode::Cosine && self.beta_min > self.beta {
            return Err(Error::config("beta_min", "must not exceed beta"));
        }
        rate("gamma1", self.gamma1)?;
        rate("gamma2", self.gamma2)?;
        rate("theta", self.theta)?;
        positive("tau", self.tau)?;
        positive("tau0", self.tau0)?;
        nonneg("weight_decay", self.weight_decay)?;
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be >= 1"));
        }
        let b = &self.batch;
        for (name, v) in [
            ("batch.pairs", b.pairs),
            ("batch.text_negatives", b.text_negatives),
            ("batch.image_negatives", b.image_negatives),
            ("batch.constraints", b.constraints),
            ("batch.constraint_samples", b.constraint_samples),
        ] {
            if v == Some(0) {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Checks batch sizes against the problem's pool sizes.
    pub fn validate_for(&self, n_pairs: usize, m: usize) -> Result<()> {
        if let Some(b) = self.batch.pairs {
            if b > n_pairs {
                return Err(Error::config("batch.pairs", format!("{b} exceeds the {n_pairs} available pairs")));
            }
        }
        if let Some(c) = self.batch.constraints {
            if c > m {
                return Err(Error::config("batch.constraints", format!("{c} exceeds the {m} constraints")));
            }
        }
        Ok(())
    }

    /// Full-information mode: every batch full and `γ1 = γ2 = θ = 1`.
    pub fn full_information(mut self) -> Self {
        self.batch = BatchSizes::full();
        self.gamma1 = 1.0;
        self.gamma2 = 1.0;
        self.theta = 1.0;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `β_t` at step `t` of `T`.
pub fn beta_schedule(t: u64, cfg: &SolverConfig) -> f64 {
    match cfg.beta_mode {
        BetaMode::Constant => cfg.beta,
        BetaMode::Cosine => {
            let frac = if cfg.iterations == 0 { 1.0 } else { t as f64 / cfg.iterations as f64 };
            cfg.beta_min + (cfg.beta - cfg.beta_min) * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
        }
    }
}

/// `η_t` at step `t` of `T`.
pub fn eta_schedule(t: u64, cfg: &SolverConfig) -> f64 {
    match cfg.eta_mode {
        EtaMode::Constant => cfg.eta,
        EtaMode::Cosine => {
            let frac = if cfg.iterations == 0 { 0.0 } else { t as f64 / cfg.iterations as f64 };
            cfg.eta_min + (cfg.eta - cfg.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_beta_endpoints() {
        let cfg = SolverConfig {
            iterations: 100,
            beta: 50.0,
            beta_min: 10.0,
            beta_mode: BetaMode::Cosine,
            ..Default::default()
        };
        assert_eq!(beta_schedule(0, &cfg), 10.0);
        assert!((beta_schedule(100, &cfg) - 50.0).abs() < 1e-12);
        assert!((beta_schedule(50, &cfg) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_fields_rejected() {
        let s = r#"{"iterations":1,"eta":0.1,"beta":1,"gamma1":1,"gamma2":1,"theta":1,"tau":0.1,"tau0":0.1,"bogus":3}"#;
        assert!(SolverConfig::from_json(s).is_err());
    }

    #[test]
    fn rates_validated() {
        let cfg = SolverConfig { theta: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "theta"));
    }
}

//! Hyperparameter schedule from the convergence theorem, evaluated from
//! user-supplied smoothness and variance surrogates.

use serde::{Deserialize, Serialize};

use super::config::SolverConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremInputs {
    pub epsilon: f64,
    pub delta: f64,
    pub tau: f64,
    /// Lower bound `c_g` on the inner functions `g`.
    pub c_g: f64,
    pub l_g: f64,
    pub l_grad_g: f64,
    pub sigma_grad_g: f64,
    pub l_h: f64,
    pub l_grad_h: f64,
    pub sigma_h: f64,
    pub sigma_grad_h: f64,
    /// `T = ceil(iteration_scale · ε⁻⁷ δ⁻³)`.
    #[serde(default = "one")]
    pub iteration_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetBatches {
    pub pairs: usize,
    pub text_negatives: usize,
    pub image_negatives: usize,
    pub constraints: usize,
    pub constraint_samples: usize,
}

/// Every intermediate of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSchedule {
    pub beta: f64,
    pub l_f: f64,
    pub l_grad_f: f64,
    pub l_big_f: f64,
    pub l_big_h: f64,
    pub c_grad_g: f64,
    pub c_grad_h: f64,
    pub theta_terms: [f64; 2],
    pub theta: f64,
    pub gamma_terms: [f64; 3],
    pub gamma: f64,
    pub eta_terms: [f64; 5],
    pub eta: f64,
    pub iterations: u64,
}

impl TheoremSchedule {
    pub fn apply(&self, cfg: &mut SolverConfig) {
        cfg.beta = self.beta;
        cfg.theta = self.theta;
        cfg.gamma1 = self.gamma;
        cfg.gamma2 = self.gamma;
        cfg.eta = self.eta;
        cfg.iterations = self.iterations;
    }
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn theorem_preset(inp: &TheoremInputs, b: &PresetBatches, n0: usize, m: usize) -> Result<TheoremSchedule> {
    for (name, v) in [
        ("preset.epsilon", inp.epsilon),
        ("preset.delta", inp.delta),
        ("preset.tau", inp.tau),
        ("preset.c_g", inp.c_g),
        ("preset.l_g", inp.l_g),
        ("preset.l_grad_g", inp.l_grad_g),
        ("preset.sigma_grad_g", inp.sigma_grad_g),
        ("preset.l_h", inp.l_h),
        ("preset.l_grad_h", inp.l_grad_h),
        ("preset.sigma_h", inp.sigma_h),
        ("preset.sigma_grad_h", inp.sigma_grad_h),
        ("preset.iteration_scale", inp.iteration_scale),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(name, format!("must be > 0, got {v}")));
        }
    }
    if n0 == 0 || m == 0 {
        return Err(Error::config("preset", "needs at least one pair and one constraint"));
    }
    let (eps, del) = (inp.epsilon, inp.delta);
    let bb = b.pairs as f64;
    let b1 = b.text_negatives as f64;
    let b2 = b.image_negatives as f64;
    let bc = b.constraints as f64;
    let bk = b.constraint_samples as f64;
    let n0 = n0 as f64;
    let m = m as f64;

    let beta = 1.0 / (eps * del);
    let c_grad_g = inp.sigma_grad_g + inp.l_g;
    let c_grad_h = inp.sigma_grad_h + inp.l_h;
    let l_f = inp.tau / inp.c_g;
    let l_grad_f = inp.tau / (inp.c_g * inp.c_g);
    let l_big_f = 2.0 * (inp.l_grad_g * l_f + l_grad_f * inp.l_g * inp.l_g);
    let l_big_h = 2.0 * inp.l_grad_h + inp.l_h * inp.l_h;

    let theta_terms = [
        eps.powi(4) * del * del * bc.min(bk) / (672.0 * (inp.sigma_grad_h.powi(2) + inp.l_h.powi(2))),
        eps * eps * bb.min(b1).min(b2) / (1344.0 * l_f * l_f * (inp.sigma_grad_g.powi(2) + inp.l_g.powi(2))),
    ];
    let theta = min_of(&theta_terms);
    let gamma_terms = [
        5.0 * n0 * theta / (3.0 * bb),
        5.0 * m * theta / (3.0 * bc),
        eps.powi(4) * del * del * bk / (26880.0 * inp.sigma_h.powi(2) * c_grad_h.powi(2)),
    ];
    let gamma = min_of(&gamma_terms);
    let s = 8.0 * 3f64.sqrt();
    let r6 = 40.0 * 6f64.sqrt();
    let eta_terms = [
        1.0 / (12.0 * (l_big_f + beta * l_big_h)),
        theta / (s * l_big_f),
        theta / (s * l_big_h * beta),
        gamma * bb / (r6 * inp.l_g * l_f * c_grad_g * n0),
        gamma * bc / (r6 * beta * inp.l_h * c_grad_h * m),
    ];
    let eta = min_of(&eta_terms);
    let t = (inp.iteration_scale * eps.powi(-7) * del.powi(-3)).ceil();
    if !(t.is_finite() && t < u64::MAX as f64) {
        return Err(Error::config("preset", "iteration count overflows"));
    }
    Ok(TheoremSchedule {
        beta,
        l_f,
        l_grad_f,
        l_big_f,
        l_big_h,
        c_grad_g,
        c_grad_h,
        theta_terms,
        theta,
        gamma_terms,
        gamma,
        eta_terms,
        eta,
        iterations: t as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn inputs(eps: f64, delta: f64) -> TheoremInputs {
        TheoremInputs {
            epsilon: eps,
            delta,
            tau: 0.05,
            c_g: 0.5,
            l_g: 1.0,
            l_grad_g: 1.0,
            sigma_grad_g: 1.0,
            l_h: 1.0,
            l_grad_h: 1.0,
            sigma_h: 1.0,
            sigma_grad_h: 1.0,
            iteration_scale: 1.0,
        }
    }

    const B: PresetBatches = PresetBatches {
        pairs: 8,
        text_negatives: 16,
        image_negatives: 16,
        constraints: 2,
        constraint_samples: 32,
    };

    #[test]
    fn beta_is_inverse_eps_delta() {
        let s = theorem_preset(&inputs(0.1, 1.0), &B, 10, 5).unwrap();
        assert!((s.beta - 10.0).abs() < 1e-12);
        let s2 = theorem_preset(&inputs(0.2, 1.0), &B, 10, 5).unwrap();
        assert!((s.beta / s2.beta - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(theorem_preset(&inputs(0.0, 1.0), &B, 10, 5).is_err());
        assert!(theorem_preset(&inputs(0.1, -1.0), &B, 10, 5).is_err());
    }
}

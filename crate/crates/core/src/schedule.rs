//! Discrete diffusion time axis and the ε ↔ score conversion.
//!
//! `t = 0` is pure noise, `t = T` is clean data. The grid is uniform in the
//! half log-SNR `ρ_t = ½·log(α_t/(1−α_t))`, so the per-step increment
//! `η_t = ρ_t − ρ_{t−1}` is constant, which keeps the predictor-corrector
//! coefficient system identical at every step.

use crate::error::{check_len, Error, Result};

/// The noise schedule α_t with its log-SNR grid ρ_t and increments η_t.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    rho: Vec<f64>,
    eta: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a uniform-in-ρ schedule with `t_max` steps on `[rho_min, rho_max]`.
    ///
    /// The endpoints must keep α_0 ≤ 1e-3 and α_T ≥ 1−1e-3 so that the
    /// √(1−α_t) and √α_t factors stay well-conditioned at both ends.
    pub fn new(t_max: usize, rho_min: f64, rho_max: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Range("t_max must be >= 1".into()));
        }
        if !(rho_min < rho_max) {
            return Err(Error::Range(format!(
                "need rho_min < rho_max, got [{rho_min}, {rho_max}]"
            )));
        }
        let alpha_of = |rho: f64| 1.0 / (1.0 + (-2.0 * rho).exp());
        if alpha_of(rho_min) > 1e-3 || alpha_of(rho_max) < 1.0 - 1e-3 {
            return Err(Error::Range(format!(
                "endpoints [{rho_min}, {rho_max}] violate alpha_0 <= 1e-3 or alpha_T >= 1-1e-3"
            )));
        }
        let rho: Vec<f64> = (0..=t_max)
            .map(|t| rho_min + (rho_max - rho_min) * t as f64 / t_max as f64)
            .collect();
        let alpha: Vec<f64> = rho.iter().map(|&r| alpha_of(r)).collect();
        let eta: Vec<f64> = (1..=t_max).map(|t| rho[t] - rho[t - 1]).collect();
        Ok(Self { t_max, alpha, rho, eta })
    }

    /// The default grid: T = 40 steps, ρ ∈ [−6, 6].
    pub fn default_grid() -> Self {
        Self::new(40, -6.0, 6.0).expect("default grid is valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// α_t, for t in 0..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// ρ_t, for t in 0..=T.
    pub fn rho(&self, t: usize) -> f64 {
        self.rho[t]
    }

    /// η_t = ρ_t − ρ_{t−1}, for t in 1..=T.
    pub fn eta(&self, t: usize) -> f64 {
        self.eta[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Range(format!("step {t} out of range 0..={}", self.t_max)));
        }
        Ok(())
    }
}

/// `√α_t·clean + √(1−α_t)·eps`. The noise is supplied by the caller so tests
/// stay deterministic.
pub fn forward_diffuse(clean: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len("eps", eps.len(), clean.len())?;
    let a = sched.alpha(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(clean.iter().zip(eps).map(|(c, e)| sa * c + sb * e).collect())
}

/// Convert a noise prediction into the score: `−ε̂ / √(1−α_t)`.
pub fn epsilon_to_score(eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let a = sched.alpha(t);
    if a >= 1.0 {
        return Err(Error::Range(format!("alpha_{t} = 1, score conversion undefined")));
    }
    let s = (1.0 - a).sqrt();
    Ok(eps_hat.iter().map(|e| -e / s).collect())
}

/// Inverse of [`epsilon_to_score`]: `−score · √(1−α_t)`.
pub fn score_to_epsilon(score: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let s = (1.0 - sched.alpha(t)).sqrt();
    Ok(score.iter().map(|v| -v * s).collect())
}

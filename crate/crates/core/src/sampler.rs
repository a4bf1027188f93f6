//! The p-order joint conditional predictor-corrector sampler and the Langevin
//! baseline.
//!
//! Both chains solve the probability-flow ODE written in the log-SNR variable:
//! the exact step is
//! `x_t = √(α_t/α_{t−1})·x_{t−1} − √(1−α_t)·Σ_{n≥0} η^{n+1}·φ_{n+1}(η)·ε̂⁽ⁿ⁾`,
//! with φ the exponential-integrator functions `φ_1 = (e^η−1)/η`,
//! `φ_{n+1} = (φ_n − 1/n!)/η`. The multistep scheme matches the n ≥ 1 terms
//! through gradient differences at the interpolation nodes `w_m` (past steps,
//! plus the predicted point for the corrector), which yields the update
//!
//! ```text
//! x_t = √(α_t/α_{t−1})·x_{t−1} − √(1−α_t)(e^η−1)·r(t−1)
//!       − √(1−α_t)·η²·Σ_m (o_m/w_m)·[r(node m) − r(t−1)]
//! ```
//!
//! with `o = (1/η)·Γ⁻¹·b`, `Γ` the Vandermonde matrix of the nodes and
//! `b_n = n!·φ_{n+1}(η)`. The corrector appends the predicted point as node
//! `w = 1` with an unconditional gradient, lifting the order from p to p+1.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{EqualizedObservation, WhichMatrix};
use crate::error::{Error, Result};
use crate::guidance::{
    dps_guidance, exact_gaussian_guidance, gdm_guidance, icdm_guidance, projection_guidance,
    GuidanceContext, GuidanceMethod,
};
use crate::schedule::{epsilon_to_score, NoiseSchedule};
use crate::score::{GaussianPrior, ScoreModel};

/// Sampler settings. `order` is the multistep order p (corrector accuracy
/// p+1); `t_max` must equal the schedule's step count.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub order: usize,
    pub t_max: usize,
    pub beta: f64,
    pub gamma: f64,
    pub method: GuidanceMethod,
    pub sigma_hat2: f64,
    /// Ablation switch: evaluate the corrector's new gradient with guidance
    /// instead of the unconditional score. Supported by the derived
    /// estimators; the clean-estimate baselines cannot be evaluated at the
    /// final step and error there.
    pub conditional_corrector: bool,
}

impl SamplerConfig {
    pub fn new(order: usize, t_max: usize, beta: f64, gamma: f64, method: GuidanceMethod) -> Result<Self> {
        let cfg = Self {
            order,
            t_max,
            beta,
            gamma,
            method,
            sigma_hat2: 1.0,
            conditional_corrector: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 1 || self.order > 4 {
            return Err(Error::Range(format!("order must be in 1..=4, got {}", self.order)));
        }
        if self.t_max < self.order {
            return Err(Error::Range(format!(
                "t_max {} must be >= order {}",
                self.t_max, self.order
            )));
        }
        Ok(())
    }
}

/// The pair of joint conditional gradients at one step, in ε units.
#[derive(Debug, Clone)]
pub struct JointGradients {
    pub r_theta: Vec<f64>,
    pub r_phi: Vec<f64>,
    pub t: usize,
}

/// One retained step: the samples and their gradients.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub grads: JointGradients,
}

/// Ring buffer of the last ≤ p steps, strictly increasing and contiguous in t.
#[derive(Debug, Clone)]
pub struct SamplerHistory {
    cap: usize,
    entries: std::collections::VecDeque<HistoryEntry>,
}

impl SamplerHistory {
    pub fn new(cap: usize) -> Self {
        Self { cap, entries: std::collections::VecDeque::with_capacity(cap + 1) }
    }

    pub fn push(&mut self, entry: HistoryEntry) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.grads.t != last.grads.t + 1 {
                return Err(Error::Range(format!(
                    "history steps must be contiguous: {} after {}",
                    entry.grads.t, last.grads.t
                )));
            }
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.cap {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry `m` steps behind the newest one (m = 0 is the newest).
    pub fn back(&self, m: usize) -> Option<&HistoryEntry> {
        if m >= self.entries.len() {
            return None;
        }
        self.entries.get(self.entries.len() - 1 - m)
    }
}

/// Joint conditional gradient module: `r_θ = s_θ(x_t,t) − β·rbar_x`,
/// `r_φ = s_φ(z_t,t) − γ·rbar_z`. With method `None` (or β = γ = 0) the raw
/// ε-predictions come back unchanged.
pub fn jcg<R: Rng>(
    x_t: &[f64],
    z_t: &[f64],
    ctx: &GuidanceContext,
    model_x: &dyn ScoreModel,
    model_z: &dyn ScoreModel,
    t: usize,
    method: GuidanceMethod,
    rng: &mut R,
) -> Result<JointGradients> {
    if t >= ctx.sched.t_max() + 1 {
        return Err(Error::Range(format!("step {t} out of range 0..={}", ctx.sched.t_max())));
    }
    let eps_x = model_x.predict_epsilon(x_t, t);
    let eps_z = model_z.predict_epsilon(z_t, t);
    let unconditional = matches!(method, GuidanceMethod::None)
        || (ctx.beta == 0.0 && ctx.gamma == 0.0);
    if unconditional {
        return Ok(JointGradients { r_theta: eps_x, r_phi: eps_z, t });
    }
    let (gx, gz) = match method {
        GuidanceMethod::None => unreachable!(),
        GuidanceMethod::Icdm => icdm_guidance(x_t, z_t, ctx, t)?,
        GuidanceMethod::IcdmExact => exact_gaussian_guidance(x_t, z_t, ctx, t)?,
        // The ablation estimators take the destination step and read the
        // samples as step t-1 values, hence t+1 here.
        GuidanceMethod::Dps => dps_guidance(x_t, z_t, ctx, model_x, model_z, t + 1)?,
        GuidanceMethod::Gdm => gdm_guidance(x_t, z_t, ctx, model_x, model_z, t + 1)?,
        GuidanceMethod::Projection => projection_guidance(x_t, z_t, ctx, t + 1, rng)?,
    };
    let r_theta = eps_x.iter().zip(&gx).map(|(e, g)| e - ctx.beta * g).collect();
    let r_phi = eps_z.iter().zip(&gz).map(|(e, g)| e - ctx.gamma * g).collect();
    Ok(JointGradients { r_theta, r_phi, t })
}

/// The solved multistep coefficient system at one step.
///
/// `w` are the interpolation nodes in units of η (past steps are negative;
/// the corrector's new point is 1), `gamma_mat` the Vandermonde matrix with
/// rows `w^0 .. w^{order−1}`, `b` the φ-function right-hand side, and
/// `o = (1/η)·Γ⁻¹·b`.
#[derive(Debug, Clone)]
pub struct CoeffSystem {
    pub order: usize,
    pub w: Vec<f64>,
    pub gamma_mat: nalgebra::DMatrix<f64>,
    pub b: nalgebra::DVector<f64>,
    pub o: Vec<f64>,
}

/// φ_1..φ_n of the exponential integrator family.
fn phi_functions(h: f64, n: usize) -> Vec<f64> {
    let mut phis = Vec::with_capacity(n);
    if n == 0 {
        return phis;
    }
    phis.push((h.exp() - 1.0) / h);
    let mut fact = 1.0;
    for j in 1..n {
        fact *= j as f64;
        let next = (phis[j - 1] - 1.0 / fact) / h;
        phis.push(next);
    }
    phis
}

impl CoeffSystem {
    /// Corrector system: nodes are the history offsets `w_m`, m < order, plus
    /// the new point `w_order = 1`. This is the printed coefficient system.
    pub fn corrector(t: usize, order: usize, sched: &NoiseSchedule) -> Result<Self> {
        if order >= 1 && t < order {
            return Err(Error::Range(format!(
                "corrector order {order} needs history back to step {}",
                t as i64 - order as i64
            )));
        }
        let nodes = |m: usize| (sched.rho(t - m - 1) - sched.rho(t - 1)) / sched.eta(t);
        let w: Vec<f64> = (1..order).map(nodes).chain(std::iter::once(1.0)).collect();
        Self::solve(t, order, sched, w)
    }

    /// Predictor system: all `order` nodes are history offsets (no new point).
    pub fn predictor(t: usize, order: usize, sched: &NoiseSchedule) -> Result<Self> {
        if t < order + 1 {
            return Err(Error::Range(format!(
                "predictor order {order} needs history back to step {}",
                t as i64 - order as i64 - 1
            )));
        }
        let nodes = |m: usize| (sched.rho(t - m - 1) - sched.rho(t - 1)) / sched.eta(t);
        let w: Vec<f64> = (1..=order).map(nodes).collect();
        Self::solve(t, order, sched, w)
    }

    fn solve(t: usize, order: usize, sched: &NoiseSchedule, w: Vec<f64>) -> Result<Self> {
        sched.check_step(t)?;
        if t == 0 {
            return Err(Error::Range("coefficients are defined for steps t >= 1".into()));
        }
        if order == 0 {
            return Ok(Self {
                order: 0,
                w,
                gamma_mat: nalgebra::DMatrix::zeros(0, 0),
                b: nalgebra::DVector::zeros(0),
                o: Vec::new(),
            });
        }
        let eta = sched.eta(t);
        let mut gamma_mat = nalgebra::DMatrix::zeros(order, order);
        for row in 0..order {
            for (col, &wm) in w.iter().enumerate() {
                gamma_mat[(row, col)] = wm.powi(row as i32);
            }
        }
        let phis = phi_functions(eta, order + 1);
        let mut fact = 1.0;
        let b = nalgebra::DVector::from_iterator(
            order,
            (1..=order).map(|n| {
                fact *= n as f64;
                fact * phis[n]
            }),
        );
        let scaled = gamma_mat
            .clone()
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Coefficient(format!("singular node matrix at step {t}")))?;
        let o: Vec<f64> = scaled.iter().map(|v| v / eta).collect();
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::Coefficient(format!("non-finite coefficients at step {t}")));
        }
        Ok(Self { order, w, gamma_mat, b, o })
    }
}

/// Corrector-style coefficient system (history nodes plus the new point at 1).
pub fn unipc_coeffs(t: usize, order: usize, sched: &NoiseSchedule) -> Result<CoeffSystem> {
    CoeffSystem::corrector(t, order, sched)
}

/// Shared multistep update. `new_diff`, when present, is the corrector's
/// gradient difference at the final node.
fn multistep_update(
    history: &SamplerHistory,
    t: usize,
    sched: &NoiseSchedule,
    coeffs: &CoeffSystem,
    new_diff: Option<(&[f64], &[f64])>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_step(t)?;
    let latest = history
        .back(0)
        .ok_or_else(|| Error::Range("empty sampler history".into()))?;
    if latest.grads.t + 1 != t {
        return Err(Error::Range(format!(
            "history ends at step {}, cannot advance to {t}",
            latest.grads.t
        )));
    }
    let n_hist = if new_diff.is_some() { coeffs.order - 1 } else { coeffs.order };
    if history.len() < n_hist + 1 {
        return Err(Error::Range(format!(
            "need {} history entries at step {t}, have {}",
            n_hist + 1,
            history.len()
        )));
    }

    let a_t = sched.alpha(t);
    let a_prev = sched.alpha(t - 1);
    let eta = sched.eta(t);
    let carry = (a_t / a_prev).sqrt();
    let lead = (1.0 - a_t).sqrt() * (eta.exp() - 1.0);
    let diff_scale = (1.0 - a_t).sqrt() * eta * eta;

    let dim = latest.x.len();
    let r_th = &latest.grads.r_theta;
    let r_ph = &latest.grads.r_phi;
    let mut sum_x = vec![0.0; dim];
    let mut sum_z = vec![0.0; dim];
    for m in 1..=n_hist {
        let entry = history.back(m).expect("length checked above");
        let c = coeffs.o[m - 1] / coeffs.w[m - 1];
        for i in 0..dim {
            sum_x[i] += c * (entry.grads.r_theta[i] - r_th[i]);
            sum_z[i] += c * (entry.grads.r_phi[i] - r_ph[i]);
        }
    }
    if let Some((dx, dz)) = new_diff {
        let last = coeffs.order - 1;
        let c = coeffs.o[last] / coeffs.w[last];
        for i in 0..dim {
            sum_x[i] += c * dx[i];
            sum_z[i] += c * dz[i];
        }
    }

    let x = (0..dim)
        .map(|i| carry * latest.x[i] - lead * r_th[i] - diff_scale * sum_x[i])
        .collect();
    let z = (0..dim)
        .map(|i| carry * latest.z[i] - lead * r_ph[i] - diff_scale * sum_z[i])
        .collect();
    Ok((x, z))
}

/// Predictor step to `t` from the history (coefficients of order p−1, nodes
/// all in the past).
pub fn pc_predict(
    history: &SamplerHistory,
    t: usize,
    sched: &NoiseSchedule,
    coeffs: &CoeffSystem,
) -> Result<(Vec<f64>, Vec<f64>)> {
    multistep_update(history, t, sched, coeffs, None)
}

/// Corrector step: refine the predicted samples using the unconditional score
/// at the predicted point as the gradient of the final node (order p system).
pub fn pc_correct(
    history: &SamplerHistory,
    x_pred: &[f64],
    z_pred: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    model_x: &dyn ScoreModel,
    model_z: &dyn ScoreModel,
    coeffs: &CoeffSystem,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps_x = model_x.predict_epsilon(x_pred, t);
    let eps_z = model_z.predict_epsilon(z_pred, t);
    correct_with(history, t, sched, coeffs, &eps_x, &eps_z)
}

fn correct_with(
    history: &SamplerHistory,
    t: usize,
    sched: &NoiseSchedule,
    coeffs: &CoeffSystem,
    eps_x_new: &[f64],
    eps_z_new: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let latest = history
        .back(0)
        .ok_or_else(|| Error::Range("empty sampler history".into()))?;
    let dx: Vec<f64> = eps_x_new
        .iter()
        .zip(&latest.grads.r_theta)
        .map(|(e, r)| e - r)
        .collect();
    let dz: Vec<f64> = eps_z_new
        .iter()
        .zip(&latest.grads.r_phi)
        .map(|(e, r)| e - r)
        .collect();
    multistep_update(history, t, sched, coeffs, Some((&dx, &dz)))
}

fn check_finite(v: &[f64], what: &str, t: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence(format!("non-finite {what} at step {t}")));
    }
    Ok(())
}

/// Run the full interference-cancellation sampler from explicit initial
/// samples (step 0). Steps t ≤ p run a t-order predictor-corrector, later
/// steps run at order p. Returns `(x_T, z_T)`.
pub fn icdm_sample_from<R: Rng>(
    obs: &EqualizedObservation,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    model_x: &dyn ScoreModel,
    model_z: &dyn ScoreModel,
    x0: Vec<f64>,
    z0: Vec<f64>,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if cfg.t_max != sched.t_max() {
        return Err(Error::Range(format!(
            "config t_max {} != schedule t_max {}",
            cfg.t_max,
            sched.t_max()
        )));
    }
    let ctx = GuidanceContext::new(obs, sched, cfg.beta, cfg.gamma, cfg.sigma_hat2)?;
    let t_max = sched.t_max();

    let g0 = jcg(&x0, &z0, &ctx, model_x, model_z, 0, cfg.method, rng)?;
    let mut history = SamplerHistory::new(cfg.order);
    let mut x = x0.clone();
    let mut z = z0.clone();
    history.push(HistoryEntry { x: x0, z: z0, grads: g0 })?;

    for t in 1..=t_max {
        let order = t.min(cfg.order);
        debug_assert_eq!(history.len(), order);
        let pred_coeffs = CoeffSystem::predictor(t, order - 1, sched)?;
        let (x_bar, z_bar) = pc_predict(&history, t, sched, &pred_coeffs)?;
        check_finite(&x_bar, "predictor output", t)?;
        check_finite(&z_bar, "predictor output", t)?;

        let corr_coeffs = CoeffSystem::corrector(t, order, sched)?;
        let (xn, zn) = if cfg.conditional_corrector {
            let g = jcg(&x_bar, &z_bar, &ctx, model_x, model_z, t, cfg.method, rng)?;
            correct_with(&history, t, sched, &corr_coeffs, &g.r_theta, &g.r_phi)?
        } else {
            pc_correct(&history, &x_bar, &z_bar, t, sched, model_x, model_z, &corr_coeffs)?
        };
        check_finite(&xn, "corrector output", t)?;
        check_finite(&zn, "corrector output", t)?;
        x = xn;
        z = zn;

        if t < t_max {
            let g = jcg(&x, &z, &ctx, model_x, model_z, t, cfg.method, rng)?;
            history.push(HistoryEntry { x: x.clone(), z: z.clone(), grads: g })?;
        }
    }
    Ok((x, z))
}

/// The interference-cancellation sampler with the standard initialization
/// `x_0, z_0 ~ N(0, I_2k)`.
pub fn icdm_sample<R: Rng>(
    obs: &EqualizedObservation,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    model_x: &dyn ScoreModel,
    model_z: &dyn ScoreModel,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = obs.mats.dim();
    let x0: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z0: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    icdm_sample_from(obs, sched, cfg, model_x, model_z, x0, z0, rng)
}

/// Where the Langevin iteration gets its posterior score.
pub enum ScoreSource<'a> {
    /// Gaussian priors: the exact posterior score
    /// `[−(x−μ)/c; −(z−μ)/c] + Wᵀ((σ²/2)W_n²)⁻¹(y − W·v)`.
    ExactPosterior {
        prior_x: &'a GaussianPrior,
        prior_z: &'a GaussianPrior,
    },
    /// Model-based prior scores at a fixed grid step, plus the same
    /// likelihood term.
    Models {
        model_x: &'a dyn ScoreModel,
        model_z: &'a dyn ScoreModel,
        t: usize,
        sched: &'a NoiseSchedule,
    },
}

/// Langevin dynamics `v ← v + (ς/2)·∇log p(v|y) + √ς·ε` from a standard
/// normal start. Returns the mean of the trailing `window` iterates split
/// into the x and z halves (window = 1 gives the last iterate).
pub fn langevin_solve<R: Rng>(
    obs: &EqualizedObservation,
    source: &ScoreSource,
    steps: usize,
    step_size: f64,
    window: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(step_size > 0.0) {
        return Err(Error::Range(format!("step size must be > 0, got {step_size}")));
    }
    if steps == 0 || window == 0 || window > steps {
        return Err(Error::Range(format!(
            "need 1 <= window <= steps, got window {window}, steps {steps}"
        )));
    }
    let n = obs.mats.dim();
    if obs.mats.w_n.iter().any(|&w| w == 0.0) {
        return Err(Error::Singular("W_n has a zero diagonal entry".into()));
    }
    let spx = obs.params.p_x.sqrt();
    let spz = obs.params.p_z.sqrt();
    let lam_inv: Vec<f64> = obs
        .mats
        .w_n
        .iter()
        .map(|w| 2.0 / (obs.params.sigma2 * w * w))
        .collect();

    let mut x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut acc_x = vec![0.0; n];
    let mut acc_z = vec![0.0; n];
    let half = step_size / 2.0;
    let noise = step_size.sqrt();

    for it in 0..steps {
        let sx = obs.mats.apply(WhichMatrix::S, &x)?;
        let zz = obs.mats.apply(WhichMatrix::Z, &z)?;
        let u: Vec<f64> = (0..n)
            .map(|i| (obs.y[i] - spx * sx[i] - spz * zz[i]) * lam_inv[i])
            .collect();
        let lx = obs.mats.apply(WhichMatrix::S, &u)?;
        let lz = obs.mats.apply(WhichMatrix::Zt, &u)?;

        let (px, pz) = match source {
            ScoreSource::ExactPosterior { prior_x, prior_z } => {
                let px: Vec<f64> = x
                    .iter()
                    .zip(prior_x.mean.iter().zip(&prior_x.var))
                    .map(|(v, (m, c))| -(v - m) / c)
                    .collect();
                let pz: Vec<f64> = z
                    .iter()
                    .zip(prior_z.mean.iter().zip(&prior_z.var))
                    .map(|(v, (m, c))| -(v - m) / c)
                    .collect();
                (px, pz)
            }
            ScoreSource::Models { model_x, model_z, t, sched } => {
                let px = epsilon_to_score(&model_x.predict_epsilon(&x, *t), *t, sched)?;
                let pz = epsilon_to_score(&model_z.predict_epsilon(&z, *t), *t, sched)?;
                (px, pz)
            }
        };

        for i in 0..n {
            x[i] += half * (px[i] + spx * lx[i]) + noise * rng.sample::<f64, _>(StandardNormal);
            z[i] += half * (pz[i] + spz * lz[i]) + noise * rng.sample::<f64, _>(StandardNormal);
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("langevin iterate {it} is non-finite")));
        }
        if it >= steps - window {
            for i in 0..n {
                acc_x[i] += x[i];
                acc_z[i] += z[i];
            }
        }
    }
    let wf = window as f64;
    Ok((
        acc_x.into_iter().map(|v| v / wf).collect(),
        acc_z.into_iter().map(|v| v / wf).collect(),
    ))
}

//! Score models: analytic Gaussian and Gaussian-mixture oracles, a trainable
//! per-timestep affine model, and the denoising-score-matching trainer.
//!
//! Every model predicts the forward noise ε̂ from a noisy sample; the score is
//! recovered via [`crate::schedule::epsilon_to_score`]. The two models used by
//! the sampler (signal and interference) are trained and evaluated completely
//! independently of each other.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Maps a noisy sample at step `t` to a noise prediction ε̂ of the same
/// dimension. Implementations are pure functions of `(sample, t, state)`;
/// `t` must be a grid step of the model's schedule.
pub trait ScoreModel {
    fn predict_epsilon(&self, sample: &[f64], t: usize) -> Vec<f64>;
}

/// Diagonal Gaussian prior N(mean, diag(var)).
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Dimension(format!(
                "prior mean/var lengths differ: {} vs {}",
                mean.len(),
                var.len()
            )));
        }
        if !var.iter().all(|&v| v > 0.0) {
            return Err(Error::Range("prior variances must be strictly positive".into()));
        }
        Ok(Self { mean, var })
    }

    /// Constant mean / variance in `dim` components.
    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![var; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Finite mixture of diagonal Gaussians; weights sum to one.
#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianPrior>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::Dimension("mixture needs >= 1 weighted component".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Range(format!("weights must be a simplex vector, sum {sum}")));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::Dimension("mixture components have mixed dimensions".into()));
        }
        Ok(Self { weights, components })
    }
}

/// Marginal of the forward process at step t for a Gaussian prior:
/// `x_t ~ N(√α_t·μ, α_t·diag(c) + (1−α_t)·I)`. Returns ε̂ = −√(1−α_t)·score.
pub fn gaussian_epsilon(
    sample: &[f64],
    t: usize,
    prior: &GaussianPrior,
    sched: &NoiseSchedule,
) -> Vec<f64> {
    assert_eq!(sample.len(), prior.dim(), "sample/prior dimension mismatch");
    let a = sched.alpha(t);
    let sa = a.sqrt();
    let s1a = (1.0 - a).sqrt();
    sample
        .iter()
        .zip(prior.mean.iter().zip(&prior.var))
        .map(|(&x, (&m, &c))| s1a * (x - sa * m) / (a * c + (1.0 - a)))
        .collect()
}

/// Log-density of the time-t marginal for a Gaussian prior (used by the
/// finite-difference verification oracles).
pub fn gaussian_marginal_logpdf(
    sample: &[f64],
    t: usize,
    prior: &GaussianPrior,
    sched: &NoiseSchedule,
) -> f64 {
    let a = sched.alpha(t);
    let sa = a.sqrt();
    let mut acc = 0.0;
    for ((&x, &m), &c) in sample.iter().zip(&prior.mean).zip(&prior.var) {
        let v = a * c + (1.0 - a);
        let d = x - sa * m;
        acc += -0.5 * (d * d / v + v.ln() + (2.0 * std::f64::consts::PI).ln());
    }
    acc
}

/// Log-density of the time-t marginal for a mixture prior, via log-sum-exp.
pub fn gmm_marginal_logpdf(
    sample: &[f64],
    t: usize,
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
) -> f64 {
    let logs: Vec<f64> = prior
        .weights
        .iter()
        .zip(&prior.components)
        .map(|(&w, comp)| w.ln() + gaussian_marginal_logpdf(sample, t, comp, sched))
        .collect();
    log_sum_exp(&logs)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact mixture score via responsibility-weighted component scores,
/// converted to ε̂. Responsibilities are formed in log space.
pub fn gmm_epsilon(
    sample: &[f64],
    t: usize,
    prior: &GaussianMixturePrior,
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let logs: Vec<f64> = prior
        .weights
        .iter()
        .zip(&prior.components)
        .map(|(&w, comp)| w.ln() + gaussian_marginal_logpdf(sample, t, comp, sched))
        .collect();
    let lse = log_sum_exp(&logs);
    let mut out = vec![0.0; sample.len()];
    for (j, comp) in prior.components.iter().enumerate() {
        let r = (logs[j] - lse).exp();
        if r == 0.0 {
            continue;
        }
        let eps_j = gaussian_epsilon(sample, t, comp, sched);
        for (o, e) in out.iter_mut().zip(eps_j) {
            *o += r * e;
        }
    }
    out
}

/// Analytic-oracle score model for a Gaussian prior.
#[derive(Debug, Clone)]
pub struct GaussianScoreModel {
    pub prior: GaussianPrior,
    pub sched: NoiseSchedule,
}

impl ScoreModel for GaussianScoreModel {
    fn predict_epsilon(&self, sample: &[f64], t: usize) -> Vec<f64> {
        gaussian_epsilon(sample, t, &self.prior, &self.sched)
    }
}

/// Analytic-oracle score model for a Gaussian-mixture prior.
#[derive(Debug, Clone)]
pub struct GmmScoreModel {
    pub prior: GaussianMixturePrior,
    pub sched: NoiseSchedule,
}

impl ScoreModel for GmmScoreModel {
    fn predict_epsilon(&self, sample: &[f64], t: usize) -> Vec<f64> {
        gmm_epsilon(sample, t, &self.prior, &self.sched)
    }
}

/// Per-timestep diagonal affine noise predictor `ε̂ = D_t ∘ x + c_t`.
///
/// This family contains the population-optimal denoising predictor for any
/// Gaussian prior, so the trainer below is verifiable in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScoreModel {
    /// gain[t] is D_t, length dim, for t = 0..=T.
    pub gain: Vec<Vec<f64>>,
    /// bias[t] is c_t.
    pub bias: Vec<Vec<f64>>,
}

impl AffineScoreModel {
    /// All-zero model on a (T+1)-point grid.
    pub fn zeros(t_max: usize, dim: usize) -> Self {
        Self {
            gain: vec![vec![0.0; dim]; t_max + 1],
            bias: vec![vec![0.0; dim]; t_max + 1],
        }
    }

    /// The analytic DSM optimum for a Gaussian prior:
    /// `D_t = √(1−α_t)/(α_t·c + (1−α_t))`, `c_t = −D_t·√α_t·μ`.
    pub fn gaussian_optimum(prior: &GaussianPrior, sched: &NoiseSchedule) -> Self {
        let dim = prior.dim();
        let mut model = Self::zeros(sched.t_max(), dim);
        for t in 0..=sched.t_max() {
            let a = sched.alpha(t);
            for i in 0..dim {
                let d = (1.0 - a).sqrt() / (a * prior.var[i] + (1.0 - a));
                model.gain[t][i] = d;
                model.bias[t][i] = -d * a.sqrt() * prior.mean[i];
            }
        }
        model
    }

    pub fn t_max(&self) -> usize {
        self.gain.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.gain[0].len()
    }

    /// Serialize as a text table, one row per step: `t d_0 .. d_{n-1} c_0 .. c_{n-1}`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for t in 0..self.gain.len() {
            out.push_str(&t.to_string());
            for v in self.gain[t].iter().chain(self.bias[t].iter()) {
                out.push(' ');
                out.push_str(&format!("{v:.17e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the table format written by [`Self::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let mut gain = Vec::new();
        let mut bias = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 3 || (fields.len() - 1) % 2 != 0 {
                return Err(Error::Dimension(format!(
                    "model table line {}: expected t + 2n values",
                    lineno + 1
                )));
            }
            let t: usize = fields[0]
                .parse()
                .map_err(|_| Error::Range(format!("model table line {}: bad step", lineno + 1)))?;
            if t != gain.len() {
                return Err(Error::Range(format!(
                    "model table line {}: steps must be consecutive from 0",
                    lineno + 1
                )));
            }
            let vals: Vec<f64> = fields[1..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Range(format!("model table line {}: bad float", lineno + 1)))?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Range(format!(
                    "model table line {}: entries must be finite",
                    lineno + 1
                )));
            }
            let n = vals.len() / 2;
            gain.push(vals[..n].to_vec());
            bias.push(vals[n..].to_vec());
        }
        if gain.is_empty() {
            return Err(Error::Dimension("model table is empty".into()));
        }
        Ok(Self { gain, bias })
    }
}

impl ScoreModel for AffineScoreModel {
    fn predict_epsilon(&self, sample: &[f64], t: usize) -> Vec<f64> {
        assert!(t < self.gain.len(), "step {t} out of range for affine model");
        sample
            .iter()
            .zip(self.gain[t].iter().zip(&self.bias[t]))
            .map(|(&x, (&d, &c))| d * x + c)
            .collect()
    }
}

/// Training statistics from [`dsm_train`].
#[derive(Debug, Clone)]
pub struct DsmReport {
    /// Mean loss per window of 100 iterations.
    pub window_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Denoising score matching on an affine model.
///
/// Per iteration: draw a batch of (clean sample, ε ~ N(0,I), t uniform on the
/// grid), form `x_t = √α_t·clean + √(1−α_t)·ε`, and take one SGD step on the
/// closed-form gradient of `‖D_t∘x_t + c_t − ε‖²` averaged over the batch.
/// Aborts if the batch loss exceeds 1e6.
pub fn dsm_train<R: Rng>(
    model: &mut AffineScoreModel,
    mut draw_clean: impl FnMut(&mut R) -> Vec<f64>,
    sched: &NoiseSchedule,
    iters: usize,
    lr: f64,
    batch: usize,
    rng: &mut R,
) -> Result<DsmReport> {
    if iters == 0 {
        return Err(Error::Range("iters must be >= 1".into()));
    }
    if !(lr >= 0.0) {
        return Err(Error::Range(format!("lr must be >= 0, got {lr}")));
    }
    if batch == 0 {
        return Err(Error::Range("batch must be >= 1".into()));
    }
    if model.t_max() != sched.t_max() {
        return Err(Error::Dimension(format!(
            "model grid {} != schedule grid {}",
            model.t_max(),
            sched.t_max()
        )));
    }
    let dim = model.dim();
    let steps = sched.t_max() + 1;
    let mut grad_gain = vec![vec![0.0; dim]; steps];
    let mut grad_bias = vec![vec![0.0; dim]; steps];
    let mut touched = vec![false; steps];
    let mut window_losses = Vec::new();
    let mut window_acc = 0.0;
    let mut last_loss = 0.0;

    for it in 0..iters {
        for row in grad_gain.iter_mut().chain(grad_bias.iter_mut()) {
            row.iter_mut().for_each(|g| *g = 0.0);
        }
        touched.iter_mut().for_each(|f| *f = false);
        let mut loss = 0.0;
        for _ in 0..batch {
            let clean = draw_clean(rng);
            debug_assert_eq!(clean.len(), dim);
            let t = rng.random_range(0..steps);
            touched[t] = true;
            let a = sched.alpha(t);
            let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
            for i in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                let xt = sa * clean[i] + s1a * e;
                let resid = model.gain[t][i] * xt + model.bias[t][i] - e;
                loss += resid * resid;
                grad_gain[t][i] += 2.0 * resid * xt;
                grad_bias[t][i] += 2.0 * resid;
            }
        }
        loss /= batch as f64;
        last_loss = loss;
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Divergence(format!(
                "dsm_train loss {loss} at iteration {it}"
            )));
        }
        let scale = lr / batch as f64;
        for t in 0..steps {
            if !touched[t] {
                continue;
            }
            for i in 0..dim {
                model.gain[t][i] -= scale * grad_gain[t][i];
                model.bias[t][i] -= scale * grad_bias[t][i];
            }
        }
        window_acc += loss;
        if (it + 1) % 100 == 0 {
            window_losses.push(window_acc / 100.0);
            window_acc = 0.0;
        }
    }
    Ok(DsmReport { window_losses, final_loss: last_loss })
}

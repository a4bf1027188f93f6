//! Closed-form references used to validate the samplers.
//!
//! The Gaussian-prior MAP problem is a 4k×4k SPD linear system, but symbols
//! couple only through the index pairs (i, i+k) in the x and z blocks, so the
//! structured solver reduces it to independent 4×4 solves per symbol pair. The
//! dense paths exist to cross-check the structured ones.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::channel::{EqualizedObservation, WhichMatrix};
use crate::error::{check_len, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::GaussianPrior;

/// Joint MAP estimate and the norm of its stationarity condition.
#[derive(Debug, Clone)]
pub struct MapSolution {
    pub x_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub kkt_residual: f64,
}

/// One evaluation of the estimation-error bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundReport {
    /// `(ξ + λ_min)·√(‖x̂−x*‖² + ‖ẑ−z*‖²)`.
    pub lhs: f64,
    /// `‖Σ·n‖` with `Σ = (2/σ²)·Wᵀ·W_n⁻¹`.
    pub rhs: f64,
    pub xi: f64,
    pub lambda_min: f64,
    pub holds: bool,
}

/// The 2×4 per-pair block of `W = [√P_x·W_s, √P_z·W_z]` acting on
/// `(x_i, x_{i+k}, z_i, z_{i+k})`.
fn pair_block(obs: &EqualizedObservation, i: usize) -> [[f64; 4]; 2] {
    let k = obs.mats.half_dim();
    let spx = obs.params.p_x.sqrt();
    let spz = obs.params.p_z.sqrt();
    let m = &obs.mats;
    [
        [spx * m.w_s[i], 0.0, spz * m.wz_tl[i], spz * m.wz_tr[i]],
        [0.0, spx * m.w_s[i + k], spz * m.wz_bl[i], spz * m.wz_br[i]],
    ]
}

fn lambda_inv(obs: &EqualizedObservation, i: usize) -> f64 {
    let wn = obs.mats.w_n[i];
    2.0 / (obs.params.sigma2 * wn * wn)
}

/// Solve the Gaussian MAP problem
/// `(P⁻¹ + Wᵀ·Λ⁻¹·W)·v = Wᵀ·Λ⁻¹·y + P⁻¹·μ`, `Λ = (σ²/2)·W_n²`,
/// exploiting the per-symbol-pair block structure.
pub fn gaussian_map_solve(
    obs: &EqualizedObservation,
    prior_x: &GaussianPrior,
    prior_z: &GaussianPrior,
) -> Result<MapSolution> {
    let k = obs.mats.half_dim();
    let n = 2 * k;
    check_len("prior_x", prior_x.dim(), n)?;
    check_len("prior_z", prior_z.dim(), n)?;
    if obs.mats.w_n.iter().any(|&w| w == 0.0) {
        return Err(Error::Singular("W_n has a zero diagonal entry".into()));
    }

    let mut x_hat = vec![0.0; n];
    let mut z_hat = vec![0.0; n];
    for i in 0..k {
        let g = pair_block(obs, i);
        let li = [lambda_inv(obs, i), lambda_inv(obs, i + k)];
        let pv = [
            1.0 / prior_x.var[i],
            1.0 / prior_x.var[i + k],
            1.0 / prior_z.var[i],
            1.0 / prior_z.var[i + k],
        ];
        let mu = [
            prior_x.mean[i],
            prior_x.mean[i + k],
            prior_z.mean[i],
            prior_z.mean[i + k],
        ];
        let ys = [obs.y[i], obs.y[i + k]];

        let mut a = Matrix4::zeros();
        let mut b = Vector4::zeros();
        for r in 0..4 {
            a[(r, r)] = pv[r];
            b[r] = pv[r] * mu[r];
            for c in 0..4 {
                a[(r, c)] += g[0][r] * li[0] * g[0][c] + g[1][r] * li[1] * g[1][c];
            }
            b[r] += g[0][r] * li[0] * ys[0] + g[1][r] * li[1] * ys[1];
        }
        let sol = a
            .cholesky()
            .ok_or_else(|| Error::Numerical("per-pair MAP system is not SPD".into()))?
            .solve(&b);
        x_hat[i] = sol[0];
        x_hat[i + k] = sol[1];
        z_hat[i] = sol[2];
        z_hat[i + k] = sol[3];
    }

    let kkt = kkt_residual(obs, prior_x, prior_z, &x_hat, &z_hat)?;
    Ok(MapSolution { x_hat, z_hat, kkt_residual: kkt })
}

/// Norm of the posterior stationarity condition
/// `−P⁻¹(v−μ) + Wᵀ·Λ⁻¹·(y − W·v)` at the candidate solution.
fn kkt_residual(
    obs: &EqualizedObservation,
    prior_x: &GaussianPrior,
    prior_z: &GaussianPrior,
    x_hat: &[f64],
    z_hat: &[f64],
) -> Result<f64> {
    let n = obs.mats.dim();
    let spx = obs.params.p_x.sqrt();
    let spz = obs.params.p_z.sqrt();
    let sx = obs.mats.apply(WhichMatrix::S, x_hat)?;
    let zz = obs.mats.apply(WhichMatrix::Z, z_hat)?;
    let u: Vec<f64> = (0..n)
        .map(|i| (obs.y[i] - spx * sx[i] - spz * zz[i]) * lambda_inv(obs, i))
        .collect();
    let wx = obs.mats.apply(WhichMatrix::S, &u)?;
    let wz = obs.mats.apply(WhichMatrix::Zt, &u)?;
    let mut acc = 0.0;
    for i in 0..n {
        let gx = -(x_hat[i] - prior_x.mean[i]) / prior_x.var[i] + spx * wx[i];
        let gz = -(z_hat[i] - prior_z.mean[i]) / prior_z.var[i] + spz * wz[i];
        acc += gx * gx + gz * gz;
    }
    Ok(acc.sqrt())
}

/// Dense-matrix version of [`gaussian_map_solve`], verification path.
pub fn gaussian_map_solve_dense(
    obs: &EqualizedObservation,
    prior_x: &GaussianPrior,
    prior_z: &GaussianPrior,
) -> Result<MapSolution> {
    let n = obs.mats.dim();
    check_len("prior_x", prior_x.dim(), n)?;
    check_len("prior_z", prior_z.dim(), n)?;
    let w = obs.mats.dense_w(obs.params.p_x, obs.params.p_z);
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    let mut b = DVector::zeros(2 * n);
    for r in 0..2 * n {
        let (var, mean) = if r < n {
            (prior_x.var[r], prior_x.mean[r])
        } else {
            (prior_z.var[r - n], prior_z.mean[r - n])
        };
        a[(r, r)] = 1.0 / var;
        b[r] = mean / var;
    }
    for i in 0..n {
        let li = lambda_inv(obs, i);
        for r in 0..2 * n {
            if w[(i, r)] == 0.0 {
                continue;
            }
            b[r] += w[(i, r)] * li * obs.y[i];
            for c in 0..2 * n {
                a[(r, c)] += w[(i, r)] * li * w[(i, c)];
            }
        }
    }
    let sol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("dense MAP system is not SPD".into()))?
        .solve(&b);
    let x_hat = sol.as_slice()[..n].to_vec();
    let z_hat = sol.as_slice()[n..].to_vec();
    let kkt = kkt_residual(obs, prior_x, prior_z, &x_hat, &z_hat)?;
    Ok(MapSolution { x_hat, z_hat, kkt_residual: kkt })
}

/// Minimum eigenvalue of `Ω·W = Wᵀ·((σ²/2)·W_n²)⁻¹·W`, from the per-pair 4×4
/// blocks. Always ≥ 0 up to rounding (the blocks are Gram matrices).
pub fn lambda_min(obs: &EqualizedObservation) -> Result<f64> {
    let k = obs.mats.half_dim();
    if obs.mats.w_n.iter().any(|&w| w == 0.0) {
        return Err(Error::Singular("W_n has a zero diagonal entry".into()));
    }
    let mut min_ev = f64::INFINITY;
    for i in 0..k {
        let g = pair_block(obs, i);
        let li = [lambda_inv(obs, i), lambda_inv(obs, i + k)];
        let mut a = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                a[(r, c)] = g[0][r] * li[0] * g[0][c] + g[1][r] * li[1] * g[1][c];
            }
        }
        let ev = a.symmetric_eigenvalues();
        min_ev = ev.iter().cloned().fold(min_ev, f64::min);
    }
    Ok(min_ev)
}

/// Dense eigensolve of the full 4k×4k `Ω·W`, cross-check path.
pub fn lambda_min_dense(obs: &EqualizedObservation) -> Result<f64> {
    let n = obs.mats.dim();
    let w = obs.mats.dense_w(obs.params.p_x, obs.params.p_z);
    let mut omega_w: DMatrix<f64> = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let li = lambda_inv(obs, i);
        for r in 0..2 * n {
            for c in 0..2 * n {
                omega_w[(r, c)] += w[(i, r)] * li * w[(i, c)];
            }
        }
    }
    let ev = omega_w.symmetric_eigenvalues();
    Ok(ev.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Evaluate the error bound
/// `(ξ + λ_min)·√(‖x̂−x*‖² + ‖ẑ−z*‖²) ≤ ‖Σ·n‖` for a candidate estimate.
///
/// `n` is the pre-equalization real noise (`eq_noise = W_n·n`), and ξ is the
/// strong-convexity parameter of the priors (min inverse variance for
/// Gaussians), supplied by the caller.
pub fn theorem_bound_check(
    x_hat: &[f64],
    z_hat: &[f64],
    x_star: &[f64],
    z_star: &[f64],
    n: &[f64],
    obs: &EqualizedObservation,
    xi: f64,
) -> Result<BoundReport> {
    let dim = obs.mats.dim();
    check_len("x_hat", x_hat.len(), dim)?;
    check_len("z_hat", z_hat.len(), dim)?;
    check_len("x_star", x_star.len(), dim)?;
    check_len("z_star", z_star.len(), dim)?;
    check_len("n", n.len(), dim)?;
    if !(xi > 0.0) {
        return Err(Error::Range(format!("xi must be > 0, got {xi}")));
    }
    if obs.mats.w_n.iter().any(|&w| w == 0.0) {
        return Err(Error::Singular("W_n has a zero diagonal entry".into()));
    }

    // Sigma * n = (2/sigma^2) * W^T * (W_n^{-1} n)
    let u: Vec<f64> = n.iter().zip(&obs.mats.w_n).map(|(v, w)| v / w).collect();
    let sx = obs.mats.apply(WhichMatrix::S, &u)?;
    let sz = obs.mats.apply(WhichMatrix::Zt, &u)?;
    let c = 2.0 / obs.params.sigma2;
    let spx = obs.params.p_x.sqrt();
    let spz = obs.params.p_z.sqrt();
    let rhs_sq: f64 = sx
        .iter()
        .map(|v| (c * spx * v) * (c * spx * v))
        .chain(sz.iter().map(|v| (c * spz * v) * (c * spz * v)))
        .sum();

    let err_sq: f64 = x_hat
        .iter()
        .zip(x_star)
        .chain(z_hat.iter().zip(z_star))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let lam = lambda_min(obs)?;
    let lhs = (xi + lam) * err_sq.sqrt();
    let rhs = rhs_sq.sqrt();
    Ok(BoundReport { lhs, rhs, xi, lambda_min: lam, holds: lhs <= rhs + 1e-9 })
}

/// Central-difference gradient `(f(v+h·e_i) − f(v−h·e_i)) / 2h`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, v: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Range(format!("step h must be > 0, got {h}")));
    }
    let mut grad = vec![0.0; v.len()];
    let mut probe = v.to_vec();
    for i in 0..v.len() {
        probe[i] = v[i] + h;
        let fp = f(&probe);
        probe[i] = v[i] - h;
        let fm = f(&probe);
        probe[i] = v[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite function value near coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Exact probability-flow map for a Gaussian prior: the flow transports
/// `N(m(0), v(0))` to `N(m(T), v(T))` by the per-component affine map
/// `x ↦ m(T) + √(v(T)/v(0))·(x − m(0))` with `m(t) = √α_t·μ`,
/// `v(t) = α_t·c + (1−α_t)`. Oracle for the convergence-order studies.
pub fn gaussian_flow_map(x0: &[f64], prior: &GaussianPrior, sched: &NoiseSchedule) -> Vec<f64> {
    let a0 = sched.alpha(0);
    let at = sched.alpha(sched.t_max());
    x0.iter()
        .zip(prior.mean.iter().zip(&prior.var))
        .map(|(&x, (&m, &c))| {
            let m0 = a0.sqrt() * m;
            let mt = at.sqrt() * m;
            let v0 = a0 * c + (1.0 - a0);
            let vt = at * c + (1.0 - at);
            mt + (vt / v0).sqrt() * (x - m0)
        })
        .collect()
}

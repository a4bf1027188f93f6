//! Complex baseband channel with interference and MMSE equalization.
//!
//! The received symbol is `y_c[i] = √P_x·h_x[i]·x_c[i] + √P_z·h_z[i]·z_c[i] + n_c[i]`
//! with `n_c[i] ~ CN(0, σ²)`. After per-symbol MMSE equalization
//! (`h_x*[i]/(|h_x[i]|² + σ²)` under Rayleigh fading, identity under AWGN) and
//! unpacking to real form, the observation obeys
//!
//! ```text
//! y = √P_x·W_s·x + √P_z·W_z·z + W_n·n,      n ~ N(0, (σ²/2)·I_2k)
//! ```
//!
//! where `x` is the real packing of `x_c`, `z = [Re(h_z∘z_c); Im(h_z∘z_c)]` is
//! the effective interference (the unknown gain is folded in), and the
//! coefficient matrices depend only on the known gains `h_x`:
//! `W_s = H²(H²+σ²I)⁻¹`, `W_n = H(H²+σ²I)⁻¹`, and
//! `W_z = [[H_r, H_i], [−H_i, H_r]](H²+σ²I)⁻¹` with `H = diag(|h_x|; |h_x|)`,
//! `H_r = diag(Re h_x)`, `H_i = diag(Im h_x)`.
//!
//! All matrices are stored as diagonals (W_z as four k-diagonals) and applied
//! in O(k); dense assembly exists only as a debug/oracle path.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

/// Which channel statistics generate the per-symbol gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// Unit gains, additive white Gaussian noise only.
    Awgn,
    /// I.i.d. CN(0,1) gains per symbol.
    Rayleigh,
}

/// Transmit powers, complex-noise variance and frame length.
#[derive(Debug, Clone, Copy)]
pub struct ChannelParams {
    /// Signal power P_x (linear), > 0.
    pub p_x: f64,
    /// Interference power P_z (linear), ≥ 0.
    pub p_z: f64,
    /// Complex noise variance σ², > 0.
    pub sigma2: f64,
    /// Channel uses per frame.
    pub k: usize,
}

impl ChannelParams {
    pub fn new(p_x: f64, p_z: f64, sigma2: f64, k: usize) -> Result<Self> {
        if !(p_x > 0.0) {
            return Err(Error::Range(format!("p_x must be > 0, got {p_x}")));
        }
        if !(p_z >= 0.0) {
            return Err(Error::Range(format!("p_z must be >= 0, got {p_z}")));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::Range(format!("sigma2 must be > 0, got {sigma2}")));
        }
        if k == 0 {
            return Err(Error::Dimension("k must be >= 1".into()));
        }
        Ok(Self { p_x, p_z, sigma2, k })
    }
}

/// One draw of the per-symbol complex gains.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h_x: Vec<Complex64>,
    pub h_z: Vec<Complex64>,
    pub kind: ChannelKind,
}

/// Draw a channel realization: unit gains for AWGN, i.i.d. CN(0,1) for Rayleigh.
pub fn sample_channel<R: Rng>(kind: ChannelKind, k: usize, rng: &mut R) -> Result<ChannelRealization> {
    if k == 0 {
        return Err(Error::Dimension("k must be >= 1".into()));
    }
    let draw = |rng: &mut R| -> Vec<Complex64> {
        match kind {
            ChannelKind::Awgn => vec![Complex64::new(1.0, 0.0); k],
            ChannelKind::Rayleigh => (0..k)
                .map(|_| {
                    // CN(0,1): two independent real N(0, 1/2) draws.
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                })
                .collect(),
        }
    };
    let h_x = draw(rng);
    let h_z = draw(rng);
    Ok(ChannelRealization { h_x, h_z, kind })
}

/// Selects one of the structured effective matrices (or the transpose of W_z).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichMatrix {
    S,
    Z,
    N,
    Zt,
}

/// The Lemma-1 coefficient matrices stored as diagonals.
///
/// `w_s` and `w_n` are the 2k diagonals of W_s and W_n. W_z is the 2×2 block
/// of k-diagonals `[[tl, tr], [bl, br]]`.
#[derive(Debug, Clone)]
pub struct EffectiveMatrices {
    pub w_s: Vec<f64>,
    pub w_n: Vec<f64>,
    pub wz_tl: Vec<f64>,
    pub wz_tr: Vec<f64>,
    pub wz_bl: Vec<f64>,
    pub wz_br: Vec<f64>,
}

/// Construct W_s, W_z, W_n from the known gains. AWGN yields identities.
pub fn build_effective_matrices(
    h_x: &[Complex64],
    sigma2: f64,
    kind: ChannelKind,
) -> Result<EffectiveMatrices> {
    if !(sigma2 > 0.0) {
        return Err(Error::Range(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let k = h_x.len();
    if k == 0 {
        return Err(Error::Dimension("h_x must be nonempty".into()));
    }
    match kind {
        ChannelKind::Awgn => Ok(EffectiveMatrices {
            w_s: vec![1.0; 2 * k],
            w_n: vec![1.0; 2 * k],
            wz_tl: vec![1.0; k],
            wz_tr: vec![0.0; k],
            wz_bl: vec![0.0; k],
            wz_br: vec![1.0; k],
        }),
        ChannelKind::Rayleigh => {
            let mut w_s = vec![0.0; 2 * k];
            let mut w_n = vec![0.0; 2 * k];
            let mut wz_tl = vec![0.0; k];
            let mut wz_tr = vec![0.0; k];
            let mut wz_bl = vec![0.0; k];
            let mut wz_br = vec![0.0; k];
            for i in 0..k {
                let h2 = h_x[i].norm_sqr();
                let d = h2 + sigma2;
                w_s[i] = h2 / d;
                w_s[i + k] = h2 / d;
                w_n[i] = h2.sqrt() / d;
                w_n[i + k] = w_n[i];
                wz_tl[i] = h_x[i].re / d;
                wz_tr[i] = h_x[i].im / d;
                wz_bl[i] = -h_x[i].im / d;
                wz_br[i] = h_x[i].re / d;
            }
            Ok(EffectiveMatrices { w_s, w_n, wz_tl, wz_tr, wz_bl, wz_br })
        }
    }
}

impl EffectiveMatrices {
    /// Channel uses k (half the real dimension).
    pub fn half_dim(&self) -> usize {
        self.wz_tl.len()
    }

    /// Real dimension 2k.
    pub fn dim(&self) -> usize {
        self.w_s.len()
    }

    /// Structured matrix-vector product in O(k).
    pub fn apply(&self, which: WhichMatrix, v: &[f64]) -> Result<Vec<f64>> {
        let k = self.half_dim();
        check_len("apply_w input", v.len(), 2 * k)?;
        match which {
            WhichMatrix::S => Ok(v.iter().zip(&self.w_s).map(|(x, w)| x * w).collect()),
            WhichMatrix::N => Ok(v.iter().zip(&self.w_n).map(|(x, w)| x * w).collect()),
            WhichMatrix::Z => {
                let mut out = vec![0.0; 2 * k];
                for i in 0..k {
                    out[i] = self.wz_tl[i] * v[i] + self.wz_tr[i] * v[i + k];
                    out[i + k] = self.wz_bl[i] * v[i] + self.wz_br[i] * v[i + k];
                }
                Ok(out)
            }
            WhichMatrix::Zt => {
                let mut out = vec![0.0; 2 * k];
                for i in 0..k {
                    out[i] = self.wz_tl[i] * v[i] + self.wz_bl[i] * v[i + k];
                    out[i + k] = self.wz_tr[i] * v[i] + self.wz_br[i] * v[i + k];
                }
                Ok(out)
            }
        }
    }

    /// Dense assembly, debug/oracle path only.
    pub fn dense(&self, which: WhichMatrix) -> nalgebra::DMatrix<f64> {
        let k = self.half_dim();
        let n = 2 * k;
        let mut m = nalgebra::DMatrix::zeros(n, n);
        match which {
            WhichMatrix::S => {
                for i in 0..n {
                    m[(i, i)] = self.w_s[i];
                }
            }
            WhichMatrix::N => {
                for i in 0..n {
                    m[(i, i)] = self.w_n[i];
                }
            }
            WhichMatrix::Z | WhichMatrix::Zt => {
                for i in 0..k {
                    m[(i, i)] = self.wz_tl[i];
                    m[(i, i + k)] = self.wz_tr[i];
                    m[(i + k, i)] = self.wz_bl[i];
                    m[(i + k, i + k)] = self.wz_br[i];
                }
                if which == WhichMatrix::Zt {
                    m = m.transpose();
                }
            }
        }
        m
    }

    /// Dense `W = [√P_x·W_s, √P_z·W_z]` (2k × 4k), oracle path only.
    pub fn dense_w(&self, p_x: f64, p_z: f64) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let ws = self.dense(WhichMatrix::S) * p_x.sqrt();
        let wz = self.dense(WhichMatrix::Z) * p_z.sqrt();
        let mut w = nalgebra::DMatrix::zeros(n, 2 * n);
        w.view_mut((0, 0), (n, n)).copy_from(&ws);
        w.view_mut((0, n), (n, n)).copy_from(&wz);
        w
    }
}

/// The equalized real observation plus everything needed to reconstruct it.
#[derive(Debug, Clone)]
pub struct EqualizedObservation {
    /// Real 2k observation vector.
    pub y: Vec<f64>,
    pub mats: EffectiveMatrices,
    pub params: ChannelParams,
    /// The exact equalized-noise realization, so that
    /// `y − √P_x·W_s·x − √P_z·W_z·z = eq_noise` holds per realization.
    pub eq_noise: Vec<f64>,
}

/// Pack a real 2k-vector into a complex k-vector (first half real parts,
/// second half imaginary parts).
pub fn real_to_complex(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "real vector length must be even, got {}",
            x.len()
        )));
    }
    let k = x.len() / 2;
    Ok((0..k).map(|i| Complex64::new(x[i], x[i + k])).collect())
}

/// Inverse of [`real_to_complex`].
pub fn complex_to_real(x: &[Complex64]) -> Vec<f64> {
    let k = x.len();
    let mut out = vec![0.0; 2 * k];
    for i in 0..k {
        out[i] = x[i].re;
        out[i + k] = x[i].im;
    }
    out
}

/// The effective real interference `z = [Re(h_z∘z_c); Im(h_z∘z_c)]`.
pub fn effective_interference(h_z: &[Complex64], z_c: &[Complex64]) -> Result<Vec<f64>> {
    check_len("z_c", z_c.len(), h_z.len())?;
    let prod: Vec<Complex64> = h_z.iter().zip(z_c).map(|(h, z)| h * z).collect();
    Ok(complex_to_real(&prod))
}

/// Simulate one frame through the channel and equalize.
///
/// Draws `n_c ~ CN(0, σ²)`, forms the received symbols, applies the MMSE
/// weight per symbol (identity for AWGN), and unpacks to real form. The exact
/// equalized-noise vector is retained so the Lemma-1 reconstruction identity
/// holds to machine precision.
pub fn transmit_and_equalize<R: Rng>(
    x_c: &[Complex64],
    z_c: &[Complex64],
    real: &ChannelRealization,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<EqualizedObservation> {
    let k = params.k;
    check_len("x_c", x_c.len(), k)?;
    check_len("z_c", z_c.len(), k)?;
    check_len("h_x", real.h_x.len(), k)?;
    check_len("h_z", real.h_z.len(), k)?;
    if !(params.sigma2 > 0.0) {
        return Err(Error::Range(format!("sigma2 must be > 0, got {}", params.sigma2)));
    }

    let s = params.sigma2;
    let noise_scale = (s / 2.0).sqrt();
    let sqrt_px = params.p_x.sqrt();
    let sqrt_pz = params.p_z.sqrt();

    let mut y_eq = vec![Complex64::new(0.0, 0.0); k];
    let mut n_eq = vec![Complex64::new(0.0, 0.0); k];
    for i in 0..k {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let n_c = Complex64::new(re, im) * noise_scale;
        let y_c = sqrt_px * real.h_x[i] * x_c[i] + sqrt_pz * real.h_z[i] * z_c[i] + n_c;
        match real.kind {
            ChannelKind::Awgn => {
                y_eq[i] = y_c;
                n_eq[i] = n_c;
            }
            ChannelKind::Rayleigh => {
                let g = real.h_x[i].conj() / (real.h_x[i].norm_sqr() + s);
                y_eq[i] = g * y_c;
                n_eq[i] = g * n_c;
            }
        }
    }

    let mats = build_effective_matrices(&real.h_x, s, real.kind)?;
    Ok(EqualizedObservation {
        y: complex_to_real(&y_eq),
        mats,
        params: *params,
        eq_noise: complex_to_real(&n_eq),
    })
}

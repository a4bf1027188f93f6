//! Error metrics and the SNR/SINR → power mapping.

use icdm_core::{Error, Result};

/// Floor applied to MSE values so aggregates stay finite when the error is
/// exactly zero.
pub const MSE_FLOOR_DB: f64 = -300.0;

/// `10·log10(mean((a−b)²))`, clamped to [`MSE_FLOOR_DB`].
pub fn mse_db(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "mse_db needs equal nonempty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 =
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(MSE_FLOOR_DB);
    }
    Ok((10.0 * mse.log10()).max(MSE_FLOOR_DB))
}

/// Map (SNR, SINR) in dB to linear powers with P_x normalized to 1:
/// `σ² = 10^(−SNR/10)`, `P_z = 10^(−SINR/10) − σ²` floored at 0
/// (SINR ≥ SNR means interference-free).
pub fn sinr_to_powers(snr_db: f64, sinr_db: f64) -> Result<(f64, f64, f64)> {
    if !snr_db.is_finite() || !sinr_db.is_finite() {
        return Err(Error::Range(format!(
            "snr/sinr must be finite, got {snr_db}/{sinr_db} (sigma2 = 0 is not allowed)"
        )));
    }
    let sigma2 = 10f64.powf(-snr_db / 10.0);
    let p_z = (10f64.powf(-sinr_db / 10.0) - sigma2).max(0.0);
    Ok((1.0, p_z, sigma2))
}

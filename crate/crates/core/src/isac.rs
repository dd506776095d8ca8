//! Link-level ISAC metrics for one slot.
//!
//! Powers are linear watts throughout; rates are bits/s/Hz.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ComplexVec;
use crate::error::{Error, Result};

/// `P[W] = 10^((dBm − 30) / 10)`.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Transmit precoder: one complex N-vector `w_m` per UAV stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamformingMatrix {
    antennas: usize,
    columns: Vec<ComplexVec>,
}

impl BeamformingMatrix {
    pub fn zeros(antennas: usize, streams: usize) -> Self {
        Self {
            antennas,
            columns: vec![vec![Complex64::new(0.0, 0.0); antennas]; streams],
        }
    }

    pub fn from_columns(columns: Vec<ComplexVec>) -> Result<Self> {
        let antennas = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != antennas) {
            return Err(Error::InvalidArgument(
                "precoder columns must share one length".into(),
            ));
        }
        if columns.iter().flatten().any(|w| !w.re.is_finite() || !w.im.is_finite()) {
            return Err(Error::InvalidArgument("precoder entries must be finite".into()));
        }
        Ok(Self { antennas, columns })
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn streams(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[ComplexVec] {
        &self.columns
    }

    pub fn column(&self, m: usize) -> &[Complex64] {
        &self.columns[m]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            antennas: self.antennas,
            columns: self
                .columns
                .iter()
                .map(|c| c.iter().map(|w| w * factor).collect())
                .collect(),
        }
    }
}

/// Per-slot link metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub sinr_per_uav: Vec<f64>,
    pub sum_rate: f64,
    pub snr_per_target: Vec<f64>,
    pub tx_power: f64,
}

impl LinkMetrics {
    pub fn mean_snr(&self) -> f64 {
        if self.snr_per_target.is_empty() {
            0.0
        } else {
            self.snr_per_target.iter().sum::<f64>() / self.snr_per_target.len() as f64
        }
    }
}

/// `wᴴ h = Σ_n conj(w_n) h_n`.
fn inner_hermitian(w: &[Complex64], h: &[Complex64]) -> Complex64 {
    w.iter().zip(h).map(|(w, h)| w.conj() * h).sum()
}

/// `h w = Σ_n h_n w_n` (row channel times column precoder).
fn inner_plain(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(h, w)| h * w).sum()
}

fn check_dims(channels: &[ComplexVec], w: &BeamformingMatrix, what: &str) -> Result<()> {
    if let Some(bad) = channels.iter().find(|h| h.len() != w.antennas()) {
        return Err(Error::InvalidArgument(format!(
            "{what} channel has {} entries but the precoder has {} antennas",
            bad.len(),
            w.antennas()
        )));
    }
    Ok(())
}

/// `γ_m = |w_mᴴ h_m|² / (Σ_{i≠m} |w_iᴴ h_m|² + σ_c²)`.
pub fn sinr(channels_uav: &[ComplexVec], w: &BeamformingMatrix, sigma_c_sq: f64) -> Result<Vec<f64>> {
    if channels_uav.is_empty() || channels_uav.len() != w.streams() {
        return Err(Error::InvalidArgument(format!(
            "need one precoder column per UAV ({} channels, {} columns)",
            channels_uav.len(),
            w.streams()
        )));
    }
    if !(sigma_c_sq > 0.0) {
        return Err(Error::InvalidArgument("noise power must be positive".into()));
    }
    check_dims(channels_uav, w, "UAV")?;
    Ok(channels_uav
        .iter()
        .enumerate()
        .map(|(m, h)| {
            let gains: Vec<f64> = w.columns().iter().map(|wi| inner_hermitian(wi, h).norm_sqr()).collect();
            let interference: f64 = gains
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != m)
                .map(|(_, g)| g)
                .sum();
            gains[m] / (interference + sigma_c_sq)
        })
        .collect())
}

/// `Σ_m log2(1 + γ_m)`.
pub fn sum_rate(sinrs: &[f64]) -> Result<f64> {
    if let Some(bad) = sinrs.iter().find(|&&g| !(g >= 0.0)) {
        return Err(Error::InvalidArgument(format!("SINR must be >= 0, got {bad}")));
    }
    Ok(sinrs.iter().map(|g| (1.0 + g).log2()).sum())
}

/// `SNR_j = Σ_m |h_j w_m|² / σ_s²`.
pub fn sensing_snr(channels_target: &[ComplexVec], w: &BeamformingMatrix, sigma_s_sq: f64) -> Result<Vec<f64>> {
    if !(sigma_s_sq > 0.0) {
        return Err(Error::InvalidArgument("noise power must be positive".into()));
    }
    check_dims(channels_target, w, "target")?;
    Ok(channels_target
        .iter()
        .map(|h| {
            w.columns()
                .iter()
                .map(|wm| inner_plain(h, wm).norm_sqr())
                .sum::<f64>()
                / sigma_s_sq
        })
        .collect())
}

/// Same quantity through the quadratic form `h_j (Σ_m w_m w_mᴴ) h_jᴴ / σ_s²`
/// with the N×N covariance formed explicitly.
pub fn sensing_snr_quadratic(
    channels_target: &[ComplexVec],
    w: &BeamformingMatrix,
    sigma_s_sq: f64,
) -> Result<Vec<f64>> {
    if !(sigma_s_sq > 0.0) {
        return Err(Error::InvalidArgument("noise power must be positive".into()));
    }
    check_dims(channels_target, w, "target")?;
    let n = w.antennas();
    let mut cov = vec![Complex64::new(0.0, 0.0); n * n];
    for col in w.columns() {
        for r in 0..n {
            for c in 0..n {
                cov[r * n + c] += col[r] * col[c].conj();
            }
        }
    }
    Ok(channels_target
        .iter()
        .map(|h| {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..n {
                for c in 0..n {
                    acc += h[r] * cov[r * n + c] * h[c].conj();
                }
            }
            acc.re / sigma_s_sq
        })
        .collect())
}

/// `Σ_m ‖w_m‖²`.
pub fn tx_power(w: &BeamformingMatrix) -> f64 {
    w.columns().iter().flatten().map(|x| x.norm_sqr()).sum()
}

/// Scales `w` down onto the power budget when it exceeds it.
pub fn project_power(w: &BeamformingMatrix, p_max: f64) -> Result<BeamformingMatrix> {
    if !(p_max > 0.0) {
        return Err(Error::InvalidArgument("power budget must be positive".into()));
    }
    let p = tx_power(w);
    if p <= p_max {
        Ok(w.clone())
    } else {
        Ok(w.scaled((p_max / p).sqrt()))
    }
}

//! Line-of-sight channel synthesis.
//!
//! A link from the surface toward a point is described by its pointing vector
//! `f = [cosθ cosφ, cosθ sinφ, sinθ]`. The array response has entries
//! `exp(j 2π/λ · fᵀ p_n)` using the global antenna positions, and the channel
//! scales it by the free-space amplitude `λ / (4π d)` and propagation phase
//! `exp(−j 2π d / λ)`, where `d` is measured from the surface center.
//!
//! The same form serves communication UAVs and sensing targets (one-way gain;
//! no round-trip radar attenuation is modeled).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Complex N-vector (array response or channel).
pub type ComplexVec = Vec<Complex64>;

/// Elevation/azimuth pair in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub elevation: f64,
    pub azimuth: f64,
}

/// Angles of the direction from `from` to `to`. Azimuth is reported in
/// `(−π, π]` and set to 0 when the direction is vertical.
pub fn angles_from_positions(from: Vec3, to: Vec3) -> Result<AnglePair> {
    let d = to - from;
    let r = d.norm();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot take angles between coincident or non-finite points {from:?}, {to:?}"
        )));
    }
    let horizontal = d.x.hypot(d.y);
    let elevation = d.z.atan2(horizontal);
    let mut azimuth = if horizontal == 0.0 { 0.0 } else { d.y.atan2(d.x) };
    if azimuth <= -PI {
        azimuth = PI;
    }
    Ok(AnglePair { elevation, azimuth })
}

pub fn pointing_vector(angles: AnglePair) -> Vec3 {
    let (se, ce) = angles.elevation.sin_cos();
    let (sa, ca) = angles.azimuth.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

/// Unit vector from `from` to `to` by direct normalization.
pub fn unit_direction(from: Vec3, to: Vec3) -> Result<Vec3> {
    (to - from).normalized().ok_or_else(|| {
        Error::InvalidArgument(format!("coincident points {from:?} and {to:?}"))
    })
}

/// `g_n = exp(j · 2π/λ · fᵀ p_n)`.
pub fn array_response(f: Vec3, antenna_positions: &[Vec3], lambda: f64) -> ComplexVec {
    let k = 2.0 * PI / lambda;
    antenna_positions
        .iter()
        .map(|&p| Complex64::from_polar(1.0, k * f.dot(p)))
        .collect()
}

/// Free-space amplitude `λ / (4π d)`.
pub fn path_amplitude(distance: f64, lambda: f64) -> f64 {
    lambda / (4.0 * PI * distance)
}

/// `h = λ/(4πd) · exp(−j2πd/λ) · g` with `d = ‖p_a − target‖`.
pub fn channel_vector(
    surface_center: Vec3,
    target: Vec3,
    antenna_positions: &[Vec3],
    lambda: f64,
) -> Result<ComplexVec> {
    let d = surface_center.distance(target);
    if !(d > 0.0) {
        return Err(Error::Singularity(format!(
            "link endpoint {target:?} coincides with the surface center"
        )));
    }
    let f = (target - surface_center) * (1.0 / d);
    let scale = Complex64::from_polar(path_amplitude(d, lambda), -2.0 * PI * d / lambda);
    Ok(array_response(f, antenna_positions, lambda)
        .into_iter()
        .map(|g| scale * g)
        .collect())
}

//! Kinematics of the movable antenna surface.
//!
//! The surface has a local frame O'-X'Y'Z' whose origin is the surface center
//! `p_a`. Its orientation is the rotation `R = Rz · Ry · Rx` built from the
//! array rotation angles, with the entry signs of the individual axis matrices
//! fixed as below (note that the x-axis matrix is the transpose of the usual
//! counter-clockwise rotation). Antennas sit at `p_n = p_a + R · p̄_n` and the
//! outward normal is `R · n̄`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Vec3 {
        Vec3::new(v[0], v[1], v[2])
    }

    /// Component-wise clamp into `[lo, hi]`.
    pub fn clamp(self, lo: Vec3, hi: Vec3) -> Vec3 {
        Vec3::new(
            self.x.clamp(lo.x, hi.x),
            self.y.clamp(lo.y, hi.y),
            self.z.clamp(lo.z, hi.z),
        )
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Array rotation angles about the global X, Y and Z axes, in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RotationAngles {
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
}

impl RotationAngles {
    pub const ZERO: RotationAngles = RotationAngles::new(0.0, 0.0, 0.0);

    pub const fn new(theta_x: f64, theta_y: f64, theta_z: f64) -> Self {
        Self {
            theta_x,
            theta_y,
            theta_z,
        }
    }

    pub fn from_degrees(x: f64, y: f64, z: f64) -> Self {
        Self::new(x.to_radians(), y.to_radians(), z.to_radians())
    }

    pub fn is_finite(self) -> bool {
        self.theta_x.is_finite() && self.theta_y.is_finite() && self.theta_z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.theta_x, self.theta_y, self.theta_z]
    }
}

impl Add for RotationAngles {
    type Output = RotationAngles;
    fn add(self, o: RotationAngles) -> RotationAngles {
        RotationAngles::new(
            self.theta_x + o.theta_x,
            self.theta_y + o.theta_y,
            self.theta_z + o.theta_z,
        )
    }
}

/// Row-major 3x3 rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix =
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn about_x(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    }

    pub fn about_y(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        RotationMatrix([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn about_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        RotationMatrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn matmul(&self, other: &RotationMatrix) -> RotationMatrix {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        RotationMatrix(out)
    }

    pub fn transpose(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `‖R Rᵀ − I‖∞` (max-abs entry).
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.matmul(&self.transpose());
        let mut worst: f64 = 0.0;
        for (i, row) in p.0.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Builds `R(a) = R_θz · R_θy · R_θx`.
pub fn build_rotation_matrix(angles: RotationAngles) -> Result<RotationMatrix> {
    if !angles.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "rotation angles must be finite, got {angles:?}"
        )));
    }
    let rz = RotationMatrix::about_z(angles.theta_z);
    let ry = RotationMatrix::about_y(angles.theta_y);
    let rx = RotationMatrix::about_x(angles.theta_x);
    Ok(rz.matmul(&ry).matmul(&rx))
}

/// Antenna placement in the surface's local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AntennaLayout {
    pub local_positions: Vec<Vec3>,
    pub local_normal: Vec3,
}

impl AntennaLayout {
    /// Square-ish uniform planar grid of `n` antennas on a surface of side
    /// `side` lying in the local Y'Z' plane, facing local +X'.
    ///
    /// For `n = 4` this is the 2x2 grid at `(0, ±side/4, ±side/4)`.
    pub fn uniform_grid(n: usize, side: f64) -> Result<Self> {
        if n == 0 || !(side > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grid needs n >= 1 and side > 0 (n = {n}, side = {side})"
            )));
        }
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let spacing = side / cols.max(rows) as f64;
        let offset = |i: usize, count: usize| (i as f64 - (count as f64 - 1.0) / 2.0) * spacing;
        let local_positions = (0..n)
            .map(|k| {
                let (r, c) = (k / cols, k % cols);
                Vec3::new(0.0, offset(c, cols), offset(r, rows))
            })
            .collect();
        Ok(Self {
            local_positions,
            local_normal: Vec3::new(1.0, 0.0, 0.0),
        })
    }

    pub fn len(&self) -> usize {
        self.local_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_positions.is_empty()
    }

    /// Smallest pairwise distance, `+inf` for fewer than two antennas.
    pub fn min_spacing(&self) -> f64 {
        let p = &self.local_positions;
        let mut best = f64::INFINITY;
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                best = best.min(p[i].distance(p[j]));
            }
        }
        best
    }

    /// Checks the unit normal and that every antenna lies in the plane through
    /// the origin orthogonal to it.
    pub fn check(&self) -> Result<()> {
        if self.local_positions.is_empty() {
            return Err(Error::InvalidArgument("layout has no antennas".into()));
        }
        if (self.local_normal.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(
                "layout normal must have unit norm".into(),
            ));
        }
        for p in &self.local_positions {
            if !p.is_finite() || p.dot(self.local_normal).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "antenna {p:?} is not in the surface plane"
                )));
            }
        }
        Ok(())
    }
}

/// Center position and orientation of the surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePose {
    pub center: Vec3,
    pub angles: RotationAngles,
}

impl SurfacePose {
    pub fn new(center: Vec3, angles: RotationAngles) -> Self {
        Self { center, angles }
    }

    pub fn rotation(&self) -> Result<RotationMatrix> {
        build_rotation_matrix(self.angles)
    }
}

/// `p_n = p_a + R(a) · p̄_n` for every antenna.
pub fn global_antenna_positions(pose: &SurfacePose, layout: &AntennaLayout) -> Result<Vec<Vec3>> {
    if !pose.center.is_finite() {
        return Err(Error::InvalidArgument("surface center must be finite".into()));
    }
    let r = pose.rotation()?;
    Ok(layout
        .local_positions
        .iter()
        .map(|&p| pose.center + r.apply(p))
        .collect())
}

pub fn surface_normal(pose: &SurfacePose, layout: &AntennaLayout) -> Result<Vec3> {
    Ok(pose.rotation()?.apply(layout.local_normal))
}

/// Front half-space test. Returns whether `n · (p − p_a) ≥ 0` holds for every
/// point, and the smallest such margin in meters.
pub fn half_space_ok(
    pose: &SurfacePose,
    layout: &AntennaLayout,
    points: &[Vec3],
) -> Result<(bool, f64)> {
    if points.is_empty() {
        return Err(Error::InvalidArgument(
            "half-space check needs at least one point".into(),
        ));
    }
    let n = surface_normal(pose, layout)?;
    let worst = points
        .iter()
        .map(|&p| n.dot(p - pose.center))
        .fold(f64::INFINITY, f64::min);
    Ok((worst >= 0.0, worst))
}

/// True iff all antennas are at least half a wavelength apart.
pub fn validate_spacing(layout: &AntennaLayout, lambda: f64) -> bool {
    layout.min_spacing() >= lambda / 2.0
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use proptest::prelude::*;

    use super::*;

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        assert!((a - b).norm() <= tol, "{a:?} != {b:?}");
    }

    #[test]
    fn zero_angles_give_identity() {
        let r = build_rotation_matrix(RotationAngles::ZERO).unwrap();
        assert_eq!(r, RotationMatrix::IDENTITY);
    }

    #[test]
    fn x_rotation_uses_printed_signs() {
        let r = build_rotation_matrix(RotationAngles::new(FRAC_PI_2, 0.0, 0.0)).unwrap();
        assert_vec_close(r.apply(Vec3::new(0.0, 1.0, 0.0)), Vec3::new(0.0, 0.0, -1.0), 1e-15);
    }

    #[test]
    fn non_finite_angles_are_rejected() {
        let err = build_rotation_matrix(RotationAngles::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn composition_order_is_z_y_x() {
        let a = RotationAngles::new(0.3, 0.3, 0.3);
        let zyx = build_rotation_matrix(a).unwrap();
        let xyz = RotationMatrix::about_x(0.3)
            .matmul(&RotationMatrix::about_y(0.3))
            .matmul(&RotationMatrix::about_z(0.3));
        let max_diff = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (zyx.0[i][j] - xyz.0[i][j]).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-6);
    }

    #[test]
    fn half_turn_about_z_mirrors_antenna() {
        let pose = SurfacePose::new(Vec3::new(0.0, 0.0, 200.0), RotationAngles::new(0.0, 0.0, PI));
        let layout = AntennaLayout {
            local_positions: vec![Vec3::new(0.5, 0.0, 0.0)],
            local_normal: Vec3::new(0.0, 0.0, 1.0),
        };
        let p = global_antenna_positions(&pose, &layout).unwrap();
        assert_vec_close(p[0], Vec3::new(-0.5, 0.0, 200.0), 1e-12);
    }

    #[test]
    fn zero_rotation_translates_layout() {
        let layout = AntennaLayout::uniform_grid(4, 1.0).unwrap();
        let c = Vec3::new(3.0, -2.0, 200.0);
        let pose = SurfacePose::new(c, RotationAngles::ZERO);
        let p = global_antenna_positions(&pose, &layout).unwrap();
        for (g, l) in p.iter().zip(&layout.local_positions) {
            assert_eq!(*g, c + *l);
        }
    }

    #[test]
    fn default_grid_matches_quarter_side_offsets() {
        let layout = AntennaLayout::uniform_grid(4, 1.0).unwrap();
        let mut got: Vec<_> = layout.local_positions.iter().map(|p| (p.y, p.z)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)]);
        layout.check().unwrap();
    }

    #[test]
    fn normal_rotation_about_z() {
        let layout = AntennaLayout::uniform_grid(4, 1.0).unwrap();
        let pose = SurfacePose::new(Vec3::ZERO, RotationAngles::new(0.0, 0.0, FRAC_PI_2));
        let n = surface_normal(&pose, &layout).unwrap();
        assert_vec_close(n, Vec3::new(0.0, 1.0, 0.0), 1e-15);
        let identity = SurfacePose::new(Vec3::ZERO, RotationAngles::ZERO);
        assert_eq!(surface_normal(&identity, &layout).unwrap(), layout.local_normal);
    }

    #[test]
    fn half_space_examples() {
        let layout = AntennaLayout {
            local_positions: vec![Vec3::ZERO],
            local_normal: Vec3::new(0.0, 0.0, 1.0),
        };
        let pose = SurfacePose::new(Vec3::new(0.0, 0.0, 200.0), RotationAngles::ZERO);
        assert_eq!(
            half_space_ok(&pose, &layout, &[Vec3::new(0.0, 0.0, 250.0)]).unwrap(),
            (true, 50.0)
        );
        assert_eq!(
            half_space_ok(&pose, &layout, &[Vec3::new(0.0, 0.0, 150.0)]).unwrap(),
            (false, -50.0)
        );
        assert_eq!(
            half_space_ok(&pose, &layout, &[Vec3::new(7.0, -3.0, 200.0)]).unwrap(),
            (true, 0.0)
        );
        assert!(matches!(
            half_space_ok(&pose, &layout, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn spacing_examples() {
        let grid = AntennaLayout::uniform_grid(4, 1.0).unwrap();
        assert!(validate_spacing(&grid, 0.125));
        let close = AntennaLayout {
            local_positions: vec![Vec3::ZERO, Vec3::new(0.0, 0.05, 0.0)],
            local_normal: Vec3::new(1.0, 0.0, 0.0),
        };
        assert!(!validate_spacing(&close, 0.125));
        let single = AntennaLayout::uniform_grid(1, 1.0).unwrap();
        assert!(validate_spacing(&single, 0.125));
    }

    fn angle() -> impl Strategy<Value = f64> {
        -10.0f64..10.0
    }

    fn point() -> impl Strategy<Value = Vec3> {
        (-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rotations_are_proper(ax in angle(), ay in angle(), az in angle()) {
            let r = build_rotation_matrix(RotationAngles::new(ax, ay, az)).unwrap();
            prop_assert!(r.orthonormality_error() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn placement_is_an_isometry(ax in angle(), ay in angle(), az in angle(), c in point(), n in 1usize..10) {
            let layout = AntennaLayout::uniform_grid(n, 1.0).unwrap();
            let pose = SurfacePose::new(c, RotationAngles::new(ax, ay, az));
            let g = global_antenna_positions(&pose, &layout).unwrap();
            prop_assert_eq!(g.len(), n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let local = layout.local_positions[i].distance(layout.local_positions[j]);
                    let global = g[i].distance(g[j]);
                    prop_assert!((local - global).abs() <= 1e-12 * local.max(1.0));
                }
            }
            let normal = surface_normal(&pose, &layout).unwrap();
            prop_assert!((normal.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn half_space_is_translation_invariant(ax in angle(), ay in angle(), az in angle(),
                                               c in point(), p in point(), shift in point()) {
            let layout = AntennaLayout::uniform_grid(4, 1.0).unwrap();
            let angles = RotationAngles::new(ax, ay, az);
            let a = half_space_ok(&SurfacePose::new(c, angles), &layout, &[p]).unwrap();
            let b = half_space_ok(&SurfacePose::new(c + shift, angles), &layout, &[p + shift]).unwrap();
            prop_assert!((a.1 - b.1).abs() < 1e-9);
            if a.1.abs() > 1e-9 {
                prop_assert_eq!(a.0, b.0);
            }
        }
    }
}

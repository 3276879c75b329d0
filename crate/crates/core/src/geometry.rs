//! Frames, rotations, seafloor normals and isotemporal arcs.
//!
//! The world frame is a local metric ENU frame (z up, heights negative
//! below the sea surface). The sonar frame has x along-track and y lateral,
//! with the starboard head looking toward +y; a point on the isotemporal arc
//! at grazing angle `θs` is `s + r·R·[0, ±cos θs, -sin θs]`.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
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

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    /// `Mᵀ v`
    pub fn tr_mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        let mut t = [[0.0; 3]; 3];
        for (i, row) in t.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[j][i];
            }
        }
        Mat3(t)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn column(&self, j: usize) -> Vec3 {
        Vec3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }
}

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes `(w, x, y, z)`; zero or non-finite input is rejected.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid("quaternion must be finite and non-zero"));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    /// Z-Y-X (yaw, pitch, roll) Euler angles in radians: `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_ypr(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = (0.5 * yaw).sin_cos();
        let (sp, cp) = (0.5 * pitch).sin_cos();
        let (sr, cr) = (0.5 * roll).sin_cos();
        Self {
            w: cr * cp * cy + sr * sp * sy,
            x: sr * cp * cy - cr * sp * sy,
            y: cr * sp * cy + sr * cp * sy,
            z: cr * cp * sy - sr * sp * cy,
        }
    }

    pub fn to_ypr(&self) -> (f64, f64, f64) {
        let m = self.to_matrix().0;
        let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let yaw = m[1][0].atan2(m[0][0]);
        let roll = m[2][1].atan2(m[2][2]);
        (yaw, pitch, roll)
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }
}

/// Sensor position `s` and attitude `R` (sonar frame → world frame) for one ping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub attitude: Quaternion,
}

impl Pose {
    pub fn new(position: Vec3, attitude: Quaternion) -> Self {
        Self { position, attitude }
    }

    pub fn from_ypr(position: Vec3, yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { position, attitude: Quaternion::from_ypr(yaw, pitch, roll) }
    }

    pub fn rotation(&self) -> Mat3 {
        self.attitude.to_matrix()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.is_finite() {
            return Err(Error::invalid("pose position must be finite"));
        }
        let q = self.attitude;
        let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("pose attitude must be a unit quaternion"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Port,
    Starboard,
}

impl Side {
    /// Sign of the lateral axis the head looks along.
    pub fn lateral_sign(self) -> f64 {
        match self {
            Side::Port => -1.0,
            Side::Starboard => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Port => "port",
            Side::Starboard => "starboard",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "port" | "P" | "p" => Some(Side::Port),
            "starboard" | "S" | "s" => Some(Side::Starboard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SonarGeometry {
    /// Angle between the horizontal and the beam center, radians.
    pub tilt: f64,
    /// Opening in the lateral plane, radians.
    pub vertical_beam_width: f64,
    /// Opening along-track; recorded only, the arc spread it causes is ignored.
    pub horizontal_beam_width: f64,
    pub side: Side,
}

impl SonarGeometry {
    pub fn new(tilt: f64, vertical_beam_width: f64, horizontal_beam_width: f64, side: Side) -> Result<Self> {
        let g = Self { tilt, vertical_beam_width, horizontal_beam_width, side };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::{FRAC_PI_2, PI};
        if !(self.tilt > 0.0 && self.tilt < FRAC_PI_2) {
            return Err(Error::invalid(format!("tilt {} outside (0, π/2)", self.tilt)));
        }
        if !(self.vertical_beam_width > 0.0 && self.vertical_beam_width < PI) {
            return Err(Error::invalid(format!("vertical beam width {} outside (0, π)", self.vertical_beam_width)));
        }
        if !(self.horizontal_beam_width >= 0.0 && self.horizontal_beam_width.is_finite()) {
            return Err(Error::invalid("horizontal beam width must be finite and non-negative"));
        }
        Ok(())
    }

    /// Beam gate `[θ - α/2, θ + α/2]` in grazing angle.
    pub fn gate(&self) -> (f64, f64) {
        let h = 0.5 * self.vertical_beam_width;
        (self.tilt - h, self.tilt + h)
    }

    pub fn in_gate(&self, grazing: f64) -> bool {
        let (lo, hi) = self.gate();
        grazing >= lo && grazing <= hi
    }

    pub fn with_side(&self, side: Side) -> Self {
        Self { side, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    World,
    Sonar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal3 {
    pub v: Vec3,
    pub frame: Frame,
}

impl Normal3 {
    pub fn normalized(&self) -> Normal3 {
        let n = self.v.norm();
        Normal3 { v: self.v * (1.0 / n), frame: self.frame }
    }
}

/// Unit normal in the sonar's lateral (y–z) plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal2 {
    pub ny: f64,
    pub nz: f64,
}

impl Normal2 {
    /// Builds the upward-hemisphere unit normal with lateral component `ny`, clamped to [-1, 1].
    pub fn from_lateral(ny: f64) -> Normal2 {
        let ny = ny.clamp(-1.0, 1.0);
        Normal2 { ny, nz: (1.0 - ny * ny).max(0.0).sqrt() }
    }

    pub fn norm(&self) -> f64 {
        self.ny.hypot(self.nz)
    }

    /// Whether the normal points into the upper half plane (physically visible seafloor).
    pub fn is_visible(&self) -> bool {
        self.nz >= 0.0
    }
}

/// `[-∇x, -∇y, 1]` in the world frame; call [`Normal3::normalized`] for the unit vector.
pub fn normal_from_gradient(grad_x: f64, grad_y: f64) -> Result<Normal3> {
    if !grad_x.is_finite() || !grad_y.is_finite() {
        return Err(Error::invalid("gradient components must be finite"));
    }
    Ok(Normal3 { v: Vec3::new(-grad_x, -grad_y, 1.0), frame: Frame::World })
}

pub fn world_to_sonar_normal(n: &Normal3, pose: &Pose) -> Result<Normal3> {
    if n.frame != Frame::World {
        return Err(Error::invalid("expected a world-frame normal"));
    }
    if !n.v.is_finite() {
        return Err(Error::invalid("normal must be finite"));
    }
    pose.validate()?;
    Ok(Normal3 { v: pose.rotation().tr_mul_vec(n.v), frame: Frame::Sonar })
}

pub fn project_normal_2d(n: &Normal3) -> Result<Normal2> {
    let len = n.v.y.hypot(n.v.z);
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::Degenerate("normal parallel to along-track axis"));
    }
    Ok(Normal2 { ny: n.v.y / len, nz: n.v.z / len })
}

/// Sonar-frame direction of the ray at grazing angle `grazing` for `side`.
pub fn ray_direction_sonar(side: Side, grazing: f64) -> Vec3 {
    let (s, c) = grazing.sin_cos();
    Vec3::new(0.0, side.lateral_sign() * c, -s)
}

/// Point on the isotemporal arc of slant range `range` at grazing angle `grazing`.
pub fn isotemporal_point(pose: &Pose, geom: &SonarGeometry, range: f64, grazing: f64) -> Vec3 {
    let dir = pose.rotation().mul_vec(ray_direction_sonar(geom.side, grazing));
    pose.position + dir * range
}

/// `d/dθs` of [`isotemporal_point`].
pub fn isotemporal_tangent(pose: &Pose, geom: &SonarGeometry, range: f64, grazing: f64) -> Vec3 {
    let (s, c) = grazing.sin_cos();
    let d = Vec3::new(0.0, -geom.side.lateral_sign() * s, -c);
    pose.rotation().mul_vec(d) * range
}

/// World-frame gradient to the unit lateral-plane normal.
pub fn projected_normal_from_gradient(grad_x: f64, grad_y: f64, pose: &Pose) -> Result<Normal2> {
    let n = normal_from_gradient(grad_x, grad_y)?;
    let ns = world_to_sonar_normal(&n, pose)?;
    project_normal_2d(&ns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn starboard() -> SonarGeometry {
        SonarGeometry::new(30f64.to_radians(), 40f64.to_radians(), 0.1f64.to_radians(), Side::Starboard).unwrap()
    }

    #[test]
    fn gradient_normal_examples() {
        assert_eq!(normal_from_gradient(0.0, 0.0).unwrap().v, Vec3::new(0.0, 0.0, 1.0));
        let n = normal_from_gradient(1.0, 0.0).unwrap();
        assert_eq!(n.v, Vec3::new(-1.0, 0.0, 1.0));
        let u = n.normalized().v;
        assert_abs_diff_eq!(u.x, -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-5);
        assert_abs_diff_eq!(u.z, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-5);
        assert_eq!(normal_from_gradient(0.3, -0.4).unwrap().v, Vec3::new(-0.3, 0.4, 1.0));
        assert!(normal_from_gradient(f64::NAN, 0.0).is_err());
        assert!(normal_from_gradient(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn world_to_sonar_examples() {
        let n = normal_from_gradient(1.0, 0.0).unwrap();
        let id = Pose::new(Vec3::default(), Quaternion::IDENTITY);
        assert_eq!(world_to_sonar_normal(&n, &id).unwrap().v, Vec3::new(-1.0, 0.0, 1.0));

        let yaw90 = Pose::from_ypr(Vec3::default(), FRAC_PI_2, 0.0, 0.0);
        let ns = world_to_sonar_normal(&n, &yaw90).unwrap().v;
        assert_abs_diff_eq!(ns.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ns.y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ns.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn world_to_sonar_matches_explicit_multiply() {
        let pose = Pose::from_ypr(Vec3::default(), 0.7, -0.2, 0.35);
        let r = pose.rotation().0;
        let n = Vec3::new(-0.25, 0.4, 1.0);
        // independent Rᵀn, written out longhand
        let mut expect = [0.0; 3];
        for (j, e) in expect.iter_mut().enumerate() {
            for (i, ni) in [n.x, n.y, n.z].iter().enumerate() {
                *e += r[i][j] * ni;
            }
        }
        let got = world_to_sonar_normal(&Normal3 { v: n, frame: Frame::World }, &pose).unwrap().v;
        for (g, e) in got.to_array().iter().zip(expect) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let p = |x, y, z| project_normal_2d(&Normal3 { v: Vec3::new(x, y, z), frame: Frame::Sonar });
        let a = p(0.5, 0.0, 1.0).unwrap();
        assert_eq!((a.ny, a.nz), (0.0, 1.0));
        let b = p(0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(b.ny, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-5);
        assert_abs_diff_eq!(b.nz, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-5);
        let c = p(0.2, -0.3, 0.9).unwrap();
        assert_abs_diff_eq!(c.ny, -0.31623, epsilon = 1e-5);
        assert_abs_diff_eq!(c.nz, 0.94868, epsilon = 1e-5);
        let err = p(1.0, 0.0, 0.0).unwrap_err();
        assert_eq!(err.to_string(), "normal parallel to along-track axis");
    }

    #[test]
    fn isotemporal_examples() {
        let id = Pose::new(Vec3::default(), Quaternion::IDENTITY);
        let g = starboard();
        let p0 = isotemporal_point(&id, &g, 10.0, 0.0);
        assert_abs_diff_eq!(p0.y, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p0.z, 0.0, epsilon = 1e-12);
        let p30 = isotemporal_point(&id, &g, 10.0, 30f64.to_radians());
        assert_abs_diff_eq!(p30.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p30.y, 8.66025, epsilon = 1e-5);
        assert_abs_diff_eq!(p30.z, -5.0, epsilon = 1e-12);
        let port = isotemporal_point(&id, &g.with_side(Side::Port), 10.0, 30f64.to_radians());
        assert_abs_diff_eq!(port.y, -8.66025, epsilon = 1e-5);
    }

    #[test]
    fn isotemporal_composes_with_pose() {
        let g = starboard();
        let pose = Pose::from_ypr(Vec3::new(3.0, -2.0, -10.0), 1.1, 0.05, -0.08);
        let id = Pose::new(Vec3::default(), Quaternion::IDENTITY);
        for &t in &[0.1, 0.5, 0.9] {
            let local = isotemporal_point(&id, &g, 17.0, t);
            let expect = pose.position + pose.rotation().mul_vec(local);
            let got = isotemporal_point(&pose, &g, 17.0, t);
            assert_abs_diff_eq!((got - expect).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn isotemporal_tangent_matches_difference() {
        let g = starboard().with_side(Side::Port);
        let pose = Pose::from_ypr(Vec3::new(1.0, 2.0, -5.0), 0.4, 0.1, 0.2);
        let (t, h) = (0.6, 1e-6);
        let fd = (isotemporal_point(&pose, &g, 12.0, t + h) - isotemporal_point(&pose, &g, 12.0, t - h)) * (0.5 / h);
        let an = isotemporal_tangent(&pose, &g, 12.0, t);
        assert_abs_diff_eq!((fd - an).norm(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn ypr_roundtrip_and_proper_rotation() {
        let q = Quaternion::from_ypr(0.3, -0.4, 1.2);
        let m = q.to_matrix();
        assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-12);
        let (y, p, r) = q.to_ypr();
        assert_abs_diff_eq!(y, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(p, -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn geometry_validation() {
        assert!(SonarGeometry::new(0.0, 0.5, 0.0, Side::Port).is_err());
        assert!(SonarGeometry::new(0.5, 3.5, 0.0, Side::Port).is_err());
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn arc_points_lie_on_range_sphere(
            yaw in -3.1f64..3.1, pitch in -0.5f64..0.5, roll in -0.5f64..0.5,
            r in 0.5f64..80.0, t in -1.5f64..1.5, port in any::<bool>()
        ) {
            let pose = Pose::from_ypr(Vec3::new(5.0, -3.0, -12.0), yaw, pitch, roll);
            let g = if port { starboard().with_side(Side::Port) } else { starboard() };
            let p = isotemporal_point(&pose, &g, r, t);
            prop_assert!(((p - pose.position).norm() - r).abs() < 1e-9);
        }

        #[test]
        fn projected_normal_is_unit(x in -5f64..5.0, y in -5f64..5.0, z in 0.01f64..5.0) {
            let n = project_normal_2d(&Normal3 { v: Vec3::new(x, y, z), frame: Frame::Sonar }).unwrap();
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotation_roundtrip_is_identity(yaw in -3.1f64..3.1, pitch in -1.4f64..1.4, roll in -3.1f64..3.1,
                                          gx in -2f64..2.0, gy in -2f64..2.0) {
            let pose = Pose::from_ypr(Vec3::default(), yaw, pitch, roll);
            let m = pose.rotation();
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
            let n = normal_from_gradient(gx, gy).unwrap();
            let back = m.mul_vec(world_to_sonar_normal(&n, &pose).unwrap().v);
            prop_assert!((back - n.v).norm() < 1e-12);
        }
    }
}

//! Rigid-body geometry: SO(3)/SE(3) exponential and logarithm maps and the
//! exposure-trajectory interpolation schemes.
//!
//! Twists are ordered `(rho, omega)`: translational part first, rotational
//! part second. Perturbations are applied on the left, `exp(delta) * T`.

use std::fmt;
use std::ops::{Add, Mul, Neg};

use nalgebra::{Matrix3, Matrix4, Quaternion, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the closed forms are replaced by their Taylor series.
const SMALL_ANGLE: f64 = 1e-8;
/// Relative rotations closer than this to pi have no stable logarithm.
const NEAR_PI: f64 = 1e-6;

/// Skew-symmetric matrix with `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion rotation, stored `(w, x, y, z)`.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation {
    q: Quaternion<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Builds a rotation from raw quaternion components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::ParameterOutOfRange(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self { q: q / norm })
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.q.w, self.q.i, self.q.j, self.q.k]
    }

    pub fn quaternion(&self) -> &Quaternion<f64> {
        &self.q
    }

    pub fn matrix(&self) -> Mat3 {
        quaternion_matrix(self.wxyz())
    }

    pub fn inverse(&self) -> Self {
        Self { q: self.q.conjugate() }
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.matrix() * v
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        so3_log(self).norm()
    }

    fn renormalized(q: Quaternion<f64>) -> Self {
        Self { q: q / q.norm() }
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::renormalized(self.q * rhs.q)
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "Rotation(w={w}, x={x}, y={y}, z={z})")
    }
}

/// Rotation matrix of a unit quaternion given as `[w, x, y, z]`.
pub fn quaternion_matrix([w, x, y, z]: [f64; 4]) -> Mat3 {
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Element of se(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vec3,
    pub omega: Vec3,
}

impl Twist {
    pub fn new(rho: Vec3, omega: Vec3) -> Self {
        Self { rho, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vec3::new(v[0], v[1], v[2]),
            omega: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x,
            self.rho.y,
            self.rho.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

impl Add for Twist {
    type Output = Twist;

    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.rho + rhs.rho, self.omega + rhs.omega)
    }
}

impl Neg for Twist {
    type Output = Twist;

    fn neg(self) -> Twist {
        Twist::new(-self.rho, -self.omega)
    }
}

impl Mul<Twist> for f64 {
    type Output = Twist;

    fn mul(self, rhs: Twist) -> Twist {
        Twist::new(self * rhs.rho, self * rhs.omega)
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv.rotate(&self.translation)))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        apply_pose(self, p)
    }

    /// `exp(delta) * self`.
    pub fn perturb_left(&self, delta: &Twist) -> Self {
        se3_exp(delta) * *self
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.wxyz().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

pub fn apply_pose(pose: &Pose, p: &Vec3) -> Vec3 {
    pose.rotation.rotate(p) + pose.translation
}

pub fn so3_exp(omega: &Vec3) -> Rotation {
    let theta = omega.norm();
    if theta < SMALL_ANGLE {
        // q = (cos(t/2), sin(t/2)/t * w), both expanded to second order.
        let t2 = theta * theta;
        let w = 1.0 - t2 / 8.0;
        let v = omega * (0.5 * (1.0 - t2 / 24.0));
        return Rotation::renormalized(Quaternion::new(w, v.x, v.y, v.z));
    }
    let half = 0.5 * theta;
    let v = omega * (half.sin() / theta);
    Rotation::renormalized(Quaternion::new(half.cos(), v.x, v.y, v.z))
}

/// Rotation vector with angle in `[0, pi]`.
pub fn so3_log(r: &Rotation) -> Vec3 {
    let [mut w, x, y, z] = r.wxyz();
    let mut v = Vec3::new(x, y, z);
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < SMALL_ANGLE {
        // theta / n = 2 / w * (1 - n^2 / (3 w^2)) + O(n^4)
        return v * (2.0 / w * (1.0 - n * n / (3.0 * w * w)));
    }
    if w < 0.5 * NEAR_PI {
        // Angle within NEAR_PI of pi: the vector part is the +1 eigenvector
        // of R, so take it as the axis and recover the angle from w alone.
        let axis = v / n;
        let theta = std::f64::consts::PI - 2.0 * w.asin();
        return axis * theta;
    }
    let theta = 2.0 * n.atan2(w);
    v * (theta / n)
}

/// Left Jacobian of SO(3); maps rho to the translation of `exp((rho, omega))`.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = hat(omega);
    let k2 = k * k;
    if theta < 1e-5 {
        let t2 = theta * theta;
        return Mat3::identity() + k * (0.5 - t2 / 24.0) + k2 * (1.0 / 6.0 - t2 / 120.0);
    }
    let t2 = theta * theta;
    // 1 - cos written as 2 sin^2(t/2) to avoid cancellation at small angles.
    let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
    Mat3::identity() + k * (one_minus_cos / t2) + k2 * ((theta - theta.sin()) / (t2 * theta))
}

pub fn so3_left_jacobian_inverse(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = hat(omega);
    let k2 = k * k;
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        // theta sin / (2 (1 - cos)) = (theta/2) cot(theta/2), stable for small angles.
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    Mat3::identity() - k * 0.5 + k2 * coeff
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rotation = so3_exp(&xi.omega);
    let translation = so3_left_jacobian(&xi.omega) * xi.rho;
    Pose::new(rotation, translation)
}

pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let omega = so3_log(&pose.rotation);
    if omega.norm() > std::f64::consts::PI - NEAR_PI {
        return Err(Error::NearSingularRotation);
    }
    let rho = so3_left_jacobian_inverse(&omega) * pose.translation;
    Ok(Twist::new(rho, omega))
}

/// Interpolation family for an exposure trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SchemeKind {
    /// Geodesic between two endpoint poses.
    #[default]
    Linear,
    /// Interpolating cubic (Catmull-Rom) spline through all control poses,
    /// evaluated in cumulative form.
    CubicSpline,
    /// Cumulative Bernstein (Bezier) curve over the control poses.
    Bezier,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Linear => "linear",
            SchemeKind::CubicSpline => "spline",
            SchemeKind::Bezier => "bezier",
        }
    }

    /// Number of control poses used when none is configured.
    pub fn default_control_count(&self) -> usize {
        match self {
            SchemeKind::Linear => 2,
            SchemeKind::CubicSpline | SchemeKind::Bezier => 4,
        }
    }

    pub fn check_control_count(&self, count: usize) -> Result<()> {
        let ok = match self {
            SchemeKind::Linear => count == 2,
            SchemeKind::CubicSpline | SchemeKind::Bezier => count >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidControlCount {
                scheme: self.name(),
                expected: match self {
                    SchemeKind::Linear => "exactly 2".into(),
                    _ => "at least 2".into(),
                },
                got: count,
            })
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(SchemeKind::Linear),
            "spline" | "cubic" | "cubic_spline" | "cubicspline" => Ok(SchemeKind::CubicSpline),
            "bezier" => Ok(SchemeKind::Bezier),
            other => Err(Error::Config(format!("unknown trajectory scheme `{other}`"))),
        }
    }
}

/// `start * exp(s * log(start^-1 * end))`.
pub fn geodesic(start: &Pose, end: &Pose, s: f64) -> Result<Pose> {
    check_parameter(s)?;
    let xi = se3_log(&(start.inverse() * *end))?;
    Ok(*start * se3_exp(&(s * xi)))
}

/// Pose at parameter `s` in `[0, 1]` along the trajectory spanned by
/// `controls`. `s = 0` returns the first control pose, `s = 1` the last.
pub fn interpolate_pose(controls: &[Pose], s: f64, scheme: SchemeKind) -> Result<Pose> {
    check_parameter(s)?;
    scheme.check_control_count(controls.len())?;
    match scheme {
        SchemeKind::Linear => geodesic(&controls[0], &controls[1], s),
        SchemeKind::CubicSpline => catmull_rom(controls, s),
        SchemeKind::Bezier => bezier(controls, s),
    }
}

fn check_parameter(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::ParameterOutOfRange(format!(
            "trajectory parameter {s} outside [0, 1]"
        )))
    }
}

fn relative_log(a: &Pose, b: &Pose) -> Result<Twist> {
    se3_log(&(a.inverse() * *b))
}

fn catmull_rom(controls: &[Pose], s: f64) -> Result<Pose> {
    let segments = controls.len() - 1;
    let u_global = s * segments as f64;
    let seg = (u_global.floor() as usize).min(segments - 1);
    let u = u_global - seg as f64;

    // Phantom controls at both ends repeat the endpoint, so the curve passes
    // through every control pose.
    let at = |i: isize| -> &Pose {
        let clamped = i.clamp(0, controls.len() as isize - 1) as usize;
        &controls[clamped]
    };
    let seg = seg as isize;
    let p = [at(seg - 1), at(seg), at(seg + 1), at(seg + 2)];

    let u2 = u * u;
    let u3 = u2 * u;
    let cumulative = [
        (2.0 + u - 2.0 * u2 + u3) / 2.0,
        (u + 3.0 * u2 - 2.0 * u3) / 2.0,
        (u3 - u2) / 2.0,
    ];
    let mut pose = *p[0];
    for k in 0..3 {
        let omega = relative_log(p[k], p[k + 1])?;
        pose = pose * se3_exp(&(cumulative[k] * omega));
    }
    Ok(pose)
}

fn bezier(controls: &[Pose], s: f64) -> Result<Pose> {
    let degree = controls.len() - 1;
    let basis = bernstein(degree, s);
    let mut pose = controls[0];
    // Cumulative basis: sum of the Bernstein polynomials from k upward.
    let mut tail: f64 = basis.iter().sum();
    for k in 1..=degree {
        tail -= basis[k - 1];
        let omega = relative_log(&controls[k - 1], &controls[k])?;
        pose = pose * se3_exp(&(tail.clamp(0.0, 1.0) * omega));
    }
    Ok(pose)
}

fn bernstein(degree: usize, s: f64) -> Vec<f64> {
    let mut binom = 1.0;
    (0..=degree)
        .map(|k| {
            if k > 0 {
                binom *= (degree - k + 1) as f64 / k as f64;
            }
            binom * s.powi(k as i32) * (1.0 - s).powi((degree - k) as i32)
        })
        .collect()
}

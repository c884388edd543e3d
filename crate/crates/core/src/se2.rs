//! Planar rigid-body group SE(2), its Lie algebra se(2) and the dual force space.
//!
//! Poses are stored as `(x, y, theta)` with `theta` wrapped to `(-pi, pi]`;
//! homogeneous matrices are only produced on demand. Twists and wrenches are
//! body-frame quantities ordered `(linear x, linear y, angular)`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation magnitude the sinc-type coefficients use their series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// `sin(t)/t` and `(1 - cos t)/t`.
fn sinc_pair(t: f64) -> (f64, f64) {
    if t.abs() < SMALL_ANGLE {
        let t2 = t * t;
        // four-term Taylor series
        let s = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0;
        let c = t / 2.0 - t * t2 / 24.0 + t * t2 * t2 / 720.0 - t * t2 * t2 * t2 / 40320.0;
        (s, c)
    } else {
        (t.sin() / t, (1.0 - t.cos()) / t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Body velocity in se(2).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

/// Body force/moment, dual to [`Twist`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub fx: f64,
    pub fy: f64,
    pub tau: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0 }
    }

    /// `self * other`: rotate `other`'s translation into this frame and add.
    pub fn compose(&self, other: &Pose) -> Pose {
        let (s, c) = self.theta.sin_cos();
        Pose::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose {
        let (s, c) = self.theta.sin_cos();
        Pose::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose) -> Pose {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (other.x - self.x, other.y - self.y);
        Pose::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Apply the transform to a point.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Pose {
        Pose::new(m[(0, 2)], m[(1, 2)], m[(1, 0)].atan2(m[(0, 0)]))
    }

    /// Group exponential of `xi * dt`.
    pub fn exp(xi: &Twist, dt: f64) -> Pose {
        let t = xi.omega * dt;
        let (a, b) = sinc_pair(t);
        let (vx, vy) = (xi.vx * dt, xi.vy * dt);
        Pose::new(a * vx - b * vy, b * vx + a * vy, t)
    }

    /// Group logarithm; the rotation branch is fixed by the wrapped angle.
    pub fn log(&self) -> Twist {
        let t = self.theta;
        let (a, b) = sinc_pair(t);
        let det = a * a + b * b;
        Twist {
            vx: (a * self.x + b * self.y) / det,
            vy: (-b * self.x + a * self.y) / det,
            omega: t,
        }
    }

    /// `Ad_g`, mapping body twists of the child frame into this frame.
    pub fn adjoint(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.y, s, c, -self.x, 0.0, 0.0, 1.0)
    }

    /// `Ad_g^-1` without forming the inverse pose first.
    pub fn adjoint_inv(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(
            c,
            s,
            s * self.x - c * self.y,
            -s,
            c,
            c * self.x + s * self.y,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Twist {
    pub const fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub const fn zero() -> Self {
        Self { vx: 0.0, vy: 0.0, omega: 0.0 }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.omega)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self { vx: v[0], vy: v[1], omega: v[2] }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { vx: v[0], vy: v[1], omega: v[2] }
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist::new(self.vx * s, self.vy * s, self.omega * s)
    }

    pub fn norm(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy + self.omega * self.omega).sqrt()
    }

    /// Algebra bracket `[self, other]` (matrix commutator of the hat forms).
    pub fn bracket(&self, other: &Twist) -> Twist {
        Twist {
            vx: other.omega * self.vy - self.omega * other.vy,
            vy: self.omega * other.vx - other.omega * self.vx,
            omega: 0.0,
        }
    }

    /// Matrix of `ad_xi`, so that `ad(xi) * eta = [xi, eta]`.
    pub fn ad_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(0.0, -self.omega, self.vy, self.omega, 0.0, -self.vx, 0.0, 0.0, 0.0)
    }

    pub fn hat(&self) -> Matrix3<f64> {
        Matrix3::new(0.0, -self.omega, self.vx, self.omega, 0.0, self.vy, 0.0, 0.0, 0.0)
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, r: Twist) -> Twist {
        Twist::new(self.vx + r.vx, self.vy + r.vy, self.omega + r.omega)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, r: Twist) -> Twist {
        Twist::new(self.vx - r.vx, self.vy - r.vy, self.omega - r.omega)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.vx, -self.vy, -self.omega)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        self.scale(s)
    }
}

impl Wrench {
    pub const fn new(fx: f64, fy: f64, tau: f64) -> Self {
        Self { fx, fy, tau }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.fx, self.fy, self.tau)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self { fx: v[0], fy: v[1], tau: v[2] }
    }

    /// Power pairing `<wrench; twist>`.
    pub fn pair(&self, xi: &Twist) -> f64 {
        self.fx * xi.vx + self.fy * xi.vy + self.tau * xi.omega
    }

    /// Coadjoint transform: re-express a wrench acting in the frame `g`
    /// in the parent frame, `Ad_g^-T * w`.
    pub fn coadjoint(&self, g: &Pose) -> Wrench {
        let m = g.adjoint_inv().transpose();
        Wrench::from_vector(&(m * self.to_vector()))
    }
}

/// Lie-group time differentiation: `(1/dt) log(g_k^-1 g_{k+1})` for each interval.
pub fn group_diff(poses: &[Pose], dt: f64) -> Result<Vec<Twist>> {
    if poses.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: poses.len() });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    Ok(poses
        .windows(2)
        .map(|w| w[0].between(&w[1]).log().scale(1.0 / dt))
        .collect())
}

/// Right Jacobian-style correction: `log(exp(-a) exp(a + d)) ~ J(a) d` for small `d`.
/// Used for the per-cycle discretization of error dynamics.
pub fn right_jacobian(a: &Twist) -> Matrix3<f64> {
    // J_r(a) = sum_k (-ad_a)^k / (k+1)!, evaluated by series (|a| is O(1) per cycle).
    let ad = -a.ad_matrix();
    let mut term = Matrix3::identity();
    let mut acc = Matrix3::identity();
    for k in 1..30 {
        term = term * ad / (k as f64 + 1.0);
        acc += term;
    }
    acc
}

//! Planar chain kinematics: link placement, the mean-link body frame, unit
//! Jacobians and the stacked wheel/joint Jacobians used by the drag model.
//!
//! Conventions: links have length `L`, joints sit at link ends, each unit's
//! wheel sits at its link center. Link 1's frame is the kinematic root, so
//! `phi_1 = 0` and `phi_k = alpha_1 + ... + alpha_{k-1}`. The system body frame
//! is the mean of the link centers and link angles (equal link masses).
//! Unit indices are 1-based in the public API.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{Pose, Twist};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    pub n_units: usize,
    pub link_length: f64,
    /// Wheel rolling-axis angle relative to the link axis, per unit.
    pub beta: Vec<f64>,
    pub joint_limits: Vec<(f64, f64)>,
    /// Command limit per unit (wheel-surface speed, m/s).
    pub u_max: Vec<f64>,
}

/// Configuration velocity `[xi; alpha_dot]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigVelocity {
    pub xi: Twist,
    pub alpha_dot: Vec<f64>,
}

impl ConfigVelocity {
    pub fn zero(n_joints: usize) -> Self {
        Self { xi: Twist::zero(), alpha_dot: vec![0.0; n_joints] }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(3 + self.alpha_dot.len());
        v.extend_from_slice(&[self.xi.vx, self.xi.vy, self.xi.omega]);
        v.extend_from_slice(&self.alpha_dot);
        DVector::from_vec(v)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { xi: Twist::from_slice(&v[..3]), alpha_dot: v[3..].to_vec() }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { xi: self.xi.scale(s), alpha_dot: self.alpha_dot.iter().map(|a| a * s).collect() }
    }
}

/// Angular speed in RPM and wheel diameter to wheel-surface speed (m/s).
pub fn rpm_to_surface_speed(rpm: f64, wheel_diameter: f64) -> f64 {
    rpm * 2.0 * std::f64::consts::PI / 60.0 * wheel_diameter / 2.0
}

fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

struct LinkGeometry {
    centers: Vec<[f64; 2]>,
    angles: Vec<f64>,
    joints: Vec<[f64; 2]>,
}

impl ChainModel {
    pub fn new(
        link_length: f64,
        beta: Vec<f64>,
        joint_limits: Vec<(f64, f64)>,
        u_max: Vec<f64>,
    ) -> Result<Self> {
        let m = Self { n_units: beta.len(), link_length, beta, joint_limits, u_max };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_units;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("chain needs at least 2 units, got {n}")));
        }
        if !(self.link_length > 0.0) {
            return Err(Error::InvalidArgument("link length must be positive".into()));
        }
        if self.beta.len() != n || self.u_max.len() != n || self.joint_limits.len() != n - 1 {
            return Err(Error::DimensionMismatch(format!(
                "{n} units need {n} beta, {n} u_max and {} joint limits",
                n - 1
            )));
        }
        if self.joint_limits.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArgument("joint limit min must be below max".into()));
        }
        if self.u_max.iter().any(|&u| !(u > 0.0)) {
            return Err(Error::InvalidArgument("u_max must be positive".into()));
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.n_units - 1
    }

    /// Configuration dimension `3 + (N - 1)`.
    pub fn config_dim(&self) -> usize {
        self.n_units + 2
    }

    /// Rows of the stacked wheel/joint Jacobian.
    pub fn stacked_dim(&self) -> usize {
        3 * self.n_units + self.n_joints()
    }

    pub fn check_shape(&self, r: &[f64]) -> Result<()> {
        if r.len() != self.n_joints() {
            return Err(Error::DimensionMismatch(format!(
                "shape has {} entries, chain has {} joints",
                r.len(),
                self.n_joints()
            )));
        }
        Ok(())
    }

    /// Index of the first joint outside its limits, if any.
    pub fn limit_violation(&self, r: &[f64]) -> Option<usize> {
        r.iter()
            .zip(&self.joint_limits)
            .position(|(&a, &(lo, hi))| a < lo || a > hi)
    }

    fn check_unit(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n_units {
            return Err(Error::IndexOutOfRange { index: i, max: self.n_units });
        }
        Ok(())
    }

    fn geometry(&self, r: &[f64]) -> LinkGeometry {
        let n = self.n_units;
        let half = 0.5 * self.link_length;
        let mut angles = Vec::with_capacity(n);
        let mut phi = 0.0;
        angles.push(phi);
        for a in r.iter().take(n - 1) {
            phi += a;
            angles.push(phi);
        }
        let mut centers = Vec::with_capacity(n);
        let mut joints = Vec::with_capacity(n - 1);
        centers.push([0.0, 0.0]);
        for k in 0..n - 1 {
            let (s0, c0) = angles[k].sin_cos();
            let (s1, c1) = angles[k + 1].sin_cos();
            let c = centers[k];
            joints.push([c[0] + half * c0, c[1] + half * s0]);
            centers.push([c[0] + half * (c0 + c1), c[1] + half * (s0 + s1)]);
        }
        LinkGeometry { centers, angles, joints }
    }

    fn body_from_geometry(&self, g: &LinkGeometry) -> Pose {
        let n = self.n_units as f64;
        let cx = g.centers.iter().map(|c| c[0]).sum::<f64>() / n;
        let cy = g.centers.iter().map(|c| c[1]).sum::<f64>() / n;
        let th = g.angles.iter().sum::<f64>() / n;
        Pose::new(cx, cy, th)
    }

    /// Link frames (at link centers) relative to the root link frame.
    pub fn link_poses(&self, r: &[f64]) -> Vec<Pose> {
        let g = self.geometry(r);
        g.centers.iter().zip(&g.angles).map(|(c, &a)| Pose::new(c[0], c[1], a)).collect()
    }

    /// System body frame relative to the root link frame.
    pub fn body_frame(&self, r: &[f64]) -> Pose {
        self.body_from_geometry(&self.geometry(r))
    }

    /// Pose of unit `i` in the system body frame.
    pub fn unit_frame(&self, r: &[f64], i: usize) -> Result<Pose> {
        self.check_unit(i)?;
        self.check_shape(r)?;
        let g = self.geometry(r);
        let b = self.body_from_geometry(&g);
        let c = g.centers[i - 1];
        Ok(b.between(&Pose::new(c[0], c[1], g.angles[i - 1])))
    }

    /// All unit frames at once.
    pub fn unit_frames(&self, r: &[f64]) -> Vec<Pose> {
        let g = self.geometry(r);
        let b = self.body_from_geometry(&g);
        (0..self.n_units)
            .map(|k| b.between(&Pose::new(g.centers[k][0], g.centers[k][1], g.angles[k])))
            .collect()
    }

    /// Jacobians of every unit, `xi_i = J_i zeta_dot`, each `3 x (N + 2)`.
    pub fn unit_jacobians(&self, r: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.n_units;
        let g = self.geometry(r);
        let b = self.body_from_geometry(&g);
        let nf = n as f64;

        // Shape-induced motion of the body frame, expressed in its own frame.
        let body_cols: Vec<Twist> = (0..n - 1)
            .map(|j| {
                let mut d = [0.0, 0.0];
                for k in (j + 1)..n {
                    let p = perp([g.centers[k][0] - g.joints[j][0], g.centers[k][1] - g.joints[j][1]]);
                    d[0] += p[0] / nf;
                    d[1] += p[1] / nf;
                }
                let (s, c) = b.theta.sin_cos();
                Twist::new(c * d[0] + s * d[1], -s * d[0] + c * d[1], (n - 1 - j) as f64 / nf)
            })
            .collect();

        (0..n)
            .map(|k| {
                let pk = Pose::new(g.centers[k][0], g.centers[k][1], g.angles[k]);
                let h = b.between(&pk);
                let adi = h.adjoint_inv();
                let mut jac = DMatrix::zeros(3, n + 2);
                jac.view_mut((0, 0), (3, 3)).copy_from(&adi);
                let (s, c) = pk.theta.sin_cos();
                for j in 0..n - 1 {
                    let own = if k > j {
                        let p = perp([g.centers[k][0] - g.joints[j][0], g.centers[k][1] - g.joints[j][1]]);
                        Twist::new(c * p[0] + s * p[1], -s * p[0] + c * p[1], 1.0)
                    } else {
                        Twist::zero()
                    };
                    let col = own.to_vector() - adi * body_cols[j].to_vector();
                    jac.view_mut((0, 3 + j), (3, 1)).copy_from(&col);
                }
                jac
            })
            .collect()
    }

    pub fn unit_jacobian(&self, r: &[f64], i: usize) -> Result<DMatrix<f64>> {
        self.check_unit(i)?;
        self.check_shape(r)?;
        Ok(self.unit_jacobians(r).swap_remove(i - 1))
    }

    /// Rotation from unit-frame to wheel-frame twist coordinates.
    pub fn wheel_rotation(&self, i: usize) -> Matrix3<f64> {
        Pose::new(0.0, 0.0, self.beta[i - 1]).adjoint_inv()
    }

    /// `(J_zeta, J_u)`: rows are unit 1 (wheel x, wheel y, theta), ..., unit N,
    /// then joints 1..N-1. `J_u` places each command on its wheel's rolling axis.
    pub fn aggregate_jacobians(&self, r: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n_units;
        let rows = self.stacked_dim();
        let mut jz = DMatrix::zeros(rows, n + 2);
        for (k, ju) in self.unit_jacobians(r).iter().enumerate() {
            let w = self.wheel_rotation(k + 1) * ju;
            jz.view_mut((3 * k, 0), (3, n + 2)).copy_from(&w);
        }
        for j in 0..n - 1 {
            jz[(3 * n + j, 3 + j)] = 1.0;
        }
        let mut jun = DMatrix::zeros(rows, n);
        for i in 0..n {
            jun[(3 * i, i)] = 1.0;
        }
        (jz, jun)
    }
}

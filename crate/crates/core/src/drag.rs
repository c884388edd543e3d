//! Linear drag model and the first-order control vector field.
//!
//! With stacked wheel/joint Jacobians `(J_zeta, J_u)` and the block-diagonal
//! metric `M`, the configuration force is
//!
//! * velocity commands: `F = J_zeta' M (J_zeta zeta_dot + J_u u)`
//! * force commands:    `F = J_zeta' (J_u u + M J_zeta zeta_dot)`
//!
//! and quasi-static balance `F = 0` gives `zeta_dot = A(r) u` with
//! `A = -(J_zeta' M J_zeta)^-1 J_zeta' M J_u` (velocity) or
//! `A = -(J_zeta' M J_zeta)^-1 J_zeta' J_u` (force). Under this sign convention a
//! positive command drives its wheel backwards along the rolling axis, like
//! the reaction of a jet.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::se2::{Twist, Wrench};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandMode {
    #[default]
    Velocity,
    Force,
}

/// Diagonal drag coefficients: `(x, y, theta)` per unit in wheel coordinates,
/// and one rotational coefficient per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalMetric {
    pub unit_blocks: Vec<[f64; 3]>,
    pub joint_coeffs: Vec<f64>,
}

impl LocalMetric {
    pub fn new(unit_blocks: Vec<[f64; 3]>, joint_coeffs: Vec<f64>) -> Result<Self> {
        let m = Self { unit_blocks, joint_coeffs };
        if m.unit_blocks.iter().flatten().chain(&m.joint_coeffs).any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument("drag coefficients must be finite and nonnegative".into()));
        }
        if m.joint_coeffs.len() + 1 != m.unit_blocks.len() {
            return Err(Error::DimensionMismatch("need one joint coefficient per joint".into()));
        }
        Ok(m)
    }

    pub fn n_units(&self) -> usize {
        self.unit_blocks.len()
    }

    /// Number of free coefficients, `4N - 1`.
    pub fn n_coeffs(&self) -> usize {
        3 * self.unit_blocks.len() + self.joint_coeffs.len()
    }

    /// Coefficients in stacked-row order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.unit_blocks.iter().flatten().copied().chain(self.joint_coeffs.iter().copied()).collect()
    }

    pub fn from_vec(n_units: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 4 * n_units - 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {n_units} units",
                v.len()
            )));
        }
        let blocks = (0..n_units).map(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]).collect();
        Self::new(blocks, v[3 * n_units..].to_vec())
    }

    /// Assembled block-diagonal `M`.
    pub fn aggregate(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.to_vec()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            unit_blocks: self.unit_blocks.iter().map(|b| [b[0] * s, b[1] * s, b[2] * s]).collect(),
            joint_coeffs: self.joint_coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Human-readable coefficient labels in stacked order.
    pub fn labels(n_units: usize) -> Vec<String> {
        let mut out = Vec::new();
        for i in 1..=n_units {
            for axis in ["x", "y", "theta"] {
                out.push(format!("unit{i}_{axis}"));
            }
        }
        for j in 1..n_units {
            out.push(format!("joint{j}"));
        }
        out
    }
}

/// Wrench on a unit in its wheel frame. `command` is the commanded jet
/// velocity (velocity mode) or jet force (force mode) as a wheel-frame vector.
pub fn unit_wrench(block: &[f64; 3], command: &Twist, xi: &Twist, mode: CommandMode) -> Wrench {
    match mode {
        CommandMode::Velocity => Wrench::new(
            block[0] * (command.vx - xi.vx),
            block[1] * (command.vy - xi.vy),
            block[2] * (command.omega - xi.omega),
        ),
        CommandMode::Force => Wrench::new(
            command.vx - block[0] * xi.vx,
            command.vy - block[1] * xi.vy,
            command.omega - block[2] * xi.omega,
        ),
    }
}

/// `A(r)` at one shape.
#[derive(Clone, Debug)]
pub struct ControlField {
    pub shape: Vec<f64>,
    /// `(N + 2) x N`
    pub a: DMatrix<f64>,
}

impl ControlField {
    pub fn apply(&self, u: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(u)
    }
}

/// Ambient flow at one unit, expressed in that unit's frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitFlow {
    pub unit: usize,
    pub twist: Twist,
}

/// Chain geometry, metric and command interpretation bundled together.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DragModel {
    pub chain: ChainModel,
    pub metric: LocalMetric,
    pub mode: CommandMode,
}

impl DragModel {
    /// Builds the model and checks that `J' M J` factors on a grid of shapes
    /// spanning the joint limits (21 points per joint for up to two joints).
    pub fn new(chain: ChainModel, metric: LocalMetric, mode: CommandMode) -> Result<Self> {
        chain.validate()?;
        if metric.n_units() != chain.n_units {
            return Err(Error::DimensionMismatch(format!(
                "metric has {} units, chain has {}",
                metric.n_units(),
                chain.n_units
            )));
        }
        let model = Self { chain, metric, mode };
        for r in model.validation_shapes() {
            model.factor(&r)?;
        }
        Ok(model)
    }

    fn validation_shapes(&self) -> Vec<Vec<f64>> {
        let lim = &self.chain.joint_limits;
        let nj = lim.len();
        let pts = 21usize;
        let at = |j: usize, k: usize| lim[j].0 + (lim[j].1 - lim[j].0) * k as f64 / (pts - 1) as f64;
        if nj <= 2 {
            let total = pts.pow(nj as u32);
            (0..total)
                .map(|mut idx| {
                    (0..nj)
                        .map(|j| {
                            let k = idx % pts;
                            idx /= pts;
                            at(j, k)
                        })
                        .collect()
                })
                .collect()
        } else {
            // low-discrepancy sample of the box, same point budget as the 2-D grid
            (0..pts * pts)
                .map(|s| {
                    (0..nj)
                        .map(|j| {
                            let g = (s as f64 * (0.5f64.sqrt() + j as f64 * 0.618_033_988_749_895)).fract();
                            lim[j].0 + (lim[j].1 - lim[j].0) * g
                        })
                        .collect()
                })
                .collect()
        }
    }

    pub fn n_units(&self) -> usize {
        self.chain.n_units
    }

    fn factor(&self, r: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
        self.chain.check_shape(r)?;
        let (jz, ju) = self.chain.aggregate_jacobians(r);
        let m = self.metric.aggregate();
        let s = symmetrize(&(jz.transpose() * &m * &jz));
        let chol = s.cholesky().ok_or_else(|| Error::SingularMetric { shape: r.to_vec() })?;
        Ok((jz, ju, chol))
    }

    /// Control vector field `A(r)`.
    pub fn control_field(&self, r: &[f64]) -> Result<ControlField> {
        let (jz, ju, chol) = self.factor(r)?;
        let rhs = match self.mode {
            CommandMode::Velocity => jz.transpose() * self.metric.aggregate() * ju,
            CommandMode::Force => jz.transpose() * ju,
        };
        Ok(ControlField { shape: r.to_vec(), a: -chol.solve(&rhs) })
    }

    /// `zeta_dot` under command `u` and optional ambient flows at units.
    pub fn config_velocity(&self, r: &[f64], u: &[f64], flows: &[UnitFlow]) -> Result<DVector<f64>> {
        let (jz, ju, chol) = self.factor(r)?;
        let m = self.metric.aggregate();
        let mut drive = &ju * DVector::from_column_slice(u);
        let mut flow = DVector::zeros(drive.len());
        for f in flows {
            if f.unit == 0 || f.unit > self.n_units() {
                return Err(Error::IndexOutOfRange { index: f.unit, max: self.n_units() });
            }
            let w = self.chain.wheel_rotation(f.unit) * f.twist.to_vector();
            for c in 0..3 {
                flow[3 * (f.unit - 1) + c] += w[c];
            }
        }
        let rhs = match self.mode {
            CommandMode::Velocity => {
                drive -= flow;
                jz.transpose() * &m * drive
            }
            CommandMode::Force => jz.transpose() * (drive - &m * flow),
        };
        Ok(-chol.solve(&rhs))
    }

    /// Force on the configuration coordinates.
    pub fn config_force(&self, r: &[f64], zeta_dot: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        let (jz, ju) = self.chain.aggregate_jacobians(r);
        let m = self.metric.aggregate();
        let zd = DVector::from_column_slice(zeta_dot);
        let uv = DVector::from_column_slice(u);
        Ok(match self.mode {
            CommandMode::Velocity => jz.transpose() * &m * (&jz * zd + &ju * uv),
            CommandMode::Force => jz.transpose() * (&ju * uv + &m * &jz * zd),
        })
    }

    /// Rolling-axis force each actuator carries (the measured channel).
    pub fn actuator_forces(&self, r: &[f64], zeta_dot: &[f64], u: &[f64]) -> Vec<f64> {
        let (jz, _) = self.chain.aggregate_jacobians(r);
        let v = jz * DVector::from_column_slice(zeta_dot);
        (0..self.n_units())
            .map(|i| {
                let mx = self.metric.unit_blocks[i][0];
                match self.mode {
                    CommandMode::Velocity => mx * (v[3 * i] + u[i]),
                    CommandMode::Force => u[i] + mx * v[3 * i],
                }
            })
            .collect()
    }
}

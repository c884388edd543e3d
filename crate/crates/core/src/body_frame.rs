//! Shape-dependent body-frame offsets that shrink the control vector field.
//!
//! Moving the body frame by `h(r)` changes the fiber rows of `A` to
//! `Ad_{h^-1} A_xi + (h^-1 dh/dr) A_r`. The offsets are sampled on a grid
//! over a box of two joint angles, the derivative term comes from finite
//! differences between neighbors, and all offsets are fitted jointly by
//! damped Gauss–Newton on the summed squared Frobenius norm.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drag::DragModel;
use crate::error::{Error, Result};
use crate::se2::{Pose, Twist};

/// Tikhonov weight on the offsets, relative to the default-frame objective
/// per grid point. Fixes the free rotation at isolated points.
pub const OFFSET_REGULARIZATION: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Grid points per joint; 1 collapses that axis to `lo`.
    pub points: [usize; 2],
}

impl ShapeBox {
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        let at = |k: usize, idx: usize| {
            if self.points[k] <= 1 {
                self.lo[k]
            } else {
                self.lo[k] + (self.hi[k] - self.lo[k]) * idx as f64 / (self.points[k] - 1) as f64
            }
        };
        [at(0, i), at(1, j)]
    }

    fn step(&self, k: usize) -> f64 {
        if self.points[k] <= 1 {
            0.0
        } else {
            (self.hi[k] - self.lo[k]) / (self.points[k] - 1) as f64
        }
    }

    pub fn len(&self) -> usize {
        self.points[0] * self.points[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optimized offsets on the grid, row-major in the first joint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BodyFrameField {
    pub region: ShapeBox,
    pub offsets: Vec<Pose>,
    pub default_objective: f64,
    pub objective: f64,
    /// `objective / default_objective`.
    pub reduction_ratio: f64,
    pub iterations: usize,
}

impl BodyFrameField {
    fn at(&self, i: usize, j: usize) -> Pose {
        self.offsets[i * self.region.points[1] + j]
    }

    /// Bilinear interpolation of `(x, y, theta)` inside the region; shapes
    /// outside are clamped to the box.
    pub fn offset_at(&self, r: &[f64]) -> Pose {
        let reg = &self.region;
        let loc = |k: usize| -> (usize, f64) {
            if reg.points[k] <= 1 {
                return (0, 0.0);
            }
            let s = ((r[k] - reg.lo[k]) / reg.step(k)).clamp(0.0, (reg.points[k] - 1) as f64);
            let i = (s.floor() as usize).min(reg.points[k] - 2);
            (i, s - i as f64)
        };
        let ((i, fi), (j, fj)) = (loc(0), loc(1));
        let i1 = (i + 1).min(reg.points[0] - 1);
        let j1 = (j + 1).min(reg.points[1] - 1);
        let corners = [(self.at(i, j), (1.0 - fi) * (1.0 - fj)), (self.at(i1, j), fi * (1.0 - fj)), (self.at(i, j1), (1.0 - fi) * fj), (self.at(i1, j1), fi * fj)];
        let mut v = [0.0; 3];
        for (p, w) in corners {
            v[0] += w * p.x;
            v[1] += w * p.y;
            v[2] += w * p.theta;
        }
        Pose::new(v[0], v[1], v[2])
    }
}

fn dyn3(m: Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

struct Problem {
    region: ShapeBox,
    /// Per grid point: fiber rows `3 x N` and shape rows `2 x N` of `A`.
    fiber: Vec<DMatrix<f64>>,
    shape: Vec<DMatrix<f64>>,
    reg: f64,
}

impl Problem {
    fn pose(z: &DVector<f64>, p: usize) -> Pose {
        Pose::new(z[3 * p], z[3 * p + 1], z[3 * p + 2])
    }

    /// Left-trivialized derivative of `h` along joint `k` at point `(i, j)`.
    fn derivative(&self, z: &DVector<f64>, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let n = self.region.points;
        if n[k] <= 1 {
            return Vector3::zeros();
        }
        let idx = |a: usize, b: usize| a * n[1] + b;
        let (here, coord) = ([i, j], if k == 0 { i } else { j });
        let shift = |d: isize| {
            let mut q = here;
            q[k] = (coord as isize + d) as usize;
            idx(q[0], q[1])
        };
        let h = Self::pose(z, idx(i, j));
        let step = self.region.step(k);
        let lg = |q: usize| h.between(&Self::pose(z, q)).log().to_vector();
        if coord == 0 {
            lg(shift(1)) / step
        } else if coord + 1 == n[k] {
            -lg(shift(-1)) / step
        } else {
            (lg(shift(1)) - lg(shift(-1))) / (2.0 * step)
        }
    }

    fn residual(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.region.points;
        let cols = self.fiber[0].ncols();
        let np = self.region.len();
        let mut out = DVector::zeros(np * 3 * cols + 3 * np);
        for i in 0..n[0] {
            for j in 0..n[1] {
                let p = i * n[1] + j;
                let h = Self::pose(z, p);
                let mut m = dyn3(h.adjoint_inv()) * &self.fiber[p];
                for k in 0..2 {
                    let d = self.derivative(z, i, j, k);
                    m += d * self.shape[p].row(k);
                }
                out.rows_mut(p * 3 * cols, 3 * cols).copy_from_slice(m.as_slice());
            }
        }
        let tail = np * 3 * cols;
        for q in 0..3 * np {
            out[tail + q] = self.reg * z[q];
        }
        out
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let r = self.residual(z);
        let data = r.len() - 3 * self.region.len();
        r.rows(0, data).norm_squared()
    }
}

/// Fits the offset field over `region`. Needs a two-joint chain.
pub fn optimize_body_frame(model: &DragModel, region: &ShapeBox) -> Result<BodyFrameField> {
    if region.is_empty() {
        return Err(Error::InvalidArgument("empty shape region".into()));
    }
    if model.chain.n_joints() != 2 {
        return Err(Error::DimensionMismatch("body-frame optimization needs exactly two joints".into()));
    }
    for k in 0..2 {
        if !(region.hi[k] >= region.lo[k]) {
            return Err(Error::InvalidArgument("region bounds are inverted".into()));
        }
        let (lo, hi) = model.chain.joint_limits[k];
        if region.lo[k] < lo || region.hi[k] > hi {
            return Err(Error::InvalidArgument(format!("region leaves the limits of joint {}", k + 1)));
        }
    }
    let pts: Vec<[f64; 2]> =
        (0..region.points[0]).flat_map(|i| (0..region.points[1]).map(move |j| (i, j))).map(|(i, j)| region.point(i, j)).collect();
    let fields = pts.par_iter().map(|r| model.control_field(r)).collect::<Result<Vec<_>>>()?;
    let np = region.len();
    let mut prob = Problem {
        region: region.clone(),
        fiber: fields.iter().map(|f| f.a.rows(0, 3).into_owned()).collect(),
        shape: fields.iter().map(|f| f.a.rows(3, 2).into_owned()).collect(),
        reg: 0.0,
    };
    let mut z = DVector::zeros(3 * np);
    let default_objective = prob.objective(&z);
    prob.reg = (OFFSET_REGULARIZATION * default_objective / np as f64).sqrt();

    let total = |z: &DVector<f64>| prob.residual(z).norm_squared();
    let mut damping = 1e-3;
    let mut iterations = 0;
    let h = 1e-7;
    for _ in 0..100 {
        iterations += 1;
        let r0 = prob.residual(&z);
        let cols: Vec<DVector<f64>> = (0..3 * np)
            .into_par_iter()
            .map(|q| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[q] += h;
                zm[q] -= h;
                (prob.residual(&zp) - prob.residual(&zm)) / (2.0 * h)
            })
            .collect();
        let jac = DMatrix::from_columns(&cols);
        let g = jac.transpose() * &r0;
        let jtj = jac.transpose() * &jac;
        let f0 = r0.norm_squared();
        let mut accepted = false;
        for _ in 0..20 {
            let mut lhs = jtj.clone();
            for d in 0..lhs.nrows() {
                lhs[(d, d)] += damping * (jtj[(d, d)] + 1e-12);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&g))) else {
                damping *= 10.0;
                continue;
            };
            let zn = &z + &step;
            if total(&zn) < f0 {
                z = zn;
                damping = (damping * 0.3).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted || g.amax() <= 1e-12 * (1.0 + f0) {
            break;
        }
    }
    // h -> h R(phi) leaves the objective unchanged; pin the rotation at the
    // middle of the region to zero
    let mut field = BodyFrameField {
        region: region.clone(),
        offsets: (0..np).map(|p| Problem::pose(&z, p)).collect(),
        default_objective,
        objective: 0.0,
        reduction_ratio: 1.0,
        iterations,
    };
    let mid = [(region.lo[0] + region.hi[0]) / 2.0, (region.lo[1] + region.hi[1]) / 2.0];
    let anchor = field.offset_at(&mid).theta;
    for p in 0..np {
        z[3 * p + 2] -= anchor;
        field.offsets[p].theta -= anchor;
    }
    field.objective = prob.objective(&z);
    if default_objective > 0.0 {
        field.reduction_ratio = field.objective / default_objective;
    }
    Ok(field)
}

/// Fiber rows of `A` seen from the offset frame at `r`, with the derivative
/// term dropped. For isolated points this is the whole objective.
pub fn offset_fiber_field(model: &DragModel, r: &[f64], offset: &Pose) -> Result<DMatrix<f64>> {
    let a = model.control_field(r)?.a;
    Ok(dyn3(offset.adjoint_inv()) * a.rows(0, 3))
}

/// Twist seen from a frame moved by `offset`.
pub fn reexpress(xi: &Twist, offset: &Pose) -> Twist {
    Twist::from_vector(&(offset.adjoint_inv() * xi.to_vector()))
}

//! Lie brackets of control vector fields and the truncated BCH cycle average.
//!
//! For a gait `u(t)` the cycle-averaged velocity about a nominal shape is
//!
//! `zeta_dot_avg = A u_bar + sum_{i<j} u_[i,j] / (2 pi w) [A_i, A_j]`
//!
//! with `u_[i,j] = sum_k (1/k)(u_bar_j s_i - u_bar_i s_j - s_i c_j / 2 + c_i s_j / 2)`
//! where `s = A_sin_k`, `c = A_cos_k`, and the bracket's fiber rows combine the
//! se(2) bracket with shape-derivative terms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::ConfigVelocity;
use crate::drag::DragModel;
use crate::error::{Error, Result};
use crate::gait::FourierGait;
use crate::se2::Twist;

/// Central-difference step for shape derivatives of `A` (rad).
pub const SHAPE_FD_STEP: f64 = 1e-5;

/// Ordered unit pairs `(i, j)`, `i < j`, zero-based.
pub fn unit_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

fn sin_index(n: usize, k: usize, i: usize) -> usize {
    n * (1 + 2 * k) + i
}

fn cos_index(n: usize, k: usize, i: usize) -> usize {
    n * (2 + 2 * k) + i
}

/// `u_[i,j]` for every ordered pair, from flattened parameters.
pub fn bracket_coefficients_from_params(n: usize, theta: &[f64]) -> Vec<f64> {
    let order = (theta.len() / n - 1) / 2;
    unit_pairs(n)
        .iter()
        .map(|&(i, j)| {
            let mut acc = 0.0;
            for k in 0..order {
                let (si, sj) = (theta[sin_index(n, k, i)], theta[sin_index(n, k, j)]);
                let (ci, cj) = (theta[cos_index(n, k, i)], theta[cos_index(n, k, j)]);
                acc += (theta[j] * si - theta[i] * sj - 0.5 * si * cj + 0.5 * ci * sj) / (k + 1) as f64;
            }
            acc
        })
        .collect()
}

pub fn bracket_coefficients(gait: &FourierGait) -> Vec<f64> {
    bracket_coefficients_from_params(gait.n_units(), gait.to_params().as_slice())
}

/// Gradient of every `u_[i,j]` with respect to the parameters (one row per pair).
pub fn bracket_coefficient_jacobian(n: usize, theta: &[f64]) -> DMatrix<f64> {
    let order = (theta.len() / n - 1) / 2;
    let pairs = unit_pairs(n);
    let mut jac = DMatrix::zeros(pairs.len(), theta.len());
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for k in 0..order {
            let w = 1.0 / (k + 1) as f64;
            let (si, sj) = (sin_index(n, k, i), sin_index(n, k, j));
            let (ci, cj) = (cos_index(n, k, i), cos_index(n, k, j));
            jac[(p, j)] += w * theta[si];
            jac[(p, i)] -= w * theta[sj];
            jac[(p, si)] += w * (theta[j] - 0.5 * theta[cj]);
            jac[(p, sj)] += w * (-theta[i] + 0.5 * theta[ci]);
            jac[(p, ci)] += w * 0.5 * theta[sj];
            jac[(p, cj)] -= w * 0.5 * theta[si];
        }
    }
    jac
}

/// Constant Hessians of each `u_[i,j]` (the coefficients are quadratic).
pub fn bracket_coefficient_hessians(n: usize, n_params: usize) -> Vec<DMatrix<f64>> {
    let order = (n_params / n - 1) / 2;
    unit_pairs(n)
        .iter()
        .map(|&(i, j)| {
            let mut h = DMatrix::zeros(n_params, n_params);
            let mut add = |a: usize, b: usize, v: f64| {
                h[(a, b)] += v;
                h[(b, a)] += v;
            };
            for k in 0..order {
                let w = 1.0 / (k + 1) as f64;
                let (si, sj) = (sin_index(n, k, i), sin_index(n, k, j));
                let (ci, cj) = (cos_index(n, k, i), cos_index(n, k, j));
                add(j, si, w);
                add(i, sj, -w);
                add(si, cj, -0.5 * w);
                add(ci, sj, 0.5 * w);
            }
            h
        })
        .collect()
}

/// `dA/dr_m` for each joint `m` by central differences.
pub fn field_derivatives(model: &DragModel, r: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    (0..r.len())
        .map(|m| {
            let mut rp = r.to_vec();
            let mut rm = r.to_vec();
            rp[m] += SHAPE_FD_STEP;
            rm[m] -= SHAPE_FD_STEP;
            let ap = model.control_field(&rp)?.a;
            let am = model.control_field(&rm)?.a;
            Ok((ap - am) / (2.0 * SHAPE_FD_STEP))
        })
        .collect()
}

/// Bracket column `[A_i, A_j]` from a field and its shape derivatives (zero-based).
pub fn bracket_from_parts(a: &DMatrix<f64>, da: &[DMatrix<f64>], i: usize, j: usize) -> DVector<f64> {
    let dim = a.nrows();
    let nj = dim - 3;
    // directional derivative of column `c` along the shape part of column `d`
    let along = |c: usize, d: usize| -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        for m in 0..nj {
            v += da[m].column(c) * a[(3 + m, d)];
        }
        v
    };
    let mut out = along(j, i) - along(i, j);
    let gi = Twist::new(a[(0, i)], a[(1, i)], a[(2, i)]);
    let gj = Twist::new(a[(0, j)], a[(1, j)], a[(2, j)]);
    let br = gi.bracket(&gj);
    out[0] += br.vx;
    out[1] += br.vy;
    out[2] += br.omega;
    out
}

/// Bracket of the control fields of units `i` and `j` (1-based) at shape `r`.
pub fn lie_bracket(model: &DragModel, r: &[f64], i: usize, j: usize) -> Result<DVector<f64>> {
    let n = model.n_units();
    for idx in [i, j] {
        if idx == 0 || idx > n {
            return Err(Error::IndexOutOfRange { index: idx, max: n });
        }
    }
    if i == j {
        return Err(Error::InvalidArgument("bracket needs two distinct fields".into()));
    }
    let a = model.control_field(r)?.a;
    let da = field_derivatives(model, r)?;
    Ok(bracket_from_parts(&a, &da, i - 1, j - 1))
}

/// Direct and bracket columns frozen at a nominal shape.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AveragedSystem {
    /// `(N + 2) x (N + N(N-1)/2)`: `[A | [A_i, A_j] for i < j]`.
    pub a_aug: DMatrix<f64>,
    pub nominal: Vec<f64>,
    /// Base frequency (Hz); augmented inputs are `[u_bar; u_[i,j] / (2 pi w)]`.
    pub omega: f64,
    pub n_units: usize,
}

pub fn augmented_system(model: &DragModel, nominal: &[f64], omega: f64) -> Result<AveragedSystem> {
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument("frequency must be positive".into()));
    }
    let n = model.n_units();
    let a = model.control_field(nominal)?.a;
    let da = field_derivatives(model, nominal)?;
    let pairs = unit_pairs(n);
    let mut aug = DMatrix::zeros(a.nrows(), n + pairs.len());
    aug.view_mut((0, 0), (a.nrows(), n)).copy_from(&a);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        aug.set_column(n + p, &bracket_from_parts(&a, &da, i, j));
    }
    Ok(AveragedSystem { a_aug: aug, nominal: nominal.to_vec(), omega, n_units: n })
}

impl AveragedSystem {
    pub fn dim(&self) -> usize {
        self.a_aug.nrows()
    }

    pub fn direct(&self) -> DMatrix<f64> {
        self.a_aug.columns(0, self.n_units).into_owned()
    }

    pub fn brackets(&self) -> DMatrix<f64> {
        self.a_aug.columns(self.n_units, self.a_aug.ncols() - self.n_units).into_owned()
    }

    /// Numerical rank with tolerance relative to the largest singular value.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let sv = self.a_aug.clone().svd(false, false).singular_values;
        let top = sv.max();
        sv.iter().filter(|&&s| s > rel_tol * top).count()
    }

    pub fn augmented_input_from_params(&self, theta: &[f64]) -> DVector<f64> {
        let n = self.n_units;
        let scale = 1.0 / (2.0 * PI * self.omega);
        let mut v: Vec<f64> = theta[..n].to_vec();
        v.extend(bracket_coefficients_from_params(n, theta).into_iter().map(|c| c * scale));
        DVector::from_vec(v)
    }

    /// Averaged velocity of parameter vector `theta`.
    pub fn velocity_from_params(&self, theta: &[f64]) -> DVector<f64> {
        &self.a_aug * self.augmented_input_from_params(theta)
    }

    /// Averaged velocity and its Jacobian with respect to the parameters.
    pub fn velocity_and_jacobian(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n_units;
        let scale = 1.0 / (2.0 * PI * self.omega);
        let mut du = DMatrix::zeros(self.a_aug.ncols(), theta.len());
        for i in 0..n {
            du[(i, i)] = 1.0;
        }
        let bj = bracket_coefficient_jacobian(n, theta) * scale;
        du.view_mut((n, 0), (bj.nrows(), theta.len())).copy_from(&bj);
        (self.velocity_from_params(theta), &self.a_aug * du)
    }

    pub fn average_velocity(&self, gait: &FourierGait) -> ConfigVelocity {
        ConfigVelocity::from_slice(self.velocity_from_params(gait.to_params().as_slice()).as_slice())
    }
}

/// Truncated-BCH average of a gait about `nominal`.
pub fn average_velocity(model: &DragModel, nominal: &[f64], gait: &FourierGait) -> Result<ConfigVelocity> {
    gait.validate()?;
    Ok(augmented_system(model, nominal, gait.omega)?.average_velocity(gait))
}

// ---------------------------------------------------------------------------
// Shape-controlled systems: xi = A_1(r) r1_dot + A_2(r) r2_dot on a 2-D shape space.

/// Fiber columns of a shape-controlled field at a 2-D shape.
pub type ShapeField<'a> = dyn Fn([f64; 2]) -> [Twist; 2] + Sync + 'a;

fn curvature(field: &ShapeField, r: [f64; 2]) -> Twist {
    let h = SHAPE_FD_STEP;
    let d = |m: usize, c: usize| -> Twist {
        let mut p = r;
        let mut q = r;
        p[m] += h;
        q[m] -= h;
        (field(p)[c] - field(q)[c]).scale(0.5 / h)
    };
    let a = field(r);
    d(0, 1) - d(1, 0) + a[0].bracket(&a[1])
}

const TRI_RULE: [(f64, f64, f64, f64); 7] = {
    let (a1, b1, w1) = (0.059_715_871_789_770, 0.470_142_064_105_115, 0.132_394_152_788_506);
    let (a2, b2, w2) = (0.797_426_985_353_087, 0.101_286_507_323_456, 0.125_939_180_544_827);
    [
        (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.225),
        (a1, b1, b1, w1),
        (b1, a1, b1, w1),
        (b1, b1, a1, w1),
        (a2, b2, b2, w2),
        (b2, a2, b2, w2),
        (b2, b2, a2, w2),
    ]
};

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True when two non-adjacent edges of the closed polygon cross properly.
pub fn polygon_self_intersects(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (pts[j], pts[(j + 1) % n]);
            let d1 = cross(a, b, c);
            let d2 = cross(a, b, d);
            let d3 = cross(c, d, a);
            let d4 = cross(c, d, b);
            if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                return true;
            }
        }
    }
    false
}

/// Cycle-averaged fiber velocity of a closed shape-space gait, from the
/// surface integral of `dA + [A_1, A_2]` over the enclosed region (counter-
/// clockwise traversal counts positive), divided by the period.
pub fn shape_controlled_average(field: &ShapeField, curve: &[[f64; 2]], period: f64) -> Result<Twist> {
    let mut pts: Vec<[f64; 2]> = curve.to_vec();
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        return Ok(Twist::zero());
    }
    let n = pts.len();
    let c = [
        pts.iter().map(|p| p[0]).sum::<f64>() / n as f64,
        pts.iter().map(|p| p[1]).sum::<f64>() / n as f64,
    ];
    let scale = pts.iter().map(|p| (p[0] - c[0]).hypot(p[1] - c[1])).fold(0.0, f64::max);
    let area: f64 = (0..n).map(|k| 0.5 * cross(c, pts[k], pts[(k + 1) % n])).sum();
    let abs_area: f64 = (0..n).map(|k| 0.5 * cross(c, pts[k], pts[(k + 1) % n]).abs()).sum();
    if abs_area <= 1e-14 * scale * scale || (area.abs() <= 1e-14 * scale * scale && !polygon_self_intersects(&pts)) {
        return Ok(Twist::zero());
    }
    if polygon_self_intersects(&pts) {
        return Err(Error::SelfIntersecting);
    }
    let mut acc = Twist::zero();
    for k in 0..n {
        let (p, q) = (pts[k], pts[(k + 1) % n]);
        let tri_area = 0.5 * cross(c, p, q);
        if tri_area == 0.0 {
            continue;
        }
        let mut sum = Twist::zero();
        for &(l0, l1, l2, w) in &TRI_RULE {
            let x = [l0 * c[0] + l1 * p[0] + l2 * q[0], l0 * c[1] + l1 * p[1] + l2 * q[1]];
            sum = sum + curvature(field, x).scale(w);
        }
        acc = acc + sum.scale(tri_area);
    }
    Ok(acc.scale(1.0 / period))
}

/// Same average from the line-integral form
/// `int A dr + 1/2 int [A dr(t), int_t^T A dr]`, on the sampled closed curve.
pub fn shape_controlled_line_average(field: &ShapeField, curve: &[[f64; 2]], period: f64) -> Twist {
    let mut pts: Vec<[f64; 2]> = curve.to_vec();
    if pts.first() != pts.last() {
        pts.push(pts[0]);
    }
    let segs: Vec<Twist> = pts
        .windows(2)
        .map(|w| {
            let mid = [0.5 * (w[0][0] + w[1][0]), 0.5 * (w[0][1] + w[1][1])];
            let a = field(mid);
            a[0].scale(w[1][0] - w[0][0]) + a[1].scale(w[1][1] - w[0][1])
        })
        .collect();
    let first = segs.iter().fold(Twist::zero(), |s, &v| s + v);
    let mut tail = first;
    let mut second = Twist::zero();
    for s in &segs {
        tail = tail - *s;
        // the segment's own half contributes [s, s/2] = 0
        second = second + s.bracket(&tail).scale(0.5);
    }
    (first + second).scale(1.0 / period)
}

//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's Jacobians, exponential or averaging code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salpgeo::drag::{unit_wrench, DragModel};
use salpgeo::gait::FourierGait;
use salpgeo::se2::{Pose, Twist};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_shape(rng: &mut ChaCha8Rng, model: &DragModel, fraction: f64) -> Vec<f64> {
    model.chain.joint_limits.iter().map(|&(lo, hi)| uniform(rng, lo * fraction, hi * fraction)).collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -scale, scale)).collect()
}

pub fn rot(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn trans(x: f64, y: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, x, 0.0, 1.0, y, 0.0, 0.0, 1.0)
}

pub fn hom(p: &Pose) -> Matrix3<f64> {
    trans(p.x, p.y) * rot(p.theta)
}

pub fn pose_of(m: &Matrix3<f64>) -> Pose {
    Pose::new(m[(0, 2)], m[(1, 2)], m[(1, 0)].atan2(m[(0, 0)]))
}

pub fn hat(xi: &[f64]) -> Matrix3<f64> {
    Matrix3::new(0.0, -xi[2], xi[0], xi[2], 0.0, xi[1], 0.0, 0.0, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> [f64; 3] {
    [m[(0, 2)], m[(1, 2)], m[(1, 0)]]
}

/// Link-center frames by chaining homogeneous transforms from link 1.
pub fn fk_links(length: f64, r: &[f64]) -> Vec<Matrix3<f64>> {
    let mut out = vec![Matrix3::identity()];
    for a in r {
        let prev = *out.last().unwrap();
        out.push(prev * trans(length / 2.0, 0.0) * rot(*a) * trans(length / 2.0, 0.0));
    }
    out
}

/// Body frame: mean link center and mean link angle.
pub fn fk_body(length: f64, r: &[f64]) -> Matrix3<f64> {
    let links = fk_links(length, r);
    let n = links.len() as f64;
    let x = links.iter().map(|m| m[(0, 2)]).sum::<f64>() / n;
    let y = links.iter().map(|m| m[(1, 2)]).sum::<f64>() / n;
    let (mut th, mut acc) = (0.0, 0.0);
    for a in r {
        acc += a;
        th += acc;
    }
    trans(x, y) * rot(th / n)
}

/// Wheel frame of unit `i` (1-based) in the body frame.
pub fn fk_wheel(length: f64, beta: &[f64], r: &[f64], i: usize) -> Matrix3<f64> {
    let b = fk_body(length, r);
    b.try_inverse().unwrap() * fk_links(length, r)[i - 1] * rot(beta[i - 1])
}

/// World wheel frame after moving along `zeta_dot` for `eps`, with the body
/// starting at the origin.
fn moved_wheel(model: &DragModel, r: &[f64], zeta_dot: &[f64], i: usize, eps: f64) -> Matrix3<f64> {
    let c = &model.chain;
    let g = exp_series(&hat(&zeta_dot[..3]), eps);
    let rr: Vec<f64> = r.iter().zip(&zeta_dot[3..]).map(|(a, d)| a + eps * d).collect();
    g * fk_wheel(c.link_length, &c.beta, &rr, i)
}

/// Matrix exponential by scaling, squaring and a long Taylor series.
pub fn exp_series(a: &Matrix3<f64>, t: f64) -> Matrix3<f64> {
    let m = a * t;
    let norm = m.abs().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = m / 2f64.powi(s);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..30 {
        term = term * x / k as f64;
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

/// Wheel-frame twist of unit `i` under configuration velocity `zeta_dot`, by
/// central differences of the wheel pose (step `1e-6`).
pub fn fd_wheel_twist(model: &DragModel, r: &[f64], zeta_dot: &[f64], i: usize) -> [f64; 3] {
    let h = 1e-6;
    let w0 = moved_wheel(model, r, zeta_dot, i, 0.0);
    let d = (moved_wheel(model, r, zeta_dot, i, h) - moved_wheel(model, r, zeta_dot, i, -h)) / (2.0 * h);
    vee(&(w0.try_inverse().unwrap() * d))
}

/// Same in the unit frame (wheel rotation removed).
pub fn fd_unit_twist(model: &DragModel, r: &[f64], zeta_dot: &[f64], i: usize) -> [f64; 3] {
    let w = fd_wheel_twist(model, r, zeta_dot, i);
    let b = model.chain.beta[i - 1];
    let (s, c) = b.sin_cos();
    [c * w[0] - s * w[1], s * w[0] + c * w[1], w[2]]
}

/// Generalized force (virtual work of every unit wrench and joint damper) at
/// configuration velocity `zeta_dot` under command `u`.
pub fn generalized_force(model: &DragModel, r: &[f64], zeta_dot: &[f64], u: &[f64]) -> DVector<f64> {
    let n = model.n_units();
    let dim = n + 2;
    let basis_twists: Vec<Vec<[f64; 3]>> = (0..dim)
        .map(|k| {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            (1..=n).map(|i| fd_wheel_twist(model, r, &e, i)).collect()
        })
        .collect();
    let mut f = DVector::zeros(dim);
    for i in 0..n {
        let mut xi = [0.0; 3];
        for k in 0..dim {
            for c in 0..3 {
                xi[c] += basis_twists[k][i][c] * zeta_dot[k];
            }
        }
        // a positive command pushes the wheel backwards along its rolling axis
        let w = unit_wrench(&model.metric.unit_blocks[i], &Twist::new(-u[i], 0.0, 0.0), &Twist::new(xi[0], xi[1], xi[2]), model.mode);
        let w = w.to_vector();
        for k in 0..dim {
            f[k] += (0..3).map(|c| w[c] * basis_twists[k][i][c]).sum::<f64>();
        }
    }
    for j in 0..n - 1 {
        f[3 + j] -= model.metric.joint_coeffs[j] * zeta_dot[3 + j];
    }
    f
}

/// `A u` by solving the assembled balance `F(zeta_dot) = 0`.
pub fn oracle_velocity(model: &DragModel, r: &[f64], u: &[f64]) -> DVector<f64> {
    let dim = model.n_units() + 2;
    let zero = vec![0.0; dim];
    let f0 = generalized_force(model, r, &zero, u);
    let mut k = DMatrix::zeros(dim, dim);
    let nu = vec![0.0; model.n_units()];
    for c in 0..dim {
        let mut e = zero.clone();
        e[c] = 1.0;
        k.set_column(c, &generalized_force(model, r, &e, &nu));
    }
    k.lu().solve(&(-f0)).unwrap()
}

/// One-cycle product integral of `zeta_dot = A(r) u(t)` by RK4 on the
/// homogeneous pose matrix and the shape.
pub fn product_integral(model: &DragModel, r0: &[f64], gait: &FourierGait, steps: usize) -> (Pose, Vec<f64>) {
    let period = gait.period();
    let dt = period / steps as f64;
    let nj = r0.len();
    let rhs = |t: f64, g: &Matrix3<f64>, r: &[f64]| -> (Matrix3<f64>, Vec<f64>) {
        let a = model.control_field(r).unwrap().a;
        let z = a * DVector::from_vec(gait.evaluate(t));
        (g * hat(&[z[0], z[1], z[2]]), (0..nj).map(|j| z[3 + j]).collect())
    };
    let add = |r: &[f64], d: &[f64], s: f64| -> Vec<f64> { r.iter().zip(d).map(|(a, b)| a + s * b).collect() };
    let mut g = Matrix3::identity();
    let mut r = r0.to_vec();
    for k in 0..steps {
        let t = k as f64 * dt;
        let (g1, r1) = rhs(t, &g, &r);
        let (g2, r2) = rhs(t + dt / 2.0, &(g + g1 * (dt / 2.0)), &add(&r, &r1, dt / 2.0));
        let (g3, r3) = rhs(t + dt / 2.0, &(g + g2 * (dt / 2.0)), &add(&r, &r2, dt / 2.0));
        let (g4, r4) = rhs(t + dt, &(g + g3 * dt), &add(&r, &r3, dt));
        g += (g1 + g2 * 2.0 + g3 * 2.0 + g4) * (dt / 6.0);
        for j in 0..nj {
            r[j] += dt / 6.0 * (r1[j] + 2.0 * r2[j] + 2.0 * r3[j] + r4[j]);
        }
    }
    (pose_of(&g), r)
}

/// Matrix logarithm of a planar rigid motion, from the closed form of the
/// inverse of `V(theta)`.
pub fn log_oracle(p: &Pose) -> [f64; 3] {
    let th = p.theta;
    if th.abs() < 1e-9 {
        return [p.x, p.y, th];
    }
    let a = th.sin() / th;
    let b = (1.0 - th.cos()) / th;
    let det = a * a + b * b;
    [(a * p.x + b * p.y) / det, (-b * p.x + a * p.y) / det, th]
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

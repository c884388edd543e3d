//! Resampling, zero-phase low-pass filtering and group differentiation of
//! recorded trajectories.

use std::f64::consts::{PI, SQRT_2};

use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::se2::{group_diff, Pose, Twist};

/// Default filter cutoff as a multiple of the gait frequency.
pub const CUTOFF_PER_GAIT_FREQUENCY: f64 = 6.0;

fn grid_len(n: usize, from_rate: f64, to_rate: f64) -> Result<usize> {
    if !(from_rate > 0.0) || !(to_rate > 0.0) {
        return Err(Error::InvalidArgument("rates must be positive".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let duration = (n - 1) as f64 / from_rate;
    Ok((duration * to_rate * (1.0 + 1e-12)).floor() as usize + 1)
}

/// Position of output sample `k` in input-index units, split into `(i, frac)`.
fn locate(k: usize, n: usize, from_rate: f64, to_rate: f64) -> (usize, f64) {
    let x = k as f64 * from_rate / to_rate;
    let i = (x.floor() as usize).min(n - 2);
    (i, (x - i as f64).min(1.0))
}

/// Linear interpolation of a uniformly sampled scalar stream onto a new rate.
pub fn resample(x: &[f64], from_rate: f64, to_rate: f64) -> Result<Vec<f64>> {
    let m = grid_len(x.len(), from_rate, to_rate)?;
    Ok((0..m)
        .map(|k| {
            let (i, f) = locate(k, x.len(), from_rate, to_rate);
            if f == 0.0 {
                x[i]
            } else {
                x[i] + f * (x[i + 1] - x[i])
            }
        })
        .collect())
}

/// Geodesic interpolation `g_a exp(f log(g_a^-1 g_b))` of a pose stream.
pub fn resample_poses(p: &[Pose], from_rate: f64, to_rate: f64) -> Result<Vec<Pose>> {
    let m = grid_len(p.len(), from_rate, to_rate)?;
    Ok((0..m)
        .map(|k| {
            let (i, f) = locate(k, p.len(), from_rate, to_rate);
            if f == 0.0 {
                p[i]
            } else {
                p[i].compose(&Pose::exp(&p[i].between(&p[i + 1]).log(), f))
            }
        })
        .collect())
}

/// All streams of a dataset onto a new uniform rate.
pub fn resample_dataset(ds: &TrajectoryDataset, to_rate: f64) -> Result<TrajectoryDataset> {
    ds.validate()?;
    let from = ds.rate;
    let columns = |rows: &[Vec<f64>], width: usize| -> Result<Vec<Vec<f64>>> {
        let cols: Vec<Vec<f64>> = (0..width)
            .map(|c| resample(&rows.iter().map(|r| r[c]).collect::<Vec<_>>(), from, to_rate))
            .collect::<Result<_>>()?;
        let m = cols.first().map_or(0, Vec::len);
        Ok((0..m).map(|k| cols.iter().map(|col| col[k]).collect()).collect())
    };
    let poses = resample_poses(&ds.poses, from, to_rate)?;
    let m = poses.len();
    let n = ds.n_units();
    let mut shapes = columns(&ds.shapes, n - 1)?;
    if n == 1 || shapes.is_empty() {
        shapes = vec![vec![]; m];
    }
    Ok(TrajectoryDataset {
        rate: to_rate,
        t: (0..m).map(|k| ds.t[0] + k as f64 / to_rate).collect(),
        poses,
        shapes,
        commands: columns(&ds.commands, n)?,
        forces: columns(&ds.forces, n)?,
    })
}

/// Second-order Butterworth section coefficients `(b0, b1, b2, a1, a2)`.
fn butterworth(cutoff: f64, rate: f64) -> (f64, f64, f64, f64, f64) {
    let k = (PI * cutoff / rate).tan();
    let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
    let b0 = k * k * norm;
    (b0, 2.0 * b0, b0, 2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm)
}

/// Direct form II transposed, started in steady state at the first value.
fn biquad(x: &[f64], c: (f64, f64, f64, f64, f64)) -> Vec<f64> {
    let (b0, b1, b2, a1, a2) = c;
    let x0 = x.first().copied().unwrap_or(0.0);
    let mut z2 = (b2 - a2) * x0;
    let mut z1 = (b1 - a1 + b2 - a2) * x0;
    x.iter()
        .map(|&v| {
            let y = b0 * v + z1;
            z1 = b1 * v - a1 * y + z2;
            z2 = b2 * v - a2 * y;
            y
        })
        .collect()
}

/// Zero-phase second-order low-pass (forward and backward), with odd
/// reflection padding of three filter time constants at each end.
pub fn lowpass(x: &[f64], cutoff: f64, rate: f64) -> Result<Vec<f64>> {
    if !(cutoff > 0.0) || !(cutoff < rate / 2.0) {
        return Err(Error::InvalidArgument(format!("cutoff {cutoff} Hz must lie in (0, {}) Hz", rate / 2.0)));
    }
    let n = x.len();
    if n < 2 {
        return Ok(x.to_vec());
    }
    let tau = 1.0 / (2.0 * PI * cutoff);
    let pad = ((3.0 * tau * rate).ceil() as usize).max(6).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let c = butterworth(cutoff, rate);
    let mut y = biquad(&ext, c);
    y.reverse();
    let mut y = biquad(&y, c);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Lagrange weights of four nodes at `xs` evaluated at `x`.
fn lagrange4(xs: [f64; 4], x: f64) -> [f64; 4] {
    let mut w = [1.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                w[i] *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
    }
    w
}

/// Interval means (one per gap) to point values at the sample times.
///
/// The mean over an interval equals the midpoint value plus `h^2 v'' / 24`;
/// that term is removed with the second difference of the means before
/// cubic interpolation from the midpoints back to the samples.
fn midpoints_to_samples(means: &[f64]) -> Vec<f64> {
    let m = means.len();
    if m == 1 {
        return vec![means[0]; 2];
    }
    let mid: Vec<f64> = if m >= 3 {
        let d2 = |c: usize| means[c + 1] - 2.0 * means[c] + means[c - 1];
        (0..m)
            .map(|k| {
                // end intervals extrapolate the second difference linearly
                let corr = match k {
                    0 if m >= 4 => 2.0 * d2(1) - d2(2),
                    k if k == m - 1 && m >= 4 => 2.0 * d2(m - 2) - d2(m - 3),
                    k => d2(k.clamp(1, m - 2)),
                };
                means[k] - corr / 24.0
            })
            .collect()
    } else {
        means.to_vec()
    };
    if m < 4 {
        // linear fallback for very short records
        return (0..=m)
            .map(|i| {
                if i == 0 {
                    1.5 * mid[0] - 0.5 * mid[1.min(m - 1)]
                } else if i == m {
                    1.5 * mid[m - 1] - 0.5 * mid[m - 2]
                } else {
                    0.5 * (mid[i - 1] + mid[i])
                }
            })
            .collect();
    }
    // midpoint k sits at k + 1/2, sample i at i
    (0..=m)
        .map(|i| {
            let s = (i as isize - 2).clamp(0, m as isize - 4) as usize;
            let xs = [s as f64 + 0.5, s as f64 + 1.5, s as f64 + 2.5, s as f64 + 3.5];
            let w = lagrange4(xs, i as f64);
            (0..4).map(|q| w[q] * mid[s + q]).sum()
        })
        .collect()
}

/// Body and shape velocities at the sample times.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocities {
    pub xi: Vec<Twist>,
    pub alpha_dot: Vec<Vec<f64>>,
}

impl Velocities {
    /// `[xi; alpha_dot]` at sample `k`.
    pub fn zeta_dot(&self, k: usize) -> Vec<f64> {
        let mut v = vec![self.xi[k].vx, self.xi[k].vy, self.xi[k].omega];
        v.extend_from_slice(&self.alpha_dot[k]);
        v
    }
}

/// Lie-group differentiation of the poses and finite differences of the
/// joint angles, both evaluated on interval midpoints and mapped back to the
/// sample times.
pub fn differentiate(ds: &TrajectoryDataset) -> Result<Velocities> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let dt = 1.0 / ds.rate;
    let tw = group_diff(&ds.poses, dt)?;
    let comp = |f: &dyn Fn(&Twist) -> f64| midpoints_to_samples(&tw.iter().map(f).collect::<Vec<_>>());
    let (vx, vy, om) = (comp(&|t| t.vx), comp(&|t| t.vy), comp(&|t| t.omega));
    let nj = ds.shapes[0].len();
    let joint: Vec<Vec<f64>> = (0..nj)
        .map(|j| {
            let d: Vec<f64> = ds.shapes.windows(2).map(|w| (w[1][j] - w[0][j]) / dt).collect();
            midpoints_to_samples(&d)
        })
        .collect();
    Ok(Velocities {
        xi: (0..n).map(|k| Twist::new(vx[k], vy[k], om[k])).collect(),
        alpha_dot: (0..n).map(|k| joint.iter().map(|c| c[k]).collect()).collect(),
    })
}

//! Fourier-series gaits.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `u(t) = u_bar + sum_k (a_sin[k] sin(2 pi k w t) + a_cos[k] cos(2 pi k w t))`,
/// with `omega` the base frequency in Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierGait {
    pub u_bar: Vec<f64>,
    pub a_sin: Vec<Vec<f64>>,
    pub a_cos: Vec<Vec<f64>>,
    pub omega: f64,
}

impl FourierGait {
    pub fn zero(n_units: usize, order: usize, omega: f64) -> Self {
        Self {
            u_bar: vec![0.0; n_units],
            a_sin: vec![vec![0.0; n_units]; order],
            a_cos: vec![vec![0.0; n_units]; order],
            omega,
        }
    }

    pub fn n_units(&self) -> usize {
        self.u_bar.len()
    }

    pub fn order(&self) -> usize {
        self.a_sin.len()
    }

    pub fn period(&self) -> f64 {
        1.0 / self.omega
    }

    /// Length of the flattened parameter vector.
    pub fn n_params(&self) -> usize {
        self.n_units() * (1 + 2 * self.order())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_units();
        if self.order() == 0 || self.a_cos.len() != self.order() {
            return Err(Error::InvalidArgument("gait needs matching sine/cosine harmonics, order >= 1".into()));
        }
        if self.a_sin.iter().chain(&self.a_cos).any(|h| h.len() != n) {
            return Err(Error::DimensionMismatch("harmonic amplitude length differs from unit count".into()));
        }
        if !(self.omega > 0.0) {
            return Err(Error::InvalidArgument("gait frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut u = self.u_bar.clone();
        for k in 0..self.order() {
            let ph = 2.0 * PI * (k + 1) as f64 * self.omega * t;
            let (s, c) = ph.sin_cos();
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += self.a_sin[k][i] * s + self.a_cos[k][i] * c;
            }
        }
        u
    }

    /// Parameters flattened as `[u_bar, A_sin_1, A_cos_1, A_sin_2, ...]`.
    pub fn to_params(&self) -> DVector<f64> {
        let mut v = self.u_bar.clone();
        for k in 0..self.order() {
            v.extend_from_slice(&self.a_sin[k]);
            v.extend_from_slice(&self.a_cos[k]);
        }
        DVector::from_vec(v)
    }

    pub fn from_params(n_units: usize, omega: f64, p: &[f64]) -> Result<Self> {
        if n_units == 0 || p.len() % n_units != 0 || (p.len() / n_units) % 2 != 1 || p.len() < 3 * n_units {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters do not form a gait for {n_units} units",
                p.len()
            )));
        }
        let order = (p.len() / n_units - 1) / 2;
        let chunk = |b: usize| p[b * n_units..(b + 1) * n_units].to_vec();
        Ok(Self {
            u_bar: chunk(0),
            a_sin: (0..order).map(|k| chunk(1 + 2 * k)).collect(),
            a_cos: (0..order).map(|k| chunk(2 + 2 * k)).collect(),
            omega,
        })
    }

    /// Opposite-direction counterpart `(-u_bar, A_sin, -A_cos)`: the command
    /// `-u(-t)`, which reverses every averaged velocity.
    pub fn reflected(&self) -> Self {
        Self {
            u_bar: self.u_bar.iter().map(|v| -v).collect(),
            a_sin: self.a_sin.clone(),
            a_cos: self.a_cos.iter().map(|h| h.iter().map(|v| -v).collect()).collect(),
            omega: self.omega,
        }
    }

    /// The gait started `dt` seconds later: `u'(t) = u(t + dt)`.
    pub fn time_shifted(&self, dt: f64) -> Self {
        let mut out = self.clone();
        for k in 0..self.order() {
            let ph = 2.0 * PI * (k + 1) as f64 * self.omega * dt;
            let (s, c) = ph.sin_cos();
            for i in 0..self.n_units() {
                let (a, b) = (self.a_sin[k][i], self.a_cos[k][i]);
                out.a_sin[k][i] = a * c - b * s;
                out.a_cos[k][i] = a * s + b * c;
            }
        }
        out
    }

    /// Largest `|u_i(t)|` per unit over `phases` uniformly spaced samples.
    pub fn peak_command(&self, phases: usize) -> Vec<f64> {
        let mut peak = vec![0.0f64; self.n_units()];
        for s in 0..phases {
            let u = self.evaluate(s as f64 / phases as f64 * self.period());
            for (p, v) in peak.iter_mut().zip(u) {
                *p = p.max(v.abs());
            }
        }
        peak
    }
}

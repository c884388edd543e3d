//! Cycle-discrete LQR about a nominal shape and gait.
//!
//! Error: `e = (log(g^-1 g_d), r_d - r)`. About the plan, the averaged error
//! obeys `e_dot = F e - G dTheta` with
//! `F = [[-ad(xi_d), dv/dr], [0, ds/dr]]` and `G = d(A_aug u_aug)/dTheta`,
//! discretized over one period as `e+ = A_d e - B_d dTheta`,
//! `A_d = exp(F T)`, `B_d = int_0^T exp(F s) ds G`.
//! The update is `Theta = Theta_0 - K e`, so `K` is the regulator gain of the
//! pair `(A_d, -B_d)` and the closed loop is `A_d + B_d K`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::averaging::augmented_system;
use crate::drag::DragModel;
use crate::error::{Error, Result};
use crate::gait::FourierGait;
use crate::linalg::{dare, exp_and_integral, spectral_radius};
use crate::planning::GaitPlan;
use crate::se2::{Pose, Twist};

/// Central-difference step for shape derivatives of the averaged velocity.
const LIN_STEP: f64 = 1e-4;

/// Phases checked by the actuator-limit scaling.
pub const SATURATION_PHASES: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Error sampled at the start of each cycle.
    #[default]
    Initial,
    /// Mean error over the previous cycle.
    Integrated,
}

impl std::str::FromStr for FeedbackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(Self::Initial),
            "integrated" => Ok(Self::Integrated),
            other => Err(Error::Parse(format!("unknown feedback mode '{other}' (initial|integrated)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorState {
    pub delta_g: Twist,
    pub delta_r: Vec<f64>,
}

impl ErrorState {
    pub fn zero(n_joints: usize) -> Self {
        Self { delta_g: Twist::zero(), delta_r: vec![0.0; n_joints] }
    }

    /// Error of actual `(g, r)` against desired `(g_d, r_d)`.
    pub fn between(g: &Pose, g_desired: &Pose, r: &[f64], r_desired: &[f64]) -> Self {
        Self {
            delta_g: g.between(g_desired).log(),
            delta_r: r_desired.iter().zip(r).map(|(d, a)| d - a).collect(),
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { delta_g: Twist::from_slice(&v[..3]), delta_r: v[3..].to_vec() }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = vec![self.delta_g.vx, self.delta_g.vy, self.delta_g.omega];
        v.extend_from_slice(&self.delta_r);
        DVector::from_vec(v)
    }
}

/// Matrix of `eta -> [xi, eta]`.
fn ad_of(xi: &Twist) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(3, 3);
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let b = xi.bracket(&Twist::from_slice(&e));
        m[(0, c)] = b.vx;
        m[(1, c)] = b.vy;
        m[(2, c)] = b.omega;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub period: f64,
}

/// Linearizes the averaged error dynamics about a plan's nominal shape and
/// parameters and discretizes over one period.
pub fn linearize(model: &DragModel, plan: &GaitPlan) -> Result<Linearization> {
    let omega = plan.gait.omega;
    let theta = plan.gait.to_params();
    let avg = augmented_system(model, &plan.nominal, omega)?;
    let (v0, g) = avg.velocity_and_jacobian(theta.as_slice());
    let nj = plan.nominal.len();
    let dim = 3 + nj;
    let mut f = DMatrix::zeros(dim, dim);
    let xi_d = Twist::new(v0[0], v0[1], v0[2]);
    f.view_mut((0, 0), (3, 3)).copy_from(&(-ad_of(&xi_d)));
    for m in 0..nj {
        let mut rp = plan.nominal.clone();
        let mut rm = plan.nominal.clone();
        rp[m] += LIN_STEP;
        rm[m] -= LIN_STEP;
        let vp = augmented_system(model, &rp, omega)?.velocity_from_params(theta.as_slice());
        let vm = augmented_system(model, &rm, omega)?.velocity_from_params(theta.as_slice());
        // r = r_d - e_r, so e_dot = v_d - v(r) picks up +dv/dr e_r
        let col = (vp - vm) / (2.0 * LIN_STEP);
        f.view_mut((0, 3 + m), (dim, 1)).copy_from(&col);
    }
    let period = plan.gait.period();
    let (a_d, integral) = exp_and_integral(&f, period);
    let b_d = integral * &g;
    Ok(Linearization { f, g, a_d, b_d, period })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackWeights {
    /// Diagonal of the state penalty: `(x, y, theta, alpha_1, ...)`.
    pub q_diag: Vec<f64>,
    /// Multiplier on the plan's cost form used as the input penalty.
    pub r_scale: f64,
}

impl FeedbackWeights {
    pub fn default_for(n_joints: usize) -> Self {
        let mut q = vec![1.0, 1.0, 1.0];
        q.extend(std::iter::repeat_n(4.0, n_joints));
        Self { q_diag: q, r_scale: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLaw {
    pub theta0: Vec<f64>,
    /// `n_params x (3 + n_joints)`.
    pub k: DMatrix<f64>,
    pub period: f64,
    pub omega: f64,
    pub n_units: usize,
    pub mode: FeedbackMode,
    pub q: DMatrix<f64>,
    pub r_in: DMatrix<f64>,
    /// Desired per-second velocity `[xi; alpha_dot]`.
    pub desired: Vec<f64>,
    pub nominal: Vec<f64>,
    pub start_shape: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Cycle-mean error of the undisturbed nominal cycle; integrated-mode
    /// errors are measured relative to it.
    pub integrated_reference: Vec<f64>,
    pub closed_loop_radius: f64,
    pub linearization: Linearization,
}

pub fn lqr_gain(a_d: &DMatrix<f64>, b_d: &DMatrix<f64>, q: &DMatrix<f64>, r_in: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, k) = dare(a_d, &(-b_d), q, r_in, 100_000)?;
    Ok(k)
}

/// Builds the law for a plan. `r_in` defaults to the plan's cost form.
pub fn synthesize(
    model: &DragModel,
    plan: &GaitPlan,
    r_cost: &DMatrix<f64>,
    weights: &FeedbackWeights,
    mode: FeedbackMode,
) -> Result<FeedbackLaw> {
    let lin = linearize(model, plan)?;
    let dim = lin.a_d.nrows();
    if weights.q_diag.len() != dim {
        return Err(Error::DimensionMismatch(format!("state weight needs {dim} entries, got {}", weights.q_diag.len())));
    }
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&weights.q_diag));
    let r_in = r_cost * weights.r_scale;
    let k = lqr_gain(&lin.a_d, &lin.b_d, &q, &r_in)?;
    let closed = &lin.a_d + &lin.b_d * &k;
    let radius = spectral_radius(&closed);
    if !(radius < 1.0) {
        return Err(Error::NotStabilizable(format!("closed-loop spectral radius {radius:.4}")));
    }
    let mut law = FeedbackLaw {
        theta0: plan.gait.to_params().as_slice().to_vec(),
        k,
        period: plan.gait.period(),
        omega: plan.gait.omega,
        n_units: model.n_units(),
        mode,
        q,
        r_in,
        desired: plan.desired.to_vector().as_slice().to_vec(),
        nominal: plan.nominal.clone(),
        start_shape: plan.start_shape.clone(),
        u_max: model.chain.u_max.clone(),
        integrated_reference: vec![0.0; dim],
        closed_loop_radius: radius,
        linearization: lin,
    };
    if mode == FeedbackMode::Integrated {
        law.integrated_reference = nominal_mean_error(model, &law, &plan.gait)?;
    }
    Ok(law)
}

/// Cycle-mean error of one undisturbed cycle (trapezoid rule over steps).
fn nominal_mean_error(model: &DragModel, law: &FeedbackLaw, gait: &FourierGait) -> Result<Vec<f64>> {
    let steps = crate::sim::STEPS_PER_PERIOD;
    let dt = law.period / steps as f64;
    let nj = law.nominal.len();
    let mut acc = vec![0.0; 3 + nj];
    let mut prev = ErrorState::zero(nj).to_vector();
    let s0 = crate::sim::SimState::at_shape(law.start_shape.clone());
    let origin = Pose::identity();
    let first = {
        let (gd, rd) = law.desired_at(&origin, 0.0);
        ErrorState::between(&s0.pose, &gd, &s0.shape, &rd).to_vector()
    };
    prev.copy_from(&first);
    crate::sim::integrate(model, &s0, &|t| gait.evaluate(t), steps, dt, &[], &mut |s| {
        let (gd, rd) = law.desired_at(&origin, s.t);
        let e = ErrorState::between(&s.pose, &gd, &s.shape, &rd).to_vector();
        for i in 0..acc.len() {
            acc[i] += 0.5 * (prev[i] + e[i]) / steps as f64;
        }
        prev = e;
    })?;
    Ok(acc)
}

impl FeedbackLaw {
    pub fn n_params(&self) -> usize {
        self.theta0.len()
    }

    /// Desired pose and shape `t` seconds after a run started at `origin`.
    pub fn desired_at(&self, origin: &Pose, t: f64) -> (Pose, Vec<f64>) {
        let xi = Twist::from_slice(&self.desired[..3]);
        let g = origin.compose(&Pose::exp(&xi, t));
        let r = self.start_shape.iter().zip(&self.desired[3..]).map(|(r0, rd)| r0 + rd * t).collect();
        (g, r)
    }

    /// Parameters for the next cycle: `Theta_0 - K e`, then limited.
    pub fn update(&self, e: &ErrorState) -> FourierGait {
        let ev = e.to_vector();
        let theta = DVector::from_column_slice(&self.theta0) - &self.k * ev;
        let gait = FourierGait::from_params(self.n_units, self.omega, theta.as_slice())
            .expect("gain dimensions match the parameter vector");
        self.saturate(&gait)
    }

    /// Enforces actuator limits: `u_bar` is scaled uniformly if any entry
    /// exceeds its limit, then the oscillatory amplitudes are scaled by the
    /// largest factor keeping `|u_i(t)| <= u_max_i` at sampled phases.
    pub fn saturate(&self, gait: &FourierGait) -> FourierGait {
        saturate_gait(gait, &self.u_max, SATURATION_PHASES)
    }
}

pub fn saturate_gait(gait: &FourierGait, u_max: &[f64], phases: usize) -> FourierGait {
    let mut out = gait.clone();
    let over = out.u_bar.iter().zip(u_max).map(|(u, m)| u.abs() / m).fold(0.0, f64::max);
    if over > 1.0 {
        // a little headroom leaves room for oscillation
        let s = 0.99 / over;
        out.u_bar.iter_mut().for_each(|u| *u *= s);
    }
    let fits = |g: &FourierGait| g.peak_command(phases).iter().zip(u_max).all(|(p, m)| *p <= *m);
    if fits(&out) {
        return out;
    }
    let scaled = |s: f64| -> FourierGait {
        let mut g = out.clone();
        for h in g.a_sin.iter_mut().chain(g.a_cos.iter_mut()) {
            h.iter_mut().for_each(|v| *v *= s);
        }
        g
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if fits(&scaled(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    scaled(lo)
}

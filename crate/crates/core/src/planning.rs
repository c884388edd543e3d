//! Minimum-cost gait synthesis.
//!
//! `min Theta' R Theta  s.t.  A_aug u_aug(Theta) = zeta_dot_desired`, solved by
//! Newton-KKT steps on the averaged model, then corrected against the full
//! simulation. The shape-averaged variant adds the initial shape as a decision
//! variable and pins the cycle-mean shape to the nominal one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{bracket_coefficient_hessians, AveragedSystem};
use crate::chain::ConfigVelocity;
use crate::drag::{CommandMode, DragModel};
use crate::error::{Error, Result};
use crate::gait::FourierGait;
use crate::linalg::{eigen_floor, symmetrize};
use crate::sim::{cycle_map, CycleResult, STEPS_PER_PERIOD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Mean squared command, normalized by the actuator limits.
    #[default]
    Velocity,
    /// Mean dissipated power.
    Power,
    /// Mean squared thrust.
    Force,
}

impl std::str::FromStr for CostKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "velocity" => Ok(Self::Velocity),
            "power" => Ok(Self::Power),
            "force" => Ok(Self::Force),
            other => Err(Error::Parse(format!("unknown cost kind '{other}' (velocity|power|force)"))),
        }
    }
}

/// Eigenvalue floor applied to the symmetrized power form.
pub const POWER_EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMetric {
    pub kind: CostKind,
    /// Instantaneous form on `u`.
    pub r_u: DMatrix<f64>,
    /// Form on the flattened parameters: `diag(R_u, R_u/2, R_u/2, ...)`.
    pub r: DMatrix<f64>,
    pub order: usize,
}

impl CostMetric {
    pub fn from_instantaneous(kind: CostKind, r_u: DMatrix<f64>, order: usize) -> Self {
        let n = r_u.nrows();
        let mut r = DMatrix::zeros(n * (1 + 2 * order), n * (1 + 2 * order));
        r.view_mut((0, 0), (n, n)).copy_from(&r_u);
        for b in 1..=2 * order {
            r.view_mut((b * n, b * n), (n, n)).copy_from(&(&r_u * 0.5));
        }
        Self { kind, r_u, r, order }
    }

    pub fn cost(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        t.dot(&(&self.r * &t))
    }
}

/// Cost form at a nominal shape. The power form `-J_u' M J_zeta A` is
/// symmetrized and floored to be positive semidefinite.
pub fn build_cost(model: &DragModel, nominal: &[f64], kind: CostKind, order: usize) -> Result<CostMetric> {
    if order == 0 {
        return Err(Error::InvalidArgument("harmonic order must be at least 1".into()));
    }
    let n = model.n_units();
    let r_u = match kind {
        CostKind::Velocity => DMatrix::from_fn(n, n, |i, j| if i == j { model.chain.u_max[i].powi(-2) } else { 0.0 }),
        CostKind::Power => {
            let (jz, ju) = model.chain.aggregate_jacobians(nominal);
            let m = model.metric.aggregate();
            let a = model.control_field(nominal)?.a;
            let raw = match model.mode {
                CommandMode::Velocity => -(ju.transpose() * &m * jz * a),
                // force mode: power is u' (J_u' J_zeta A u) with the opposite sign convention
                CommandMode::Force => -(ju.transpose() * jz * a),
            };
            eigen_floor(&symmetrize(&raw), POWER_EIGEN_FLOOR)
        }
        CostKind::Force => {
            let (_, ju) = model.chain.aggregate_jacobians(nominal);
            let m = model.metric.aggregate();
            let mu = &m * &ju;
            mu.transpose() * mu
        }
    };
    Ok(CostMetric::from_instantaneous(kind, r_u, order))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitPlan {
    pub gait: FourierGait,
    /// Shape about which the averaged model was frozen.
    pub nominal: Vec<f64>,
    /// Shape at the start of each cycle (equals `nominal` unless shape-averaged).
    pub start_shape: Vec<f64>,
    pub desired: ConfigVelocity,
    /// Velocity predicted by the averaged model.
    pub achieved_average: ConfigVelocity,
    pub cost: f64,
    pub cost_kind: CostKind,
    /// True once corrected against the full simulation.
    pub refined: bool,
    /// Constraint violation of the last solve (velocity units for averaged
    /// solves, per-cycle displacement for refined ones).
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub within_limits: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub constraint_tol: f64,
    /// Per-cycle displacement tolerance of the full-system correction.
    pub refine_tol: f64,
    pub refine_max_iter: usize,
    pub steps_per_period: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            kkt_tol: 1e-8,
            constraint_tol: 1e-10,
            refine_tol: 1e-6,
            refine_max_iter: 30,
            steps_per_period: STEPS_PER_PERIOD,
        }
    }
}

struct SqpOutcome {
    theta: DVector<f64>,
    converged: bool,
    iterations: usize,
    residual: f64,
}

/// Newton-KKT iteration with an l1 merit function and Armijo backtracking.
fn sqp(avg: &AveragedSystem, r: &DMatrix<f64>, desired: &DVector<f64>, start: DVector<f64>, opts: &SolverOptions) -> SqpOutcome {
    let np = start.len();
    let m = desired.len();
    let n = avg.n_units;
    let scale = 1.0 / (2.0 * std::f64::consts::PI * avg.omega);
    let hess_u = bracket_coefficient_hessians(n, np);
    let brackets = avg.brackets();
    let merit = |t: &DVector<f64>, rho: f64| -> f64 {
        let c = avg.velocity_from_params(t.as_slice()) - desired;
        t.dot(&(r * t)) + rho * c.lp_norm(1)
    };
    let mut theta = start;
    let mut rho = 0.0f64;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for it in 0..opts.max_iter {
        let (c, jac) = avg.velocity_and_jacobian(theta.as_slice());
        let res = &c - desired;
        let grad = (r * &theta) * 2.0;
        // least-squares multipliers for the stopping test
        let jjt = &jac * jac.transpose();
        let lam = jjt.clone().svd(true, true).solve(&(-(&jac * &grad)), 1e-14).unwrap_or_else(|_| DVector::zeros(m));
        let kkt = (&grad + jac.transpose() * &lam).amax();
        let res_norm = res.amax();
        if res_norm <= opts.constraint_tol {
            let f = theta.dot(&(r * &theta));
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, theta.clone()));
            }
        }
        if kkt <= opts.kkt_tol && res_norm <= opts.constraint_tol {
            return SqpOutcome { theta, converged: true, iterations: it, residual: res_norm };
        }
        // Lagrangian Hessian: 2R + sum_m lam_m d2 c_m
        let mut h = r * 2.0;
        let w = brackets.transpose() * &lam * scale;
        for (p, hp) in hess_u.iter().enumerate() {
            h += hp * w[p];
        }
        // regularize until the reduced Hessian is positive definite
        let jtj = jac.transpose() * &jac;
        let hmax = h.amax().max(1e-12);
        let pen = 100.0 * hmax / jtj.amax().max(1e-300);
        let mut mu = 0.0;
        for _ in 0..60 {
            let trial = &h + DMatrix::identity(np, np) * mu + &jtj * pen;
            if symmetrize(&trial).cholesky().is_some() {
                break;
            }
            mu = if mu == 0.0 { 1e-6 * hmax } else { mu * 4.0 };
        }
        h += DMatrix::identity(np, np) * mu;
        let mut kmat = DMatrix::zeros(np + m, np + m);
        kmat.view_mut((0, 0), (np, np)).copy_from(&h);
        kmat.view_mut((0, np), (np, m)).copy_from(&jac.transpose());
        kmat.view_mut((np, 0), (m, np)).copy_from(&jac);
        let mut rhs = DVector::zeros(np + m);
        rhs.rows_mut(0, np).copy_from(&(-&grad));
        rhs.rows_mut(np, m).copy_from(&(-&res));
        let Some(sol) = kmat.clone().lu().solve(&rhs).or_else(|| kmat.svd(true, true).solve(&rhs, 1e-14).ok()) else {
            break;
        };
        let step = sol.rows(0, np).into_owned();
        let lam_new = sol.rows(np, m).into_owned();
        rho = rho.max(2.0 * lam_new.amax()).max(1e-12);
        let phi0 = merit(&theta, rho);
        let dphi = grad.dot(&step) - rho * res.lp_norm(1);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &theta + &step * alpha;
            if merit(&trial, rho) <= phi0 + 1e-4 * alpha * dphi.min(0.0) {
                theta = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // accept the full step anyway; the merit can stall near convergence
            theta += &step;
        }
    }
    let (c, _) = avg.velocity_and_jacobian(theta.as_slice());
    let residual = (&c - desired).amax();
    let theta = match best {
        Some((_, b)) if residual > opts.constraint_tol => b,
        _ => theta,
    };
    let residual = (avg.velocity_from_params(theta.as_slice()) - desired).amax();
    SqpOutcome { theta, converged: false, iterations: opts.max_iter, residual }
}

/// Initial guesses: the oscillation-free least-norm solution when the target
/// lies in the range of the direct field, and a two-phase sinusoid built from
/// the least-norm augmented input.
pub fn warm_starts(avg: &AveragedSystem, cost: &CostMetric, desired: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = avg.n_units;
    let np = n * (1 + 2 * cost.order);
    let mut out = Vec::new();
    let r_u = &cost.r_u;
    let r_inv = match r_u.clone().try_inverse() {
        Some(v) => v,
        None => return vec![DVector::zeros(np)],
    };
    let weighted_min_norm = |a: &DMatrix<f64>, winv: &DMatrix<f64>| -> Option<DVector<f64>> {
        let g = a * winv * a.transpose();
        let y = g.svd(true, true).solve(desired, 1e-13).ok()?;
        Some(winv * a.transpose() * y)
    };

    let direct = avg.direct();
    if let Some(u) = weighted_min_norm(&direct, &r_inv) {
        if (&direct * &u - desired).amax() <= 1e-9 * desired.amax().max(1e-300) {
            let mut t = DVector::zeros(np);
            t.rows_mut(0, n).copy_from(&u);
            out.push(t);
        }
    }

    let nb = avg.a_aug.ncols() - n;
    let half = r_u * 0.5;
    let sq = crate::linalg::sym_apply(&half, |l| l.max(0.0).sqrt());
    let isq = crate::linalg::sym_apply(&half, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    let two_pi_w = 2.0 * std::f64::consts::PI * avg.omega;
    // first-harmonic amplitudes whose bivector (b a' - a b') / 2 carries the
    // bracket coefficients, at least whitened norm
    let amplitudes = |bracket_inputs: &[f64]| -> (DVector<f64>, DVector<f64>) {
        let mut wmat = DMatrix::zeros(n, n);
        for (p, &(i, j)) in crate::averaging::unit_pairs(n).iter().enumerate() {
            wmat[(i, j)] = bracket_inputs[p] * two_pi_w;
            wmat[(j, i)] = -bracket_inputs[p] * two_pi_w;
        }
        let wp = &sq * &wmat * &sq;
        let sigma = wp.clone().svd(false, false).singular_values.max();
        if !(sigma > 0.0) {
            return (DVector::zeros(n), DVector::zeros(n));
        }
        let eig = (-(&wp * &wp)).symmetric_eigen();
        let mut e1 = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        if e1[e1.iamax()] < 0.0 {
            e1 = -e1;
        }
        let ap = &e1 * (2.0 * sigma).sqrt();
        let bp = &wp * &ap * (2.0 / ap.norm_squared());
        (&isq * ap, &isq * bp)
    };
    let assemble = |u_bar: &DVector<f64>, bracket_inputs: &[f64]| -> DVector<f64> {
        let mut t = DVector::zeros(np);
        t.rows_mut(0, n).copy_from(u_bar);
        let (a, b) = amplitudes(bracket_inputs);
        t.rows_mut(n, n).copy_from(&a);
        t.rows_mut(2 * n, n).copy_from(&b);
        t
    };

    // least-norm augmented inputs, bracket inputs weighted at several levels
    let level = r_u.trace() / n as f64;
    for rel in [1.0, 1e-2, 1e2] {
        let mut winv = DMatrix::zeros(n + nb, n + nb);
        winv.view_mut((0, 0), (n, n)).copy_from(&r_inv);
        for p in 0..nb {
            winv[(n + p, n + p)] = 1.0 / (rel * level);
        }
        if let Some(uaug) = weighted_min_norm(&avg.a_aug, &winv) {
            let br: Vec<f64> = uaug.rows(n, nb).iter().copied().collect();
            out.push(assemble(&uaug.rows(0, n).into_owned(), &br));
        }
    }

    // direct least squares first, brackets for what remains
    let wd = &direct * crate::linalg::sym_apply(r_u, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    if let Ok(y) = wd.clone().svd(true, true).solve(desired, 1e-12) {
        let u_bar = crate::linalg::sym_apply(r_u, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 }) * y;
        let rest = desired - &direct * &u_bar;
        let br = avg.brackets();
        if let Ok(v) = br.clone().svd(true, true).solve(&rest, 1e-12) {
            out.push(assemble(&u_bar, v.as_slice()));
        }
    }
    if out.is_empty() {
        out.push(DVector::zeros(np));
    }
    out
}

fn check_reachable(avg: &AveragedSystem, desired: &DVector<f64>) -> Result<()> {
    let svd = avg.a_aug.clone().svd(true, true);
    let u = svd.solve(desired, 1e-10 * svd.singular_values.max()).map_err(|e| Error::SolverFailure(e.to_string()))?;
    let miss = (&avg.a_aug * u - desired).norm();
    if miss > 1e-9 * desired.norm().max(1e-300) {
        return Err(Error::Infeasible(format!(
            "augmented field has rank {} of {}; {:.3e} of the target lies outside its range",
            avg.rank(1e-10),
            avg.dim(),
            miss
        )));
    }
    Ok(())
}

/// Checks the peak command of a gait against the actuator limits.
pub fn check_actuator_limits(model: &DragModel, gait: &FourierGait) -> Result<()> {
    let peak = gait.peak_command(256);
    for (i, (&p, &lim)) in peak.iter().zip(&model.chain.u_max).enumerate() {
        if p > lim * (1.0 + 1e-9) {
            return Err(Error::Infeasible(format!(
                "unit {} would need {:.4} m/s, limit {:.4} m/s",
                i + 1,
                p,
                lim
            )));
        }
    }
    Ok(())
}

/// Solves the averaged problem. Returns the best iterate with
/// `converged = false` when the iteration cap is hit.
pub fn solve_averaged(avg: &AveragedSystem, cost: &CostMetric, desired: &ConfigVelocity, opts: &SolverOptions) -> Result<GaitPlan> {
    let d = desired.to_vector();
    if d.len() != avg.dim() {
        return Err(Error::DimensionMismatch(format!("desired velocity has {} entries, expected {}", d.len(), avg.dim())));
    }
    if cost.r_u.nrows() != avg.n_units {
        return Err(Error::DimensionMismatch("cost and averaged system unit counts differ".into()));
    }
    let np = avg.n_units * (1 + 2 * cost.order);
    let (theta, converged, iterations, residual) = if d.amax() == 0.0 {
        (DVector::zeros(np), true, 0, 0.0)
    } else {
        check_reachable(avg, &d)?;
        let mut best: Option<SqpOutcome> = None;
        for start in warm_starts(avg, cost, &d) {
            let out = sqp(avg, &cost.r, &d, start, opts);
            let better = match &best {
                None => true,
                Some(b) => {
                    (out.converged && !b.converged)
                        || (out.converged == b.converged && cost.cost(out.theta.as_slice()) < cost.cost(b.theta.as_slice()))
                }
            };
            if better {
                best = Some(out);
            }
        }
        let b = best.expect("at least one warm start");
        (b.theta, b.converged, b.iterations, b.residual)
    };
    let gait = FourierGait::from_params(avg.n_units, avg.omega, theta.as_slice())?;
    Ok(GaitPlan {
        achieved_average: avg.average_velocity(&gait),
        cost: cost.cost(theta.as_slice()),
        cost_kind: cost.kind,
        gait,
        nominal: avg.nominal.clone(),
        start_shape: avg.nominal.clone(),
        desired: desired.clone(),
        refined: false,
        residual,
        converged,
        iterations,
        within_limits: true,
    })
}

/// Per-cycle constraint of the full system: `(log g(T), r(T) - r0) - T zeta_dot_d`.
fn full_residual(cyc: &CycleResult, target: &DVector<f64>) -> DVector<f64> {
    let mut v = Vec::with_capacity(target.len());
    v.extend_from_slice(&[cyc.displacement.vx, cyc.displacement.vy, cyc.displacement.omega]);
    v.extend_from_slice(&cyc.shape_change);
    DVector::from_vec(v) - target
}

/// Forward-difference steps per parameter: `1e-4 u_max` of the owning unit.
fn fd_steps(model: &DragModel, np: usize) -> Vec<f64> {
    let n = model.n_units();
    (0..np).map(|p| 1e-4 * model.chain.u_max[p % n]).collect()
}

/// Central-difference Jacobian of a vector function of the parameters,
/// columns evaluated in parallel.
fn fd_jacobian<F>(theta: &DVector<f64>, steps: &[f64], f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let cols: Vec<DVector<f64>> = (0..theta.len())
        .into_par_iter()
        .map(|p| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[p] += steps[p];
            tm[p] -= steps[p];
            Ok((f(&tp)? - f(&tm)?) / (2.0 * steps[p]))
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Minimum-`R`-norm step solving `J d = -res`.
fn min_norm_step(jac: &DMatrix<f64>, r: &DMatrix<f64>, res: &DVector<f64>) -> Option<DVector<f64>> {
    let np = r.nrows();
    let rinv = symmetrize(&(r + DMatrix::identity(np, np) * (1e-12 * r.amax()))).try_inverse()?;
    let g = jac * &rinv * jac.transpose();
    let y = g.svd(true, true).solve(&(-res), 1e-14).ok()?;
    Some(rinv * jac.transpose() * y)
}

/// Corrects a plan against the full simulation so that one cycle from the
/// start shape realizes the desired per-cycle motion.
pub fn refine_full(model: &DragModel, plan: &GaitPlan, cost: &CostMetric, opts: &SolverOptions) -> Result<GaitPlan> {
    let period = plan.gait.period();
    let target = plan.desired.to_vector() * period;
    let n = model.n_units();
    let omega = plan.gait.omega;
    let r0 = plan.start_shape.clone();
    let steps = opts.steps_per_period;
    let eval = |t: &DVector<f64>| -> Result<DVector<f64>> {
        let g = FourierGait::from_params(n, omega, t.as_slice())?;
        Ok(full_residual(&cycle_map(model, &r0, &g, steps)?, &target))
    };
    let mut theta = plan.gait.to_params();
    let h = fd_steps(model, theta.len());
    let flagged = |theta: &DVector<f64>, residual: f64, iterations: usize, within: bool| -> Result<GaitPlan> {
        let gait = FourierGait::from_params(n, omega, theta.as_slice())?;
        Ok(GaitPlan {
            cost: cost.cost(theta.as_slice()),
            gait,
            refined: within,
            residual,
            iterations,
            within_limits: within,
            converged: within && residual <= opts.refine_tol,
            ..plan.clone()
        })
    };
    let mut res = match eval(&theta) {
        Ok(v) => v,
        Err(Error::JointLimit { .. }) => return flagged(&theta, f64::INFINITY, 0, false),
        Err(e) => return Err(e),
    };
    for it in 0..opts.refine_max_iter {
        if res.norm() <= opts.refine_tol {
            return flagged(&theta, res.norm(), it, true);
        }
        let jac = match fd_jacobian(&theta, &h, eval) {
            Ok(j) => j,
            Err(Error::JointLimit { .. }) => return flagged(&theta, res.norm(), it, false),
            Err(e) => return Err(e),
        };
        let step = min_norm_step(&jac, &cost.r, &res).ok_or_else(|| Error::SolverFailure("refinement step solve failed".into()))?;
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..12 {
            let trial = &theta + &step * alpha;
            match eval(&trial) {
                Ok(r) if r.norm() < res.norm() => {
                    theta = trial;
                    res = r;
                    moved = true;
                    break;
                }
                Ok(_) | Err(Error::JointLimit { .. }) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !moved {
            break;
        }
    }
    let nrm = res.norm();
    let mut out = flagged(&theta, nrm, opts.refine_max_iter, true)?;
    out.converged = nrm <= opts.refine_tol;
    Ok(out)
}

/// Phases at which joint limits are enforced during the shape-averaged solve.
pub const LIMIT_PHASES: usize = 32;

#[derive(Clone, Debug)]
struct ShapeAveragedEval {
    /// `[(log g(T)) - T xi_d; r(T) - r0 - T alpha_dot_d; mean(r) - nominal]`
    constraint: DVector<f64>,
    /// Joint-limit excess at the sampled phases (zero when inside).
    excess: DVector<f64>,
}

/// Gait synthesis with the cycle-mean shape pinned to `nominal` and joint
/// limits enforced at sampled phases, with the initial shape as an extra
/// decision variable. Limit penalties escalate until the sampled phases are
/// inside a small margin, then the result is verified at every step.
pub fn solve_shape_averaged(
    model: &DragModel,
    avg: &AveragedSystem,
    cost: &CostMetric,
    desired: &ConfigVelocity,
    opts: &SolverOptions,
) -> Result<GaitPlan> {
    let base = solve_averaged(avg, cost, desired, opts)?;
    let n = model.n_units();
    let nj = n - 1;
    let omega = base.gait.omega;
    let period = base.gait.period();
    let nominal = avg.nominal.clone();
    let np = base.gait.n_params();
    let steps = opts.steps_per_period;
    let d = desired.to_vector() * period;
    let margin = 1e-3;
    let limits = model.chain.joint_limits.clone();

    let split = |x: &DVector<f64>| -> Result<(FourierGait, Vec<f64>)> {
        Ok((FourierGait::from_params(n, omega, &x.as_slice()[..np])?, x.as_slice()[np..].to_vec()))
    };
    let eval = |x: &DVector<f64>| -> Result<ShapeAveragedEval> {
        let (g, r0) = split(x)?;
        let cyc = cycle_map_unchecked(model, &r0, &g, steps)?;
        let mut c = full_residual(&cyc, &d).as_slice().to_vec();
        c.extend((0..nj).map(|j| cyc.mean_shape[j] - nominal[j]));
        let mut ex = Vec::with_capacity(LIMIT_PHASES * nj);
        for s in 0..LIMIT_PHASES {
            let r = &cyc.shapes[s * steps / LIMIT_PHASES];
            for j in 0..nj {
                let (lo, hi) = limits[j];
                ex.push((r[j] - (hi - margin)).max(0.0) + (r[j] - (lo + margin)).min(0.0));
            }
        }
        Ok(ShapeAveragedEval { constraint: DVector::from_vec(c), excess: DVector::from_vec(ex) })
    };

    let mut x = DVector::zeros(np + nj);
    x.rows_mut(0, np).copy_from(&base.gait.to_params());
    x.rows_mut(np, nj).copy_from(&DVector::from_column_slice(&nominal));
    // shift the start so the first simulated mean lands on the nominal shape
    let first = eval(&x)?;
    for j in 0..nj {
        x[np + j] -= first.constraint[3 + nj + j];
    }

    let mut r_ext = DMatrix::zeros(np + nj, np + nj);
    r_ext.view_mut((0, 0), (np, np)).copy_from(&cost.r);
    for j in 0..nj {
        r_ext[(np + j, np + j)] = 1e-9 * cost.r.amax();
    }
    let mut h = fd_steps(model, np);
    h.extend(std::iter::repeat_n(1e-5, nj));

    let mut mu = 0.0;
    let mut iterations = 0;
    let mut current = eval(&x)?;
    'outer: for _round in 0..8 {
        for _ in 0..opts.refine_max_iter {
            iterations += 1;
            let cjac = fd_jacobian(&x, &h, |t| Ok(eval(t)?.constraint))?;
            let ejac = fd_jacobian(&x, &h, |t| Ok(eval(t)?.excess))?;
            // Gauss-Newton model of cost + mu |excess|^2 under linearized constraints
            let hess = &r_ext * 2.0 + ejac.transpose() * &ejac * (2.0 * mu) + DMatrix::identity(np + nj, np + nj) * 1e-12;
            let grad = (&r_ext * &x) * 2.0 + ejac.transpose() * &current.excess * (2.0 * mu);
            let m = cjac.nrows();
            let dim = np + nj;
            let mut kmat = DMatrix::zeros(dim + m, dim + m);
            kmat.view_mut((0, 0), (dim, dim)).copy_from(&hess);
            kmat.view_mut((0, dim), (dim, m)).copy_from(&cjac.transpose());
            kmat.view_mut((dim, 0), (m, dim)).copy_from(&cjac);
            let mut rhs = DVector::zeros(dim + m);
            rhs.rows_mut(0, dim).copy_from(&(-grad));
            rhs.rows_mut(dim, m).copy_from(&(-&current.constraint));
            let sol = kmat
                .svd(true, true)
                .solve(&rhs, 1e-14)
                .map_err(|e| Error::SolverFailure(e.to_string()))?;
            let step = sol.rows(0, dim).into_owned();
            let merit = |e: &ShapeAveragedEval, t: &DVector<f64>| -> f64 {
                t.dot(&(&r_ext * t)) + mu * e.excess.norm_squared() + 1e3 * e.constraint.norm() * cost.r.amax()
            };
            let m0 = merit(&current, &x);
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..12 {
                let trial = &x + &step * alpha;
                if let Ok(e) = eval(&trial) {
                    if merit(&e, &trial) < m0 {
                        x = trial;
                        current = e;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let small = step.amax() * alpha < 1e-10;
            if current.constraint.norm() <= opts.refine_tol && (small || !moved) {
                break;
            }
            if !moved {
                break;
            }
        }
        if current.excess.amax() == 0.0 {
            break 'outer;
        }
        mu = if mu == 0.0 { 1e3 * cost.r.amax() } else { mu * 10.0 };
    }

    let (gait, r0) = split(&x)?;
    let feasible = current.excess.amax() == 0.0;
    // dense verification over every integration step
    let verified = feasible && cycle_map(model, &r0, &gait, steps).is_ok();
    if !verified {
        return Err(Error::Infeasible(format!(
            "no gait keeps the joints inside their limits about nominal shape {nominal:?} (sampled excess {:.3e} rad)",
            current.excess.amax()
        )));
    }
    let residual = current.constraint.norm();
    Ok(GaitPlan {
        achieved_average: avg.average_velocity(&gait),
        cost: cost.cost(gait.to_params().as_slice()),
        cost_kind: cost.kind,
        gait,
        nominal,
        start_shape: r0,
        desired: desired.clone(),
        refined: true,
        residual,
        converged: residual <= opts.refine_tol,
        iterations,
        within_limits: true,
    })
}

/// Cycle map that ignores joint limits (used inside penalty iterations).
fn cycle_map_unchecked(model: &DragModel, start: &[f64], gait: &FourierGait, steps: usize) -> Result<CycleResult> {
    let mut free = model.clone();
    free.chain.joint_limits = vec![(-1e3, 1e3); start.len()];
    cycle_map(&free, start, gait, steps)
}


/// Averaged solve about `nominal`, optional correction against the full
/// simulation, then an actuator-limit check of the result.
#[allow(clippy::too_many_arguments)]
pub fn plan_motion(
    model: &DragModel,
    nominal: &[f64],
    desired: &ConfigVelocity,
    frequency: f64,
    kind: CostKind,
    order: usize,
    refine: bool,
    opts: &SolverOptions,
) -> Result<(GaitPlan, CostMetric)> {
    let avg = crate::averaging::augmented_system(model, nominal, frequency)?;
    let cost = build_cost(model, nominal, kind, order)?;
    let mut plan = solve_averaged(&avg, &cost, desired, opts)?;
    if refine {
        plan = refine_full(model, &plan, &cost, opts)?;
    }
    check_actuator_limits(model, &plan.gait)?;
    Ok((plan, cost))
}

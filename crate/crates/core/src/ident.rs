//! Least-squares identification of a diagonal drag metric from recorded
//! trajectories.
//!
//! Every quantity the model predicts is linear in the stacked coefficient
//! vector `m` (unit blocks then joints), so each sample contributes
//!
//! * force rows: rolling-axis actuator force per unit, matched to readings;
//! * balance rows: the net configuration force, zero under the quasi-static
//!   model;
//! * one power row: net configuration power `<F_zeta, zeta_dot>`.
//!
//! The force rows alone only see the rolling-axis coefficients. The balance
//! rows pin the remaining ones relative to those, which is what makes the
//! unregularized problem well posed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::dataset::TrajectoryDataset;
use crate::drag::{CommandMode, LocalMetric};
use crate::error::{Error, Result};
use crate::linalg::{nnls, sym_apply, symmetrize};
use crate::presets::GAIT_FREQUENCY;
use crate::signal::{differentiate, lowpass, CUTOFF_PER_GAIT_FREQUENCY};

/// Form of the net-power penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerForm {
    /// `sum_k (p_k . m + o_k)^2`
    #[default]
    Squared,
    /// `sum_k (p_k . m + o_k)`, signed.
    Linear,
}

impl std::str::FromStr for PowerForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(PowerForm::Squared),
            "linear" => Ok(PowerForm::Linear),
            _ => Err(Error::Parse(format!("unknown power form '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionOptions {
    /// Regularization strength; `None` picks it from the unregularized fit.
    pub lambda: Option<f64>,
    pub power_form: PowerForm,
    /// Low-pass cutoff (Hz) applied to every regressor column and target
    /// before stacking; `None` disables filtering.
    pub cutoff: Option<f64>,
    /// Weight on the balance rows relative to the force rows.
    pub balance_weight: f64,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            power_form: PowerForm::Squared,
            cutoff: Some(CUTOFF_PER_GAIT_FREQUENCY * GAIT_FREQUENCY),
            balance_weight: 1.0,
        }
    }
}

/// Rows contributed by one sample. Predictions are `rows * m + offset`.
#[derive(Clone, Debug)]
pub struct SampleRows {
    /// `N x C`
    pub force: DMatrix<f64>,
    pub force_offset: DVector<f64>,
    /// `(N + 2) x C`
    pub balance: DMatrix<f64>,
    pub balance_offset: DVector<f64>,
    pub power: DVector<f64>,
    pub power_offset: f64,
}

/// Regressor rows at shape `r`, configuration velocity `zeta_dot` and
/// command `u`.
pub fn sample_rows(chain: &ChainModel, mode: CommandMode, r: &[f64], zeta_dot: &[f64], u: &[f64]) -> SampleRows {
    let n = chain.n_units;
    let c = 4 * n - 1;
    let (jz, ju) = chain.aggregate_jacobians(r);
    let zd = DVector::from_column_slice(zeta_dot);
    let uv = DVector::from_column_slice(u);
    let w = &jz * &zd;
    let drive = &ju * &uv;
    // velocity each coefficient multiplies
    let v = match mode {
        CommandMode::Velocity => &w + &drive,
        CommandMode::Force => w.clone(),
    };
    let mut force = DMatrix::zeros(n, c);
    for i in 0..n {
        force[(i, 3 * i)] = v[3 * i];
    }
    let force_offset = match mode {
        CommandMode::Velocity => DVector::zeros(n),
        CommandMode::Force => uv.clone(),
    };
    let balance = DMatrix::from_fn(n + 2, c, |a, k| jz[(k, a)] * v[k]);
    let balance_offset = match mode {
        CommandMode::Velocity => DVector::zeros(n + 2),
        CommandMode::Force => jz.transpose() * &drive,
    };
    let power = balance.transpose() * &zd;
    let power_offset = balance_offset.dot(&zd);
    SampleRows { force, force_offset, balance, balance_offset, power, power_offset }
}

/// Stacked regression problem over all samples of all runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressionSystem {
    pub n_units: usize,
    pub mode: CommandMode,
    /// `S N x C`, sample-major.
    pub force_rows: DMatrix<f64>,
    /// Readings minus the coefficient-free part of the prediction.
    pub force_targets: DVector<f64>,
    /// `S (N + 2) x C`, sample-major.
    pub balance_rows: DMatrix<f64>,
    pub balance_offsets: DVector<f64>,
    /// `S x C`
    pub power_rows: DMatrix<f64>,
    pub power_offsets: DVector<f64>,
    pub lambda: Option<f64>,
    pub power_form: PowerForm,
    pub balance_weight: f64,
    /// Per-sample `N x N` weight applied to the force residuals.
    pub whitening: Option<DMatrix<f64>>,
}

impl RegressionSystem {
    pub fn n_coeffs(&self) -> usize {
        4 * self.n_units - 1
    }

    pub fn n_samples(&self) -> usize {
        self.power_rows.nrows()
    }

    fn weighted_force(&self) -> (DMatrix<f64>, DVector<f64>) {
        let Some(w) = &self.whitening else {
            return (self.force_rows.clone(), self.force_targets.clone());
        };
        let n = self.n_units;
        let mut rows = self.force_rows.clone();
        let mut targets = self.force_targets.clone();
        for s in 0..self.n_samples() {
            let blk = w * self.force_rows.rows(s * n, n);
            rows.rows_mut(s * n, n).copy_from(&blk);
            let t = w * self.force_targets.rows(s * n, n);
            targets.rows_mut(s * n, n).copy_from(&t);
        }
        (rows, targets)
    }

    /// `(A, b)` of the data-fit part `||A m - b||^2`.
    pub fn fit_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (f, ft) = self.weighted_force();
        let c = self.n_coeffs();
        let mut a = DMatrix::zeros(f.nrows() + self.balance_rows.nrows(), c);
        a.rows_mut(0, f.nrows()).copy_from(&f);
        a.rows_mut(f.nrows(), self.balance_rows.nrows()).copy_from(&(&self.balance_rows * self.balance_weight));
        let mut b = DVector::zeros(a.nrows());
        b.rows_mut(0, f.nrows()).copy_from(&ft);
        b.rows_mut(f.nrows(), self.balance_rows.nrows())
            .copy_from(&(&self.balance_offsets * -self.balance_weight));
        (a, b)
    }

    /// Data-fit objective at `m`.
    pub fn fit_value(&self, m: &[f64]) -> f64 {
        let (a, b) = self.fit_system();
        (a * DVector::from_column_slice(m) - b).norm_squared()
    }

    /// Net-power penalty `P(m)` in the configured form.
    pub fn power_value(&self, m: &[f64]) -> f64 {
        let p = &self.power_rows * DVector::from_column_slice(m) + &self.power_offsets;
        match self.power_form {
            PowerForm::Squared => p.norm_squared(),
            PowerForm::Linear => p.sum(),
        }
    }

    /// Full objective `fit + lambda P` at a given strength.
    pub fn objective(&self, m: &[f64], lambda: f64) -> f64 {
        self.fit_value(m) + lambda * self.power_value(m)
    }
}

fn zeta_dot_at(v: &crate::signal::Velocities, k: usize) -> Vec<f64> {
    v.zeta_dot(k)
}

/// Filters each column of a sample-major block with `stride` rows per sample.
fn filter_block(m: &mut DMatrix<f64>, stride: usize, cutoff: f64, rate: f64) -> Result<()> {
    let samples = m.nrows() / stride;
    for q in 0..stride {
        for col in 0..m.ncols() {
            let series: Vec<f64> = (0..samples).map(|s| m[(s * stride + q, col)]).collect();
            if series.iter().all(|&x| x == 0.0) {
                continue;
            }
            let f = lowpass(&series, cutoff, rate)?;
            for (s, v) in f.into_iter().enumerate() {
                m[(s * stride + q, col)] = v;
            }
        }
    }
    Ok(())
}

fn filter_vec(v: &mut DVector<f64>, stride: usize, cutoff: f64, rate: f64) -> Result<()> {
    let mut m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    filter_block(&mut m, stride, cutoff, rate)?;
    v.copy_from(&m.column(0));
    Ok(())
}

fn run_system(
    ds: &TrajectoryDataset,
    chain: &ChainModel,
    mode: CommandMode,
    cutoff: Option<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    ds.validate()?;
    let n = chain.n_units;
    if ds.n_units() != n {
        return Err(Error::DimensionMismatch(format!("dataset has {} units, chain has {n}", ds.n_units())));
    }
    let c = 4 * n - 1;
    let s = ds.len();
    let vel = differentiate(ds)?;
    let rows: Vec<SampleRows> = (0..s)
        .into_par_iter()
        .map(|k| sample_rows(chain, mode, &ds.shapes[k], &zeta_dot_at(&vel, k), &ds.commands[k]))
        .collect();
    let mut force = DMatrix::zeros(s * n, c);
    let mut ft = DVector::zeros(s * n);
    let mut bal = DMatrix::zeros(s * (n + 2), c);
    let mut bo = DVector::zeros(s * (n + 2));
    let mut pow = DMatrix::zeros(s, c);
    let mut po = DVector::zeros(s);
    for (k, r) in rows.iter().enumerate() {
        force.rows_mut(k * n, n).copy_from(&r.force);
        for i in 0..n {
            ft[k * n + i] = ds.forces[k][i] - r.force_offset[i];
        }
        bal.rows_mut(k * (n + 2), n + 2).copy_from(&r.balance);
        bo.rows_mut(k * (n + 2), n + 2).copy_from(&r.balance_offset);
        pow.row_mut(k).copy_from(&r.power.transpose());
        po[k] = r.power_offset;
    }
    if let Some(fc) = cutoff {
        filter_block(&mut force, n, fc, ds.rate)?;
        filter_vec(&mut ft, n, fc, ds.rate)?;
        filter_block(&mut bal, n + 2, fc, ds.rate)?;
        filter_vec(&mut bo, n + 2, fc, ds.rate)?;
        filter_block(&mut pow, 1, fc, ds.rate)?;
        filter_vec(&mut po, 1, fc, ds.rate)?;
    }
    Ok((force, ft, bal, bo, pow, po))
}

fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let cols = parts.first().map_or(0, |p| p.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}

fn vstack_vec(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// Differentiates every run, assembles its rows (in parallel over samples)
/// and stacks the runs.
pub fn build_regression(
    data: &[TrajectoryDataset],
    chain: &ChainModel,
    mode: CommandMode,
    opts: &RegressionOptions,
) -> Result<RegressionSystem> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if let Some(l) = opts.lambda {
        if !(l >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {l}")));
        }
    }
    let parts = data
        .iter()
        .map(|ds| run_system(ds, chain, mode, opts.cutoff))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = data.iter().map(TrajectoryDataset::len).sum();
    let c = 4 * chain.n_units - 1;
    if total < c {
        return Err(Error::InsufficientSamples { needed: c, got: total });
    }
    Ok(RegressionSystem {
        n_units: chain.n_units,
        mode,
        force_rows: vstack(&parts.iter().map(|p| &p.0).collect::<Vec<_>>()),
        force_targets: vstack_vec(&parts.iter().map(|p| &p.1).collect::<Vec<_>>()),
        balance_rows: vstack(&parts.iter().map(|p| &p.2).collect::<Vec<_>>()),
        balance_offsets: vstack_vec(&parts.iter().map(|p| &p.3).collect::<Vec<_>>()),
        power_rows: vstack(&parts.iter().map(|p| &p.4).collect::<Vec<_>>()),
        power_offsets: vstack_vec(&parts.iter().map(|p| &p.5).collect::<Vec<_>>()),
        lambda: opts.lambda,
        power_form: opts.power_form,
        balance_weight: opts.balance_weight,
        whitening: None,
    })
}

/// Reduces `min ||A x - b||` to an equivalent square problem `min ||R x - c||`
/// by chunked QR.
fn reduce(a: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.ncols();
    const CHUNK: usize = 8192;
    let starts: Vec<usize> = (0..a.nrows()).step_by(CHUNK).collect();
    let pieces: Vec<(DMatrix<f64>, DVector<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let len = CHUNK.min(a.nrows() - s);
            square_up(a.rows(s, len).into_owned(), b.rows(s, len).into_owned(), n)
        })
        .collect();
    if pieces.len() == 1 {
        return pieces.into_iter().next().expect("one piece");
    }
    let ra = vstack(&pieces.iter().map(|p| &p.0).collect::<Vec<_>>());
    let rb = vstack_vec(&pieces.iter().map(|p| &p.1).collect::<Vec<_>>());
    square_up(ra, rb, n)
}

fn square_up(a: DMatrix<f64>, mut b: DVector<f64>, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    if a.nrows() < n {
        let mut ra = DMatrix::zeros(n, n);
        ra.rows_mut(0, a.nrows()).copy_from(&a);
        let mut rb = DVector::zeros(n);
        rb.rows_mut(0, a.nrows()).copy_from(&b);
        return (ra, rb);
    }
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    (qr.r(), b.rows(0, n).into_owned())
}

/// Column-rank and observability diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Singular values of the column-normalized data-fit matrix, descending.
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    pub rank_deficient: bool,
    /// Column norm of each coefficient relative to the largest coefficient
    /// of the same axis across units (joints compare among themselves).
    pub relative_column_norms: Vec<f64>,
    /// Norm of the part of each normalized column outside the span of the
    /// others: 1 for orthogonal columns, 0 for an unidentifiable coefficient.
    pub independent_share: Vec<f64>,
    /// Labels of coefficients with a relative column norm below
    /// [`WEAK_COLUMN_NORM`] or an independent share below
    /// [`WEAK_INDEPENDENT_SHARE`].
    pub weakly_observable: Vec<String>,
}

pub const WEAK_COLUMN_NORM: f64 = 0.05;
pub const WEAK_INDEPENDENT_SHARE: f64 = 0.2;
/// Condition number above which the system counts as rank deficient.
pub const RANK_CONDITION: f64 = 1e10;

fn condition_report(a: &DMatrix<f64>, n_units: usize) -> ConditionReport {
    let c = a.ncols();
    let norms: Vec<f64> = (0..c).map(|k| a.column(k).norm()).collect();
    let mut scaled = a.clone();
    for k in 0..c {
        if norms[k] > 0.0 {
            scaled.column_mut(k).scale_mut(1.0 / norms[k]);
        }
    }
    let (r, _) = reduce(&scaled, &DVector::zeros(a.nrows()));
    // 1 / sqrt(diag((R'R)^-1)) = 1 / row norms of R^-1
    let independent: Vec<f64> = match r.clone().try_inverse() {
        Some(ri) if ri.iter().all(|v| v.is_finite()) => {
            (0..c).map(|k| if norms[k] > 0.0 { 1.0 / ri.row(k).norm() } else { 0.0 }).collect()
        }
        _ => vec![0.0; c],
    };
    let mut sv: Vec<f64> = r.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let smin = sv.last().copied().unwrap_or(0.0);
    let condition_number = if smin > 0.0 { sv[0] / smin } else { f64::INFINITY };
    let group = |k: usize| if k < 3 * n_units { k % 3 } else { 3 };
    let mut best = [0.0f64; 4];
    for k in 0..c {
        best[group(k)] = best[group(k)].max(norms[k]);
    }
    let relative: Vec<f64> =
        (0..c).map(|k| if best[group(k)] > 0.0 { norms[k] / best[group(k)] } else { 0.0 }).collect();
    let labels = LocalMetric::labels(n_units);
    ConditionReport {
        singular_values: sv,
        condition_number,
        rank_deficient: !(condition_number < RANK_CONDITION),
        weakly_observable: (0..c)
            .filter(|&k| relative[k] < WEAK_COLUMN_NORM || independent[k] < WEAK_INDEPENDENT_SHARE)
            .map(|k| labels[k].clone())
            .collect(),
        relative_column_norms: relative,
        independent_share: independent,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub metric: LocalMetric,
    /// RMS of the unweighted actuator-force residual (N).
    pub residual_rms: f64,
    /// Gradient of the full objective per coefficient at the solution.
    pub residual_gradients: Vec<f64>,
    /// Diagonal of the objective Hessian.
    pub hessian_diagonal: Vec<f64>,
    /// Largest KKT violation relative to the gradient magnitude at `m = 0`.
    pub kkt_residual: f64,
    pub lambda: f64,
    pub fit_value: f64,
    pub power_value: f64,
    pub condition_report: ConditionReport,
    /// Set when the system is rank deficient; the solution is still returned.
    pub warning: bool,
}

/// Share of the data-fit objective the default regularizer contributes at
/// the unregularized solution.
pub const DEFAULT_POWER_SHARE: f64 = 0.01;

struct Solved {
    m: DVector<f64>,
    r: DMatrix<f64>,
    c: DVector<f64>,
}

fn solve_at(sys: &RegressionSystem, fit: &(DMatrix<f64>, DVector<f64>), lambda: f64) -> Result<Solved> {
    let (a, b) = fit;
    let c = sys.n_coeffs();
    let (mut ra, mut rb) = match sys.power_form {
        PowerForm::Squared if lambda > 0.0 => {
            let sl = lambda.sqrt();
            reduce(&vstack(&[a, &(&sys.power_rows * sl)]), &vstack_vec(&[b, &(&sys.power_offsets * -sl)]))
        }
        _ => reduce(a, b),
    };
    if sys.power_form == PowerForm::Linear && lambda > 0.0 {
        // ||R m - c||^2 + lambda g.m == ||R m - (c - lambda/2 R^-T g)||^2 + const
        let g = sys.power_rows.row_sum().transpose();
        let shift = ra
            .transpose()
            .lu()
            .solve(&g)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::SolverFailure("linear power penalty needs a full-rank fit".into()))?;
        rb -= shift * (0.5 * lambda);
    }
    // unit column scaling keeps the active-set tolerances meaningful
    let scale: Vec<f64> = (0..c).map(|k| ra.column(k).norm()).collect();
    for k in 0..c {
        if scale[k] > 0.0 {
            ra.column_mut(k).scale_mut(1.0 / scale[k]);
        }
    }
    let sol = nnls(&ra, &rb)?;
    let m = DVector::from_fn(c, |k, _| if scale[k] > 0.0 { sol.x[k] / scale[k] } else { 0.0 });
    for k in 0..c {
        ra.column_mut(k).scale_mut(scale[k]);
    }
    Ok(Solved { m, r: ra, c: rb })
}

/// The regularization strength the system asks for: its own, or the default
/// rule applied to the unregularized solution.
pub fn resolve_lambda(sys: &RegressionSystem) -> Result<f64> {
    if let Some(l) = sys.lambda {
        return Ok(l);
    }
    let fit = sys.fit_system();
    let m0 = solve_at(sys, &fit, 0.0)?.m;
    let f0 = (&fit.0 * &m0 - &fit.1).norm_squared();
    let p0 = match sys.power_form {
        PowerForm::Squared => sys.power_value(m0.as_slice()),
        PowerForm::Linear => sys.power_value(m0.as_slice()).abs(),
    };
    let bnorm = fit.1.norm_squared().max(f64::MIN_POSITIVE);
    if f0 > 1e-20 * bnorm && p0 > 0.0 {
        return Ok(DEFAULT_POWER_SHARE * f0 / p0);
    }
    // exact data: balance the penalty against the fit by matrix scale instead
    let pn = sys.power_rows.norm_squared();
    Ok(if pn > 0.0 { DEFAULT_POWER_SHARE * fit.0.norm_squared() / pn } else { 0.0 })
}

/// Nonnegative least-squares fit of the metric.
pub fn identify(sys: &RegressionSystem) -> Result<IdentificationResult> {
    let c = sys.n_coeffs();
    if sys.n_samples() * sys.n_units < c && sys.balance_rows.nrows() == 0 {
        return Err(Error::InsufficientSamples { needed: c, got: sys.n_samples() });
    }
    let lambda = resolve_lambda(sys)?;
    let fit = sys.fit_system();
    let solved = solve_at(sys, &fit, lambda)?;
    let m = solved.m;

    let grad = solved.r.transpose() * (&solved.r * &m - &solved.c) * 2.0;
    let g0 = (solved.r.transpose() * &solved.c * 2.0).amax().max(f64::MIN_POSITIVE);
    let kkt = (0..c)
        .map(|k| if m[k] > 0.0 { grad[k].abs() } else { (-grad[k]).max(0.0) })
        .fold(0.0, f64::max)
        / g0;

    let mut hess: Vec<f64> = (0..c).map(|k| 2.0 * fit.0.column(k).norm_squared()).collect();
    if sys.power_form == PowerForm::Squared {
        for (k, h) in hess.iter_mut().enumerate() {
            *h += 2.0 * lambda * sys.power_rows.column(k).norm_squared();
        }
    }

    let pred = &sys.force_rows * &m - &sys.force_targets;
    let residual_rms = if pred.is_empty() { 0.0 } else { (pred.norm_squared() / pred.len() as f64).sqrt() };

    let report = condition_report(&fit.0, sys.n_units);
    Ok(IdentificationResult {
        metric: LocalMetric::from_vec(sys.n_units, m.as_slice())?,
        residual_rms,
        residual_gradients: grad.iter().copied().collect(),
        hessian_diagonal: hess,
        kkt_residual: kkt,
        lambda,
        fit_value: (&fit.0 * &m - &fit.1).norm_squared(),
        power_value: sys.power_value(m.as_slice()),
        warning: report.rank_deficient,
        condition_report: report,
    })
}

/// Gradient of the objective at an identified metric.
pub fn residual_gradients(sys: &RegressionSystem, result: &IdentificationResult) -> Vec<f64> {
    let m = DVector::from_vec(result.metric.to_vec());
    let (a, b) = sys.fit_system();
    let mut g = a.transpose() * (&a * &m - b) * 2.0;
    let p = &sys.power_rows * &m + &sys.power_offsets;
    match sys.power_form {
        PowerForm::Squared => g += sys.power_rows.transpose() * p * (2.0 * result.lambda),
        PowerForm::Linear => g += sys.power_rows.row_sum().transpose() * result.lambda,
    }
    g.iter().copied().collect()
}

/// Residual-covariance whitening of the force channels.
///
/// Solves the unregularized problem, forms the `N x N` covariance of the
/// per-sample force residuals and weights every sample's force rows by its
/// inverse square root. A singular covariance falls back to per-channel
/// variances; residuals that vanish leave the system as it was.
pub fn rescale_objective(sys: &RegressionSystem) -> Result<RegressionSystem> {
    let n = sys.n_units;
    let s = sys.n_samples();
    let plain = RegressionSystem { whitening: None, ..sys.clone() };
    let fit = plain.fit_system();
    let m0 = solve_at(&plain, &fit, 0.0)?.m;
    let res = &sys.force_rows * &m0 - &sys.force_targets;
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..s {
        let e = res.rows(k * n, n);
        cov += &e * e.transpose();
    }
    cov /= s.max(1) as f64;
    let cov = symmetrize(&cov);
    let scale = sys.force_targets.amax().max(f64::MIN_POSITIVE);
    if cov.diagonal().amax() <= 1e-24 * scale * scale {
        return Ok(plain);
    }
    let eig = cov.clone().symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let w = if lo > 1e-12 * hi {
        sym_apply(&cov, |l| 1.0 / l.sqrt())
    } else {
        DMatrix::from_fn(n, n, |i, j| {
            let v = cov[(i, i)];
            if i == j && v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
    };
    Ok(RegressionSystem { whitening: Some(w), ..plain })
}

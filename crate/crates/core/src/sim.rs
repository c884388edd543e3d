//! First-order simulation of `zeta_dot = A(r) u(t)` on SE(2) x shape space.
//!
//! Each step evaluates the command at the step midpoint, predicts the
//! half-step shape, re-evaluates the field there and applies
//! `g <- g exp(xi dt)`, `r <- r + dt r_dot` (second order in `dt`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::ConfigVelocity;
use crate::dataset::TrajectoryDataset;
use crate::drag::{DragModel, UnitFlow};
use crate::error::{Error, Result};
use crate::feedback::{ErrorState, FeedbackLaw, FeedbackMode};
use crate::gait::FourierGait;
use crate::se2::{Pose, Twist};

/// Default integration steps per gait period.
pub const STEPS_PER_PERIOD: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose,
    pub shape: Vec<f64>,
    pub t: f64,
}

impl SimState {
    pub fn at_shape(shape: Vec<f64>) -> Self {
        Self { pose: Pose::identity(), shape, t: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Disturbance {
    /// Ambient flow at a unit, fixed in that unit's frame.
    ConstantTwist { unit: usize, twist: Twist },
    /// Multiplicative Gaussian noise on recorded actuator forces.
    ForceNoise { sigma: f64, seed: u64 },
    /// Instantaneous jump of the shape at time `t`.
    ShapeImpulse { t: f64, delta: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Integration step; defaults to `T / 2000`.
    pub dt: Option<f64>,
    /// Rate of the recorded samples (Hz).
    pub output_rate: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { dt: None, output_rate: 200.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitRecord {
    pub joint: usize,
    pub t: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub pose: Pose,
    pub shape: Vec<f64>,
    pub command: Vec<f64>,
    pub force: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// State at the start of every completed cycle plus the final state.
    pub cycle_states: Vec<SimState>,
    /// Gait executed in each cycle (differs from the nominal one under feedback).
    pub cycle_gaits: Vec<FourierGait>,
    pub violation: Option<LimitRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> Option<&SimState> {
        self.cycle_states.last()
    }

    pub fn to_dataset(&self, rate: f64) -> TrajectoryDataset {
        TrajectoryDataset {
            rate,
            t: self.samples.iter().map(|s| s.t).collect(),
            poses: self.samples.iter().map(|s| s.pose).collect(),
            shapes: self.samples.iter().map(|s| s.shape.clone()).collect(),
            commands: self.samples.iter().map(|s| s.command.clone()).collect(),
            forces: self.samples.iter().map(|s| s.force.clone()).collect(),
        }
    }
}

fn flows_of(disturbances: &[Disturbance]) -> Vec<UnitFlow> {
    disturbances
        .iter()
        .filter_map(|d| match d {
            Disturbance::ConstantTwist { unit, twist } => Some(UnitFlow { unit: *unit, twist: *twist }),
            _ => None,
        })
        .collect()
}

fn check_limits(model: &DragModel, r: &[f64], t: f64) -> Result<()> {
    if let Some(j) = model.chain.limit_violation(r) {
        return Err(Error::JointLimit { joint: j + 1, t, angle: r[j] });
    }
    Ok(())
}

/// One integration step with a fixed command.
pub fn step(model: &DragModel, state: &SimState, u: &[f64], dt: f64, flows: &[UnitFlow]) -> Result<SimState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {dt}")));
    }
    if u.len() != model.n_units() {
        return Err(Error::DimensionMismatch(format!("{} commands for {} units", u.len(), model.n_units())));
    }
    check_limits(model, &state.shape, state.t)?;
    let nj = state.shape.len();
    let v0 = model.config_velocity(&state.shape, u, flows)?;
    let half: Vec<f64> = (0..nj).map(|j| state.shape[j] + 0.5 * dt * v0[3 + j]).collect();
    let v = model.config_velocity(&half, u, flows)?;
    let xi = Twist::new(v[0], v[1], v[2]);
    let next = SimState {
        pose: state.pose.compose(&Pose::exp(&xi, dt)),
        shape: (0..nj).map(|j| state.shape[j] + dt * v[3 + j]).collect(),
        t: state.t + dt,
    };
    check_limits(model, &next.shape, next.t)?;
    Ok(next)
}

/// Integrates `n_steps` steps of size `dt` with the command evaluated at each
/// step midpoint. `visit` sees every state after a step.
pub fn integrate(
    model: &DragModel,
    state: &SimState,
    command: &dyn Fn(f64) -> Vec<f64>,
    n_steps: usize,
    dt: f64,
    flows: &[UnitFlow],
    visit: &mut dyn FnMut(&SimState),
) -> Result<SimState> {
    let mut s = state.clone();
    for _ in 0..n_steps {
        let u = command(s.t + 0.5 * dt);
        s = step(model, &s, &u, dt, flows)?;
        visit(&s);
    }
    Ok(s)
}

/// Net per-cycle change of a gait from `start`: `(log(g0^-1 g(T)), r(T) - r0)`
/// along with the cycle-mean shape. Used by the full-system solvers.
pub fn cycle_map(model: &DragModel, start_shape: &[f64], gait: &FourierGait, steps: usize) -> Result<CycleResult> {
    let t_period = gait.period();
    let dt = t_period / steps as f64;
    let s0 = SimState::at_shape(start_shape.to_vec());
    let nj = start_shape.len();
    let mut mean = vec![0.0; nj];
    let mut prev = start_shape.to_vec();
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(start_shape.to_vec());
    let end = integrate(model, &s0, &|t| gait.evaluate(t), steps, dt, &[], &mut |s| {
        for j in 0..nj {
            mean[j] += 0.5 * (prev[j] + s.shape[j]) / steps as f64;
        }
        prev = s.shape.clone();
        samples.push(s.shape.clone());
    })?;
    Ok(CycleResult {
        displacement: end.pose.log(),
        shape_change: (0..nj).map(|j| end.shape[j] - start_shape[j]).collect(),
        mean_shape: mean,
        end,
        shapes: samples,
    })
}

#[derive(Clone, Debug)]
pub struct CycleResult {
    pub displacement: Twist,
    pub shape_change: Vec<f64>,
    pub mean_shape: Vec<f64>,
    pub end: SimState,
    /// Shape after every step, starting with the initial shape.
    pub shapes: Vec<Vec<f64>>,
}

impl CycleResult {
    /// `(1/T) (log g(T), r(T) - r0)`.
    pub fn average_velocity(&self, period: f64) -> ConfigVelocity {
        ConfigVelocity {
            xi: self.displacement.scale(1.0 / period),
            alpha_dot: self.shape_change.iter().map(|d| d / period).collect(),
        }
    }
}

/// Executes `cycles` periods of a gait, optionally updating the gait at every
/// cycle boundary through a feedback law, and records samples at the output
/// rate. A joint-limit violation stops the run and is reported in the record.
pub fn run_gait(
    model: &DragModel,
    start: &SimState,
    gait: &FourierGait,
    cycles: usize,
    law: Option<&FeedbackLaw>,
    disturbances: &[Disturbance],
    opts: &SimOptions,
) -> Result<Trajectory> {
    gait.validate()?;
    if gait.n_units() != model.n_units() {
        return Err(Error::DimensionMismatch("gait and model unit counts differ".into()));
    }
    let period = gait.period();
    let n_out = ((period * opts.output_rate).round() as usize).max(1);
    let dt_req = opts.dt.unwrap_or(period / STEPS_PER_PERIOD as f64);
    if !(dt_req > 0.0) {
        return Err(Error::InvalidArgument("time step must be positive".into()));
    }
    let out_dt = period / n_out as f64;
    let sub = (out_dt / dt_req - 1e-9).ceil().max(1.0) as usize;
    let dt = out_dt / sub as f64;

    let flows = flows_of(disturbances);
    let mut noise = disturbances.iter().find_map(|d| match d {
        Disturbance::ForceNoise { sigma, seed } => Some((
            ChaCha8Rng::seed_from_u64(*seed),
            Normal::new(0.0, *sigma).map_err(|e| Error::InvalidArgument(e.to_string())),
        )),
        _ => None,
    });
    let mut impulses: Vec<(f64, Vec<f64>)> = disturbances
        .iter()
        .filter_map(|d| match d {
            Disturbance::ShapeImpulse { t, delta } => Some((*t, delta.clone())),
            _ => None,
        })
        .collect();
    impulses.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut next_impulse = 0;

    let mut traj = Trajectory::default();
    let mut state = start.clone();
    let origin = start.pose;
    let t0 = start.t;
    let mut current = gait.clone();
    let nj = state.shape.len();
    let mut integrated_error = vec![0.0; 3 + nj];

    let record = |state: &SimState,
                  g: &FourierGait,
                  traj: &mut Trajectory,
                  noise: &mut Option<(ChaCha8Rng, Result<Normal<f64>>)>|
     -> Result<()> {
        let u = g.evaluate(state.t - t0);
        let zd = model.config_velocity(&state.shape, &u, &flows)?;
        let mut f = model.actuator_forces(&state.shape, zd.as_slice(), &u);
        if let Some((rng, dist)) = noise {
            let dist = dist.as_ref().map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in f.iter_mut() {
                *v *= 1.0 + dist.sample(rng);
            }
        }
        traj.samples.push(Sample { t: state.t, pose: state.pose, shape: state.shape.clone(), command: u, force: f });
        Ok(())
    };

    let error_at = |law: &FeedbackLaw, s: &SimState| -> ErrorState {
        let (gd, rd) = law.desired_at(&origin, s.t - t0);
        ErrorState::between(&s.pose, &gd, &s.shape, &rd)
    };

    for cycle in 0..cycles {
        if let Some(law) = law {
            let e = match law.mode {
                FeedbackMode::Initial => error_at(law, &state),
                FeedbackMode::Integrated => {
                    if cycle == 0 {
                        ErrorState::zero(nj)
                    } else {
                        let rel: Vec<f64> =
                            integrated_error.iter().zip(&law.integrated_reference).map(|(e, r)| e - r).collect();
                        ErrorState::from_slice(&rel)
                    }
                }
            };
            current = law.update(&e);
        }
        integrated_error.iter_mut().for_each(|v| *v = 0.0);
        traj.cycle_states.push(state.clone());
        traj.cycle_gaits.push(current.clone());
        let cycle_start = t0 + cycle as f64 * period;
        for k in 0..n_out {
            record(&state, &current, &mut traj, &mut noise)?;
            for s in 0..sub {
                // fixed time grid avoids drift from repeated addition
                let t_next = cycle_start + (k * sub + s + 1) as f64 * dt;
                let h = t_next - state.t;
                let u = current.evaluate(state.t + 0.5 * h - t0);
                let e_before = law.filter(|l| l.mode == FeedbackMode::Integrated).map(|l| error_at(l, &state));
                match step(model, &state, &u, h, &flows) {
                    Ok(mut next) => {
                        next.t = t_next;
                        while next_impulse < impulses.len() && impulses[next_impulse].0 <= next.t - t0 {
                            for (r, d) in next.shape.iter_mut().zip(&impulses[next_impulse].1) {
                                *r += d;
                            }
                            next_impulse += 1;
                        }
                        if let (Some(eb), Some(l)) = (e_before, law) {
                            let ea = error_at(l, &next);
                            let (vb, va) = (eb.to_vector(), ea.to_vector());
                            for i in 0..integrated_error.len() {
                                integrated_error[i] += 0.5 * (vb[i] + va[i]) * h / period;
                            }
                        }
                        state = next;
                    }
                    Err(Error::JointLimit { joint, t, angle }) => {
                        traj.violation = Some(LimitRecord { joint, t, angle });
                        traj.cycle_states.push(state.clone());
                        return Ok(traj);
                    }
                    Err(e) => return Err(e),
                }
                if let Some(j) = model.chain.limit_violation(&state.shape) {
                    traj.violation = Some(LimitRecord { joint: j + 1, t: state.t, angle: state.shape[j] });
                    traj.cycle_states.push(state.clone());
                    return Ok(traj);
                }
            }
        }
    }
    record(&state, &current, &mut traj, &mut noise)?;
    traj.cycle_states.push(state);
    Ok(traj)
}

/// Settings of the synthetic identification experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub duration_per_run: f64,
    pub rate: f64,
    /// Integration steps per output sample.
    pub substeps: usize,
    /// Sine amplitude as a fraction of each unit's `u_max`.
    pub amplitude_fraction: f64,
    /// Command frequency (Hz).
    pub frequency: f64,
    /// Standard deviation of additive pose noise (m and rad).
    pub pose_noise: f64,
    /// Standard deviation of multiplicative force noise.
    pub force_noise: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            duration_per_run: 22.5,
            rate: 200.0,
            substeps: 20,
            amplitude_fraction: 0.5,
            frequency: 1.0 / 6.0,
            pose_noise: 0.0,
            force_noise: 0.0,
        }
    }
}

/// Sign pattern of run `k`: bit `i` of `k` flips unit `i`.
pub fn sign_pattern(k: usize, n_units: usize) -> Vec<f64> {
    (0..n_units).map(|i| if (k >> i) & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

/// One run per sign pattern of the units (`2^N` runs), each starting at rest
/// at zero shape and driving `u_i = s_i a_i sin(2 pi f t)`. Forces come from
/// the model itself. Noise, if requested, is drawn from `seed`.
pub fn generate_identification_dataset(
    model: &DragModel,
    seed: u64,
    opts: &DatasetOptions,
) -> Result<Vec<TrajectoryDataset>> {
    let n = model.n_units();
    let runs = 1usize << n;
    let n_out = (opts.duration_per_run * opts.rate).round() as usize;
    let out_dt = 1.0 / opts.rate;
    let sub = opts.substeps.max(1);
    let dt = out_dt / sub as f64;
    let mut data: Vec<TrajectoryDataset> = (0..runs)
        .into_par_iter()
        .map(|k| -> Result<TrajectoryDataset> {
            let signs = sign_pattern(k, n);
            let amp: Vec<f64> = (0..n).map(|i| signs[i] * opts.amplitude_fraction * model.chain.u_max[i]).collect();
            let w = 2.0 * std::f64::consts::PI * opts.frequency;
            let cmd = |t: f64| -> Vec<f64> { amp.iter().map(|a| a * (w * t).sin()).collect() };
            let mut ds = TrajectoryDataset {
                rate: opts.rate,
                t: Vec::with_capacity(n_out + 1),
                poses: Vec::with_capacity(n_out + 1),
                shapes: Vec::with_capacity(n_out + 1),
                commands: Vec::with_capacity(n_out + 1),
                forces: Vec::with_capacity(n_out + 1),
            };
            let mut state = SimState::at_shape(vec![0.0; n - 1]);
            for i in 0..=n_out {
                let t = i as f64 * out_dt;
                state.t = t;
                let u = cmd(t);
                let zd = model.config_velocity(&state.shape, &u, &[])?;
                ds.t.push(t);
                ds.poses.push(state.pose);
                ds.shapes.push(state.shape.clone());
                ds.forces.push(model.actuator_forces(&state.shape, zd.as_slice(), &u));
                ds.commands.push(u);
                if i < n_out {
                    for s in 0..sub {
                        let ts = t + s as f64 * dt;
                        state.t = ts;
                        state = step(model, &state, &cmd(ts + 0.5 * dt), dt, &[])?;
                    }
                }
            }
            Ok(ds)
        })
        .collect::<Result<_>>()?;
    if opts.pose_noise > 0.0 || opts.force_noise > 0.0 {
        for (k, ds) in data.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            if opts.pose_noise > 0.0 {
                let d = Normal::new(0.0, opts.pose_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                for p in ds.poses.iter_mut() {
                    *p = Pose::new(p.x + d.sample(&mut rng), p.y + d.sample(&mut rng), p.theta + d.sample(&mut rng));
                }
                for s in ds.shapes.iter_mut() {
                    s.iter_mut().for_each(|a| *a += d.sample(&mut rng));
                }
            }
            if opts.force_noise > 0.0 {
                apply_force_noise(ds, opts.force_noise, &mut rng)?;
            }
        }
    }
    Ok(data)
}

/// Multiplies every force reading by `1 + N(0, sigma)`.
pub fn apply_force_noise(ds: &mut TrajectoryDataset, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for f in ds.forces.iter_mut() {
        f.iter_mut().for_each(|v| *v *= 1.0 + d.sample(rng));
    }
    Ok(())
}

/// Seeded copy of a multi-run dataset with multiplicative force noise.
pub fn with_force_noise(data: &[TrajectoryDataset], sigma: f64, seed: u64) -> Result<Vec<TrajectoryDataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.to_vec();
    for ds in out.iter_mut() {
        apply_force_noise(ds, sigma, &mut rng)?;
    }
    Ok(out)
}

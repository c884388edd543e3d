use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use salpgeo::averaging::{augmented_system, bracket_from_parts, field_derivatives, unit_pairs};
use salpgeo::chain::ConfigVelocity;
use salpgeo::dataset::{write_atomic, TrajectoryDataset};
use salpgeo::drag::{DragModel, LocalMetric};
use salpgeo::feedback::{synthesize, ErrorState, FeedbackLaw};
use salpgeo::ident::{build_regression, identify, rescale_objective, resolve_lambda, IdentificationResult, RegressionSystem};
use salpgeo::maneuver::bend;
use salpgeo::planning::{build_cost, check_actuator_limits, plan_motion, refine_full, solve_averaged, CostKind, GaitPlan};
use salpgeo::se2::{Pose, Twist};
use salpgeo::sim::{generate_identification_dataset, run_gait, SimOptions, SimState, Trajectory};

use crate::config::{ExperimentConfig, Maneuver, MetricFile, MetricSource};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn csv_line(cells: &[f64]) -> String {
    let v: Vec<String> = cells.iter().map(|c| format!("{c:.16e}")).collect();
    v.join(",") + "\n"
}

/// Writes the fully resolved configuration next to the outputs.
pub fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_text(&out.join("resolved_config.toml"), &cfg.to_toml()?)
}

// ---------------------------------------------------------------- identify

#[derive(Serialize)]
struct IdentifySummary {
    lambda: f64,
    residual_rms_n: f64,
    kkt_residual: f64,
    fit_value: f64,
    power_value: f64,
    rank_warning: bool,
    weakly_observable: Vec<String>,
    whitened: bool,
    samples: usize,
    /// Largest relative deviation from the generating metric (synthetic data only).
    #[serde(skip_serializing_if = "Option::is_none")]
    max_relative_error: Option<f64>,
}

fn write_identification(dir: &Path, sys: &RegressionSystem, res: &IdentificationResult, truth: Option<&LocalMetric>) -> Result<()> {
    let labels = LocalMetric::labels(sys.n_units);
    let coeffs = res.metric.to_vec();
    write_json(
        &dir.join("metric.json"),
        &MetricFile { mode: sys.mode, labels: labels.clone(), coefficients: coeffs.clone(), metric: res.metric.clone() },
    )?;
    let mut table = String::from("coefficient,value,gradient,hessian_diagonal\n");
    for k in 0..labels.len() {
        table.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            labels[k], coeffs[k], res.residual_gradients[k], res.hessian_diagonal[k]
        ));
    }
    write_text(&dir.join("residual_gradients.csv"), &table)?;
    write_json(&dir.join("condition_report.json"), &res.condition_report)?;
    let max_relative_error = truth.map(|t| {
        t.to_vec().iter().zip(&coeffs).map(|(a, b)| if *a != 0.0 { ((b - a) / a).abs() } else { b.abs() }).fold(0.0, f64::max)
    });
    write_json(
        &dir.join("identify_summary.json"),
        &IdentifySummary {
            lambda: res.lambda,
            residual_rms_n: res.residual_rms,
            kkt_residual: res.kkt_residual,
            fit_value: res.fit_value,
            power_value: res.power_value,
            rank_warning: res.warning,
            weakly_observable: res.condition_report.weakly_observable.clone(),
            whitened: sys.whitening.is_some(),
            samples: sys.n_samples(),
            max_relative_error,
        },
    )
}

#[derive(Serialize)]
struct SweepPoint {
    label: &'static str,
    lambda: f64,
    power_value: f64,
    fit_value: f64,
}

/// Identification end to end. Returns the identified metric.
pub fn cmd_identify(cfg: &ExperimentConfig, out: &Path) -> Result<LocalMetric> {
    let ic = &cfg.identify;
    let chain = cfg.chain_model()?;
    let (data, truth) = if ic.datasets.is_empty() {
        let model = DragModel::new(chain.clone(), cfg.values_metric()?, cfg.metric.mode)?;
        let data = generate_identification_dataset(&model, cfg.seed, &ic.dataset_options())?;
        for (k, ds) in data.iter().enumerate() {
            ds.write_csv(&out.join("datasets").join(format!("run_{k}.csv")))?;
        }
        (data, Some(model.metric))
    } else {
        let data = ic
            .datasets
            .iter()
            .map(|p| TrajectoryDataset::read_csv(Path::new(p)))
            .collect::<salpgeo::Result<Vec<_>>>()?;
        (data, None)
    };
    let mut sys = build_regression(&data, &chain, cfg.metric.mode, &ic.regression_options())?;
    if ic.rescale {
        sys = rescale_objective(&sys)?;
    }
    let res = identify(&sys)?;
    write_identification(out, &sys, &res, truth.as_ref())?;
    if ic.lambda_sweep {
        let chosen = resolve_lambda(&sys)?;
        let points = [("lambda_zero", 0.0), ("lambda_default", chosen), ("lambda_10x", 10.0 * chosen)];
        let mut sweep = Vec::new();
        for (label, lambda) in points {
            let s = RegressionSystem { lambda: Some(lambda), ..sys.clone() };
            let r = identify(&s)?;
            write_identification(&out.join(label), &s, &r, truth.as_ref())?;
            sweep.push(SweepPoint { label, lambda, power_value: r.power_value, fit_value: r.fit_value });
        }
        write_json(&out.join("lambda_sweep.json"), &sweep)?;
    }
    Ok(res.metric)
}

/// The model the planning verbs work with, identifying it first if asked.
pub fn resolve_model(cfg: &ExperimentConfig, out: &Path) -> Result<DragModel> {
    if cfg.metric.source == MetricSource::Identify {
        let metric = cmd_identify(cfg, &out.join("identify"))?;
        return Ok(DragModel::new(cfg.chain_model()?, metric, cfg.metric.mode)?);
    }
    cfg.stated_model()
}

// -------------------------------------------------------------------- plan

#[derive(Serialize)]
struct PlanRow {
    motion: String,
    cost_kind: CostKind,
    cost: f64,
    refined: bool,
    within_limits: bool,
    converged: bool,
    residual: f64,
    peak_command_fraction: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_loop_radius: Option<f64>,
}

pub struct Planned {
    pub name: String,
    pub plan: GaitPlan,
    pub law: Option<FeedbackLaw>,
}

pub fn plan_all(cfg: &ExperimentConfig, model: &DragModel, kind: CostKind) -> Result<Vec<Planned>> {
    let nj = model.chain.n_joints();
    let nominal = cfg.gait.nominal();
    let opts = cfg.gait.solver_options();
    cfg.gait
        .targets(nj)?
        .into_par_iter()
        .map(|(name, desired)| -> Result<Planned> {
            let (plan, cost) = plan_motion(model, &nominal, &desired, cfg.gait.frequency_hz, kind, cfg.gait.order, cfg.gait.refine, &opts)
                .with_context(|| format!("planning '{name}'"))?;
            let law = match cfg.feedback.mode.mode() {
                Some(mode) => Some(
                    synthesize(model, &plan, &cost.r, &cfg.feedback.weights(nj), mode)
                        .with_context(|| format!("feedback for '{name}'"))?,
                ),
                None => None,
            };
            Ok(Planned { name, plan, law })
        })
        .collect()
}

fn gait_loci(model: &DragModel, plan: &GaitPlan) -> Result<String> {
    let n = model.n_units();
    let period = plan.gait.period();
    let opts = SimOptions { dt: None, output_rate: 100.0 / period };
    let traj = run_gait(model, &SimState::at_shape(plan.start_shape.clone()), &plan.gait, 1, None, &[], &opts)?;
    let mut head = vec!["t".to_string(), "x".into(), "y".into(), "theta".into()];
    head.extend((1..n).map(|j| format!("alpha_{j}")));
    head.extend((1..=n).map(|i| format!("u_{i}")));
    let mut text = head.join(",") + "\n";
    for s in &traj.samples {
        let mut row = vec![s.t, s.pose.x, s.pose.y, s.pose.theta];
        row.extend_from_slice(&s.shape);
        row.extend(plan.gait.evaluate(s.t));
        text.push_str(&csv_line(&row));
    }
    Ok(text)
}

const FIELD_GRID: usize = 13;

/// `A(r)` and the pairwise brackets on a grid over the joint limits.
fn field_dumps(model: &DragModel) -> Result<(String, String)> {
    let n = model.n_units();
    let nj = model.chain.n_joints();
    let rows = ["x", "y", "theta"].iter().map(|s| s.to_string()).chain((1..=nj).map(|j| format!("alpha_{j}"))).collect::<Vec<_>>();
    let grid: Vec<Vec<f64>> = if nj == 2 {
        let lim = &model.chain.joint_limits;
        let at = |k: usize, i: usize| lim[k].0 + (lim[k].1 - lim[k].0) * i as f64 / (FIELD_GRID - 1) as f64;
        (0..FIELD_GRID).flat_map(|i| (0..FIELD_GRID).map(move |j| (i, j))).map(|(i, j)| vec![at(0, i), at(1, j)]).collect()
    } else {
        vec![vec![0.0; nj]]
    };
    let shape_head: Vec<String> = (1..=nj).map(|j| format!("r_{j}")).collect();
    let mut a_head = shape_head.clone();
    for row in &rows {
        for c in 1..=n {
            a_head.push(format!("a_{row}_u{c}"));
        }
    }
    let pairs = unit_pairs(n);
    let mut b_head = shape_head;
    for (i, j) in &pairs {
        for row in &rows {
            b_head.push(format!("b{}{}_{row}", i + 1, j + 1));
        }
    }
    let lines: Vec<(String, String)> = grid
        .par_iter()
        .map(|r| -> Result<(String, String)> {
            let a = model.control_field(r)?.a;
            let da = field_derivatives(model, r)?;
            let mut ar = r.clone();
            for row in 0..a.nrows() {
                ar.extend(a.row(row).iter());
            }
            let mut br = r.clone();
            for &(i, j) in &pairs {
                br.extend(bracket_from_parts(&a, &da, i, j).iter());
            }
            Ok((csv_line(&ar), csv_line(&br)))
        })
        .collect::<Result<_>>()?;
    let mut a_text = a_head.join(",") + "\n";
    let mut b_text = b_head.join(",") + "\n";
    for (a, b) in lines {
        a_text.push_str(&a);
        b_text.push_str(&b);
    }
    Ok((a_text, b_text))
}

fn plan_row(model: &DragModel, p: &Planned) -> PlanRow {
    PlanRow {
        motion: p.name.clone(),
        cost_kind: p.plan.cost_kind,
        cost: p.plan.cost,
        refined: p.plan.refined,
        within_limits: p.plan.within_limits,
        converged: p.plan.converged,
        residual: p.plan.residual,
        peak_command_fraction: p.plan.gait.peak_command(256).iter().zip(&model.chain.u_max).map(|(a, b)| a / b).collect(),
        closed_loop_radius: p.law.as_ref().map(|l| l.closed_loop_radius),
    }
}

fn write_planned(dir: &Path, model: &DragModel, p: &Planned) -> Result<()> {
    write_json(&dir.join(format!("plan_{}.json", p.name)), &p.plan)?;
    if let Some(law) = &p.law {
        write_json(&dir.join(format!("law_{}.json", p.name)), law)?;
    }
    write_text(&dir.join(format!("gait_loci_{}.csv", p.name)), &gait_loci(model, &p.plan)?)
}

pub fn cmd_plan(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Planned>> {
    let model = resolve_model(cfg, out)?;
    let avg = augmented_system(&model, &cfg.gait.nominal(), cfg.gait.frequency_hz)?;
    let planned = plan_all(cfg, &model, cfg.gait.cost)?;
    for p in &planned {
        write_planned(out, &model, p)?;
    }
    let (a_text, b_text) = field_dumps(&model)?;
    write_text(&out.join("cvf_field.csv"), &a_text)?;
    write_text(&out.join("bracket_field.csv"), &b_text)?;
    #[derive(Serialize)]
    struct Summary {
        augmented_rank: usize,
        plans: Vec<PlanRow>,
    }
    write_json(
        &out.join("plans_summary.json"),
        &Summary { augmented_rank: avg.rank(1e-9), plans: planned.iter().map(|p| plan_row(&model, p)).collect() },
    )?;
    Ok(planned)
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug, Serialize)]
pub struct CycleSummary {
    pub cycle: usize,
    /// Motion over the cycle in the frame at its start: `(x, y, theta)`.
    pub displacement: [f64; 3],
    pub shape_start: Vec<f64>,
    pub shape_end: Vec<f64>,
    /// Largest joint magnitude during the cycle.
    pub shape_excursion: f64,
    /// Error against the nominal motion at the end of the cycle.
    pub tracking_error: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub motion: String,
    pub feedback: bool,
    pub cycles_completed: usize,
    pub cycles: Vec<CycleSummary>,
    pub total_displacement: [f64; 3],
    pub averaged_velocity: Vec<f64>,
    pub simulated_velocity: Vec<f64>,
    pub limit_violation: Option<(usize, f64, f64)>,
    pub max_shape_error: f64,
    pub drift_failure: bool,
}

pub fn summarize(name: &str, plan: &GaitPlan, start: &SimState, traj: &Trajectory, feedback: bool, drift_threshold: f64) -> RunSummary {
    let period = plan.gait.period();
    let d = plan.desired.to_vector();
    let xi_d = Twist::new(d[0], d[1], d[2]);
    let rate: Vec<f64> = d.iter().skip(3).copied().collect();
    let states = &traj.cycle_states;
    let completed = states.len().saturating_sub(1).min(if traj.violation.is_some() { states.len().saturating_sub(2) } else { usize::MAX });
    let mut cycles = Vec::new();
    let mut max_err: f64 = 0.0;
    for k in 0..completed {
        let (a, b) = (&states[k], &states[k + 1]);
        let rel = a.pose.between(&b.pose);
        let excursion = traj
            .samples
            .iter()
            .filter(|s| s.t >= a.t - 1e-12 && s.t <= b.t + 1e-12)
            .flat_map(|s| s.shape.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        let tau = b.t - start.t;
        let g_d = start.pose.compose(&Pose::exp(&xi_d, tau));
        let r_d: Vec<f64> = plan.start_shape.iter().zip(&rate).map(|(r, v)| r + v * tau).collect();
        let e = ErrorState::between(&b.pose, &g_d, &b.shape, &r_d).to_vector();
        let shape_err = e.iter().skip(3).map(|v| v.abs()).fold(0.0, f64::max);
        max_err = max_err.max(shape_err);
        cycles.push(CycleSummary {
            cycle: k + 1,
            displacement: [rel.x, rel.y, rel.theta],
            shape_start: a.shape.clone(),
            shape_end: b.shape.clone(),
            shape_excursion: excursion,
            tracking_error: e.iter().copied().collect(),
        });
    }
    let last = states.last().unwrap_or(start);
    let total = start.pose.between(&last.pose);
    let elapsed = (last.t - start.t).max(f64::MIN_POSITIVE);
    let lg = total.log();
    let mut sim_v = vec![lg.vx / elapsed, lg.vy / elapsed, lg.omega / elapsed];
    sim_v.extend(last.shape.iter().zip(&start.shape).map(|(a, b)| (a - b) / elapsed));
    let _ = period;
    RunSummary {
        motion: name.to_string(),
        feedback,
        cycles_completed: completed,
        cycles,
        total_displacement: [total.x, total.y, total.theta],
        averaged_velocity: plan.achieved_average.to_vector().iter().copied().collect(),
        simulated_velocity: sim_v,
        limit_violation: traj.violation.as_ref().map(|v| (v.joint, v.t, v.angle)),
        max_shape_error: max_err,
        drift_failure: traj.violation.is_some() || max_err > drift_threshold,
    }
}

fn trajectory_csv(traj: &Trajectory, rate: f64) -> String {
    traj.to_dataset(rate).to_csv_string()
}

fn load_plan(path: &Path) -> Result<GaitPlan> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| salpgeo::Error::Parse(format!("{}: {e}", path.display())))?)
}

/// Outcome the caller maps to an exit code.
pub enum SimOutcome {
    Completed,
    LimitViolation(salpgeo::Error),
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, plan_path: Option<&PathBuf>) -> Result<SimOutcome> {
    let model = resolve_model(cfg, out)?;
    let nj = model.chain.n_joints();
    if cfg.sim.maneuver == Maneuver::Bend {
        let start = SimState::at_shape(cfg.gait.nominal());
        let opts = cfg.bend.options(cfg.gait.cost, cfg.gait.order);
        let res = bend(&model, &start, &opts, &cfg.gait.solver_options())?;
        write_text(&out.join("trajectory.csv"), &trajectory_csv(&res.trajectory, cfg.sim.output_rate_hz))?;
        #[derive(Serialize)]
        struct BendSummary {
            cycle_shapes_deg: Vec<Vec<f64>>,
            final_shape_deg: Vec<f64>,
            plans_converged: Vec<bool>,
            limit_violation: Option<(usize, f64, f64)>,
        }
        let deg = |s: &Vec<f64>| s.iter().map(|a| a.to_degrees()).collect::<Vec<_>>();
        write_json(
            &out.join("summary.json"),
            &BendSummary {
                cycle_shapes_deg: res.cycle_shapes.iter().map(deg).collect(),
                final_shape_deg: deg(&res.final_shape().to_vec()),
                plans_converged: res.plans.iter().map(|p| p.converged).collect(),
                limit_violation: res.trajectory.violation.as_ref().map(|v| (v.joint, v.t, v.angle)),
            },
        )?;
        return Ok(match res.trajectory.violation {
            Some(v) => SimOutcome::LimitViolation(salpgeo::Error::JointLimit { joint: v.joint, t: v.t, angle: v.angle }),
            None => SimOutcome::Completed,
        });
    }

    let (name, plan, law) = match plan_path {
        Some(p) => {
            let plan = load_plan(p)?;
            let law = match cfg.feedback.mode.mode() {
                Some(mode) => {
                    let cost = salpgeo::planning::build_cost(&model, &plan.nominal, plan.cost_kind, plan.gait.order())?;
                    Some(synthesize(&model, &plan, &cost.r, &cfg.feedback.weights(nj), mode)?)
                }
                None => None,
            };
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("plan").trim_start_matches("plan_").to_string();
            (name, plan, law)
        }
        None => {
            let mut planned = plan_all(cfg, &model, cfg.gait.cost)?;
            let idx = match &cfg.sim.motion {
                Some(m) => planned
                    .iter()
                    .position(|p| &p.name == m)
                    .ok_or_else(|| salpgeo::Error::Parse(format!("no planned motion named '{m}'")))?,
                None => 0,
            };
            let p = planned.swap_remove(idx);
            write_json(&out.join(format!("plan_{}.json", p.name)), &p.plan)?;
            (p.name, p.plan, p.law)
        }
    };
    let shape = if cfg.sim.initial_shape_deg.is_empty() {
        plan.start_shape.clone()
    } else {
        cfg.sim.initial_shape_deg.iter().map(|d| d.to_radians()).collect()
    };
    let start = SimState::at_shape(shape);
    let opts = SimOptions { dt: Some(plan.gait.period() / cfg.gait.steps_per_period as f64), output_rate: cfg.sim.output_rate_hz };
    let traj = run_gait(&model, &start, &plan.gait, cfg.sim.cycles, law.as_ref(), &cfg.sim.disturbances(cfg.seed), &opts)?;
    write_text(&out.join("trajectory.csv"), &trajectory_csv(&traj, cfg.sim.output_rate_hz))?;
    let summary = summarize(&name, &plan, &start, &traj, law.is_some(), cfg.sim.drift_threshold_rad);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(match traj.violation {
        Some(v) => SimOutcome::LimitViolation(salpgeo::Error::JointLimit { joint: v.joint, t: v.t, angle: v.angle }),
        None => SimOutcome::Completed,
    })
}

// ------------------------------------------------------------------- sweep

#[derive(Serialize)]
struct SweepCase {
    motion: String,
    cost_kind: CostKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan: Option<PlanRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_cycle_displacement: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Every configured motion under every cost kind, run in parallel.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = resolve_model(cfg, out)?;
    let nj = model.chain.n_joints();
    let kinds = [CostKind::Velocity, CostKind::Power, CostKind::Force];
    let targets = cfg.gait.targets(nj)?;
    let cases: Vec<(String, ConfigVelocity, CostKind)> =
        kinds.iter().flat_map(|&k| targets.iter().map(move |(n, d)| (n.clone(), d.clone(), k))).collect();
    let nominal = cfg.gait.nominal();
    let opts = cfg.gait.solver_options();
    let results: Vec<SweepCase> = cases
        .par_iter()
        .map(|(name, desired, kind)| {
            let dir = out.join(format!("{}_{}", name, kind_name(*kind)));
            let run = || -> Result<(PlanRow, [f64; 3])> {
                // limits are reported per case here rather than aborting it
                let avg = augmented_system(&model, &nominal, cfg.gait.frequency_hz)?;
                let cost = build_cost(&model, &nominal, *kind, cfg.gait.order)?;
                let mut plan = solve_averaged(&avg, &cost, desired, &opts)?;
                if cfg.gait.refine {
                    plan = refine_full(&model, &plan, &cost, &opts)?;
                }
                plan.within_limits = check_actuator_limits(&model, &plan.gait).is_ok();
                let law = match cfg.feedback.mode.mode() {
                    Some(mode) => Some(synthesize(&model, &plan, &cost.r, &cfg.feedback.weights(nj), mode)?),
                    None => None,
                };
                let p = Planned { name: name.clone(), plan, law };
                write_planned(&dir, &model, &p)?;
                let start = SimState::at_shape(p.plan.start_shape.clone());
                let sim_opts = SimOptions { dt: Some(p.plan.gait.period() / cfg.gait.steps_per_period as f64), output_rate: cfg.sim.output_rate_hz };
                let traj = run_gait(&model, &start, &p.plan.gait, 1, None, &[], &sim_opts)?;
                let end = traj.cycle_states.last().map_or(start.pose, |s| s.pose);
                let rel = start.pose.between(&end);
                Ok((plan_row(&model, &p), [rel.x, rel.y, rel.theta]))
            };
            match run() {
                Ok((row, disp)) => SweepCase { motion: name.clone(), cost_kind: *kind, plan: Some(row), per_cycle_displacement: Some(disp), error: None },
                Err(e) => SweepCase { motion: name.clone(), cost_kind: *kind, plan: None, per_cycle_displacement: None, error: Some(format!("{e:#}")) },
            }
        })
        .collect();
    write_json(&out.join("sweep_summary.json"), &results)
}

fn kind_name(k: CostKind) -> &'static str {
    match k {
        CostKind::Velocity => "velocity",
        CostKind::Power => "power",
        CostKind::Force => "force",
    }
}

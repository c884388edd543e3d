//! Bending the chain into a C or S shape by commanding a shape velocity,
//! replanning the averaged gait about the current shape every cycle.

use serde::{Deserialize, Serialize};

use crate::averaging::augmented_system;
use crate::chain::ConfigVelocity;
use crate::drag::DragModel;
use crate::error::{Error, Result};
use crate::planning::{build_cost, refine_full, solve_averaged, CostKind, GaitPlan, SolverOptions};
use crate::se2::Twist;
use crate::sim::{run_gait, SimOptions, SimState, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BendShape {
    /// All joints bend the same way.
    C,
    /// Joints alternate.
    S,
}

impl BendShape {
    pub fn signs(self, n_joints: usize) -> Vec<f64> {
        (0..n_joints)
            .map(|j| match self {
                BendShape::C => 1.0,
                BendShape::S if j % 2 == 0 => 1.0,
                BendShape::S => -1.0,
            })
            .collect()
    }
}

impl std::str::FromStr for BendShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" | "C" => Ok(BendShape::C),
            "s" | "S" => Ok(BendShape::S),
            _ => Err(Error::Parse(format!("unknown bend shape '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BendOptions {
    pub shape: BendShape,
    /// +1 bends toward positive angles on the first joint, -1 mirrors.
    pub direction: f64,
    /// Joint rate in degrees per cycle.
    pub rate_deg_per_cycle: f64,
    pub frequency: f64,
    pub cycles: usize,
    pub order: usize,
    pub cost: CostKind,
    /// Correct every cycle's gait against the full simulation.
    pub refine: bool,
}

impl Default for BendOptions {
    fn default() -> Self {
        Self {
            shape: BendShape::C,
            direction: 1.0,
            rate_deg_per_cycle: 5.0 / 3.0,
            frequency: 1.0,
            cycles: 12,
            order: 1,
            cost: CostKind::Velocity,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BendResult {
    pub plans: Vec<GaitPlan>,
    /// Shape at every cycle boundary, starting with the initial one.
    pub cycle_shapes: Vec<Vec<f64>>,
    pub trajectory: Trajectory,
}

impl BendResult {
    pub fn final_shape(&self) -> &[f64] {
        self.cycle_shapes.last().map_or(&[], Vec::as_slice)
    }
}

/// Runs the maneuver from `start`. Stops with the partial record if a joint
/// leaves its limits.
pub fn bend(model: &DragModel, start: &SimState, opts: &BendOptions, solver: &SolverOptions) -> Result<BendResult> {
    let nj = model.chain.n_joints();
    if !(opts.frequency > 0.0) {
        return Err(Error::InvalidArgument("frequency must be positive".into()));
    }
    let rate = opts.rate_deg_per_cycle.to_radians() * opts.frequency * opts.direction;
    let desired = ConfigVelocity {
        xi: Twist::zero(),
        alpha_dot: opts.shape.signs(nj).iter().map(|s| s * rate).collect(),
    };
    let sim = SimOptions { dt: Some(1.0 / (opts.frequency * solver.steps_per_period as f64)), ..Default::default() };
    let mut state = start.clone();
    let mut out = BendResult { plans: Vec::new(), cycle_shapes: vec![state.shape.clone()], trajectory: Trajectory::default() };
    for _ in 0..opts.cycles {
        let avg = augmented_system(model, &state.shape, opts.frequency)?;
        let cost = build_cost(model, &state.shape, opts.cost, opts.order)?;
        let mut plan = solve_averaged(&avg, &cost, &desired, solver)?;
        if opts.refine {
            plan = refine_full(model, &plan, &cost, solver)?;
        }
        let traj = run_gait(model, &state, &plan.gait, 1, None, &[], &sim)?;
        let skip = usize::from(!out.trajectory.samples.is_empty());
        out.trajectory.samples.extend(traj.samples.into_iter().skip(skip));
        out.trajectory.cycle_gaits.push(plan.gait.clone());
        out.plans.push(plan);
        if traj.violation.is_some() {
            out.trajectory.violation = traj.violation;
            break;
        }
        state = traj.cycle_states.last().cloned().ok_or_else(|| Error::SolverFailure("empty cycle".into()))?;
        out.cycle_shapes.push(state.shape.clone());
    }
    out.trajectory.cycle_states = out.cycle_shapes.iter().map(|s| SimState::at_shape(s.clone())).collect();
    Ok(out)
}

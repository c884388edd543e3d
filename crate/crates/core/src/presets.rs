//! The three-unit LandSalp test platform and its standard motions.

use serde::{Deserialize, Serialize};

use crate::chain::{rpm_to_surface_speed, ChainModel, ConfigVelocity};
use crate::drag::{CommandMode, DragModel, LocalMetric};
use crate::error::{Error, Result};
use crate::se2::Twist;

pub const LINK_LENGTH: f64 = 0.27;
pub const WHEEL_DIAMETER: f64 = 0.083;
pub const BETA_DEG: [f64; 3] = [-57.0, -130.0, -57.0];
pub const MAX_RPM: [f64; 3] = [32.0, 14.0, 32.0];
pub const JOINT_LIMIT_DEG: f64 = 60.0;
/// Default gait frequency (Hz).
pub const GAIT_FREQUENCY: f64 = 1.0 / 6.0;

pub fn landsalp_chain() -> ChainModel {
    let lim = JOINT_LIMIT_DEG.to_radians();
    ChainModel::new(
        LINK_LENGTH,
        BETA_DEG.iter().map(|b| b.to_radians()).collect(),
        vec![(-lim, lim); 2],
        MAX_RPM.iter().map(|&r| rpm_to_surface_speed(r, WHEEL_DIAMETER)).collect(),
    )
    .expect("preset chain is valid")
}

/// A diagonal metric in the style of an identified one: stiff along each
/// wheel's rolling axis, softer across it, heavier center unit.
pub fn landsalp_metric() -> LocalMetric {
    LocalMetric::new(vec![[40.0, 12.0, 0.3], [60.0, 30.0, 0.6], [40.0, 12.0, 0.3]], vec![0.3, 0.3])
        .expect("preset metric is valid")
}

pub fn landsalp_model() -> DragModel {
    DragModel::new(landsalp_chain(), landsalp_metric(), CommandMode::Velocity).expect("preset model factors")
}

/// Standard motions at zero shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
    TurnCw,
    TurnCcw,
}

impl Direction {
    pub const SHIPPED: [Direction; 5] =
        [Direction::Forward, Direction::Backward, Direction::Left, Direction::Right, Direction::TurnCw];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::TurnCw => "turn_cw",
            Direction::TurnCcw => "turn_ccw",
        }
    }

    /// Motion per cycle: 3 cm along the chain, 6 cm across it, 45 degrees.
    pub fn per_cycle(self) -> Twist {
        let turn = 45f64.to_radians();
        match self {
            Direction::Forward => Twist::new(0.03, 0.0, 0.0),
            Direction::Backward => Twist::new(-0.03, 0.0, 0.0),
            Direction::Left => Twist::new(0.0, 0.06, 0.0),
            Direction::Right => Twist::new(0.0, -0.06, 0.0),
            Direction::TurnCw => Twist::new(0.0, 0.0, -turn),
            Direction::TurnCcw => Twist::new(0.0, 0.0, turn),
        }
    }

    pub fn desired_velocity(self, omega: f64, n_joints: usize) -> ConfigVelocity {
        ConfigVelocity { xi: self.per_cycle().scale(omega), alpha_dot: vec![0.0; n_joints] }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::TurnCw => Direction::TurnCcw,
            Direction::TurnCcw => Direction::TurnCw,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Direction::Forward,
            Direction::Backward,
            Direction::Left,
            Direction::Right,
            Direction::TurnCw,
            Direction::TurnCcw,
        ]
        .into_iter()
        .find(|d| d.name() == s)
        .ok_or_else(|| Error::Parse(format!("unknown direction '{s}'")))
    }
}

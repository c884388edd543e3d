//! Experiment configuration. Every key carries its unit in its name; unknown
//! keys are rejected and every default is written back out with the results.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use salpgeo::chain::{rpm_to_surface_speed, ChainModel, ConfigVelocity};
use salpgeo::drag::{CommandMode, DragModel, LocalMetric};
use salpgeo::feedback::{FeedbackMode, FeedbackWeights};
use salpgeo::ident::{PowerForm, RegressionOptions};
use salpgeo::maneuver::{BendOptions, BendShape};
use salpgeo::planning::{CostKind, SolverOptions};
use salpgeo::presets::{self, Direction};
use salpgeo::se2::Twist;
use salpgeo::sim::{DatasetOptions, Disturbance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub chain: ChainSection,
    pub metric: MetricSection,
    pub identify: IdentifySection,
    pub gait: GaitSection,
    pub feedback: FeedbackSection,
    pub sim: SimSection,
    pub bend: BendSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            chain: ChainSection::default(),
            metric: MetricSection::default(),
            identify: IdentifySection::default(),
            gait: GaitSection::default(),
            feedback: FeedbackSection::default(),
            sim: SimSection::default(),
            bend: BendSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub link_length_m: f64,
    pub wheel_diameter_m: f64,
    pub beta_deg: Vec<f64>,
    pub max_rpm: Vec<f64>,
    pub joint_limit_deg: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self {
            link_length_m: presets::LINK_LENGTH,
            wheel_diameter_m: presets::WHEEL_DIAMETER,
            beta_deg: presets::BETA_DEG.to_vec(),
            max_rpm: presets::MAX_RPM.to_vec(),
            joint_limit_deg: presets::JOINT_LIMIT_DEG,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    /// The built-in metric, or the explicit values below when given.
    Values,
    /// A metric file written by `identify`.
    File,
    /// Identify from the `[identify]` data before planning.
    Identify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSection {
    pub source: MetricSource,
    pub mode: CommandMode,
    /// Per unit: rolling-axis and lateral drag.
    pub unit_linear_ns_per_m: Vec<[f64; 2]>,
    pub unit_rotational_nms_per_rad: Vec<f64>,
    pub joint_nms_per_rad: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl Default for MetricSection {
    fn default() -> Self {
        let m = presets::landsalp_metric();
        Self {
            source: MetricSource::Values,
            mode: CommandMode::Velocity,
            unit_linear_ns_per_m: m.unit_blocks.iter().map(|b| [b[0], b[1]]).collect(),
            unit_rotational_nms_per_rad: m.unit_blocks.iter().map(|b| b[2]).collect(),
            joint_nms_per_rad: m.joint_coeffs.clone(),
            file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifySection {
    /// Trajectory CSV files; empty means generate the excitation runs.
    pub datasets: Vec<String>,
    pub run_duration_s: f64,
    pub rate_hz: f64,
    pub substeps: usize,
    pub excitation_frequency_hz: f64,
    pub amplitude_fraction: f64,
    pub force_noise_fraction: f64,
    pub pose_noise_m_rad: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub power_form: PowerForm,
    /// Zero disables filtering.
    pub cutoff_hz: f64,
    pub balance_weight: f64,
    pub rescale: bool,
    /// Also report at lambda = 0 and ten times the chosen lambda.
    pub lambda_sweep: bool,
}

impl Default for IdentifySection {
    fn default() -> Self {
        let d = DatasetOptions::default();
        let r = RegressionOptions::default();
        Self {
            datasets: Vec::new(),
            run_duration_s: d.duration_per_run,
            rate_hz: d.rate,
            substeps: d.substeps,
            excitation_frequency_hz: d.frequency,
            amplitude_fraction: d.amplitude_fraction,
            force_noise_fraction: d.force_noise,
            pose_noise_m_rad: d.pose_noise,
            lambda: None,
            power_form: r.power_form,
            cutoff_hz: r.cutoff.unwrap_or(0.0),
            balance_weight: r.balance_weight,
            rescale: false,
            lambda_sweep: false,
        }
    }
}

impl IdentifySection {
    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            duration_per_run: self.run_duration_s,
            rate: self.rate_hz,
            substeps: self.substeps,
            amplitude_fraction: self.amplitude_fraction,
            frequency: self.excitation_frequency_hz,
            pose_noise: self.pose_noise_m_rad,
            force_noise: self.force_noise_fraction,
        }
    }

    pub fn regression_options(&self) -> RegressionOptions {
        RegressionOptions {
            lambda: self.lambda,
            power_form: self.power_form,
            cutoff: (self.cutoff_hz > 0.0).then_some(self.cutoff_hz),
            balance_weight: self.balance_weight,
        }
    }
}

/// A custom motion per gait cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSection {
    pub name: String,
    #[serde(default)]
    pub x_m_per_cycle: f64,
    #[serde(default)]
    pub y_m_per_cycle: f64,
    #[serde(default)]
    pub theta_deg_per_cycle: f64,
    #[serde(default)]
    pub joints_deg_per_cycle: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitSection {
    pub directions: Vec<Direction>,
    pub motions: Vec<MotionSection>,
    pub frequency_hz: f64,
    pub order: usize,
    pub cost: CostKind,
    pub nominal_shape_deg: Vec<f64>,
    pub refine: bool,
    pub max_iterations: usize,
    pub refine_tolerance: f64,
    pub steps_per_period: usize,
}

impl Default for GaitSection {
    fn default() -> Self {
        let s = SolverOptions::default();
        Self {
            directions: Direction::SHIPPED.to_vec(),
            motions: Vec::new(),
            frequency_hz: presets::GAIT_FREQUENCY,
            order: 1,
            cost: CostKind::Velocity,
            nominal_shape_deg: vec![0.0, 0.0],
            refine: true,
            max_iterations: s.max_iter,
            refine_tolerance: s.refine_tol,
            steps_per_period: s.steps_per_period,
        }
    }
}

impl GaitSection {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iter: self.max_iterations,
            refine_tol: self.refine_tolerance,
            steps_per_period: self.steps_per_period,
            ..SolverOptions::default()
        }
    }

    pub fn nominal(&self) -> Vec<f64> {
        self.nominal_shape_deg.iter().map(|d| d.to_radians()).collect()
    }

    /// Named desired velocities: shipped directions first, then custom ones.
    pub fn targets(&self, n_joints: usize) -> Result<Vec<(String, ConfigVelocity)>> {
        let f = self.frequency_hz;
        let mut out: Vec<(String, ConfigVelocity)> =
            self.directions.iter().map(|d| (d.name().to_string(), d.desired_velocity(f, n_joints))).collect();
        for m in &self.motions {
            let mut joints = m.joints_deg_per_cycle.clone();
            if joints.is_empty() {
                joints = vec![0.0; n_joints];
            }
            if joints.len() != n_joints {
                bail!("motion '{}' needs {n_joints} joint rates", m.name);
            }
            out.push((
                m.name.clone(),
                ConfigVelocity {
                    xi: Twist::new(m.x_m_per_cycle * f, m.y_m_per_cycle * f, m.theta_deg_per_cycle.to_radians() * f),
                    alpha_dot: joints.iter().map(|d| d.to_radians() * f).collect(),
                },
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackChoice {
    Off,
    Initial,
    Integrated,
}

impl FeedbackChoice {
    pub fn mode(self) -> Option<FeedbackMode> {
        match self {
            FeedbackChoice::Off => None,
            FeedbackChoice::Initial => Some(FeedbackMode::Initial),
            FeedbackChoice::Integrated => Some(FeedbackMode::Integrated),
        }
    }
}

impl std::str::FromStr for FeedbackChoice {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "initial" => Ok(Self::Initial),
            "integrated" => Ok(Self::Integrated),
            _ => bail!("unknown feedback mode '{s}' (off|initial|integrated)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackSection {
    pub mode: FeedbackChoice,
    /// `(x, y, theta, joints...)`; empty uses the built-in weights.
    pub state_weights: Vec<f64>,
    pub input_weight_scale: f64,
}

impl Default for FeedbackSection {
    fn default() -> Self {
        let w = FeedbackWeights::default_for(2);
        Self { mode: FeedbackChoice::Initial, state_weights: Vec::new(), input_weight_scale: w.r_scale }
    }
}

impl FeedbackSection {
    pub fn weights(&self, n_joints: usize) -> FeedbackWeights {
        let mut w = FeedbackWeights::default_for(n_joints);
        if !self.state_weights.is_empty() {
            w.q_diag = self.state_weights.clone();
        }
        w.r_scale = self.input_weight_scale;
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Gait,
    Bend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub unit: usize,
    #[serde(default)]
    pub vx_m_per_s: f64,
    #[serde(default)]
    pub vy_m_per_s: f64,
    #[serde(default)]
    pub omega_rad_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseSection {
    pub t_s: f64,
    pub delta_deg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub maneuver: Maneuver,
    /// Plan to run when several were made; defaults to the first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<String>,
    pub cycles: usize,
    pub output_rate_hz: f64,
    /// Empty starts at the plan's start shape.
    pub initial_shape_deg: Vec<f64>,
    pub flows: Vec<FlowSection>,
    pub impulses: Vec<ImpulseSection>,
    pub force_noise_fraction: f64,
    /// Shape error (rad) beyond which a run counts as drifting.
    pub drift_threshold_rad: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            maneuver: Maneuver::Gait,
            motion: None,
            cycles: 4,
            output_rate_hz: 200.0,
            initial_shape_deg: Vec::new(),
            flows: Vec::new(),
            impulses: Vec::new(),
            force_noise_fraction: 0.0,
            drift_threshold_rad: 0.5,
        }
    }
}

impl SimSection {
    pub fn disturbances(&self, seed: u64) -> Vec<Disturbance> {
        let mut d: Vec<Disturbance> = self
            .flows
            .iter()
            .map(|f| Disturbance::ConstantTwist {
                unit: f.unit,
                twist: Twist::new(f.vx_m_per_s, f.vy_m_per_s, f.omega_rad_per_s),
            })
            .collect();
        d.extend(self.impulses.iter().map(|i| Disturbance::ShapeImpulse {
            t: i.t_s,
            delta: i.delta_deg.iter().map(|a| a.to_radians()).collect(),
        }));
        if self.force_noise_fraction > 0.0 {
            d.push(Disturbance::ForceNoise { sigma: self.force_noise_fraction, seed });
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BendSection {
    pub shape: BendShape,
    pub direction: f64,
    pub rate_deg_per_cycle: f64,
    pub frequency_hz: f64,
    pub cycles: usize,
    pub refine: bool,
}

impl Default for BendSection {
    fn default() -> Self {
        let b = BendOptions::default();
        Self {
            shape: b.shape,
            direction: b.direction,
            rate_deg_per_cycle: b.rate_deg_per_cycle,
            frequency_hz: b.frequency,
            cycles: b.cycles,
            refine: b.refine,
        }
    }
}

impl BendSection {
    pub fn options(&self, cost: CostKind, order: usize) -> BendOptions {
        BendOptions {
            shape: self.shape,
            direction: self.direction,
            rate_deg_per_cycle: self.rate_deg_per_cycle,
            frequency: self.frequency_hz,
            cycles: self.cycles,
            order,
            cost,
            refine: self.refine,
        }
    }
}

/// What `identify` writes as `metric.json`, and what `source = "file"` reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricFile {
    pub mode: CommandMode,
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub metric: LocalMetric,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| salpgeo::Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.chain.beta_deg.len();
        let invalid = |m: String| -> anyhow::Error { salpgeo::Error::Parse(m).into() };
        if n < 2 || self.chain.max_rpm.len() != n {
            return Err(invalid(format!("chain needs matching beta_deg and max_rpm lists of at least 2 (got {n})")));
        }
        if self.metric.source == MetricSource::Values
            && (self.metric.unit_linear_ns_per_m.len() != n
                || self.metric.unit_rotational_nms_per_rad.len() != n
                || self.metric.joint_nms_per_rad.len() + 1 != n)
        {
            return Err(invalid(format!("metric values must describe {n} units and {} joints", n - 1)));
        }
        if self.metric.source == MetricSource::File && self.metric.file.is_none() {
            return Err(invalid("metric source 'file' needs metric.file".into()));
        }
        if self.gait.nominal_shape_deg.len() + 1 != n {
            return Err(invalid(format!("gait.nominal_shape_deg needs {} entries", n - 1)));
        }
        if !(self.gait.frequency_hz > 0.0) || self.gait.order == 0 {
            return Err(invalid("gait frequency must be positive and order at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn chain_model(&self) -> Result<ChainModel> {
        let c = &self.chain;
        let lim = c.joint_limit_deg.to_radians();
        Ok(ChainModel::new(
            c.link_length_m,
            c.beta_deg.iter().map(|b| b.to_radians()).collect(),
            vec![(-lim, lim); c.beta_deg.len() - 1],
            c.max_rpm.iter().map(|&r| rpm_to_surface_speed(r, c.wheel_diameter_m)).collect(),
        )?)
    }

    /// Model from explicit values or a metric file. `Identify` is resolved
    /// by the caller.
    pub fn stated_model(&self) -> Result<DragModel> {
        let chain = self.chain_model()?;
        let (metric, mode) = match self.metric.source {
            MetricSource::File => {
                let path = self.metric.file.as_deref().unwrap_or_default();
                let text = std::fs::read_to_string(path).with_context(|| format!("reading metric file {path}"))?;
                let f: MetricFile =
                    serde_json::from_str(&text).map_err(|e| salpgeo::Error::Parse(format!("{path}: {e}")))?;
                (f.metric, f.mode)
            }
            _ => (self.values_metric()?, self.metric.mode),
        };
        Ok(DragModel::new(chain, metric, mode)?)
    }

    pub fn values_metric(&self) -> Result<LocalMetric> {
        let m = &self.metric;
        Ok(LocalMetric::new(
            m.unit_linear_ns_per_m
                .iter()
                .zip(&m.unit_rotational_nms_per_rad)
                .map(|(l, r)| [l[0], l[1], *r])
                .collect(),
            m.joint_nms_per_rad.clone(),
        )?)
    }
}

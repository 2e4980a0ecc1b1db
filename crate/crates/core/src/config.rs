//! Run configuration: a schema-versioned JSON file describing the
//! system, truth model, simulation, data generation, training, and
//! evaluation settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Rotation, Vec3};
use crate::integrators::StepScheme;
use crate::learning::train::TrainConfig;
use crate::potentials::{CompositePotential, PointMassGravity, PotentialModel, QuadrupoleResidual};
use crate::rigidbody::{BodyParams, BodyState, SystemParams, SystemState};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub mass: f64,
    /// Principal moments of inertia (body frame is principal-axis).
    pub inertia: [f64; 3],
    pub q: [f64; 3],
    pub p: [f64; 3],
    /// Row-major rotation matrix; identity when omitted.
    #[serde(default)]
    pub r: Option<[f64; 9]>,
    pub pi: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub g: f64,
    #[serde(default)]
    pub r_min: Option<f64>,
    pub bodies: Vec<BodyConfig>,
}

/// Which closed-form truth model drives data generation and gradient
/// metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthModel {
    PointMass,
    /// Point-mass gravity plus the MacCullagh quadrupole residual.
    Quadrupole,
}

impl TruthModel {
    pub fn build(&self) -> Result<Box<dyn PotentialModel>> {
        Ok(match self {
            TruthModel::PointMass => Box::new(PointMassGravity),
            TruthModel::Quadrupole => Box::new(CompositePotential::new(vec![
                Box::new(PointMassGravity),
                Box::new(QuadrupoleResidual),
            ])?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TruthModel::PointMass => "point-mass",
            TruthModel::Quadrupole => "quadrupole",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scheme: StepScheme,
    pub h: f64,
    pub steps: usize,
    /// Keep every n-th snapshot in trajectory output (1 = all).
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of trajectories.
    pub l: usize,
    /// Observed steps per trajectory (K+1 snapshots stored).
    pub k: usize,
    /// Observation spacing.
    pub dt: f64,
    /// Ground-truth integrator step; must divide dt.
    pub fine_h: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Observation steps per predicted trajectory.
    pub horizon: usize,
    /// Integrator steps per observation interval.
    pub substeps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { horizon: 500, substeps: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub schemes: Vec<StepScheme>,
    pub hs: Vec<f64>,
    pub t_end: f64,
    pub h_ref: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub system: SystemConfig,
    pub truth: TruthModel,
    pub sim: SimConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub convergence: Option<ConvergenceConfig>,
    /// Free-form provenance note carried through verbatim.
    #[serde(default)]
    pub note: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.system.bodies.is_empty() {
            return Err(Error::Config("system needs at least one body".into()));
        }
        if !(self.sim.h > 0.0) || self.sim.steps == 0 || self.sim.stride == 0 {
            return Err(Error::Config("sim needs h > 0, steps >= 1, stride >= 1".into()));
        }
        if let Some(d) = &self.data {
            if d.l == 0 || d.k == 0 || !(d.dt > 0.0) || !(d.fine_h > 0.0) {
                return Err(Error::Config("data needs l, k >= 1 and dt, fine_h > 0".into()));
            }
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(c) = &self.convergence {
            if c.schemes.is_empty() || c.hs.is_empty() || !(c.t_end > 0.0) || !(c.h_ref > 0.0) {
                return Err(Error::Config(
                    "convergence needs schemes, hs, t_end > 0, h_ref > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Physical parameters and initial state described by the config.
    pub fn to_system(&self) -> Result<(SystemParams, SystemState)> {
        let mut bodies = Vec::with_capacity(self.system.bodies.len());
        let mut states = Vec::with_capacity(self.system.bodies.len());
        for (i, b) in self.system.bodies.iter().enumerate() {
            bodies.push(
                BodyParams::new(b.mass, b.inertia)
                    .map_err(|e| Error::Config(format!("body {i}: {e}")))?,
            );
            let r = match &b.r {
                Some(m) => Rotation::new(Mat3 { m: *m })
                    .map_err(|e| Error::Config(format!("body {i} rotation: {e}")))?,
                None => Rotation::IDENTITY,
            };
            states.push(BodyState {
                q: Vec3::new(b.q[0], b.q[1], b.q[2]),
                p: Vec3::new(b.p[0], b.p[1], b.p[2]),
                r,
                pi: Vec3::new(b.pi[0], b.pi[1], b.pi[2]),
            });
        }
        let mut params = SystemParams::new(bodies, self.system.g)
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(r_min) = self.system.r_min {
            if !(r_min > 0.0) {
                return Err(Error::Config("r_min must be > 0".into()));
            }
            params.r_min = r_min;
        }
        let state = SystemState { t: 0.0, bodies: states };
        params.check_state(&state).map_err(|e| Error::Config(e.to_string()))?;
        Ok((params, state))
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smartbsp::grid::SensorGeometry;
use smartbsp::ppo::PpoHyper;
use smartbsp::sim::{ScenarioParams, SimConfig};
use smartbsp::spline::{CostWeights, SplineSettings};
use smartbsp::{Error, Result};

/// File name of the echoed effective configuration inside an output directory.
pub const EFFECTIVE_CONFIG: &str = "config.json";

/// Everything a run depends on. The top-level `seed` is authoritative and is
/// copied into `hyper.seed` by [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub geometry: SensorGeometry,
    pub weights: CostWeights,
    pub spline: SplineSettings,
    pub hyper: PpoHyper,
    pub sim: SimConfig,
    pub scenario: ScenarioParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            geometry: SensorGeometry::default(),
            weights: CostWeights::default(),
            spline: SplineSettings::default(),
            hyper: PpoHyper::default(),
            sim: SimConfig::default(),
            scenario: ScenarioParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Copy the top-level seed into the nested settings that carry one.
    pub fn resolved(mut self) -> Self {
        self.hyper.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.weights.validate()?;
        self.spline.validate()?;
        self.hyper.validate()?;
        self.sim.validate()?;
        if self.scenario.arrival_radius <= 0.0 {
            return Err(Error::Config("scenario.arrival_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(EFFECTIVE_CONFIG), self.to_json())?;
        Ok(())
    }
}

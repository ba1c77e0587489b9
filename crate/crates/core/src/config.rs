//! Run configuration loaded from TOML. Every key is optional; an empty file
//! yields the reference settings.
//!
//! ```toml
//! seed = 0
//!
//! [plant]
//! a = [[0.95]]
//! b = [[0.5]]
//! c = [[1.0]]
//! e = [[0.3]]
//! u_min = [0.0]
//! u_max = [5.0]
//! du_max = 1.0
//!
//! [scenarios]
//! n_train = 2000
//!
//! [loss]
//! q_track = 0.01
//!
//! [train]
//! epochs = 200
//!
//! [eval]
//! steps = 3000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closedloop::LossWeights;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::linalg::Matrix;
use crate::plant::LinearSsm;
use crate::policy::{feature_dim, MlpShape};
use crate::scenarios::{Dims, ScenarioConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub du_max: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let p = LinearSsm::default_scalar();
        Self {
            a: p.a().to_rows(),
            b: p.b().to_rows(),
            c: p.c().to_rows(),
            e: p.e().to_rows(),
            u_min: p.u_min().to_vec(),
            u_max: p.u_max().to_vec(),
            du_max: p.du_max(),
        }
    }
}

impl PlantConfig {
    pub fn build(&self) -> Result<LinearSsm> {
        let m = |key: &str, rows: &[Vec<f64>]| {
            Matrix::from_rows(rows).map_err(|e| Error::config(format!("plant.{key}"), e.to_string()))
        };
        LinearSsm::new(
            m("a", &self.a)?,
            m("b", &self.b)?,
            m("c", &self.c)?,
            m("e", &self.e)?,
            self.u_min.clone(),
            self.u_max.clone(),
            self.du_max,
        )
        .map_err(|e| Error::config("plant", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub plant: PlantConfig,
    pub scenarios: ScenarioConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Parses and validates; errors carry the dotted key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string().trim_end()))?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path.is_empty() || path == "." { "<root>".to_string() } else { path };
            Error::config(key, e.into_inner().message().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A missing or unreadable config file is a user error, not an IO one.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.build()?;
        self.scenarios.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn plant(&self) -> Result<LinearSsm> {
        self.plant.build()
    }

    pub fn dims(&self) -> Result<Dims> {
        let p = self.plant()?;
        Ok(Dims { nx: p.nx(), ny: p.ny(), nd: p.nd() })
    }

    pub fn policy_shape(&self) -> Result<MlpShape> {
        let p = self.plant()?;
        Ok(MlpShape { in_dim: feature_dim(p.ny(), p.nd()), hidden: self.train.hidden, depth: self.train.depth, nu: p.nu() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

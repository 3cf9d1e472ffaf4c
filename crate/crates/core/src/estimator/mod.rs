//! Per-entity time-series estimator: ingestion, embedded store, scheduled
//! training and inference, HTTP API and broker writeback.

mod model;
mod service;
mod store;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    fit_ridge, infer, lag_matrix, median_gap, train, Algorithm, ForecastModel, Prediction,
    TrainingConfig,
};
pub use service::{Estimator, EstimatorStats, IngestReport, SchedulerHandle, TrainOutcome};
pub use store::{Sample, SeriesKey, TimeSeriesStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("normal matrix is singular")]
    SingularFit,
    #[error("insufficient context: need {needed} samples, have {available}")]
    InsufficientContext { needed: usize, available: usize },
    #[error("unknown series {0}")]
    UnknownSeries(String),
    #[error("no trained model for {0}")]
    ModelNotTrained(String),
    #[error("source unreachable: {0}")]
    SourceUnreachable(String),
    #[error("writeback failed: {0}")]
    Writeback(String),
}

/// Which entities and attribute an estimator instance forecasts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Profile {
    pub name: String,
    pub entity_type: String,
    pub attribute: String,
}

impl Profile {
    pub fn new(name: &str, entity_type: &str, attribute: &str) -> Self {
        Self {
            name: name.into(),
            entity_type: entity_type.into(),
            attribute: attribute.into(),
        }
    }

    pub fn parking() -> Self {
        Self::new("parking", "OnStreetParking", "availableSpotNumber")
    }

    pub fn traffic() -> Self {
        Self::new("traffic", "TrafficFlowObserved", "intensity")
    }

    pub fn noise() -> Self {
        Self::new("noise", "NoiseLevelObserved", "LAeq")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "parking" => Some(Self::parking()),
            "traffic" => Some(Self::traffic()),
            "noise" => Some(Self::noise()),
            _ => None,
        }
    }
}

/// Estimator instance configuration, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// `parking`, `traffic` or `noise`.
    pub profile: String,
    /// Overrides the profile's entity type.
    pub entity_type: Option<String>,
    /// Overrides the profile's attribute.
    pub attribute: Option<String>,
    pub broker_url: Option<String>,
    pub writeback: bool,
    pub listen: Option<String>,
    pub training: TrainingConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            profile: "parking".into(),
            entity_type: None,
            attribute: None,
            broker_url: None,
            writeback: true,
            listen: None,
            training: TrainingConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn from_toml(text: &str) -> Result<Self, EstimatorError> {
        let c: Self = toml::from_str(text).map_err(|e| EstimatorError::InvalidConfig(e.to_string()))?;
        c.training.validate()?;
        c.resolve_profile()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EstimatorError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn resolve_profile(&self) -> Result<Profile, EstimatorError> {
        let mut p = Profile::builtin(&self.profile)
            .ok_or_else(|| EstimatorError::InvalidConfig(format!("unknown profile {}", self.profile)))?;
        if let Some(t) = &self.entity_type {
            p.entity_type = t.clone();
        }
        if let Some(a) = &self.attribute {
            p.attribute = a.clone();
        }
        Ok(p)
    }
}

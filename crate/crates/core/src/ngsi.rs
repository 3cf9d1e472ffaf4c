//! NGSI entity model shared by every service in the toolkit.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::LazyLock;
use thiserror::Error;

static ATTR_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z0-9_:\-]+$").expect("attribute name regex"));

/// Errors raised when an entity or attribute breaks the NGSI structural rules.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntityError {
    #[error("entity id must be non-empty and contain no whitespace: {0:?}")]
    InvalidId(String),
    #[error("entity type must be non-empty and contain no whitespace: {0:?}")]
    InvalidType(String),
    #[error("attribute name {0:?} is reserved")]
    ReservedName(String),
    #[error("attribute name {0:?} is not allowed")]
    InvalidName(String),
    #[error("attribute {name:?}: {reason}")]
    InvalidValue { name: String, reason: String },
}

/// One attribute of an entity: a JSON value tagged with its NGSI value type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Attribute {
    #[serde(default)]
    pub value: Value,
    pub value_type: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

impl Attribute {
    pub fn new(value_type: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            value: value.into(),
            value_type: value_type.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn number(value: f64) -> Self {
        Self::new("Number", value)
    }

    pub fn integer(value: i64) -> Self {
        Self::new("Number", value)
    }

    pub fn text(value: impl Into<String>) -> Self {
        Self::new("Text", value.into())
    }

    pub fn reference(value: impl Into<String>) -> Self {
        Self::new("Reference", value.into())
    }

    pub fn date_time(value: impl Into<String>) -> Self {
        Self::new("DateTime", value.into())
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.value.as_f64()
    }

    pub fn as_str(&self) -> Option<&str> {
        self.value.as_str()
    }

    /// Checks the value against its declared type (`Number` must be numeric,
    /// `DateTime` must be an ISO-8601 string).
    pub fn check(&self, name: &str) -> Result<(), EntityError> {
        let bad = |reason: &str| EntityError::InvalidValue {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        if self.value_type.is_empty() {
            return Err(bad("valueType is empty"));
        }
        match self.value_type.as_str() {
            "Number" if !self.value.is_number() => Err(bad("Number attribute must hold a number")),
            "DateTime" => match self.value.as_str() {
                Some(s) if parse_iso8601(s).is_some() => Ok(()),
                _ => Err(bad("DateTime attribute must hold an ISO-8601 string")),
            },
            _ => Ok(()),
        }
    }
}

/// Parses the ISO-8601 forms accepted for `DateTime` values and returns epoch seconds.
pub fn parse_iso8601(s: &str) -> Option<f64> {
    use chrono::{DateTime, NaiveDate, NaiveDateTime};
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            let utc = dt.and_utc();
            return Some(utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) * 1e-9);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp() as f64)
}

/// Formats epoch seconds as an RFC 3339 UTC timestamp with second precision.
pub fn format_iso8601(epoch_seconds: i64) -> String {
    chrono::DateTime::from_timestamp(epoch_seconds, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn is_valid_attribute_name(name: &str) -> bool {
    ATTR_NAME.is_match(name)
}

fn is_valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

/// The context record stored by the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NgsiEntity {
    pub id: String,
    #[serde(alias = "type")]
    pub entity_type: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Attribute>,
}

impl NgsiEntity {
    pub fn new(id: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entity_type: entity_type.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, attribute: Attribute) -> Self {
        self.attributes.insert(name.into(), attribute);
        self
    }

    pub fn attr(&self, name: &str) -> Option<&Attribute> {
        self.attributes.get(name)
    }

    pub fn validate(&self) -> Result<(), EntityError> {
        if !is_valid_token(&self.id) {
            return Err(EntityError::InvalidId(self.id.clone()));
        }
        if !is_valid_token(&self.entity_type) {
            return Err(EntityError::InvalidType(self.entity_type.clone()));
        }
        for (name, attr) in &self.attributes {
            check_attribute_name(name)?;
            attr.check(name)?;
        }
        Ok(())
    }
}

pub fn check_attribute_name(name: &str) -> Result<(), EntityError> {
    if name == "id" || name == "type" {
        return Err(EntityError::ReservedName(name.to_string()));
    }
    if !is_valid_attribute_name(name) {
        return Err(EntityError::InvalidName(name.to_string()));
    }
    Ok(())
}

//! Legacy JSON to NGSI mapping and NGSI to NGSI-LD translation.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use std::sync::LazyLock;
use thiserror::Error;

use crate::ngsi::{format_iso8601, is_valid_attribute_name, Attribute, NgsiEntity};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransformError {
    #[error("invalid source path {path:?}: {reason}")]
    InvalidPath { path: String, reason: String },
    #[error("invalid rule set: {0}")]
    InvalidRules(String),
    #[error("attribute {attribute:?} is a reference but holds a non-string value")]
    MalformedReference { attribute: String },
}

/// One step of a source path: an object key or an array index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathSegment {
    Key(String),
    Index(usize),
}

/// A dot/bracket path into a JSON document, e.g. `sensor.readings[0].value`
/// or `meta["free spots"]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcePath {
    raw: String,
    segments: Vec<PathSegment>,
}

impl SourcePath {
    pub fn parse(raw: &str) -> Result<Self, TransformError> {
        let err = |reason: &str| TransformError::InvalidPath {
            path: raw.to_string(),
            reason: reason.to_string(),
        };
        let chars: Vec<char> = raw.chars().collect();
        let mut segments = Vec::new();
        let mut i = 0;
        let mut expect_key = true;
        while i < chars.len() {
            match chars[i] {
                '.' => {
                    if expect_key {
                        return Err(err("empty key"));
                    }
                    expect_key = true;
                    i += 1;
                }
                '[' => {
                    let close = chars[i..]
                        .iter()
                        .position(|&c| c == ']')
                        .map(|p| p + i)
                        .ok_or_else(|| err("unclosed bracket"))?;
                    let inner: String = chars[i + 1..close].iter().collect();
                    let quoted = inner.len() >= 2
                        && ((inner.starts_with('"') && inner.ends_with('"'))
                            || (inner.starts_with('\'') && inner.ends_with('\'')));
                    if quoted {
                        segments.push(PathSegment::Key(inner[1..inner.len() - 1].to_string()));
                    } else {
                        let idx = inner.parse().map_err(|_| err("bracket needs an index or a quoted key"))?;
                        segments.push(PathSegment::Index(idx));
                    }
                    expect_key = false;
                    i = close + 1;
                }
                _ => {
                    if !expect_key {
                        return Err(err("missing '.' before key"));
                    }
                    let start = i;
                    while i < chars.len() && chars[i] != '.' && chars[i] != '[' {
                        i += 1;
                    }
                    segments.push(PathSegment::Key(chars[start..i].iter().collect()));
                    expect_key = false;
                }
            }
        }
        if segments.is_empty() || (expect_key && !raw.is_empty() && raw.ends_with('.')) {
            return Err(err("empty path"));
        }
        Ok(Self {
            raw: raw.to_string(),
            segments,
        })
    }

    pub fn resolve<'a>(&self, doc: &'a Value) -> Option<&'a Value> {
        let mut cur = doc;
        for seg in &self.segments {
            cur = match seg {
                PathSegment::Key(k) => cur.as_object()?.get(k)?,
                PathSegment::Index(i) => cur.as_array()?.get(*i)?,
            };
        }
        Some(cur)
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

impl fmt::Display for SourcePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Transform {
    #[default]
    Identity,
    Scale(f64),
    EnumMap(BTreeMap<String, Value>),
    /// chrono format string, or `epoch` / `epochMillis` for numeric sources.
    ParseTimestamp(String),
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttributeMapping {
    pub source_path: String,
    pub target_attribute: String,
    pub value_type: String,
    #[serde(default)]
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MappingRuleSet {
    pub entity_type_template: String,
    pub id_template: String,
    /// Path to the records inside the document; the document root if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records_path: Option<String>,
    pub attribute_mappings: Vec<AttributeMapping>,
}

#[derive(Debug, Clone)]
enum TemplatePart {
    Literal(String),
    Placeholder(SourcePath),
}

#[derive(Debug, Clone)]
struct Template(Vec<TemplatePart>);

impl Template {
    fn parse(raw: &str) -> Result<Self, TransformError> {
        let mut parts = Vec::new();
        let mut rest = raw;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(TemplatePart::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .map(|c| c + open)
                .ok_or_else(|| TransformError::InvalidRules(format!("unclosed placeholder in {raw:?}")))?;
            parts.push(TemplatePart::Placeholder(SourcePath::parse(&rest[open + 1..close])?));
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            parts.push(TemplatePart::Literal(rest.to_string()));
        }
        Ok(Self(parts))
    }

    /// Renders against a record; the unresolved placeholder is returned on failure.
    fn render(&self, record: &Value) -> Result<String, String> {
        let mut out = String::new();
        for part in &self.0 {
            match part {
                TemplatePart::Literal(s) => out.push_str(s),
                TemplatePart::Placeholder(p) => match p.resolve(record) {
                    Some(Value::String(s)) if !s.is_empty() => out.push_str(s),
                    Some(Value::Number(n)) => out.push_str(&n.to_string()),
                    Some(Value::Bool(b)) => out.push_str(&b.to_string()),
                    _ => return Err(p.as_str().to_string()),
                },
            }
        }
        Ok(out)
    }
}

/// A validated rule set ready to apply.
#[derive(Debug, Clone)]
pub struct CompiledRules {
    type_template: Template,
    id_template: Template,
    records_path: Option<SourcePath>,
    mappings: Vec<(SourcePath, AttributeMapping)>,
}

impl MappingRuleSet {
    pub fn from_json(text: &str) -> Result<Self, TransformError> {
        serde_json::from_str(text).map_err(|e| TransformError::InvalidRules(e.to_string()))
    }

    pub fn compile(&self) -> Result<CompiledRules, TransformError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut mappings = Vec::new();
        for m in &self.attribute_mappings {
            if !is_valid_attribute_name(&m.target_attribute)
                || m.target_attribute == "id"
                || m.target_attribute == "type"
            {
                return Err(TransformError::InvalidRules(format!(
                    "bad target attribute {:?}",
                    m.target_attribute
                )));
            }
            if !seen.insert(m.target_attribute.clone()) {
                return Err(TransformError::InvalidRules(format!(
                    "duplicate target attribute {:?}",
                    m.target_attribute
                )));
            }
            mappings.push((SourcePath::parse(&m.source_path)?, m.clone()));
        }
        let id_template = Template::parse(&self.id_template)?;
        if !id_template
            .0
            .iter()
            .any(|p| matches!(p, TemplatePart::Placeholder(_)))
        {
            return Err(TransformError::InvalidRules(
                "idTemplate needs at least one placeholder".into(),
            ));
        }
        Ok(CompiledRules {
            type_template: Template::parse(&self.entity_type_template)?,
            id_template,
            records_path: self.records_path.as_deref().map(SourcePath::parse).transpose()?,
            mappings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordErrorKind {
    IdUnresolvable,
    TransformError,
    InvalidEntity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecordError {
    pub index: usize,
    pub kind: RecordErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MappingOutput {
    pub entities: Vec<NgsiEntity>,
    pub errors: Vec<RecordError>,
}

fn apply_transform(t: &Transform, v: &Value) -> Result<Value, String> {
    match t {
        Transform::Identity => Ok(v.clone()),
        Transform::Scale(f) => v
            .as_f64()
            .map(|x| serde_json::json!(x * f))
            .ok_or_else(|| format!("scale needs a number, got {v}")),
        Transform::EnumMap(table) => {
            let key = match v {
                Value::String(s) => s.clone(),
                Value::Number(_) | Value::Bool(_) => v.to_string(),
                _ => return Err(format!("enumMap needs a scalar, got {v}")),
            };
            table
                .get(&key)
                .cloned()
                .ok_or_else(|| format!("enumMap has no entry for {key:?}"))
        }
        Transform::ParseTimestamp(fmt) => parse_timestamp(fmt, v).map(Value::String),
    }
}

fn parse_timestamp(format: &str, v: &Value) -> Result<String, String> {
    use chrono::{DateTime, NaiveDateTime};
    match format {
        "epoch" => v
            .as_f64()
            .map(|x| format_iso8601(x.floor() as i64))
            .ok_or_else(|| format!("epoch timestamp needs a number, got {v}")),
        "epochMillis" => v
            .as_f64()
            .map(|x| format_iso8601((x / 1000.0).floor() as i64))
            .ok_or_else(|| format!("epochMillis timestamp needs a number, got {v}")),
        _ => {
            let s = v
                .as_str()
                .ok_or_else(|| format!("timestamp needs a string, got {v}"))?;
            if let Ok(dt) = DateTime::parse_from_str(s, format) {
                return Ok(format_iso8601(dt.timestamp()));
            }
            NaiveDateTime::parse_from_str(s, format)
                .map(|dt| format_iso8601(dt.and_utc().timestamp()))
                .map_err(|e| format!("{s:?} does not match {format:?}: {e}"))
        }
    }
}

impl CompiledRules {
    fn map_record(&self, index: usize, record: &Value) -> Result<NgsiEntity, RecordError> {
        let fail = |kind, message: String| RecordError {
            index,
            kind,
            message,
        };
        let id = self.id_template.render(record).map_err(|p| {
            fail(
                RecordErrorKind::IdUnresolvable,
                format!("id placeholder {{{p}}} unresolvable"),
            )
        })?;
        let entity_type = self.type_template.render(record).map_err(|p| {
            fail(
                RecordErrorKind::IdUnresolvable,
                format!("type placeholder {{{p}}} unresolvable"),
            )
        })?;
        let mut entity = NgsiEntity::new(id, entity_type);
        for (path, m) in &self.mappings {
            let Some(raw) = path.resolve(record) else {
                continue;
            };
            let value = apply_transform(&m.transform, raw).map_err(|msg| {
                fail(
                    RecordErrorKind::TransformError,
                    format!("{}: {msg}", m.target_attribute),
                )
            })?;
            let value_type = if matches!(m.transform, Transform::ParseTimestamp(_)) {
                "DateTime".to_string()
            } else {
                m.value_type.clone()
            };
            let attr = Attribute::new(value_type, value);
            attr.check(&m.target_attribute)
                .map_err(|e| fail(RecordErrorKind::TransformError, e.to_string()))?;
            entity.attributes.insert(m.target_attribute.clone(), attr);
        }
        entity
            .validate()
            .map_err(|e| fail(RecordErrorKind::InvalidEntity, e.to_string()))?;
        Ok(entity)
    }

    pub fn apply(&self, document: &Value) -> MappingOutput {
        let root = match &self.records_path {
            Some(p) => match p.resolve(document) {
                Some(v) => v,
                None => return MappingOutput::default(),
            },
            None => document,
        };
        let records: Vec<&Value> = match root {
            Value::Array(items) => items.iter().collect(),
            other => vec![other],
        };
        let mut out = MappingOutput::default();
        for (i, r) in records.into_iter().enumerate() {
            match self.map_record(i, r) {
                Ok(e) => out.entities.push(e),
                Err(e) => out.errors.push(e),
            }
        }
        out
    }
}

/// Maps a legacy JSON document to NGSI entities, one per record.
pub fn json_to_ngsi(
    document: &Value,
    rules: &MappingRuleSet,
) -> Result<MappingOutput, TransformError> {
    Ok(rules.compile()?.apply(document))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemberKind {
    Property,
    GeoProperty,
    Relationship,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdMember {
    pub kind: MemberKind,
    /// `value` for properties, `object` for relationships.
    pub value: Value,
    pub sub_properties: BTreeMap<String, Value>,
}

impl Serialize for LdMember {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2 + self.sub_properties.len()))?;
        map.serialize_entry("type", &self.kind)?;
        let key = if self.kind == MemberKind::Relationship {
            "object"
        } else {
            "value"
        };
        map.serialize_entry(key, &self.value)?;
        for (k, v) in &self.sub_properties {
            map.serialize_entry(k, &serde_json::json!({"type": "Property", "value": v}))?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgsiLdEntity {
    pub id: String,
    pub entity_type: String,
    pub context_urls: Vec<String>,
    pub members: BTreeMap<String, LdMember>,
}

impl Serialize for NgsiLdEntity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(3 + self.members.len()))?;
        map.serialize_entry("id", &self.id)?;
        map.serialize_entry("type", &self.entity_type)?;
        for (k, m) in &self.members {
            map.serialize_entry(k, m)?;
        }
        map.serialize_entry("@context", &self.context_urls)?;
        map.end()
    }
}

static URN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^urn:[A-Za-z0-9][A-Za-z0-9-]{0,31}:\S+$").expect("urn regex"));

pub fn is_urn(s: &str) -> bool {
    URN.is_match(s)
}

fn to_urn(entity_type: &str, local: &str) -> String {
    if is_urn(local) {
        local.to_string()
    } else {
        format!("urn:ngsi-ld:{entity_type}:{local}")
    }
}

/// Name of the referenced type for `ref<Type>` attributes.
fn referenced_type(name: &str) -> Option<&str> {
    name.strip_prefix("ref").filter(|t| !t.is_empty())
}

/// Translates an NGSI entity to NGSI-LD. Property and GeoProperty values are
/// carried over unchanged; `ref<Type>` references become relationships.
pub fn ngsi_to_ngsild(entity: &NgsiEntity, context_url: &str) -> Result<NgsiLdEntity, TransformError> {
    let mut members = BTreeMap::new();
    for (name, attr) in &entity.attributes {
        let member = match (attr.value_type.as_str(), referenced_type(name)) {
            ("Reference", Some(target)) => {
                let local = attr.value.as_str().ok_or_else(|| TransformError::MalformedReference {
                    attribute: name.clone(),
                })?;
                LdMember {
                    kind: MemberKind::Relationship,
                    value: Value::String(to_urn(target, local)),
                    sub_properties: attr.metadata.clone(),
                }
            }
            ("geo:json", _) => LdMember {
                kind: MemberKind::GeoProperty,
                value: attr.value.clone(),
                sub_properties: attr.metadata.clone(),
            },
            _ => LdMember {
                kind: MemberKind::Property,
                value: attr.value.clone(),
                sub_properties: attr.metadata.clone(),
            },
        };
        members.insert(name.clone(), member);
    }
    Ok(NgsiLdEntity {
        id: to_urn(&entity.entity_type, &entity.id),
        entity_type: entity.entity_type.clone(),
        context_urls: vec![context_url.to_string()],
        members,
    })
}

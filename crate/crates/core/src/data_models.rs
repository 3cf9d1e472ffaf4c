//! Entity-type schemas and the validation service that checks entities
//! against them.
//!
//! A schema document is a JSON object:
//!
//! ```json
//! {
//!   "entityType": "OnStreetParking",
//!   "required": ["totalSpotNumber", "availableSpotNumber"],
//!   "attributes": {
//!     "totalSpotNumber": { "type": "Number", "range": [0, null] },
//!     "availableSpotNumber": { "type": "Number", "range": [0, null] }
//!   },
//!   "lessOrEqual": [["availableSpotNumber", "totalSpotNumber"]]
//! }
//! ```
//!
//! Rules support an expected value type, an optional closed numeric range
//! (either bound may be `null`), and at most one of `enum` / `pattern`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ngsi::{parse_iso8601, NgsiEntity};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema parse error: {0}")]
    Parse(String),
    #[error("inconsistent rule for {attribute}: {reason}")]
    InconsistentRule { attribute: String, reason: String },
    #[error("schema file {file} declares entity type {declared}")]
    NameMismatch { file: String, declared: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    MissingRequired,
    WrongType,
    OutOfRange,
    NotInEnum,
    PatternMismatch,
    UnknownEntityType,
}

impl RuleKind {
    pub const ALL: [RuleKind; 6] = [
        RuleKind::MissingRequired,
        RuleKind::WrongType,
        RuleKind::OutOfRange,
        RuleKind::NotInEnum,
        RuleKind::PatternMismatch,
        RuleKind::UnknownEntityType,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::MissingRequired => "missing-required",
            RuleKind::WrongType => "wrong-type",
            RuleKind::OutOfRange => "out-of-range",
            RuleKind::NotInEnum => "not-in-enum",
            RuleKind::PatternMismatch => "pattern-mismatch",
            RuleKind::UnknownEntityType => "unknown-entity-type",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub expected_value_type: String,
    pub numeric_range: Option<(Option<f64>, Option<f64>)>,
    pub enum_values: Option<BTreeSet<String>>,
    pub pattern: Option<Regex>,
}

impl Rule {
    pub fn of_type(value_type: impl Into<String>) -> Self {
        Self {
            expected_value_type: value_type.into(),
            numeric_range: None,
            enum_values: None,
            pattern: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataModelSchema {
    pub entity_type: String,
    pub attribute_rules: BTreeMap<String, Rule>,
    pub required_attributes: BTreeSet<String>,
    /// Cross-field constraints `(a, b)` meaning `a <= b`.
    pub less_or_equal: Vec<(String, String)>,
}

impl DataModelSchema {
    /// Removes the rule for `attribute` (and its required flag and any
    /// cross-field constraint that names it).
    pub fn without_rule(&self, attribute: &str) -> Self {
        let mut s = self.clone();
        s.attribute_rules.remove(attribute);
        s.required_attributes.remove(attribute);
        s.less_or_equal
            .retain(|(a, b)| a != attribute && b != attribute);
        s
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SchemaDoc {
    entity_type: String,
    #[serde(default)]
    required: Vec<String>,
    #[serde(default)]
    attributes: BTreeMap<String, RuleDoc>,
    #[serde(default)]
    less_or_equal: Vec<(String, String)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    #[serde(rename = "type")]
    value_type: String,
    #[serde(default)]
    range: Option<(Option<f64>, Option<f64>)>,
    #[serde(default, rename = "enum")]
    enum_values: Option<Vec<String>>,
    #[serde(default)]
    pattern: Option<String>,
}

/// Parses one schema document.
pub fn parse_schema(document: &str) -> Result<DataModelSchema, SchemaError> {
    let doc: SchemaDoc =
        serde_json::from_str(document).map_err(|e| SchemaError::Parse(e.to_string()))?;
    if doc.entity_type.is_empty() {
        return Err(SchemaError::Parse("entityType is empty".into()));
    }
    let inconsistent = |attribute: &str, reason: &str| SchemaError::InconsistentRule {
        attribute: attribute.to_string(),
        reason: reason.to_string(),
    };
    let mut rules = BTreeMap::new();
    for (name, r) in doc.attributes {
        if let Some((Some(lo), Some(hi))) = r.range {
            if lo > hi {
                return Err(inconsistent(&name, &format!("range min {lo} > max {hi}")));
            }
        }
        if r.enum_values.is_some() && r.pattern.is_some() {
            return Err(inconsistent(&name, "both enum and pattern set"));
        }
        let pattern = match r.pattern {
            Some(p) => Some(
                Regex::new(&p).map_err(|e| inconsistent(&name, &format!("bad pattern: {e}")))?,
            ),
            None => None,
        };
        rules.insert(
            name,
            Rule {
                expected_value_type: r.value_type,
                numeric_range: r.range,
                enum_values: r.enum_values.map(|v| v.into_iter().collect()),
                pattern,
            },
        );
    }
    let required: BTreeSet<String> = doc.required.into_iter().collect();
    if let Some(missing) = required.iter().find(|r| !rules.contains_key(*r)) {
        return Err(inconsistent(missing, "required attribute has no rule"));
    }
    for (a, b) in &doc.less_or_equal {
        for name in [a, b] {
            if !rules.contains_key(name) {
                return Err(inconsistent(name, "cross-field rule names an unknown attribute"));
            }
        }
    }
    Ok(DataModelSchema {
        entity_type: doc.entity_type,
        attribute_rules: rules,
        required_attributes: required,
        less_or_equal: doc.less_or_equal,
    })
}

const BUNDLED: &[(&str, &str)] = &[
    ("ArrivalEstimation", include_str!("../schemas/ArrivalEstimation.json")),
    ("GtfsAgency", include_str!("../schemas/GtfsAgency.json")),
    ("GtfsRoute", include_str!("../schemas/GtfsRoute.json")),
    ("GtfsService", include_str!("../schemas/GtfsService.json")),
    ("GtfsStop", include_str!("../schemas/GtfsStop.json")),
    ("GtfsStopTime", include_str!("../schemas/GtfsStopTime.json")),
    ("GtfsTransitFeedFile", include_str!("../schemas/GtfsTransitFeedFile.json")),
    ("GtfsTrip", include_str!("../schemas/GtfsTrip.json")),
    ("NoiseLevelObserved", include_str!("../schemas/NoiseLevelObserved.json")),
    ("OnStreetParking", include_str!("../schemas/OnStreetParking.json")),
    ("ParkingSpot", include_str!("../schemas/ParkingSpot.json")),
    ("TrafficFlowObserved", include_str!("../schemas/TrafficFlowObserved.json")),
];

pub type RegistrySnapshot = Arc<BTreeMap<String, Arc<DataModelSchema>>>;

/// Schema registry. Validations run against an immutable snapshot; loads
/// swap in a new snapshot.
#[derive(Default)]
pub struct SchemaRegistry {
    current: RwLock<RegistrySnapshot>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the schema corpus shipped in `schemas/`.
    pub fn bundled() -> Self {
        let reg = Self::new();
        for (_, doc) in BUNDLED {
            reg.load_schema(doc).expect("bundled schema is valid");
        }
        reg
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        Arc::clone(&self.current.read().expect("registry lock"))
    }

    pub fn insert(&self, schema: DataModelSchema) {
        let mut guard = self.current.write().expect("registry lock");
        let mut next: BTreeMap<_, _> = (**guard).clone();
        next.insert(schema.entity_type.clone(), Arc::new(schema));
        *guard = Arc::new(next);
    }

    /// Parses and registers a schema, replacing any previous version.
    pub fn load_schema(&self, document: &str) -> Result<Arc<DataModelSchema>, SchemaError> {
        let schema = parse_schema(document)?;
        let entity_type = schema.entity_type.clone();
        self.insert(schema);
        Ok(Arc::clone(&self.snapshot()[&entity_type]))
    }

    /// Loads every `<EntityType>.json` file in `dir`.
    pub fn load_dir(&self, dir: &Path) -> Result<usize, SchemaError> {
        let io = |e: std::io::Error| SchemaError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in &paths {
            let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let schema = parse_schema(&text)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem != schema.entity_type {
                return Err(SchemaError::NameMismatch {
                    file: path.display().to_string(),
                    declared: schema.entity_type,
                });
            }
            self.insert(schema);
        }
        Ok(paths.len())
    }

    pub fn contains(&self, entity_type: &str) -> bool {
        self.snapshot().contains_key(entity_type)
    }

    pub fn validate(&self, entity: &NgsiEntity) -> ValidationReport {
        validate_entity(entity, &self.snapshot())
    }
}

/// Writes the bundled corpus into `dir` (one file per entity type).
pub fn write_bundled_schemas(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, doc) in BUNDLED {
        std::fs::write(dir.join(format!("{name}.json")), doc)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Violation {
    pub attribute_name: String,
    pub rule_kind: RuleKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidationReport {
    pub entity_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn kind_matches(value_type: &str, value: &Value) -> bool {
    match value_type {
        "Number" => value.is_number(),
        "Text" | "Reference" => value.is_string(),
        "DateTime" => value.as_str().and_then(parse_iso8601).is_some(),
        "Boolean" => value.is_boolean(),
        "geo:json" => value.get("type").is_some_and(Value::is_string),
        "StructuredValue" => value.is_object() || value.is_array(),
        _ => true,
    }
}

/// Checks one entity. Every violated rule is reported once; an attribute with
/// the wrong type is not checked further.
pub fn validate_entity(
    entity: &NgsiEntity,
    registry: &BTreeMap<String, Arc<DataModelSchema>>,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |attribute_name: &str, rule_kind: RuleKind, message: String| {
        violations.push(Violation {
            attribute_name: attribute_name.to_string(),
            rule_kind,
            message,
        })
    };
    let Some(schema) = registry.get(&entity.entity_type) else {
        push(
            "type",
            RuleKind::UnknownEntityType,
            format!("no schema for entity type {:?}", entity.entity_type),
        );
        return ValidationReport {
            entity_id: entity.id.clone(),
            violations,
        };
    };

    for name in &schema.required_attributes {
        if !entity.attributes.contains_key(name) {
            push(name, RuleKind::MissingRequired, format!("{name} is required"));
        }
    }

    for (name, rule) in &schema.attribute_rules {
        let Some(attr) = entity.attributes.get(name) else {
            continue;
        };
        if attr.value_type != rule.expected_value_type
            || !kind_matches(&rule.expected_value_type, &attr.value)
        {
            push(
                name,
                RuleKind::WrongType,
                format!(
                    "expected {} value, got {} {}",
                    rule.expected_value_type, attr.value_type, attr.value
                ),
            );
            continue;
        }
        if let (Some((lo, hi)), Some(x)) = (rule.numeric_range, attr.value.as_f64()) {
            let below = lo.is_some_and(|lo| x < lo);
            let above = hi.is_some_and(|hi| x > hi);
            if below || above {
                push(
                    name,
                    RuleKind::OutOfRange,
                    format!("{x} outside [{}, {}]", bound(lo), bound(hi)),
                );
            }
        }
        if let Some(allowed) = &rule.enum_values {
            let ok = attr.value.as_str().is_some_and(|s| allowed.contains(s));
            if !ok {
                push(
                    name,
                    RuleKind::NotInEnum,
                    format!("{} not in {:?}", attr.value, allowed),
                );
            }
        }
        if let Some(re) = &rule.pattern {
            let ok = attr.value.as_str().is_some_and(|s| re.is_match(s));
            if !ok {
                push(
                    name,
                    RuleKind::PatternMismatch,
                    format!("{} does not match {}", attr.value, re.as_str()),
                );
            }
        }
    }

    for (a, b) in &schema.less_or_equal {
        let av = entity.attributes.get(a).and_then(|x| x.value.as_f64());
        let bv = entity.attributes.get(b).and_then(|x| x.value.as_f64());
        if let (Some(av), Some(bv)) = (av, bv) {
            if av > bv {
                push(a, RuleKind::OutOfRange, format!("{a}={av} exceeds {b}={bv}"));
            }
        }
    }

    ValidationReport {
        entity_id: entity.id.clone(),
        violations,
    }
}

fn bound(b: Option<f64>) -> String {
    b.map_or_else(|| "unbounded".to_string(), |x| x.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BatchSummary {
    pub total: u64,
    pub valid: u64,
    pub invalid: u64,
    pub per_kind_counts: BTreeMap<RuleKind, u64>,
}

impl BatchSummary {
    pub fn add(&mut self, report: &ValidationReport) {
        self.total += 1;
        if report.is_valid() {
            self.valid += 1;
        } else {
            self.invalid += 1;
        }
        for v in &report.violations {
            *self.per_kind_counts.entry(v.rule_kind).or_default() += 1;
        }
    }

    pub fn violation_count(&self) -> u64 {
        self.per_kind_counts.values().sum()
    }
}

/// Folds `validate_entity` over a stream. `on_report` sees every report as
/// it is produced; nothing else is retained.
pub fn validate_batch<I, F>(
    entities: I,
    registry: &BTreeMap<String, Arc<DataModelSchema>>,
    mut on_report: F,
) -> BatchSummary
where
    I: IntoIterator<Item = NgsiEntity>,
    F: FnMut(&ValidationReport),
{
    let mut summary = BatchSummary::default();
    for e in entities {
        let report = validate_entity(&e, registry);
        on_report(&report);
        summary.add(&report);
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngsi::Attribute;

    fn spot(status: &str) -> NgsiEntity {
        NgsiEntity::new("P1", "ParkingSpot").with("status", Attribute::text(status))
    }

    #[test]
    fn bundled_registry_has_every_type() {
        let reg = SchemaRegistry::bundled();
        for t in [
            "ParkingSpot",
            "OnStreetParking",
            "TrafficFlowObserved",
            "NoiseLevelObserved",
            "ArrivalEstimation",
            "GtfsTransitFeedFile",
            "GtfsAgency",
            "GtfsRoute",
            "GtfsTrip",
            "GtfsStop",
            "GtfsStopTime",
            "GtfsService",
        ] {
            assert!(reg.contains(t), "{t}");
        }
    }

    #[test]
    fn valid_parking_spot() {
        let reg = SchemaRegistry::bundled();
        assert!(reg.validate(&spot("free")).is_valid());
    }

    #[test]
    fn enum_breach() {
        let reg = SchemaRegistry::bundled();
        let r = reg.validate(&spot("vacant"));
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule_kind, RuleKind::NotInEnum);
    }

    #[test]
    fn inverted_range_is_inconsistent() {
        let doc = r#"{"entityType":"X","attributes":{"a":{"type":"Number","range":[5,1]}}}"#;
        assert!(matches!(parse_schema(doc), Err(SchemaError::InconsistentRule { .. })));
        let doc = r#"{"entityType":"X","attributes":{"a":{"type":"Text","enum":["a"],"pattern":"b"}}}"#;
        assert!(matches!(parse_schema(doc), Err(SchemaError::InconsistentRule { .. })));
        let doc = r#"{"entityType":"X","required":["b"],"attributes":{}}"#;
        assert!(matches!(parse_schema(doc), Err(SchemaError::InconsistentRule { .. })));
        assert!(matches!(parse_schema("{"), Err(SchemaError::Parse(_))));
    }

    #[test]
    fn reload_replaces_rules() {
        let reg = SchemaRegistry::bundled();
        assert!(!reg.validate(&spot("vacant")).is_valid());
        reg.load_schema(
            r#"{"entityType":"ParkingSpot","required":["status"],
                "attributes":{"status":{"type":"Text","enum":["free","vacant"]}}}"#,
        )
        .unwrap();
        assert!(reg.validate(&spot("vacant")).is_valid());
    }

    #[test]
    fn cross_field_rule() {
        let reg = SchemaRegistry::bundled();
        let e = NgsiEntity::new("O1", "OnStreetParking")
            .with("totalSpotNumber", Attribute::integer(10))
            .with("availableSpotNumber", Attribute::integer(12));
        let r = reg.validate(&e);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule_kind, RuleKind::OutOfRange);
        assert_eq!(r.violations[0].attribute_name, "availableSpotNumber");
    }

    #[test]
    fn wrong_type_short_circuits() {
        let reg = SchemaRegistry::bundled();
        let e = NgsiEntity::new("T1", "TrafficFlowObserved")
            .with("intensity", Attribute::text("high"));
        let r = reg.validate(&e);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule_kind, RuleKind::WrongType);
    }

    #[test]
    fn unknown_type_and_missing_required() {
        let reg = SchemaRegistry::bundled();
        let r = reg.validate(&NgsiEntity::new("M", "Mystery"));
        assert_eq!(r.violations[0].rule_kind, RuleKind::UnknownEntityType);
        let r = reg.validate(&NgsiEntity::new("A", "ArrivalEstimation"));
        assert_eq!(r.violations.len(), 3);
        assert!(r.violations.iter().all(|v| v.rule_kind == RuleKind::MissingRequired));
    }

    #[test]
    fn pattern_rule() {
        let reg = SchemaRegistry::bundled();
        let e = NgsiEntity::new("F", "GtfsTransitFeedFile")
            .with("url", Attribute::text("ftp://x/feed.zip"))
            .with("dateModified", Attribute::date_time("2024-01-01T00:00:00Z"));
        let r = reg.validate(&e);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule_kind, RuleKind::PatternMismatch);
    }

    #[test]
    fn empty_batch() {
        let reg = SchemaRegistry::bundled();
        let s = validate_batch(Vec::new(), &reg.snapshot(), |_| {});
        assert_eq!(s, BatchSummary::default());
    }

    #[test]
    fn load_dir_checks_filenames() {
        let dir = tempfile::tempdir().unwrap();
        write_bundled_schemas(dir.path()).unwrap();
        let reg = SchemaRegistry::new();
        assert_eq!(reg.load_dir(dir.path()).unwrap(), BUNDLED.len());
        std::fs::write(
            dir.path().join("Wrong.json"),
            r#"{"entityType":"Other","attributes":{}}"#,
        )
        .unwrap();
        assert!(matches!(
            SchemaRegistry::new().load_dir(dir.path()),
            Err(SchemaError::NameMismatch { .. })
        ));
    }

    #[test]
    fn summary_serializes_kind_names() {
        let mut s = BatchSummary::default();
        s.add(&ValidationReport {
            entity_id: "x".into(),
            violations: vec![Violation {
                attribute_name: "a".into(),
                rule_kind: RuleKind::NotInEnum,
                message: String::new(),
            }],
        });
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["perKindCounts"]["not-in-enum"], 1);
        assert_eq!(v["invalid"], 1);
    }
}

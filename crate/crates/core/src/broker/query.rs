use std::cmp::Ordering;
use std::fmt;

use regex::Regex;
use serde_json::Value;

use super::BrokerError;
use crate::ngsi::NgsiEntity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    fn is_ordering(self) -> bool {
        !matches!(self, Comparator::Eq | Comparator::Ne)
    }
}

/// `attribute <op> literal`. Entities lacking the attribute never match.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrFilter {
    pub attribute: String,
    pub op: Comparator,
    pub literal: Value,
}

impl AttrFilter {
    pub fn new(attribute: impl Into<String>, op: Comparator, literal: impl Into<Value>) -> Self {
        Self {
            attribute: attribute.into(),
            op,
            literal: literal.into(),
        }
    }

    fn check(&self) -> Result<(), BrokerError> {
        if self.op.is_ordering() && !(self.literal.is_number() || self.literal.is_string()) {
            return Err(BrokerError::TypeMismatch(format!(
                "comparator {} needs a number or string literal, got {}",
                self.op.symbol(),
                self.literal
            )));
        }
        Ok(())
    }

    pub fn matches(&self, entity: &NgsiEntity) -> bool {
        let Some(attr) = entity.attributes.get(&self.attribute) else {
            return false;
        };
        let value = &attr.value;
        match self.op {
            Comparator::Eq => json_eq(value, &self.literal),
            Comparator::Ne => !json_eq(value, &self.literal),
            op => match json_cmp(value, &self.literal) {
                Some(ord) => match op {
                    Comparator::Lt => ord == Ordering::Less,
                    Comparator::Le => ord != Ordering::Greater,
                    Comparator::Gt => ord == Ordering::Greater,
                    Comparator::Ge => ord != Ordering::Less,
                    _ => unreachable!(),
                },
                None => false,
            },
        }
    }
}

impl fmt::Display for AttrFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lit = match &self.literal {
            Value::String(s) => format!("'{s}'"),
            other => other.to_string(),
        };
        write!(f, "{}{}{}", self.attribute, self.op.symbol(), lit)
    }
}

fn json_eq(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) if a.is_number() && b.is_number() => x == y,
        _ => a == b,
    }
}

fn json_cmp(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

/// Parses a `q` expression: `attr<op>literal` clauses joined by `;`.
///
/// Literals: `'quoted'` or `"quoted"` strings, `true`/`false`/`null`,
/// numbers, otherwise a bare string.
pub fn parse_q(q: &str) -> Result<Vec<AttrFilter>, BrokerError> {
    let mut out = Vec::new();
    for clause in q.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        let (pos, op, len) = find_operator(clause)
            .ok_or_else(|| BrokerError::MalformedQuery(format!("no comparator in {clause:?}")))?;
        let attribute = clause[..pos].trim();
        if attribute.is_empty() {
            return Err(BrokerError::MalformedQuery(format!(
                "missing attribute name in {clause:?}"
            )));
        }
        let literal = parse_literal(clause[pos + len..].trim());
        let filter = AttrFilter::new(attribute, op, literal);
        filter.check()?;
        out.push(filter);
    }
    Ok(out)
}

fn find_operator(clause: &str) -> Option<(usize, Comparator, usize)> {
    let bytes = clause.as_bytes();
    for i in 0..bytes.len() {
        let next = bytes.get(i + 1).copied();
        let found = match (bytes[i], next) {
            (b'=', Some(b'=')) => Some((Comparator::Eq, 2)),
            (b'!', Some(b'=')) => Some((Comparator::Ne, 2)),
            (b'<', Some(b'=')) => Some((Comparator::Le, 2)),
            (b'>', Some(b'=')) => Some((Comparator::Ge, 2)),
            (b'<', _) => Some((Comparator::Lt, 1)),
            (b'>', _) => Some((Comparator::Gt, 1)),
            _ => None,
        };
        if let Some((op, len)) = found {
            return Some((i, op, len));
        }
    }
    None
}

fn parse_literal(raw: &str) -> Value {
    let quoted = |q: char| raw.len() >= 2 && raw.starts_with(q) && raw.ends_with(q);
    if quoted('\'') || quoted('"') {
        return Value::String(raw[1..raw.len() - 1].to_string());
    }
    match raw {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        "null" => return Value::Null,
        _ => {}
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    Value::String(raw.to_string())
}

/// A broker query. All present filters must hold.
#[derive(Debug, Clone, Default)]
pub struct Query {
    pub entity_type: Option<String>,
    pub id_pattern: Option<String>,
    pub filters: Vec<AttrFilter>,
}

impl Query {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn of_type(entity_type: impl Into<String>) -> Self {
        Self {
            entity_type: Some(entity_type.into()),
            ..Self::default()
        }
    }

    pub fn id_pattern(mut self, pattern: impl Into<String>) -> Self {
        self.id_pattern = Some(pattern.into());
        self
    }

    pub fn filter(mut self, filter: AttrFilter) -> Self {
        self.filters.push(filter);
        self
    }

    /// `q` string form of the attribute filters.
    pub fn q_string(&self) -> String {
        self.filters
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub(crate) fn compile(&self) -> Result<CompiledQuery<'_>, BrokerError> {
        let id_regex = match &self.id_pattern {
            Some(p) => Some(compile_anchored(p)?),
            None => None,
        };
        for f in &self.filters {
            f.check()?;
        }
        Ok(CompiledQuery {
            query: self,
            id_regex,
        })
    }
}

/// Id patterns must match the whole id.
pub(crate) fn compile_anchored(pattern: &str) -> Result<Regex, BrokerError> {
    Regex::new(&format!("^(?:{pattern})$"))
        .map_err(|e| BrokerError::MalformedPattern(format!("{pattern:?}: {e}")))
}

pub(crate) struct CompiledQuery<'a> {
    query: &'a Query,
    id_regex: Option<Regex>,
}

impl CompiledQuery<'_> {
    pub fn matches(&self, entity: &NgsiEntity) -> bool {
        if let Some(t) = &self.query.entity_type {
            if &entity.entity_type != t {
                return false;
            }
        }
        if let Some(re) = &self.id_regex {
            if !re.is_match(&entity.id) {
                return false;
            }
        }
        self.query.filters.iter().all(|f| f.matches(entity))
    }
}

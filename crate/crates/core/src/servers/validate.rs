use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    String,
    Number,
    Integer,
    Bool,
    Array,
    Object,
}

impl FieldKind {
    pub fn matches(self, v: &Value) -> bool {
        match self {
            FieldKind::String => v.is_string(),
            FieldKind::Number => v.is_number(),
            FieldKind::Integer => v.is_i64() || v.is_u64(),
            FieldKind::Bool => v.is_boolean(),
            FieldKind::Array => v.is_array(),
            FieldKind::Object => v.is_object(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Email,
    /// `YYYY-MM-DD` with a real calendar date.
    Date,
    Uuid,
    Alnum,
}

fn is_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let num = |r: std::ops::Range<usize>| s.get(r).filter(|x| x.bytes().all(|c| c.is_ascii_digit())).and_then(|x| x.parse::<u32>().ok());
    let (Some(y), Some(m), Some(d)) = (num(0..4), num(5..7), num(8..10)) else {
        return false;
    };
    let leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
    let days = match m {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if leap => 29,
        2 => 28,
        _ => return false,
    };
    (1..=days).contains(&d)
}

impl Format {
    pub fn matches(self, s: &str) -> bool {
        match self {
            Format::Email => match s.split_once('@') {
                Some((local, domain)) => {
                    !local.is_empty()
                        && !domain.contains('@')
                        && domain.contains('.')
                        && !domain.starts_with('.')
                        && !domain.ends_with('.')
                        && !s.chars().any(char::is_whitespace)
                }
                None => false,
            },
            Format::Date => is_date(s),
            Format::Uuid => {
                let groups: Vec<&str> = s.split('-').collect();
                groups.iter().map(|g| g.len()).eq([8, 4, 4, 4, 12])
                    && groups.iter().all(|g| g.bytes().all(|c| c.is_ascii_hexdigit()))
            }
            Format::Alnum => !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule")]
pub enum Rule {
    Required { field: String },
    Type { field: String, kind: FieldKind },
    Format { field: String, format: Format },
    /// Characters of a string, or elements of an array.
    Length { field: String, min: usize, max: usize },
    /// `predicate(record[field], record[other])` must hold; failures are
    /// reported on `field`.
    CrossField { predicate: String, field: String, other: String },
    Custom { field: String, predicate: String },
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::Required { .. } => "Required",
            Rule::Type { .. } => "Type",
            Rule::Format { .. } => "Format",
            Rule::Length { .. } => "Length",
            Rule::CrossField { .. } => "CrossField",
            Rule::Custom { .. } => "Custom",
        }
    }

    fn fields(&self) -> Vec<&str> {
        match self {
            Rule::CrossField { field, other, .. } => vec![field, other],
            Rule::Required { field }
            | Rule::Type { field, .. }
            | Rule::Format { field, .. }
            | Rule::Length { field, .. }
            | Rule::Custom { field, .. } => vec![field],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub name: String,
    pub fields: Vec<String>,
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub field: String,
    pub rule: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub failures: Vec<Failure>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

pub type Predicate = Arc<dyn Fn(&Value) -> bool + Send + Sync>;

/// Built-in cross-field comparisons. Numbers compare numerically, strings
/// lexically (so ISO dates compare chronologically).
pub fn cross_predicate(name: &str) -> Option<fn(&Value, &Value) -> Option<bool>> {
    fn cmp(a: &Value, b: &Value) -> Option<std::cmp::Ordering> {
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => x.as_f64()?.partial_cmp(&y.as_f64()?),
            (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
            _ => None,
        }
    }
    Some(match name {
        "greater_than" => |a, b| cmp(a, b).map(|o| o.is_gt()),
        "greater_or_equal" => |a, b| cmp(a, b).map(|o| o.is_ge()),
        "less_than" => |a, b| cmp(a, b).map(|o| o.is_lt()),
        "less_or_equal" => |a, b| cmp(a, b).map(|o| o.is_le()),
        "equals" => |a, b| Some(a == b),
        "not_equals" => |a, b| Some(a != b),
        _ => return None,
    })
}

pub struct Validator {
    sets: RwLock<HashMap<String, RuleSet>>,
    predicates: RwLock<HashMap<String, Predicate>>,
}

impl std::fmt::Debug for Validator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Validator").field("rulesets", &self.sets.read().len()).finish()
    }
}

impl Default for Validator {
    fn default() -> Self {
        let v = Self {
            sets: RwLock::new(HashMap::new()),
            predicates: RwLock::new(HashMap::new()),
        };
        v.register_predicate("non_negative", Arc::new(|x| x.as_f64().is_some_and(|n| n >= 0.0)));
        v.register_predicate("non_blank", Arc::new(|x| x.as_str().is_some_and(|s| !s.trim().is_empty())));
        v.register_predicate("lowercase", Arc::new(|x| x.as_str().is_some_and(|s| s.chars().all(|c| !c.is_uppercase()))));
        v
    }
}

impl Validator {
    pub fn register_predicate(&self, name: &str, p: Predicate) {
        self.predicates.write().insert(name.to_string(), p);
    }

    /// Checks declared fields and predicate names, then stores the set.
    pub fn register(&self, set: RuleSet) -> Result<(), ServerError> {
        let preds = self.predicates.read();
        for rule in &set.rules {
            for f in rule.fields() {
                if !set.fields.iter().any(|d| d == f) {
                    return Err(ServerError::InvalidArgument(format!(
                        "{} rule references undeclared field {f:?}",
                        rule.name()
                    )));
                }
            }
            match rule {
                Rule::CrossField { predicate, .. } if cross_predicate(predicate).is_none() => {
                    return Err(ServerError::InvalidArgument(format!("unknown cross-field predicate {predicate:?}")));
                }
                Rule::Custom { predicate, .. } if !preds.contains_key(predicate) => {
                    return Err(ServerError::InvalidArgument(format!("unknown custom predicate {predicate:?}")));
                }
                Rule::Length { min, max, .. } if min > max => {
                    return Err(ServerError::InvalidArgument("Length min exceeds max".into()));
                }
                _ => {}
            }
        }
        drop(preds);
        self.sets.write().insert(set.name.clone(), set);
        Ok(())
    }

    pub fn validate(&self, record: &Map<String, Value>, ruleset: &str) -> Result<ValidationReport, ServerError> {
        let sets = self.sets.read();
        let set = sets.get(ruleset).ok_or(ServerError::UnknownRuleSet)?;
        let preds = self.predicates.read();
        Ok(evaluate(record, &set.rules, |name| preds.get(name).cloned()))
    }
}

/// Runs every rule; nothing short-circuits. Rules other than Required pass
/// when their field is absent.
pub fn evaluate(
    record: &Map<String, Value>,
    rules: &[Rule],
    custom: impl Fn(&str) -> Option<Predicate>,
) -> ValidationReport {
    let mut failures = Vec::new();
    let mut fail = |field: &str, rule: &Rule, message: String| {
        failures.push(Failure {
            field: field.to_string(),
            rule: rule.name().to_string(),
            message,
        })
    };
    for rule in rules {
        match rule {
            Rule::Required { field } => {
                if record.get(field).is_none_or(Value::is_null) {
                    fail(field, rule, format!("{field} is required"));
                }
            }
            Rule::Type { field, kind } => {
                if let Some(v) = record.get(field) {
                    if !kind.matches(v) {
                        fail(field, rule, format!("{field} must be of type {kind:?}").to_lowercase());
                    }
                }
            }
            Rule::Format { field, format } => {
                if let Some(v) = record.get(field) {
                    if !v.as_str().is_some_and(|s| format.matches(s)) {
                        fail(field, rule, format!("{field} is not a valid {format:?}").to_lowercase());
                    }
                }
            }
            Rule::Length { field, min, max } => {
                if let Some(v) = record.get(field) {
                    let len = match v {
                        Value::String(s) => Some(s.chars().count()),
                        Value::Array(a) => Some(a.len()),
                        _ => None,
                    };
                    match len {
                        Some(n) if (*min..=*max).contains(&n) => {}
                        Some(n) => fail(field, rule, format!("{field} length {n} is outside {min}..={max}")),
                        None => fail(field, rule, format!("{field} has no length")),
                    }
                }
            }
            Rule::CrossField { predicate, field, other } => {
                if let (Some(a), Some(b)) = (record.get(field), record.get(other)) {
                    let ok = cross_predicate(predicate).and_then(|p| p(a, b)).unwrap_or(false);
                    if !ok {
                        fail(field, rule, format!("{field} must be {} {other}", predicate.replace('_', " ")));
                    }
                }
            }
            Rule::Custom { field, predicate } => {
                if let Some(v) = record.get(field) {
                    let ok = custom(predicate).is_some_and(|p| p(v));
                    if !ok {
                        fail(field, rule, format!("{field} fails {predicate}"));
                    }
                }
            }
        }
    }
    ValidationReport { failures }
}

const ENTITIES: [&str; 5] = ["&amp;", "&lt;", "&gt;", "&quot;", "&#39;"];

/// HTML-escapes `& < > " '` and drops ASCII control characters other than
/// tab and newline. An `&` that already starts one of the produced entities
/// is kept, which makes the function idempotent.
pub fn sanitize(input: &str) -> String {
    let mut out = String::with_capacity(input.len());
    for (i, c) in input.char_indices() {
        match c {
            '&' if ENTITIES.iter().any(|e| input[i..].starts_with(e)) => out.push('&'),
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            '\t' | '\n' => out.push(c),
            c if c.is_ascii_control() => {}
            c => out.push(c),
        }
    }
    out
}

//! Placeholder templates shared by sub-prompt chaining, rule queries, service
//! answers and conclusions.
//!
//! A placeholder is `{name}` or `{name|format}`. Names may contain ASCII
//! letters, digits, `_`, `-`, `.` and `:`. Anything else inside braces is
//! kept as literal text.

use serde::{Deserialize, Serialize};

use crate::model::{Facts, Scalar, SubPromptId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder { name: String, format: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("no value for placeholder `{0}`")]
    Missing(String),
    #[error("unknown format `{format}` for placeholder `{name}`")]
    UnknownFormat { name: String, format: String },
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':')
}

impl Template {
    pub fn parse(source: &str) -> Self {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            literal.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}').and_then(|close| parse_placeholder(&after[..close]).map(|p| (close, p))) {
                Some((close, placeholder)) => {
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(placeholder);
                    rest = &after[close + 1..];
                }
                None => {
                    literal.push('{');
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder { name, .. } => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    /// Ids referenced by `{R<k>}` chaining placeholders.
    pub fn chain_references(&self) -> Vec<SubPromptId> {
        self.placeholders().filter_map(chain_reference).collect()
    }

    pub fn has_placeholders(&self) -> bool {
        self.placeholders().next().is_some()
    }

    /// Renders the template, asking `lookup` for each placeholder's text.
    pub fn render<F>(&self, mut lookup: F) -> Result<String, TemplateError>
    where
        F: FnMut(&str, Option<&str>) -> Result<Option<String>, TemplateError>,
    {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder { name, format } => match lookup(name, format.as_deref())? {
                    Some(value) => out.push_str(&value),
                    None => return Err(TemplateError::Missing(name.clone())),
                },
            }
        }
        Ok(out)
    }

    /// Renders against a fact map, applying each placeholder's format.
    pub fn render_facts(&self, facts: &Facts) -> Result<String, TemplateError> {
        self.render(|name, format| match facts.get(name) {
            Some(value) => format_scalar(value, format)
                .map(Some)
                .ok_or_else(|| TemplateError::UnknownFormat {
                    name: name.to_string(),
                    format: format.unwrap_or_default().to_string(),
                }),
            None => Ok(None),
        })
    }

    /// Rebuilds source text, with `rename` applied to every placeholder name.
    pub fn rewrite<F: FnMut(&str) -> String>(&self, mut rename: F) -> String {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder { name, format } => {
                    out.push('{');
                    out.push_str(&rename(name));
                    if let Some(f) = format {
                        out.push('|');
                        out.push_str(f);
                    }
                    out.push('}');
                }
            }
        }
        out
    }
}

fn parse_placeholder(inner: &str) -> Option<Segment> {
    let (name, format) = match inner.split_once('|') {
        Some((n, f)) => (n, Some(f)),
        None => (inner, None),
    };
    if name.is_empty() || !name.chars().all(is_name_char) {
        return None;
    }
    if let Some(f) = format {
        if f.is_empty() || !f.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return None;
        }
    }
    Some(Segment::Placeholder {
        name: name.to_string(),
        format: format.map(str::to_string),
    })
}

/// `R12` → `Some(12)`.
pub fn chain_reference(name: &str) -> Option<SubPromptId> {
    let digits = name.strip_prefix('R')?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Formats a scalar for display. Supported formats: `inr`, `int`, `lower`, `upper`.
pub fn format_scalar(value: &Scalar, format: Option<&str>) -> Option<String> {
    match format {
        None => Some(value.to_string()),
        Some("inr") => value.as_f64().map(format_inr),
        Some("int") => value.as_f64().map(|n| format!("{}", n.round())),
        Some("lower") => Some(value.to_string().to_lowercase()),
        Some("upper") => Some(value.to_string().to_uppercase()),
        Some(_) => None,
    }
}

/// Rupee amount with comma thousands grouping: `100000` → `₹100,000`.
pub fn format_inr(amount: f64) -> String {
    let sign = if amount < 0.0 { "-" } else { "" };
    let abs = amount.abs();
    let (whole, fraction) = if abs.fract() == 0.0 {
        (format!("{abs:.0}"), None)
    } else {
        let fixed = format!("{abs:.2}");
        let (w, f) = fixed.split_once('.').expect("fixed-point output has a dot");
        (w.to_string(), Some(f.to_string()))
    };
    let mut grouped = String::new();
    for (i, c) in whole.chars().enumerate() {
        if i > 0 && (whole.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    match fraction {
        Some(f) => format!("{sign}₹{grouped}.{f}"),
        None => format!("{sign}₹{grouped}"),
    }
}

/// Joins items as natural language: `a`, `a and b`, `a, b and c`.
pub fn join_natural(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Right-hand side of a condition: another fact, or a literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Fact { fact: String },
    Value(Scalar),
}

/// A comparison over named facts, used to pick template variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub fact: String,
    pub op: CompareOp,
    pub value: Operand,
}

impl Condition {
    /// Evaluates the condition; `Err` names the first missing fact.
    pub fn evaluate(&self, facts: &Facts) -> Result<bool, String> {
        let left = facts.get(&self.fact).ok_or_else(|| self.fact.clone())?;
        let right = match &self.value {
            Operand::Fact { fact } => facts.get(fact).ok_or_else(|| fact.clone())?,
            Operand::Value(v) => v,
        };
        Ok(compare(left, self.op, right))
    }

    /// Names of facts this condition reads.
    pub fn facts(&self) -> Vec<&str> {
        let mut names = vec![self.fact.as_str()];
        if let Operand::Fact { fact } = &self.value {
            names.push(fact);
        }
        names
    }
}

pub fn compare(left: &Scalar, op: CompareOp, right: &Scalar) -> bool {
    match op {
        CompareOp::Eq => left == right,
        CompareOp::Ne => left != right,
        _ => match (left.as_f64(), right.as_f64()) {
            (Some(l), Some(r)) => match op {
                CompareOp::Lt => l < r,
                CompareOp::Le => l <= r,
                CompareOp::Gt => l > r,
                CompareOp::Ge => l >= r,
                CompareOp::Eq | CompareOp::Ne => unreachable!(),
            },
            _ => false,
        },
    }
}

/// A template guarded by conditions; the first variant whose conditions all
/// hold is rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    #[serde(default)]
    pub when: Vec<Condition>,
    pub template: String,
}

/// Picks the first variant whose conditions hold. A condition over a missing
/// fact is an error rather than a silent mismatch.
pub fn select_variant<'a>(variants: &'a [Variant], facts: &Facts) -> Result<Option<&'a Variant>, String> {
    for variant in variants {
        let mut holds = true;
        for condition in &variant.when {
            if !condition.evaluate(facts)? {
                holds = false;
                break;
            }
        }
        if holds {
            return Ok(Some(variant));
        }
    }
    Ok(None)
}

//! Context-aware rules that turn a (sub-prompt, user context) pair into a
//! concrete knowledge-graph query.
//!
//! A rule serves one intent and carries a predicate over the user context
//! (optional role plus attribute equalities). Its query template may use
//! `{placeholders}` in filter values; they resolve from `user_id`, `role`,
//! the context attributes, and then facts chained from earlier responses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{AttributeFilter, KGQuery};
use crate::model::{Facts, Scalar, SubPrompt, SubPromptId, UserContext};
use crate::template::{format_scalar, Segment, Template};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("no rule matches intent `{intent}` for role `{role}`")]
    NoRuleMatched { intent: String, role: String },
    #[error("rule `{rule_id}` needs `{placeholder}`, which is neither a context attribute nor a chained fact")]
    UnresolvedPlaceholder { rule_id: String, placeholder: String },
    #[error("rule set is empty")]
    EmptyRuleSet,
    #[error("rule id `{0}` is declared more than once")]
    DuplicateRuleId(String),
}

impl RuleError {
    pub fn code(&self) -> &'static str {
        match self {
            RuleError::NoRuleMatched { .. } => "no-rule-matched",
            RuleError::UnresolvedPlaceholder { .. } => "unresolved-placeholder",
            RuleError::EmptyRuleSet | RuleError::DuplicateRuleId(_) => "invalid-rules",
        }
    }
}

/// Conjunction of an optional role requirement and attribute equalities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Scalar>,
}

impl ContextPredicate {
    pub fn satisfied_by(&self, ctx: &UserContext) -> bool {
        self.role.as_deref().is_none_or(|r| r == ctx.role())
            && self
                .attributes
                .iter()
                .all(|(key, expected)| ctx.attribute(key) == Some(expected))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub rule_id: String,
    pub intent: String,
    #[serde(default)]
    pub when: ContextPredicate,
    pub target_kg: String,
    pub query: KGQuery,
    /// Higher wins when several rules match.
    #[serde(default)]
    pub priority: i32,
}

impl Rule {
    fn filters(&self) -> impl Iterator<Item = &AttributeFilter> {
        self.query.attribute_filters.iter().chain(
            self.query
                .relation_constraints
                .iter()
                .flat_map(|c| c.related.attribute_filters.iter()),
        )
    }

    /// Placeholder names used anywhere in the query template.
    pub fn placeholders(&self) -> BTreeSet<String> {
        self.filters()
            .filter_map(|f| f.value.as_str())
            .flat_map(|s| Template::parse(s).placeholders().map(str::to_string).collect::<Vec<_>>())
            .collect()
    }

    /// The values this rule's query would be built from, by placeholder name.
    /// Missing inputs are left out; `bind` reports them.
    pub fn referenced_inputs(&self, ctx: &UserContext, prior_facts: &Facts) -> BTreeMap<String, Scalar> {
        self.placeholders()
            .into_iter()
            .filter_map(|name| lookup(&name, ctx, prior_facts).map(|v| (name, v)))
            .collect()
    }
}

fn lookup(name: &str, ctx: &UserContext, prior_facts: &Facts) -> Option<Scalar> {
    ctx.lookup(name).or_else(|| prior_facts.get(name).cloned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRuleSet")]
pub struct RuleSet {
    rules: Vec<Rule>,
    version: String,
}

#[derive(Deserialize)]
struct RawRuleSet {
    rules: Vec<Rule>,
    #[serde(default)]
    version: String,
}

impl TryFrom<RawRuleSet> for RuleSet {
    type Error = RuleError;

    fn try_from(raw: RawRuleSet) -> Result<Self, Self::Error> {
        RuleSet::new(raw.rules, raw.version)
    }
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>, version: impl Into<String>) -> Result<Self, RuleError> {
        if rules.is_empty() {
            return Err(RuleError::EmptyRuleSet);
        }
        let mut seen = BTreeSet::new();
        for rule in &rules {
            if !seen.insert(rule.rule_id.as_str()) {
                return Err(RuleError::DuplicateRuleId(rule.rule_id.clone()));
            }
        }
        Ok(Self {
            rules,
            version: version.into(),
        })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

/// A rule applied to one sub-prompt, with its query fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleBinding {
    pub rule: Rule,
    pub resolved_query: KGQuery,
    pub sub_prompt_id: SubPromptId,
}

/// Highest-priority rule for the sub-prompt's intent whose predicate holds;
/// declaration order breaks ties.
pub fn match_rule<'r>(sub: &SubPrompt, ctx: &UserContext, rules: &'r RuleSet) -> Result<&'r Rule, RuleError> {
    let mut best: Option<&Rule> = None;
    for rule in rules.rules.iter().filter(|r| r.intent == sub.intent() && r.when.satisfied_by(ctx)) {
        if best.is_none_or(|b| rule.priority > b.priority) {
            best = Some(rule);
        }
    }
    best.ok_or_else(|| RuleError::NoRuleMatched {
        intent: sub.intent().to_string(),
        role: ctx.role().to_string(),
    })
}

/// Substitutes every placeholder in the rule's query template.
pub fn bind(rule: &Rule, sub: &SubPrompt, ctx: &UserContext, prior_facts: &Facts) -> Result<RuleBinding, RuleError> {
    let resolve = |filter: &AttributeFilter| -> Result<AttributeFilter, RuleError> {
        let Scalar::Text(raw) = &filter.value else {
            return Ok(filter.clone());
        };
        let template = Template::parse(raw);
        let missing = |name: &str| RuleError::UnresolvedPlaceholder {
            rule_id: rule.rule_id.clone(),
            placeholder: name.to_string(),
        };
        let value = match template.segments() {
            // A lone placeholder keeps the type of the value it resolves to.
            [Segment::Placeholder { name, format: None }] => lookup(name, ctx, prior_facts).ok_or_else(|| missing(name))?,
            _ if !template.has_placeholders() => filter.value.clone(),
            _ => {
                let mut unresolved = None;
                let text = template
                    .render(|name, format| {
                        let value = lookup(name, ctx, prior_facts);
                        if value.is_none() {
                            unresolved.get_or_insert_with(|| name.to_string());
                        }
                        Ok(value.and_then(|v| format_scalar(&v, format)))
                    })
                    .map_err(|_| missing(unresolved.as_deref().unwrap_or_default()))?;
                Scalar::Text(text)
            }
        };
        Ok(AttributeFilter {
            key: filter.key.clone(),
            op: filter.op,
            value,
        })
    };

    let mut query = rule.query.clone();
    for filter in &mut query.attribute_filters {
        *filter = resolve(filter)?;
    }
    for constraint in &mut query.relation_constraints {
        for filter in &mut constraint.related.attribute_filters {
            *filter = resolve(filter)?;
        }
    }
    Ok(RuleBinding {
        rule: rule.clone(),
        resolved_query: query,
        sub_prompt_id: sub.id(),
    })
}

//! Prompt decomposition driven by a declarative intent catalog.
//!
//! Each intent lists trigger phrases, a target domain and a sub-prompt
//! template. Matching is case-insensitive and works on whole words, so the
//! phrase `fixed deposit` matches "a Fixed Deposit," but not "fixed deposits".
//! Intents pull in their declared prerequisites transitively.
//!
//! In the catalog, a template refers to another intent's response as
//! `{R:<intent>}`; decomposition rewrites it to `{R<k>}` with the id assigned
//! to that intent's sub-prompt.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{validate_decomposition, Prompt, SubPrompt, SubPromptId};
use crate::template::{Template, Variant};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecomposeError {
    #[error("no intent in catalog matched the prompt")]
    NoIntentMatched,
    #[error("catalog has no intents")]
    EmptyCatalog,
    #[error("intent `{0}` is declared more than once")]
    DuplicateIntent(String),
    #[error("intent `{intent}` depends on undeclared intent `{missing}`")]
    UnknownDependency { intent: String, missing: String },
    #[error("intent `{intent}` template references `{reference}` which is not one of its dependencies")]
    UndeclaredChainReference { intent: String, reference: String },
    #[error("intent dependencies contain a cycle through `{0}`")]
    Cycle(String),
    #[error("intent `{0}` has no trigger patterns")]
    NoTriggers(String),
    #[error("conclusion references undeclared intent `{0}`")]
    UnknownConclusionIntent(String),
}

impl DecomposeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecomposeError::NoIntentMatched => "no-intent-matched",
            _ => "invalid-catalog",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub intent: String,
    pub trigger_patterns: Vec<String>,
    pub target_domain: String,
    pub sub_prompt_template: String,
    #[serde(default)]
    pub depends_on_intents: Vec<String>,
    /// Higher runs first among intents that are ready at the same time.
    #[serde(default)]
    pub priority: i32,
}

/// Closing sentence rendered after the per-sub-prompt answers when the
/// decomposition covers exactly `intents`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConclusionTemplate {
    pub intents: BTreeSet<String>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog")]
pub struct IntentCatalog {
    intents: Vec<IntentSpec>,
    version: String,
    #[serde(default)]
    conclusions: Vec<ConclusionTemplate>,
}

#[derive(Deserialize)]
struct RawCatalog {
    intents: Vec<IntentSpec>,
    #[serde(default)]
    version: String,
    #[serde(default)]
    conclusions: Vec<ConclusionTemplate>,
}

impl TryFrom<RawCatalog> for IntentCatalog {
    type Error = DecomposeError;

    fn try_from(raw: RawCatalog) -> Result<Self, Self::Error> {
        IntentCatalog::new(raw.intents, raw.version, raw.conclusions)
    }
}

impl IntentCatalog {
    pub fn new(
        intents: Vec<IntentSpec>,
        version: impl Into<String>,
        conclusions: Vec<ConclusionTemplate>,
    ) -> Result<Self, DecomposeError> {
        if let Some(err) = catalog_violations(&intents, &conclusions).into_iter().next() {
            return Err(err);
        }
        Ok(Self {
            intents,
            version: version.into(),
            conclusions,
        })
    }

    pub fn intents(&self) -> &[IntentSpec] {
        &self.intents
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn conclusions(&self) -> &[ConclusionTemplate] {
        &self.conclusions
    }

    pub fn get(&self, intent: &str) -> Option<&IntentSpec> {
        self.intents.iter().find(|i| i.intent == intent)
    }
}

/// Every structural problem with a catalog, in declaration order.
pub fn catalog_violations(intents: &[IntentSpec], conclusions: &[ConclusionTemplate]) -> Vec<DecomposeError> {
    let mut errors = Vec::new();
    if intents.is_empty() {
        errors.push(DecomposeError::EmptyCatalog);
        return errors;
    }
    let mut seen = BTreeSet::new();
    for spec in intents {
        if !seen.insert(spec.intent.as_str()) {
            errors.push(DecomposeError::DuplicateIntent(spec.intent.clone()));
        }
    }
    for spec in intents {
        if spec.trigger_patterns.iter().all(|p| tokenize(p).is_empty()) {
            errors.push(DecomposeError::NoTriggers(spec.intent.clone()));
        }
        for dep in &spec.depends_on_intents {
            if !seen.contains(dep.as_str()) {
                errors.push(DecomposeError::UnknownDependency {
                    intent: spec.intent.clone(),
                    missing: dep.clone(),
                });
            }
        }
        for name in Template::parse(&spec.sub_prompt_template).placeholders() {
            let reference = name.strip_prefix("R:").unwrap_or(name);
            if !spec.depends_on_intents.iter().any(|d| d == reference) {
                errors.push(DecomposeError::UndeclaredChainReference {
                    intent: spec.intent.clone(),
                    reference: name.to_string(),
                });
            }
        }
    }
    if let Some(intent) = find_cycle(intents) {
        errors.push(DecomposeError::Cycle(intent));
    }
    for conclusion in conclusions {
        for intent in &conclusion.intents {
            if !seen.contains(intent.as_str()) {
                errors.push(DecomposeError::UnknownConclusionIntent(intent.clone()));
            }
        }
    }
    errors
}

fn find_cycle(intents: &[IntentSpec]) -> Option<String> {
    use petgraph::graphmap::DiGraphMap;

    let mut graph = DiGraphMap::<&str, ()>::new();
    for spec in intents {
        graph.add_node(spec.intent.as_str());
        for dep in &spec.depends_on_intents {
            graph.add_edge(dep.as_str(), spec.intent.as_str(), ());
        }
    }
    petgraph::algo::toposort(&graph, None)
        .err()
        .map(|cycle| cycle.node_id().to_string())
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn pattern_matches(prompt_tokens: &[String], pattern: &str) -> bool {
    let needle = tokenize(pattern);
    !needle.is_empty() && prompt_tokens.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Intents triggered by the prompt plus their transitive prerequisites,
/// prerequisites first; ties go to higher priority, then declaration order.
pub fn match_intents<'c>(prompt: &Prompt, catalog: &'c IntentCatalog) -> Result<Vec<&'c IntentSpec>, DecomposeError> {
    let tokens = tokenize(prompt.text());
    let index: HashMap<&str, usize> = catalog
        .intents
        .iter()
        .enumerate()
        .map(|(i, spec)| (spec.intent.as_str(), i))
        .collect();

    let mut selected = BTreeSet::new();
    let mut pending: Vec<usize> = catalog
        .intents
        .iter()
        .enumerate()
        .filter(|(_, spec)| spec.trigger_patterns.iter().any(|p| pattern_matches(&tokens, p)))
        .map(|(i, _)| i)
        .collect();
    if pending.is_empty() {
        return Err(DecomposeError::NoIntentMatched);
    }
    while let Some(i) = pending.pop() {
        if selected.insert(i) {
            pending.extend(catalog.intents[i].depends_on_intents.iter().map(|d| index[d.as_str()]));
        }
    }

    let mut waiting: BTreeMap<usize, usize> = selected
        .iter()
        .map(|&i| (i, catalog.intents[i].depends_on_intents.len()))
        .collect();
    // Ready set ordered by (descending priority, declaration index).
    let mut ready: BTreeSet<(std::cmp::Reverse<i32>, usize)> = waiting
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(&i, _)| (std::cmp::Reverse(catalog.intents[i].priority), i))
        .collect();
    let mut ordered = Vec::with_capacity(selected.len());
    while let Some((_, i)) = ready.pop_first() {
        waiting.remove(&i);
        ordered.push(&catalog.intents[i]);
        let name = catalog.intents[i].intent.as_str();
        for (&j, remaining) in waiting.iter_mut() {
            if catalog.intents[j].depends_on_intents.iter().any(|d| d == name) {
                *remaining -= 1;
                if *remaining == 0 {
                    ready.insert((std::cmp::Reverse(catalog.intents[j].priority), j));
                }
            }
        }
    }
    debug_assert!(waiting.is_empty(), "catalog validated acyclic");
    Ok(ordered)
}

/// Splits the prompt into sub-prompts with ids `1..=n` in dependency order.
pub fn decompose(prompt: &Prompt, catalog: &IntentCatalog) -> Result<Vec<SubPrompt>, DecomposeError> {
    let matched = match_intents(prompt, catalog)?;
    let ids: HashMap<&str, SubPromptId> = matched
        .iter()
        .enumerate()
        .map(|(i, spec)| (spec.intent.as_str(), i as SubPromptId + 1))
        .collect();

    let subs = matched
        .iter()
        .map(|spec| {
            let id = ids[spec.intent.as_str()];
            let text = Template::parse(&spec.sub_prompt_template).rewrite(|name| {
                let label = name.strip_prefix("R:").unwrap_or(name);
                format!("R{}", ids[label])
            });
            let depends_on = spec
                .depends_on_intents
                .iter()
                .map(|d| ids[d.as_str()])
                .collect();
            SubPrompt::new(id, spec.intent.clone(), text, depends_on, spec.target_domain.clone())
                .expect("catalog validation guarantees a well-formed sub-prompt")
        })
        .collect::<Vec<_>>();
    debug_assert!(validate_decomposition(&subs).is_ok());
    Ok(subs)
}

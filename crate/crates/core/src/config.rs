//! Platform configuration: one TOML document holding the intent catalog,
//! rules, graph sources, services, cache policy and declared context schema.
//! Loading cross-checks every reference and reports all problems at once.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::CachePolicy;
use crate::decomposer::{catalog_violations, ConclusionTemplate, IntentCatalog, IntentSpec};
use crate::graph::{load_graph, DataSourceDescriptor, GraphError, GraphRegistry};
use crate::model::ContextSchema;
use crate::orchestrator::{ExecutionOptions, Orchestrator, StepCounting};
use crate::rules::{Rule, RuleSet};
use crate::services::{RegistryError, ServiceDescriptor, ServiceKind, ServiceRegistry};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("configuration has {} referential problem(s): {}", .0.len(), .0.join("; "))]
    Integrity(Vec<String>),
    #[error("cannot load graph: {0}")]
    Graph(#[from] GraphError),
    #[error("cannot build services: {0}")]
    Service(#[from] RegistryError),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "io-error",
            ConfigError::Parse(_) => "parse-error",
            ConfigError::Integrity(_) => "referential-integrity-error",
            ConfigError::Graph(e) => e.code(),
            ConfigError::Service(e) => e.code(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        match self {
            ConfigError::Integrity(v) => v.clone(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecutionSection {
    #[serde(default)]
    max_concurrency: Option<usize>,
    #[serde(default)]
    service_retries: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    version: String,
    roles: Vec<String>,
    #[serde(default)]
    attribute_keys: Vec<String>,
    #[serde(default)]
    cache: CachePolicy,
    #[serde(default)]
    step_counting: StepCounting,
    #[serde(default)]
    execution: ExecutionSection,
    #[serde(default)]
    kg_sources: Vec<DataSourceDescriptor>,
    #[serde(default)]
    services: Vec<ServiceDescriptor>,
    #[serde(default)]
    intents: Vec<IntentSpec>,
    #[serde(default)]
    conclusions: Vec<ConclusionTemplate>,
    #[serde(default)]
    rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformConfig {
    pub version: String,
    pub schema: ContextSchema,
    pub catalog: IntentCatalog,
    pub rules: RuleSet,
    /// Graph sources with URIs already resolved against `base_dir`.
    pub kg_sources: Vec<DataSourceDescriptor>,
    pub services: Vec<ServiceDescriptor>,
    pub cache_policy: CachePolicy,
    pub execution: ExecutionOptions,
    pub base_dir: PathBuf,
}

impl PlatformConfig {
    pub fn step_counting(&self) -> &StepCounting {
        &self.execution.step_counting
    }

    /// Loads every declared graph.
    pub fn load_graphs(&self) -> Result<GraphRegistry, ConfigError> {
        let registry = GraphRegistry::new();
        for source in &self.kg_sources {
            registry.register(load_graph(source)?, false)?;
        }
        Ok(registry)
    }

    pub fn build_services(&self) -> Result<ServiceRegistry, ConfigError> {
        Ok(ServiceRegistry::from_descriptors(self.services.iter().cloned())?)
    }

    /// Loads graphs and services and wires them into an orchestrator.
    pub fn build_orchestrator(&self) -> Result<Orchestrator, ConfigError> {
        Ok(Orchestrator::new(
            Arc::new(self.catalog.clone()),
            Arc::new(self.rules.clone()),
            Arc::new(self.load_graphs()?),
            Arc::new(self.build_services()?),
            self.execution.clone(),
        ))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PlatformConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}

/// Parses and cross-validates a configuration document. Relative graph
/// URIs resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<PlatformConfig, ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::Parse("document is empty".into()));
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let violations = integrity_violations(&raw);
    if !violations.is_empty() {
        return Err(ConfigError::Integrity(violations));
    }

    let integrity = |e: String| ConfigError::Integrity(vec![e]);
    let catalog = IntentCatalog::new(raw.intents, raw.version.clone(), raw.conclusions).map_err(|e| integrity(e.to_string()))?;
    let rules = RuleSet::new(raw.rules, raw.version.clone()).map_err(|e| integrity(e.to_string()))?;
    let kg_sources = raw
        .kg_sources
        .into_iter()
        .map(|mut d| {
            let uri = Path::new(&d.uri);
            if uri.is_relative() {
                d.uri = base_dir.join(uri).display().to_string();
            }
            d
        })
        .collect();
    Ok(PlatformConfig {
        version: raw.version,
        schema: ContextSchema {
            roles: raw.roles.into_iter().collect(),
            attribute_keys: raw.attribute_keys.into_iter().collect(),
        },
        catalog,
        rules,
        kg_sources,
        services: raw.services,
        cache_policy: raw.cache,
        execution: ExecutionOptions {
            max_concurrency: raw.execution.max_concurrency,
            service_retries: raw.execution.service_retries.unwrap_or(1),
            step_counting: raw.step_counting,
            ..ExecutionOptions::default()
        },
        base_dir: base_dir.to_path_buf(),
    })
}

fn duplicates<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for item in items {
        if !seen.insert(item) && !dups.contains(&item) {
            dups.push(item);
        }
    }
    dups
}

fn integrity_violations(raw: &RawConfig) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();

    if raw.roles.is_empty() {
        out.push("no roles are declared".into());
    }
    if raw.execution.max_concurrency == Some(0) {
        out.push("execution.max_concurrency must be positive".into());
    }
    out.extend(catalog_violations(&raw.intents, &raw.conclusions).iter().map(ToString::to_string));

    for id in duplicates(raw.kg_sources.iter().map(|d| d.source_id.as_str())) {
        out.push(format!("KG `{id}` is declared more than once"));
    }
    for id in duplicates(raw.services.iter().map(|s| s.service_id.as_str())) {
        out.push(format!("service `{id}` is declared more than once"));
    }
    for domain in duplicates(raw.services.iter().map(|s| s.domain.as_str())) {
        out.push(format!("domain `{domain}` has more than one service"));
    }
    if raw.rules.is_empty() {
        out.push("no rules are declared".into());
    }
    for id in duplicates(raw.rules.iter().map(|r| r.rule_id.as_str())) {
        out.push(format!("rule `{id}` is declared more than once"));
    }

    let roles: BTreeSet<&str> = raw.roles.iter().map(String::as_str).collect();
    let attribute_keys: BTreeSet<&str> = raw.attribute_keys.iter().map(String::as_str).collect();
    let kgs: BTreeSet<&str> = raw.kg_sources.iter().map(|d| d.source_id.as_str()).collect();
    let intents: BTreeMap<&str, &IntentSpec> = raw.intents.iter().map(|i| (i.intent.as_str(), i)).collect();
    let services: BTreeMap<&str, &ServiceDescriptor> = raw.services.iter().map(|s| (s.domain.as_str(), s)).collect();

    for rule in &raw.rules {
        let id = &rule.rule_id;
        if !kgs.contains(rule.target_kg.as_str()) {
            out.push(format!("rule `{id}` targets undeclared KG `{}`", rule.target_kg));
        }
        if !intents.contains_key(rule.intent.as_str()) {
            out.push(format!("rule `{id}` serves undeclared intent `{}`", rule.intent));
        }
        if let Some(role) = &rule.when.role {
            if !roles.contains(role.as_str()) {
                out.push(format!("rule `{id}` requires undeclared role `{role}`"));
            }
        }
        for key in rule.when.attributes.keys() {
            if !attribute_keys.contains(key.as_str()) {
                out.push(format!("rule `{id}` tests undeclared attribute `{key}`"));
            }
        }
        if let Err(e) = rule.query.validate() {
            out.push(format!("rule `{id}` has an invalid query: {e}"));
        }
    }

    for spec in &raw.intents {
        let name = &spec.intent;
        match services.get(spec.target_domain.as_str()) {
            None => out.push(format!(
                "intent `{name}` targets domain `{}`, which has no service",
                spec.target_domain
            )),
            Some(service) if service.kind == ServiceKind::Mock && !service.answer_templates.contains_key(name) => {
                out.push(format!(
                    "service `{}` has no answer template for intent `{name}`",
                    service.service_id
                ))
            }
            Some(_) => {}
        }
        if !raw.rules.iter().any(|r| &r.intent == name) {
            out.push(format!("intent `{name}` has no rule"));
        }
    }
    out
}

//! Plans sub-prompts into dependency stages, runs them with chaining and
//! caching, and aggregates one answer.

mod aggregate;
mod execute;
mod plan;
mod steps;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::SemanticCache;
use crate::decomposer::{decompose, IntentCatalog};
use crate::graph::GraphRegistry;
use crate::model::{AggregateResponse, Prompt, SubPromptId};
use crate::rules::RuleSet;
use crate::services::ServiceRegistry;

pub use aggregate::{aggregate, sentence};
pub use execute::{execute, run_baseline, ExecutionEnv};
pub use plan::{layer, plan, ExecutionPlan, PlannedBinding};
pub use steps::{baseline_steps, count_steps, StepCounting, StepMode};

/// Where a failure happened, with enough detail to find the sub-prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub struct PipelineError {
    pub stage: String,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_prompt_id: Option<SubPromptId>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}/{}] {}", self.stage, self.code, self.message)
    }
}

impl PipelineError {
    pub fn new(stage: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.to_string(),
            code: code.to_string(),
            message: message.into(),
            plan_stage: None,
            sub_prompt_id: None,
        }
    }

    /// Tags the error with the plan stage and sub-prompt that failed.
    pub fn at(mut self, plan_stage: usize, sub_prompt_id: SubPromptId) -> Self {
        self.message = format!("stage {plan_stage}, sub-prompt {sub_prompt_id}: {}", self.message);
        self.plan_stage = Some(plan_stage);
        self.sub_prompt_id = Some(sub_prompt_id);
        self
    }
}

/// How the knowledge graph is narrowed for each sub-prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// The bound rule query.
    #[default]
    Rules,
    /// Every node of the rule's target kind, ignoring filters and relations.
    WholeDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOptions {
    #[serde(default)]
    pub retrieval: RetrievalMode,
    /// Sub-prompts run at once within a stage; `None` means the stage size.
    #[serde(default)]
    pub max_concurrency: Option<usize>,
    /// Extra attempts after a failed service invocation.
    #[serde(default = "default_retries")]
    pub service_retries: u32,
    #[serde(default)]
    pub step_counting: StepCounting,
}

fn default_retries() -> u32 {
    1
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        Self {
            retrieval: RetrievalMode::Rules,
            max_concurrency: None,
            service_retries: default_retries(),
            step_counting: StepCounting::default(),
        }
    }
}

/// Everything needed to answer a prompt, shared read-only across requests.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    catalog: Arc<IntentCatalog>,
    rules: Arc<RuleSet>,
    graphs: Arc<GraphRegistry>,
    services: Arc<ServiceRegistry>,
    options: ExecutionOptions,
    domain_graphs: BTreeMap<String, Vec<String>>,
}

impl Orchestrator {
    pub fn new(
        catalog: Arc<IntentCatalog>,
        rules: Arc<RuleSet>,
        graphs: Arc<GraphRegistry>,
        services: Arc<ServiceRegistry>,
        options: ExecutionOptions,
    ) -> Self {
        let mut domain_graphs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for rule in rules.rules() {
            if let Some(spec) = catalog.get(&rule.intent) {
                let kgs = domain_graphs.entry(spec.target_domain.clone()).or_default();
                if !kgs.contains(&rule.target_kg) {
                    kgs.push(rule.target_kg.clone());
                }
            }
        }
        for kgs in domain_graphs.values_mut() {
            kgs.sort();
        }
        Self {
            catalog,
            rules,
            graphs,
            services,
            options,
            domain_graphs,
        }
    }

    pub fn catalog(&self) -> &IntentCatalog {
        &self.catalog
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn graphs(&self) -> &GraphRegistry {
        &self.graphs
    }

    pub fn services(&self) -> &ServiceRegistry {
        &self.services
    }

    pub fn options(&self) -> &ExecutionOptions {
        &self.options
    }

    /// Knowledge graphs holding each domain's data.
    pub fn domain_graphs(&self) -> &BTreeMap<String, Vec<String>> {
        &self.domain_graphs
    }

    /// Decomposes, plans and executes one prompt.
    pub async fn handle(
        &self,
        prompt: &Prompt,
        cache: Option<&SemanticCache>,
        retrieval: RetrievalMode,
    ) -> Result<AggregateResponse, PipelineError> {
        let subs = decompose(prompt, &self.catalog).map_err(|e| PipelineError::new("decompose", e.code(), e.to_string()))?;
        let plan = plan(&subs, prompt.context(), &self.rules, &self.services)?;
        let options = ExecutionOptions {
            retrieval,
            ..self.options.clone()
        };
        let env = ExecutionEnv {
            graphs: &self.graphs,
            services: &self.services,
            cache,
            conclusions: self.catalog.conclusions(),
            options: &options,
        };
        execute(&plan, &subs, prompt, &env).await
    }

    /// The manual flow: every sub-prompt sent on its own, whole graphs, no cache.
    pub async fn handle_baseline(&self, prompt: &Prompt) -> Result<AggregateResponse, PipelineError> {
        let subs = decompose(prompt, &self.catalog).map_err(|e| PipelineError::new("decompose", e.code(), e.to_string()))?;
        run_baseline(&subs, prompt, &self.graphs, &self.services, &self.domain_graphs).await
    }
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::{SubPrompt, SubPromptId, UserContext};
use crate::rules::{match_rule, Rule, RuleSet};
use crate::services::ServiceRegistry;

/// The rule chosen for a sub-prompt and the service that will answer it.
/// Placeholders are bound at execution time, once chained facts exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBinding {
    pub rule: Rule,
    pub service_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub stages: Vec<Vec<SubPromptId>>,
    pub bindings: BTreeMap<SubPromptId, PlannedBinding>,
}

impl ExecutionPlan {
    pub fn stage_of(&self, id: SubPromptId) -> Option<usize> {
        self.stages.iter().position(|s| s.contains(&id))
    }
}

/// Longest-path layering: each sub-prompt lands one stage after its
/// deepest dependency. Stages list ids in ascending order.
pub fn layer(subs: &[SubPrompt]) -> Result<Vec<Vec<SubPromptId>>, PipelineError> {
    let by_id: BTreeMap<SubPromptId, &SubPrompt> = subs.iter().map(|s| (s.id(), s)).collect();
    if by_id.len() != subs.len() {
        return Err(PipelineError::new("plan", "invalid-decomposition", "duplicate sub-prompt id"));
    }
    let mut level: BTreeMap<SubPromptId, usize> = BTreeMap::new();
    let mut remaining: BTreeSet<SubPromptId> = by_id.keys().copied().collect();
    while !remaining.is_empty() {
        let ready: Vec<SubPromptId> = remaining
            .iter()
            .copied()
            .filter(|id| by_id[id].depends_on().iter().all(|d| level.contains_key(d)))
            .collect();
        if ready.is_empty() {
            let stuck = remaining.iter().next().copied().unwrap_or_default();
            let dangling = by_id[&stuck].depends_on().iter().find(|d| !by_id.contains_key(d)).copied();
            return Err(match dangling {
                Some(d) => PipelineError::new(
                    "plan",
                    "invalid-decomposition",
                    format!("sub-prompt {stuck} depends on unknown sub-prompt {d}"),
                ),
                None => PipelineError::new(
                    "plan",
                    "cycle-detected",
                    format!("sub-prompt {stuck} is part of a dependency cycle"),
                ),
            });
        }
        for id in ready {
            let depth = by_id[&id]
                .depends_on()
                .iter()
                .map(|d| level[d] + 1)
                .max()
                .unwrap_or(0);
            level.insert(id, depth);
            remaining.remove(&id);
        }
    }
    let depth = level.values().max().map_or(0, |m| m + 1);
    let mut stages = vec![Vec::new(); depth];
    for (id, l) in level {
        stages[l].push(id);
    }
    Ok(stages)
}

/// Stages the sub-prompts and picks a rule and service for each.
pub fn plan(
    subs: &[SubPrompt],
    ctx: &UserContext,
    rules: &RuleSet,
    services: &ServiceRegistry,
) -> Result<ExecutionPlan, PipelineError> {
    let stages = layer(subs)?;
    let mut bindings = BTreeMap::new();
    for sub in subs {
        let rule = match_rule(sub, ctx, rules).map_err(|e| PipelineError::new("plan", e.code(), e.to_string()))?;
        let service = services
            .for_domain(sub.target_domain())
            .map_err(|e| PipelineError::new("plan", e.code(), e.to_string()))?;
        bindings.insert(
            sub.id(),
            PlannedBinding {
                rule: rule.clone(),
                service_id: service.service_id().to_string(),
            },
        );
    }
    Ok(ExecutionPlan { stages, bindings })
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::ExecutionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Baseline,
    Orchestrated,
}

/// Parameters of the orchestrated step count.
///
/// Orchestrated steps are 1 for decompose/plan, 1 per stage that touched a
/// graph or service, `cache_phase_steps` when at least one stage was served
/// entirely from the cache, and 1 for aggregation. Counts above
/// `bookkeeping_merge_above` fold decompose/plan and aggregate into one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepCounting {
    #[serde(default = "default_cache_phase")]
    pub cache_phase_steps: u32,
    #[serde(default = "default_merge_above")]
    pub bookkeeping_merge_above: u32,
}

fn default_cache_phase() -> u32 {
    1
}

fn default_merge_above() -> u32 {
    4
}

impl Default for StepCounting {
    fn default() -> Self {
        Self {
            cache_phase_steps: default_cache_phase(),
            bookkeeping_merge_above: default_merge_above(),
        }
    }
}

/// Manual flow: choose a service and invoke it per sub-prompt, then correlate.
pub fn baseline_steps(sub_prompts: usize) -> u32 {
    2 * sub_prompts as u32 + 1
}

pub fn count_steps(trace: &ExecutionTrace, mode: StepMode, rule: &StepCounting) -> u32 {
    match mode {
        StepMode::Baseline => baseline_steps(trace.records.len()),
        StepMode::Orchestrated => {
            let stages: BTreeSet<usize> = trace.records.iter().map(|r| r.stage).collect();
            let active: BTreeSet<usize> = trace
                .records
                .iter()
                .filter(|r| r.kg_queries > 0 || r.service_invocations > 0)
                .map(|r| r.stage)
                .collect();
            let cached_phase = if stages.len() > active.len() { rule.cache_phase_steps } else { 0 };
            let raw = 1 + active.len() as u32 + cached_phase + 1;
            if raw > rule.bookkeeping_merge_above {
                raw - 1
            } else {
                raw
            }
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use futures::{stream, StreamExt, TryStreamExt};

use super::aggregate::{aggregate, sentence};
use super::plan::{ExecutionPlan, PlannedBinding};
use super::steps::{baseline_steps, count_steps, StepMode};
use super::{ExecutionOptions, PipelineError, RetrievalMode};
use crate::cache::{fingerprint, CacheKey, SemanticCache};
use crate::decomposer::ConclusionTemplate;
use crate::graph::{ContextBundle, GraphRegistry, KGQuery};
use crate::model::{
    AggregateResponse, ExecutionTrace, Facts, Prompt, ServiceResponse, SubPrompt, SubPromptId, TraceRecord,
};
use crate::rules::bind;
use crate::services::{AiService, ServiceRegistry, ServiceRequest};
use crate::template::{chain_reference, Template};

/// Shared state an execution reads from.
pub struct ExecutionEnv<'a> {
    pub graphs: &'a GraphRegistry,
    pub services: &'a ServiceRegistry,
    pub cache: Option<&'a SemanticCache>,
    pub conclusions: &'a [ConclusionTemplate],
    pub options: &'a ExecutionOptions,
}

/// Runs the plan stage by stage and aggregates the answer. Any failed
/// sub-prompt fails the whole prompt.
pub async fn execute(
    plan: &ExecutionPlan,
    subs: &[SubPrompt],
    prompt: &Prompt,
    env: &ExecutionEnv<'_>,
) -> Result<AggregateResponse, PipelineError> {
    let started = Instant::now();
    let by_id: BTreeMap<SubPromptId, &SubPrompt> = subs.iter().map(|s| (s.id(), s)).collect();
    let mut responses: BTreeMap<SubPromptId, ServiceResponse> = BTreeMap::new();
    let mut records: Vec<TraceRecord> = Vec::with_capacity(subs.len());

    for (stage_index, stage) in plan.stages.iter().enumerate() {
        let cap = env.options.max_concurrency.unwrap_or(stage.len()).max(1);
        let done = &responses;
        let by_id = &by_id;
        let results: Vec<(ServiceResponse, TraceRecord)> = stream::iter(stage.iter().copied())
            .map(|id| async move {
                let sub = by_id.get(&id).copied().ok_or_else(|| {
                    PipelineError::new("plan", "invalid-plan", format!("unknown sub-prompt {id}")).at(stage_index, id)
                })?;
                let binding = plan.bindings.get(&id).ok_or_else(|| {
                    PipelineError::new("plan", "invalid-plan", "sub-prompt has no binding").at(stage_index, id)
                })?;
                run_sub_prompt(sub, stage_index, binding, by_id, done, prompt, env)
                    .await
                    .map_err(|e| e.at(stage_index, id))
            })
            .buffered(cap)
            .try_collect()
            .await?;
        for (response, record) in results {
            responses.insert(response.sub_prompt_id, response);
            records.push(record);
        }
    }

    let parts: Vec<ServiceResponse> = responses.into_values().collect();
    let final_text = aggregate(&parts, subs, env.conclusions)?;
    records.sort_by_key(|r| r.sub_prompt_id);
    let mut trace = ExecutionTrace {
        records,
        step_count: 0,
        total_elapsed: started.elapsed(),
    };
    trace.step_count = count_steps(&trace, StepMode::Orchestrated, &env.options.step_counting);
    Ok(AggregateResponse {
        prompt_echo: prompt.text().to_string(),
        final_text,
        parts,
        trace,
    })
}

/// Ids of every sub-prompt `id` depends on, directly or not.
fn ancestors(id: SubPromptId, by_id: &BTreeMap<SubPromptId, &SubPrompt>) -> BTreeSet<SubPromptId> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<SubPromptId> = vec![id];
    while let Some(current) = stack.pop() {
        if let Some(sub) = by_id.get(&current) {
            for &dep in sub.depends_on() {
                if seen.insert(dep) {
                    stack.push(dep);
                }
            }
        }
    }
    seen
}

fn resolve_text(sub: &SubPrompt, done: &BTreeMap<SubPromptId, ServiceResponse>) -> Result<String, PipelineError> {
    Template::parse(sub.text_template())
        .render(|name, _| Ok(chain_reference(name).and_then(|k| done.get(&k)).map(|r| r.text.clone())))
        .map_err(|e| PipelineError::new("chain", "unresolved-chain", e.to_string()))
}

async fn run_sub_prompt(
    sub: &SubPrompt,
    stage: usize,
    binding: &PlannedBinding,
    by_id: &BTreeMap<SubPromptId, &SubPrompt>,
    done: &BTreeMap<SubPromptId, ServiceResponse>,
    prompt: &Prompt,
    env: &ExecutionEnv<'_>,
) -> Result<(ServiceResponse, TraceRecord), PipelineError> {
    let started = Instant::now();
    let ctx = prompt.context();
    let sub_text = resolve_text(sub, done)?;
    let mut prior_facts = Facts::new();
    for dep in ancestors(sub.id(), by_id) {
        if let Some(r) = done.get(&dep) {
            prior_facts.extend(r.facts.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
    }

    // Binding needs no graph access; doing it first keeps a cache hit from
    // masking an unresolvable placeholder.
    let rule = &binding.rule;
    let bound = bind(rule, sub, ctx, &prior_facts).map_err(|e| PipelineError::new("rules", e.code(), e.to_string()))?;
    let retrieval = match env.options.retrieval {
        RetrievalMode::Rules => "rules",
        RetrievalMode::WholeDomain => "whole-domain",
    };
    let inputs = rule.referenced_inputs(ctx, &prior_facts);
    let fp = fingerprint(
        [
            ("role", ctx.role().to_string()),
            ("rule", rule.rule_id.clone()),
            ("retrieval", retrieval.to_string()),
        ]
        .into_iter()
        .chain(inputs.iter().map(|(k, v)| (k.as_str(), v.to_string()))),
    );
    let key = CacheKey::new(&sub_text, fp);

    if let Some(hit) = env.cache.and_then(|c| c.get(&key)) {
        let response = hit.served_from_cache(sub.id(), started.elapsed());
        let record = TraceRecord {
            sub_prompt_id: sub.id(),
            stage,
            cache_hit: true,
            kg_queries: 0,
            service_invocations: 0,
            elapsed: response.elapsed,
        };
        return Ok((response, record));
    }

    let kg_error = |e: crate::graph::GraphError| PipelineError::new("retrieval", "kg-query-error", e.to_string());
    let graph = env.graphs.get(&rule.target_kg).map_err(kg_error)?;
    let context = match (env.options.retrieval, &rule.query.node_kind) {
        (RetrievalMode::Rules, _) => graph.query(&bound.resolved_query).map_err(kg_error)?,
        (RetrievalMode::WholeDomain, Some(kind)) => graph.query(&KGQuery::kind(kind.clone())).map_err(kg_error)?,
        (RetrievalMode::WholeDomain, None) => graph.scan_all(),
    }
    .for_sub_prompt(sub.id());

    let service = env
        .services
        .for_domain(sub.target_domain())
        .map_err(|e| PipelineError::new("service", e.code(), e.to_string()))?;
    let request = ServiceRequest {
        sub_prompt_id: sub.id(),
        intent: sub.intent().to_string(),
        sub_text,
        context,
    };
    let (mut response, invocations) = invoke_with_retry(service.as_ref(), &request, env.options.service_retries).await?;
    response.sub_prompt_id = sub.id();
    if let Some(cache) = env.cache {
        cache.put(key, response.clone());
    }
    let record = TraceRecord {
        sub_prompt_id: sub.id(),
        stage,
        cache_hit: false,
        kg_queries: 1,
        service_invocations: invocations,
        elapsed: started.elapsed(),
    };
    Ok((response, record))
}

async fn invoke_with_retry(
    service: &dyn AiService,
    request: &ServiceRequest,
    retries: u32,
) -> Result<(ServiceResponse, u32), PipelineError> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match service.invoke(request).await {
            Ok(response) => return Ok((response, attempts)),
            Err(e) if attempts > retries => {
                return Err(PipelineError::new(
                    "service",
                    "service-unavailable",
                    format!("`{}` failed after {attempts} attempt(s): {} ({e})", service.service_id(), e.code()),
                ))
            }
            Err(e) => tracing::warn!(service = service.service_id(), error = %e, "service invocation failed, retrying"),
        }
    }
}

/// Emulates answering without orchestration: each sub-prompt goes on its
/// own, in order, to its domain's service with every node of the domain's
/// graphs as context. No chaining, no cache, no conclusion.
pub async fn run_baseline(
    subs: &[SubPrompt],
    prompt: &Prompt,
    graphs: &GraphRegistry,
    services: &ServiceRegistry,
    domain_graphs: &BTreeMap<String, Vec<String>>,
) -> Result<AggregateResponse, PipelineError> {
    let started = Instant::now();
    let mut ordered: Vec<&SubPrompt> = subs.iter().collect();
    ordered.sort_by_key(|s| s.id());
    let mut parts = Vec::with_capacity(ordered.len());
    let mut records = Vec::with_capacity(ordered.len());

    for (index, sub) in ordered.into_iter().enumerate() {
        let sub_started = Instant::now();
        let fail = |e: PipelineError| e.at(index, sub.id());
        let text = Template::parse(sub.text_template())
            .render(|name, _| Ok(chain_reference(name).map(|_| String::new())))
            .map_err(|e| fail(PipelineError::new("chain", "unresolved-chain", e.to_string())))?;
        let text = text.trim().trim_end_matches('+').trim().to_string();

        let kg_ids = domain_graphs.get(sub.target_domain()).cloned().unwrap_or_default();
        if kg_ids.is_empty() {
            return Err(fail(PipelineError::new(
                "retrieval",
                "kg-query-error",
                format!("no graph holds domain `{}`", sub.target_domain()),
            )));
        }
        let mut context = ContextBundle {
            kg_id: kg_ids.join("+"),
            sub_prompt_id: sub.id(),
            ..Default::default()
        };
        for kg_id in &kg_ids {
            let graph = graphs
                .get(kg_id)
                .map_err(|e| fail(PipelineError::new("retrieval", "kg-query-error", e.to_string())))?;
            let scan = graph.scan_all();
            context.matched_nodes.extend(scan.matched_nodes);
            context.matched_edges.extend(scan.matched_edges);
            context.rendered_facts.extend(scan.rendered_facts);
        }

        let service = services
            .for_domain(sub.target_domain())
            .map_err(|e| fail(PipelineError::new("service", e.code(), e.to_string())))?;
        let request = ServiceRequest {
            sub_prompt_id: sub.id(),
            intent: sub.intent().to_string(),
            sub_text: text,
            context,
        };
        let (response, invocations) = invoke_with_retry(service.as_ref(), &request, 0).await.map_err(fail)?;
        records.push(TraceRecord {
            sub_prompt_id: sub.id(),
            stage: index,
            cache_hit: false,
            kg_queries: kg_ids.len() as u32,
            service_invocations: invocations,
            elapsed: sub_started.elapsed(),
        });
        parts.push(response);
    }

    let final_text = parts.iter().map(|p| sentence(&p.text)).collect::<Vec<_>>().join(" ");
    Ok(AggregateResponse {
        prompt_echo: prompt.text().to_string(),
        final_text,
        trace: ExecutionTrace {
            step_count: baseline_steps(records.len()),
            records,
            total_elapsed: started.elapsed(),
        },
        parts,
    })
}

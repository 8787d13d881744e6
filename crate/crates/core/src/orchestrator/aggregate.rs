use std::collections::BTreeSet;

use super::PipelineError;
use crate::decomposer::ConclusionTemplate;
use crate::model::{Facts, ServiceResponse, SubPrompt};
use crate::template::{select_variant, Template, TemplateError};

const MISSING_FACT: &str = "missing-fact-for-conclusion-template";

/// The text as a sentence: trimmed and ending in terminal punctuation.
pub fn sentence(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.ends_with(['.', '!', '?']) {
        trimmed.to_string()
    } else {
        format!("{trimmed}.")
    }
}

/// Joins part sentences in sub-prompt order, then appends the conclusion
/// declared for exactly this set of intents, if any.
pub fn aggregate(
    parts: &[ServiceResponse],
    subs: &[SubPrompt],
    conclusions: &[ConclusionTemplate],
) -> Result<String, PipelineError> {
    let mut ordered: Vec<&ServiceResponse> = parts.iter().collect();
    ordered.sort_by_key(|p| p.sub_prompt_id);

    let mut facts = Facts::new();
    for part in &ordered {
        facts.extend(part.facts.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    let mut sentences: Vec<String> = ordered.iter().map(|p| sentence(&p.text)).collect();

    let intents: BTreeSet<String> = subs.iter().map(|s| s.intent().to_string()).collect();
    if let Some(conclusion) = conclusions.iter().find(|c| c.intents == intents) {
        let missing = |fact: String| PipelineError::new("aggregate", MISSING_FACT, format!("conclusion needs fact `{fact}`"));
        if let Some(variant) = select_variant(&conclusion.variants, &facts).map_err(missing)? {
            let text = Template::parse(&variant.template).render_facts(&facts).map_err(|e| match e {
                TemplateError::Missing(fact) => missing(fact),
                other => PipelineError::new("aggregate", "invalid-conclusion-template", other.to_string()),
            })?;
            if !text.trim().is_empty() {
                sentences.push(sentence(&text));
            }
        }
    }
    Ok(sentences.join(" "))
}

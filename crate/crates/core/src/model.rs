//! Shared domain types: user context, prompts, sub-prompts, responses and traces.
//!
//! Every constructor validates its invariants, so a value of one of these types
//! is always well formed. Deserialization goes through the same constructors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};

use crate::template::Template;

/// Source name stamped on responses served from the semantic cache.
pub const CACHE_SOURCE: &str = "cache";

/// Identifier of a sub-prompt within its parent decomposition (1-based).
pub type SubPromptId = u32;

/// A scalar attribute or fact value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Parses a command-line style value: `true`/`false`, a number, or text.
    pub fn parse_loose(raw: &str) -> Scalar {
        match raw {
            "true" => Scalar::Bool(true),
            "false" => Scalar::Bool(false),
            _ => match raw.parse::<f64>() {
                Ok(n) if n.is_finite() => Scalar::Number(n),
                _ => Scalar::Text(raw.to_string()),
            },
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Number(n) => write!(f, "{n}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Text(s.to_string())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Text(s)
    }
}

impl From<f64> for Scalar {
    fn from(n: f64) -> Self {
        Scalar::Number(n)
    }
}

impl From<bool> for Scalar {
    fn from(b: bool) -> Self {
        Scalar::Bool(b)
    }
}

/// Named facts carried between sub-prompts and into the final answer.
pub type Facts = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("user_id must not be empty")]
    EmptyUserId,
    #[error("role must not be empty")]
    EmptyRole,
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("role `{0}` is not declared in the configuration")]
    UnknownRole(String),
    #[error("attribute key `{0}` is not declared in the configuration")]
    UnknownAttributeKey(String),
    #[error("sub-prompt {0} depends on itself")]
    SelfDependency(SubPromptId),
    #[error("sub-prompt {id} uses placeholder {{R{reference}}} but does not depend on {reference}")]
    UndeclaredChainReference { id: SubPromptId, reference: SubPromptId },
    #[error("duplicate sub-prompt id {0}")]
    DuplicateSubPromptId(SubPromptId),
    #[error("sub-prompt {id} depends on unknown sub-prompt {missing}")]
    DanglingDependency { id: SubPromptId, missing: SubPromptId },
    #[error("sub-prompt dependencies contain a cycle")]
    DependencyCycle,
    #[error("response text must not be empty")]
    EmptyResponseText,
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::EmptyUserId => "empty-user-id",
            ModelError::EmptyRole => "unknown-role",
            ModelError::EmptyPrompt => "empty-prompt",
            ModelError::UnknownRole(_) => "unknown-role",
            ModelError::UnknownAttributeKey(_) => "unknown-attribute-key",
            ModelError::SelfDependency(_)
            | ModelError::UndeclaredChainReference { .. }
            | ModelError::DuplicateSubPromptId(_)
            | ModelError::DanglingDependency { .. } => "invalid-decomposition",
            ModelError::DependencyCycle => "cycle-detected",
            ModelError::EmptyResponseText => "empty-response",
        }
    }
}

/// Who is asking: identity, role label and a flat attribute map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawUserContext")]
pub struct UserContext {
    user_id: String,
    role: String,
    attributes: BTreeMap<String, Scalar>,
}

#[derive(Deserialize)]
struct RawUserContext {
    user_id: String,
    role: String,
    #[serde(default)]
    attributes: BTreeMap<String, Scalar>,
}

impl TryFrom<RawUserContext> for UserContext {
    type Error = ModelError;

    fn try_from(raw: RawUserContext) -> Result<Self, Self::Error> {
        UserContext::new(raw.user_id, raw.role, raw.attributes)
    }
}

impl UserContext {
    pub fn new(
        user_id: impl Into<String>,
        role: impl Into<String>,
        attributes: BTreeMap<String, Scalar>,
    ) -> Result<Self, ModelError> {
        let user_id = user_id.into();
        let role = role.into();
        if user_id.trim().is_empty() {
            return Err(ModelError::EmptyUserId);
        }
        if role.trim().is_empty() {
            return Err(ModelError::EmptyRole);
        }
        Ok(Self {
            user_id,
            role,
            attributes,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn attributes(&self) -> &BTreeMap<String, Scalar> {
        &self.attributes
    }

    pub fn attribute(&self, key: &str) -> Option<&Scalar> {
        self.attributes.get(key)
    }

    /// Looks up a value by placeholder name: `user_id`, `role`, or an attribute key.
    pub fn lookup(&self, name: &str) -> Option<Scalar> {
        match name {
            "user_id" => Some(Scalar::Text(self.user_id.clone())),
            "role" => Some(Scalar::Text(self.role.clone())),
            _ => self.attributes.get(name).cloned(),
        }
    }
}

/// Declared roles and attribute keys a client may use.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextSchema {
    pub roles: BTreeSet<String>,
    pub attribute_keys: BTreeSet<String>,
}

/// Checks the context against the declared roles and attribute keys.
pub fn validate_context(ctx: UserContext, schema: &ContextSchema) -> Result<UserContext, ModelError> {
    if !schema.roles.contains(ctx.role()) {
        return Err(ModelError::UnknownRole(ctx.role().to_string()));
    }
    if let Some(key) = ctx
        .attributes()
        .keys()
        .find(|k| !schema.attribute_keys.contains(k.as_str()))
    {
        return Err(ModelError::UnknownAttributeKey(key.clone()));
    }
    Ok(ctx)
}

/// The user's natural-language request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prompt {
    text: String,
    context: UserContext,
    received_at: SystemTime,
}

impl Prompt {
    pub fn new(text: impl Into<String>, context: UserContext) -> Result<Self, ModelError> {
        Self::received_at(text, context, SystemTime::now())
    }

    pub fn received_at(
        text: impl Into<String>,
        context: UserContext,
        received_at: SystemTime,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        Ok(Self {
            text,
            context,
            received_at,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn context(&self) -> &UserContext {
        &self.context
    }

    pub fn received(&self) -> SystemTime {
        self.received_at
    }
}

/// One decomposed unit of a prompt.
///
/// `text_template` may contain `{R<k>}` placeholders that are replaced with the
/// response text of sub-prompt `k` at execution time; every such `k` must be a
/// declared dependency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSubPrompt")]
pub struct SubPrompt {
    id: SubPromptId,
    intent: String,
    text_template: String,
    depends_on: BTreeSet<SubPromptId>,
    target_domain: String,
}

#[derive(Deserialize)]
struct RawSubPrompt {
    id: SubPromptId,
    intent: String,
    text_template: String,
    #[serde(default)]
    depends_on: BTreeSet<SubPromptId>,
    target_domain: String,
}

impl TryFrom<RawSubPrompt> for SubPrompt {
    type Error = ModelError;

    fn try_from(raw: RawSubPrompt) -> Result<Self, Self::Error> {
        SubPrompt::new(
            raw.id,
            raw.intent,
            raw.text_template,
            raw.depends_on,
            raw.target_domain,
        )
    }
}

impl SubPrompt {
    pub fn new(
        id: SubPromptId,
        intent: impl Into<String>,
        text_template: impl Into<String>,
        depends_on: BTreeSet<SubPromptId>,
        target_domain: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let text_template = text_template.into();
        if depends_on.contains(&id) {
            return Err(ModelError::SelfDependency(id));
        }
        for reference in Template::parse(&text_template).chain_references() {
            if !depends_on.contains(&reference) {
                return Err(ModelError::UndeclaredChainReference { id, reference });
            }
        }
        Ok(Self {
            id,
            intent: intent.into(),
            text_template,
            depends_on,
            target_domain: target_domain.into(),
        })
    }

    pub fn id(&self) -> SubPromptId {
        self.id
    }

    pub fn intent(&self) -> &str {
        &self.intent
    }

    pub fn text_template(&self) -> &str {
        &self.text_template
    }

    pub fn depends_on(&self) -> &BTreeSet<SubPromptId> {
        &self.depends_on
    }

    pub fn target_domain(&self) -> &str {
        &self.target_domain
    }
}

/// Checks decomposition-level invariants: unique ids, no dangling
/// dependencies, and an acyclic dependency relation. Returns the ids in a
/// topological order (prerequisites first, ties by id).
pub fn validate_decomposition(subs: &[SubPrompt]) -> Result<Vec<SubPromptId>, ModelError> {
    let mut ids = BTreeSet::new();
    for sub in subs {
        if !ids.insert(sub.id()) {
            return Err(ModelError::DuplicateSubPromptId(sub.id()));
        }
    }
    for sub in subs {
        if let Some(&missing) = sub.depends_on().iter().find(|d| !ids.contains(d)) {
            return Err(ModelError::DanglingDependency {
                id: sub.id(),
                missing,
            });
        }
    }

    let mut remaining: BTreeMap<SubPromptId, usize> =
        subs.iter().map(|s| (s.id(), s.depends_on().len())).collect();
    let mut order = Vec::with_capacity(subs.len());
    let mut ready: BTreeSet<SubPromptId> = remaining
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(&id, _)| id)
        .collect();
    while let Some(id) = ready.pop_first() {
        order.push(id);
        remaining.remove(&id);
        for sub in subs.iter().filter(|s| s.depends_on().contains(&id)) {
            if let Some(n) = remaining.get_mut(&sub.id()) {
                *n -= 1;
                if *n == 0 {
                    ready.insert(sub.id());
                }
            }
        }
    }
    if order.len() != subs.len() {
        return Err(ModelError::DependencyCycle);
    }
    Ok(order)
}

/// The answer to one sub-prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceResponse {
    pub sub_prompt_id: SubPromptId,
    pub text: String,
    pub facts: Facts,
    pub source_service: String,
    pub from_cache: bool,
    #[serde(with = "duration_ms")]
    pub elapsed: Duration,
}

impl ServiceResponse {
    pub fn new(
        sub_prompt_id: SubPromptId,
        text: impl Into<String>,
        facts: Facts,
        source_service: impl Into<String>,
        elapsed: Duration,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyResponseText);
        }
        Ok(Self {
            sub_prompt_id,
            text,
            facts,
            source_service: source_service.into(),
            from_cache: false,
            elapsed,
        })
    }

    /// Re-stamps a stored response as served from the cache for `sub_prompt_id`.
    pub fn served_from_cache(mut self, sub_prompt_id: SubPromptId, elapsed: Duration) -> Self {
        self.sub_prompt_id = sub_prompt_id;
        self.source_service = CACHE_SOURCE.to_string();
        self.from_cache = true;
        self.elapsed = elapsed;
        self
    }
}

/// Per-sub-prompt execution record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sub_prompt_id: SubPromptId,
    /// Zero-based stage index.
    pub stage: usize,
    pub cache_hit: bool,
    pub kg_queries: u32,
    pub service_invocations: u32,
    #[serde(with = "duration_ms")]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub records: Vec<TraceRecord>,
    pub step_count: u32,
    #[serde(with = "duration_ms")]
    pub total_elapsed: Duration,
}

impl ExecutionTrace {
    pub fn kg_queries(&self) -> u32 {
        self.records.iter().map(|r| r.kg_queries).sum()
    }

    pub fn service_invocations(&self) -> u32 {
        self.records.iter().map(|r| r.service_invocations).sum()
    }

    pub fn cache_hits(&self) -> usize {
        self.records.iter().filter(|r| r.cache_hit).count()
    }

    pub fn stage_count(&self) -> usize {
        self.records.iter().map(|r| r.stage + 1).max().unwrap_or(0)
    }
}

/// The consolidated answer to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResponse {
    pub prompt_echo: String,
    pub final_text: String,
    pub parts: Vec<ServiceResponse>,
    pub trace: ExecutionTrace,
}

impl AggregateResponse {
    /// Serialization with every timing field zeroed, for comparing runs.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        for part in &mut copy.parts {
            part.elapsed = Duration::ZERO;
        }
        for record in &mut copy.trace.records {
            record.elapsed = Duration::ZERO;
        }
        copy.trace.total_elapsed = Duration::ZERO;
        serde_json::to_string(&copy).expect("aggregate response serializes")
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        if !ms.is_finite() || ms < 0.0 {
            return Err(serde::de::Error::custom("duration must be a non-negative number of milliseconds"));
        }
        Ok(Duration::from_secs_f64(ms / 1000.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> ContextSchema {
        ContextSchema {
            roles: ["retail-customer".to_string()].into(),
            attribute_keys: ["account-type".to_string()].into(),
        }
    }

    fn attrs(pairs: &[(&str, &str)]) -> BTreeMap<String, Scalar> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Scalar::from(*v)))
            .collect()
    }

    #[test]
    fn declared_role_passes() {
        let ctx = UserContext::new("XXX", "retail-customer", BTreeMap::new()).unwrap();
        assert_eq!(validate_context(ctx.clone(), &schema()).unwrap(), ctx);
    }

    #[test]
    fn undeclared_role_rejected() {
        let ctx = UserContext::new("XXX", "astronaut", BTreeMap::new()).unwrap();
        assert_eq!(
            validate_context(ctx, &schema()).unwrap_err(),
            ModelError::UnknownRole("astronaut".into())
        );
    }

    #[test]
    fn saving_attribute_passes() {
        let ctx = UserContext::new("XXX", "retail-customer", attrs(&[("account-type", "saving")])).unwrap();
        let ok = validate_context(ctx, &schema()).unwrap();
        assert_eq!(ok.attribute("account-type"), Some(&Scalar::from("saving")));
    }

    #[test]
    fn undeclared_attribute_rejected() {
        let ctx = UserContext::new("XXX", "retail-customer", attrs(&[("planet", "mars")])).unwrap();
        assert_eq!(
            validate_context(ctx, &schema()).unwrap_err().code(),
            "unknown-attribute-key"
        );
    }

    #[test]
    fn empty_prompt_rejected() {
        let ctx = UserContext::new("XXX", "retail-customer", BTreeMap::new()).unwrap();
        assert_eq!(Prompt::new("   \n", ctx).unwrap_err(), ModelError::EmptyPrompt);
    }

    #[test]
    fn sub_prompt_chain_reference_must_be_dependency() {
        let err = SubPrompt::new(2, "fd", "x + {R1}", BTreeSet::new(), "fd").unwrap_err();
        assert_eq!(err, ModelError::UndeclaredChainReference { id: 2, reference: 1 });
        assert!(SubPrompt::new(2, "fd", "x + {R1}", [1].into(), "fd").is_ok());
        assert_eq!(
            SubPrompt::new(2, "fd", "x", [2].into(), "fd").unwrap_err(),
            ModelError::SelfDependency(2)
        );
    }

    #[test]
    fn decomposition_cycle_detected() {
        let a = SubPrompt::new(1, "a", "a", [2].into(), "d").unwrap();
        let b = SubPrompt::new(2, "b", "b", [1].into(), "d").unwrap();
        assert_eq!(validate_decomposition(&[a, b]), Err(ModelError::DependencyCycle));
    }

    #[test]
    fn sub_prompt_deserialization_validates() {
        let bad = r#"{"id":1,"intent":"a","text_template":"{R1}","depends_on":[1],"target_domain":"d"}"#;
        assert!(serde_json::from_str::<SubPrompt>(bad).is_err());
        let bad_ctx = r#"{"user_id":"","role":"r"}"#;
        assert!(serde_json::from_str::<UserContext>(bad_ctx).is_err());
    }

    #[test]
    fn response_rejects_empty_text() {
        assert_eq!(
            ServiceResponse::new(1, " ", Facts::new(), "svc", Duration::ZERO).unwrap_err(),
            ModelError::EmptyResponseText
        );
        let r = ServiceResponse::new(1, "ok", Facts::new(), "svc", Duration::ZERO)
            .unwrap()
            .served_from_cache(3, Duration::ZERO);
        assert!(r.from_cache);
        assert_eq!(r.source_service, CACHE_SOURCE);
        assert_eq!(r.sub_prompt_id, 3);
    }

    #[test]
    fn scalar_display_drops_integral_fraction() {
        assert_eq!(Scalar::Number(100000.0).to_string(), "100000");
        assert_eq!(Scalar::Number(8.65).to_string(), "8.65");
        assert_eq!(Scalar::parse_loose("saving"), Scalar::from("saving"));
        assert_eq!(Scalar::parse_loose("12"), Scalar::Number(12.0));
    }

    proptest! {
        #[test]
        fn construction_rejects_invalid_fields(
            user in "[ a-z]{0,4}",
            text in "[ \\t\\na-z]{0,6}",
            id in 1u32..6,
            deps in proptest::collection::btree_set(1u32..6, 0..4),
            refs in proptest::collection::vec(1u32..6, 0..3),
        ) {
            let ctx = UserContext::new(user.clone(), "r", BTreeMap::new());
            prop_assert_eq!(ctx.is_ok(), !user.trim().is_empty());
            if let Ok(ctx) = ctx {
                prop_assert_eq!(Prompt::new(text.clone(), ctx).is_ok(), !text.trim().is_empty());
            }
            let template: String = refs.iter().map(|r| format!("{{R{r}}} ")).collect();
            let ok = !deps.contains(&id) && refs.iter().all(|r| deps.contains(r));
            prop_assert_eq!(SubPrompt::new(id, "i", template, deps, "d").is_ok(), ok);
        }
    }
}

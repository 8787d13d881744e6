//! AI service adapters. Each knowledge domain is served by exactly one
//! service; the orchestrator only sees the [`AiService`] trait.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::graph::ContextBundle;
use crate::model::{ServiceResponse, SubPromptId};
use crate::template::Variant;

pub use http::{HttpService, WireReply, WireRequest};
pub use mock::MockService;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("service `{service}` has no answer template for intent `{intent}`")]
    NoTemplate { service: String, intent: String },
    #[error("service `{service}` needs fact `{fact}`, which the retrieved context does not provide")]
    TemplateFactMissing { service: String, fact: String },
    #[error("service `{service}` template is malformed: {message}")]
    BadTemplate { service: String, message: String },
    #[error("cannot reach `{endpoint}`: {message}")]
    Connection { endpoint: String, message: String },
    #[error("`{endpoint}` timed out")]
    Timeout { endpoint: String },
    #[error("bad reply from `{endpoint}`: {message}")]
    BadReply { endpoint: String, message: String },
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NoTemplate { .. } => "no-template",
            ServiceError::TemplateFactMissing { .. } => "template-fact-missing",
            ServiceError::BadTemplate { .. } => "bad-template",
            ServiceError::Connection { .. } => "connection",
            ServiceError::Timeout { .. } => "timeout",
            ServiceError::BadReply { .. } => "bad-reply",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("service `{service_id}`: {message}")]
    InvalidDescriptor { service_id: String, message: String },
    #[error("domain `{0}` already has a service")]
    DuplicateDomain(String),
    #[error("no service registered for domain `{0}`")]
    NoServiceForDomain(String),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::InvalidDescriptor { .. } => "invalid-service",
            RegistryError::DuplicateDomain(_) => "duplicate-domain",
            RegistryError::NoServiceForDomain(_) => "no-service-for-domain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Mock,
    Http,
}

/// A mock answer: one template, or conditional variants tried in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerTemplate {
    Plain(String),
    Variants(Vec<Variant>),
}

impl AnswerTemplate {
    pub fn variants(&self) -> Vec<Variant> {
        match self {
            AnswerTemplate::Plain(t) => vec![Variant {
                when: vec![],
                template: t.clone(),
            }],
            AnswerTemplate::Variants(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor")]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub domain: String,
    pub kind: ServiceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub answer_templates: BTreeMap<String, AnswerTemplate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulated_latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    service_id: String,
    domain: String,
    kind: ServiceKind,
    #[serde(default)]
    endpoint: Option<String>,
    #[serde(default)]
    answer_templates: BTreeMap<String, AnswerTemplate>,
    #[serde(default)]
    simulated_latency_ms: Option<u64>,
    #[serde(default)]
    timeout_ms: Option<u64>,
    #[serde(default)]
    max_in_flight: Option<usize>,
}

impl TryFrom<RawDescriptor> for ServiceDescriptor {
    type Error = RegistryError;

    fn try_from(raw: RawDescriptor) -> Result<Self, Self::Error> {
        let d = ServiceDescriptor {
            service_id: raw.service_id,
            domain: raw.domain,
            kind: raw.kind,
            endpoint: raw.endpoint,
            answer_templates: raw.answer_templates,
            simulated_latency_ms: raw.simulated_latency_ms,
            timeout_ms: raw.timeout_ms,
            max_in_flight: raw.max_in_flight,
        };
        d.validate()?;
        Ok(d)
    }
}

impl ServiceDescriptor {
    pub fn mock(
        service_id: impl Into<String>,
        domain: impl Into<String>,
        answer_templates: BTreeMap<String, AnswerTemplate>,
    ) -> Self {
        Self {
            service_id: service_id.into(),
            domain: domain.into(),
            kind: ServiceKind::Mock,
            endpoint: None,
            answer_templates,
            simulated_latency_ms: None,
            timeout_ms: None,
            max_in_flight: None,
        }
    }

    pub fn http(service_id: impl Into<String>, domain: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            service_id: service_id.into(),
            domain: domain.into(),
            kind: ServiceKind::Http,
            endpoint: Some(endpoint.into()),
            answer_templates: BTreeMap::new(),
            simulated_latency_ms: None,
            timeout_ms: None,
            max_in_flight: None,
        }
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |message: &str| RegistryError::InvalidDescriptor {
            service_id: self.service_id.clone(),
            message: message.to_string(),
        };
        if self.service_id.trim().is_empty() {
            return Err(invalid("service_id is empty"));
        }
        if self.domain.trim().is_empty() {
            return Err(invalid("domain is empty"));
        }
        match self.kind {
            ServiceKind::Http if self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) => {
                Err(invalid("http services need an endpoint"))
            }
            ServiceKind::Mock if self.answer_templates.is_empty() => Err(invalid("mock services need answer_templates")),
            _ if self.max_in_flight == Some(0) => Err(invalid("max_in_flight must be positive")),
            _ => Ok(()),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout_ms.map(Duration::from_millis).unwrap_or(DEFAULT_TIMEOUT)
    }
}

/// What a service is asked to answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub sub_prompt_id: SubPromptId,
    pub intent: String,
    pub sub_text: String,
    pub context: ContextBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Health {
    Healthy,
    Unhealthy { reason: String },
}

impl Health {
    pub fn is_healthy(&self) -> bool {
        matches!(self, Health::Healthy)
    }
}

#[async_trait]
pub trait AiService: Send + Sync {
    fn service_id(&self) -> &str;

    fn domain(&self) -> &str;

    async fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, ServiceError>;

    async fn health(&self) -> Health;
}

/// Builds the adapter for a descriptor.
pub fn build_service(descriptor: ServiceDescriptor) -> Result<Arc<dyn AiService>, RegistryError> {
    descriptor.validate()?;
    Ok(match descriptor.kind {
        ServiceKind::Mock => Arc::new(MockService::new(descriptor)),
        ServiceKind::Http => Arc::new(HttpService::new(descriptor)?),
    })
}

/// Services by domain.
#[derive(Clone, Default)]
pub struct ServiceRegistry {
    services: BTreeMap<String, Arc<dyn AiService>>,
}

impl std::fmt::Debug for ServiceRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.services.iter().map(|(d, s)| (d, s.service_id())))
            .finish()
    }
}

impl ServiceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_descriptors(descriptors: impl IntoIterator<Item = ServiceDescriptor>) -> Result<Self, RegistryError> {
        let mut registry = Self::new();
        for d in descriptors {
            registry.register(build_service(d)?)?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, service: Arc<dyn AiService>) -> Result<(), RegistryError> {
        let domain = service.domain().to_string();
        if self.services.contains_key(&domain) {
            return Err(RegistryError::DuplicateDomain(domain));
        }
        self.services.insert(domain, service);
        Ok(())
    }

    pub fn replace(&mut self, service: Arc<dyn AiService>) {
        self.services.insert(service.domain().to_string(), service);
    }

    pub fn for_domain(&self, domain: &str) -> Result<&Arc<dyn AiService>, RegistryError> {
        self.services
            .get(domain)
            .ok_or_else(|| RegistryError::NoServiceForDomain(domain.to_string()))
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.services.keys().map(String::as_str)
    }

    pub fn services(&self) -> impl Iterator<Item = &Arc<dyn AiService>> {
        self.services.values()
    }

    pub async fn health(&self) -> BTreeMap<String, Health> {
        let mut out = BTreeMap::new();
        for service in self.services.values() {
            out.insert(service.service_id().to_string(), service.health().await);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn templates() -> BTreeMap<String, AnswerTemplate> {
        [("i".to_string(), AnswerTemplate::Plain("x".into()))].into()
    }

    #[test]
    fn descriptor_validation() {
        assert!(ServiceDescriptor::mock("m", "d", templates()).validate().is_ok());
        assert!(ServiceDescriptor::mock("m", "d", BTreeMap::new()).validate().is_err());
        let mut http = ServiceDescriptor::http("h", "d", "http://127.0.0.1:1/");
        assert!(http.validate().is_ok());
        http.endpoint = None;
        assert!(http.validate().is_err());
        let parsed: Result<ServiceDescriptor, _> =
            toml::from_str("service_id = \"h\"\ndomain = \"d\"\nkind = \"http\"\n");
        assert!(parsed.is_err());
    }

    #[test]
    fn one_service_per_domain() {
        let err = ServiceRegistry::from_descriptors([
            ServiceDescriptor::mock("a", "fd", templates()),
            ServiceDescriptor::mock("b", "fd", templates()),
        ])
        .unwrap_err();
        assert_eq!(err, RegistryError::DuplicateDomain("fd".into()));
        let reg = ServiceRegistry::from_descriptors([ServiceDescriptor::mock("a", "fd", templates())]).unwrap();
        assert_eq!(reg.for_domain("fd").unwrap().service_id(), "a");
        assert_eq!(reg.for_domain("accounts").err().unwrap().code(), "no-service-for-domain");
    }

    #[test]
    fn answer_template_forms() {
        #[derive(Deserialize)]
        struct Doc {
            t: BTreeMap<String, AnswerTemplate>,
        }
        let doc: Doc = toml::from_str(
            r#"
            [t]
            plain = "hello {x}"
            cond = [
                { when = [{ fact = "x", op = "gt", value = 1 }], template = "big" },
                { template = "small" },
            ]
            "#,
        )
        .unwrap();
        assert_eq!(doc.t["plain"].variants().len(), 1);
        assert_eq!(doc.t["cond"].variants().len(), 2);
    }
}

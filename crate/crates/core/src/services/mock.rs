use std::time::{Duration, Instant};

use async_trait::async_trait;

use super::{AiService, Health, ServiceDescriptor, ServiceError, ServiceRequest};
use crate::model::ServiceResponse;
use crate::template::{select_variant, Template, TemplateError};

/// Deterministic service that renders an answer template from the facts in
/// the retrieved context.
#[derive(Debug, Clone)]
pub struct MockService {
    descriptor: ServiceDescriptor,
}

impl MockService {
    pub fn new(descriptor: ServiceDescriptor) -> Self {
        Self { descriptor }
    }

    pub fn descriptor(&self) -> &ServiceDescriptor {
        &self.descriptor
    }

    /// Renders the answer without any simulated latency.
    pub fn render(&self, request: &ServiceRequest) -> Result<(String, crate::model::Facts), ServiceError> {
        let service = &self.descriptor.service_id;
        let template = self
            .descriptor
            .answer_templates
            .get(&request.intent)
            .ok_or_else(|| ServiceError::NoTemplate {
                service: service.clone(),
                intent: request.intent.clone(),
            })?;
        let facts = &request.context.rendered_facts;
        let variants = template.variants();
        let variant = select_variant(&variants, facts)
            .map_err(|fact| ServiceError::TemplateFactMissing {
                service: service.clone(),
                fact,
            })?
            .ok_or_else(|| ServiceError::BadTemplate {
                service: service.clone(),
                message: format!("no variant applies for intent `{}`", request.intent),
            })?;
        let text = Template::parse(&variant.template)
            .render_facts(facts)
            .map_err(|e| match e {
                TemplateError::Missing(fact) => ServiceError::TemplateFactMissing {
                    service: service.clone(),
                    fact,
                },
                other => ServiceError::BadTemplate {
                    service: service.clone(),
                    message: other.to_string(),
                },
            })?;
        if text.trim().is_empty() {
            return Err(ServiceError::BadTemplate {
                service: service.clone(),
                message: "rendered answer is empty".into(),
            });
        }
        Ok((text, facts.clone()))
    }
}

#[async_trait]
impl AiService for MockService {
    fn service_id(&self) -> &str {
        &self.descriptor.service_id
    }

    fn domain(&self) -> &str {
        &self.descriptor.domain
    }

    async fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, ServiceError> {
        let started = Instant::now();
        let (text, facts) = self.render(request)?;
        if let Some(ms) = self.descriptor.simulated_latency_ms {
            tokio::time::sleep(Duration::from_millis(ms)).await;
        }
        Ok(ServiceResponse::new(
            request.sub_prompt_id,
            text,
            facts,
            self.descriptor.service_id.clone(),
            started.elapsed(),
        )
        .expect("rendered text is non-empty"))
    }

    async fn health(&self) -> Health {
        Health::Healthy
    }
}

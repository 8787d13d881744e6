use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{AiService, Health, RegistryError, ServiceDescriptor, ServiceError, ServiceRequest, DEFAULT_MAX_IN_FLIGHT};
use crate::graph::ContextBundle;
use crate::model::{Facts, ServiceResponse, SubPromptId};

/// JSON body posted to an HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub sub_prompt_id: SubPromptId,
    pub intent: String,
    pub sub_text: String,
    pub context: ContextBundle,
}

impl From<&ServiceRequest> for WireRequest {
    fn from(r: &ServiceRequest) -> Self {
        Self {
            sub_prompt_id: r.sub_prompt_id,
            intent: r.intent.clone(),
            sub_text: r.sub_text.clone(),
            context: r.context.clone(),
        }
    }
}

/// JSON body an HTTP service answers with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReply {
    pub text: String,
    #[serde(default)]
    pub facts: Facts,
}

/// Service reached over HTTP with a JSON request/reply.
#[derive(Debug)]
pub struct HttpService {
    descriptor: ServiceDescriptor,
    endpoint: String,
    client: reqwest::Client,
    in_flight: Semaphore,
}

impl HttpService {
    pub fn new(descriptor: ServiceDescriptor) -> Result<Self, RegistryError> {
        let endpoint = descriptor.endpoint.clone().ok_or_else(|| RegistryError::InvalidDescriptor {
            service_id: descriptor.service_id.clone(),
            message: "http services need an endpoint".into(),
        })?;
        let client = reqwest::Client::builder()
            .timeout(descriptor.timeout())
            .build()
            .map_err(|e| RegistryError::InvalidDescriptor {
                service_id: descriptor.service_id.clone(),
                message: e.to_string(),
            })?;
        let permits = descriptor.max_in_flight.unwrap_or(DEFAULT_MAX_IN_FLIGHT);
        Ok(Self {
            descriptor,
            endpoint,
            client,
            in_flight: Semaphore::new(permits),
        })
    }

    fn transport_error(&self, e: reqwest::Error) -> ServiceError {
        if e.is_timeout() {
            ServiceError::Timeout {
                endpoint: self.endpoint.clone(),
            }
        } else if e.is_decode() {
            ServiceError::BadReply {
                endpoint: self.endpoint.clone(),
                message: e.to_string(),
            }
        } else {
            ServiceError::Connection {
                endpoint: self.endpoint.clone(),
                message: e.to_string(),
            }
        }
    }
}

#[async_trait]
impl AiService for HttpService {
    fn service_id(&self) -> &str {
        &self.descriptor.service_id
    }

    fn domain(&self) -> &str {
        &self.descriptor.domain
    }

    async fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, ServiceError> {
        let _permit = self.in_flight.acquire().await.expect("semaphore is never closed");
        let started = Instant::now();
        let reply = self
            .client
            .post(&self.endpoint)
            .json(&WireRequest::from(request))
            .send()
            .await
            .map_err(|e| self.transport_error(e))?;
        let status = reply.status();
        if !status.is_success() {
            return Err(ServiceError::BadReply {
                endpoint: self.endpoint.clone(),
                message: format!("status {status}"),
            });
        }
        let body: WireReply = reply.json().await.map_err(|e| self.transport_error(e))?;
        ServiceResponse::new(
            request.sub_prompt_id,
            body.text,
            body.facts,
            self.descriptor.service_id.clone(),
            started.elapsed(),
        )
        .map_err(|e| ServiceError::BadReply {
            endpoint: self.endpoint.clone(),
            message: e.to_string(),
        })
    }

    async fn health(&self) -> Health {
        match self.client.get(&self.endpoint).send().await {
            Ok(r) if r.status().is_server_error() => Health::Unhealthy {
                reason: format!("status {}", r.status()),
            },
            Ok(_) => Health::Healthy,
            Err(e) => Health::Unhealthy {
                reason: self.transport_error(e).to_string(),
            },
        }
    }
}

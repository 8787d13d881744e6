//! The running platform: current configuration snapshot, shared cache and
//! request metrics. Reload swaps the snapshot atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use conductor_core::cache::{CacheStats, SemanticCache};
use conductor_core::config::{load_config, ConfigError, PlatformConfig};
use conductor_core::model::{validate_context, AggregateResponse, ExecutionTrace, Prompt, Scalar, ServiceResponse, UserContext};
use conductor_core::orchestrator::{Orchestrator, PipelineError, RetrievalMode};
use conductor_core::services::Health;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

const LATENCY_WINDOW: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub user_id: String,
    pub role: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Scalar>,
    pub prompt: String,
    #[serde(default)]
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReply {
    pub final_text: String,
    pub parts: Vec<ServiceResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ExecutionTrace>,
}

impl QueryReply {
    pub fn new(response: AggregateResponse, verbose: bool) -> Self {
        Self {
            final_text: response.final_text,
            parts: response.parts,
            trace: verbose.then_some(response.trace),
        }
    }
}

/// `{stage, code, message}` as returned to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub stage: String,
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(stage: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<PipelineError> for ErrorBody {
    fn from(e: PipelineError) -> Self {
        Self {
            stage: e.stage,
            code: e.code,
            message: e.message,
        }
    }
}

impl From<ConfigError> for ErrorBody {
    fn from(e: ConfigError) -> Self {
        ErrorBody::new("config", e.code(), e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub error: ErrorBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p95: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepSummary {
    pub last: u32,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub cache: CacheStats,
    /// Milliseconds over recent successful queries.
    pub latency: LatencySummary,
    pub steps: StepSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReloadSummary {
    pub version: String,
    pub kgs: Vec<String>,
    pub services: Vec<String>,
    pub intents: Vec<String>,
    pub rules: Vec<String>,
}

/// An immutable configuration generation.
#[derive(Debug)]
pub struct Snapshot {
    pub config: PlatformConfig,
    pub orchestrator: Orchestrator,
}

impl Snapshot {
    pub fn build(config: PlatformConfig) -> Result<Self, ConfigError> {
        let orchestrator = config.build_orchestrator()?;
        Ok(Self { config, orchestrator })
    }

    pub fn summary(&self) -> ReloadSummary {
        ReloadSummary {
            version: self.config.version.clone(),
            kgs: self.orchestrator.graphs().ids(),
            services: self.config.services.iter().map(|s| s.service_id.clone()).collect(),
            intents: self.config.catalog.intents().iter().map(|i| i.intent.clone()).collect(),
            rules: self.config.rules.rules().iter().map(|r| r.rule_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Default)]
struct Metrics {
    latencies_ms: Vec<f64>,
    next: usize,
    last_steps: u32,
    step_total: u64,
    step_count: u64,
}

impl Metrics {
    fn record(&mut self, latency_ms: f64, steps: u32) {
        if self.latencies_ms.len() < LATENCY_WINDOW {
            self.latencies_ms.push(latency_ms);
        } else {
            self.latencies_ms[self.next] = latency_ms;
        }
        self.next = (self.next + 1) % LATENCY_WINDOW;
        self.last_steps = steps;
        self.step_total += u64::from(steps);
        self.step_count += 1;
    }

    fn latency(&self) -> LatencySummary {
        if self.latencies_ms.is_empty() {
            return LatencySummary::default();
        }
        let mut sorted = self.latencies_ms.clone();
        sorted.sort_by(f64::total_cmp);
        LatencySummary {
            p50: percentile(&sorted, 0.50),
            p95: percentile(&sorted, 0.95),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug)]
pub struct Platform {
    snapshot: RwLock<Arc<Snapshot>>,
    config_path: RwLock<Option<PathBuf>>,
    cache: SemanticCache,
    metrics: Mutex<Metrics>,
}

impl Platform {
    pub fn new(config: PlatformConfig) -> Result<Self, ConfigError> {
        let snapshot = Snapshot::build(config)?;
        let cache = SemanticCache::new(snapshot.config.cache_policy);
        Ok(Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            config_path: RwLock::new(None),
            cache,
            metrics: Mutex::new(Metrics::default()),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let platform = Self::new(load_config(path)?)?;
        *platform.config_path.write() = Some(path.to_path_buf());
        Ok(platform)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    pub fn cache(&self) -> &SemanticCache {
        &self.cache
    }

    /// Re-reads the configuration from `path` (or the last loaded path) and
    /// swaps it in. Requests already running finish on the old snapshot.
    /// On any error the current configuration stays in place.
    pub fn reload(&self, path: Option<&Path>) -> Result<ReloadSummary, ConfigError> {
        let path = match path {
            Some(p) => p.to_path_buf(),
            None => self.config_path.read().clone().ok_or_else(|| ConfigError::Io {
                path: String::new(),
                message: "platform was not loaded from a file".into(),
            })?,
        };
        let summary = self.install(load_config(&path)?)?;
        *self.config_path.write() = Some(path);
        Ok(summary)
    }

    /// Swaps in an already-parsed configuration.
    pub fn install(&self, config: PlatformConfig) -> Result<ReloadSummary, ConfigError> {
        let snapshot = Snapshot::build(config)?;
        let summary = snapshot.summary();
        self.cache.set_policy(snapshot.config.cache_policy);
        *self.snapshot.write() = Arc::new(snapshot);
        // Answers cached under the old rules or graphs may be stale.
        self.cache.clear();
        tracing::info!(version = %summary.version, kgs = ?summary.kgs, "configuration reloaded");
        Ok(summary)
    }

    fn prompt(&self, request: &QueryRequest, snapshot: &Snapshot) -> Result<Prompt, ErrorBody> {
        let ctx = UserContext::new(request.user_id.clone(), request.role.clone(), request.attributes.clone())
            .map_err(|e| ErrorBody::new("request", e.code(), e.to_string()))?;
        let ctx = validate_context(ctx, &snapshot.config.schema).map_err(|e| ErrorBody::new("context", e.code(), e.to_string()))?;
        Prompt::new(request.prompt.clone(), ctx).map_err(|e| ErrorBody::new("request", e.code(), e.to_string()))
    }

    /// Validates the context, then decomposes, plans and executes.
    pub async fn handle_query(&self, request: &QueryRequest) -> Result<AggregateResponse, ErrorBody> {
        let started = Instant::now();
        let snapshot = self.snapshot();
        let prompt = self.prompt(request, &snapshot)?;
        let response = snapshot
            .orchestrator
            .handle(&prompt, Some(&self.cache), RetrievalMode::Rules)
            .await
            .map_err(|e| {
                tracing::warn!(code = %e.code, stage = %e.stage, "query failed: {}", e.message);
                ErrorBody::from(e)
            })?;
        self.metrics
            .lock()
            .record(started.elapsed().as_secs_f64() * 1000.0, response.trace.step_count);
        Ok(response)
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let m = self.metrics.lock();
        MetricsSnapshot {
            cache: self.cache.stats(),
            latency: m.latency(),
            steps: StepSummary {
                last: m.last_steps,
                mean: if m.step_count == 0 {
                    0.0
                } else {
                    m.step_total as f64 / m.step_count as f64
                },
            },
        }
    }

    pub async fn health(&self) -> BTreeMap<String, Health> {
        let snapshot = self.snapshot();
        snapshot.orchestrator.services().health().await
    }
}

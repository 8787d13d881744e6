//! Benchmark harness comparing the manual baseline, cache-only and full
//! pipelines over a fixture list with golden answers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use conductor_core::cache::{normalize, CachePolicy, SemanticCache};
use conductor_core::model::{Prompt, Scalar, UserContext};
use conductor_core::orchestrator::{Orchestrator, RetrievalMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Sequential per-sub-prompt calls over whole graphs, no cache.
    Baseline,
    /// Orchestrated with the cache, but retrieval ignores rule filters.
    Cache,
    /// The full pipeline.
    CacheAndRules,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Baseline, Scenario::Cache, Scenario::CacheAndRules];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::Cache => "cache",
            Scenario::CacheAndRules => "cache_and_rules",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| BenchError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("fixture query {index} has no golden answer")]
    MissingGolden { index: usize },
    #[error("unknown scenario `{0}` (expected baseline, cache or cache_and_rules)")]
    UnknownScenario(String),
    #[error("cannot read fixtures `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse fixtures: {0}")]
    Parse(String),
    #[error("repetitions must be at least 1")]
    NoRepetitions,
}

impl BenchError {
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::MissingGolden { .. } => "fixture-missing-golden-answer",
            BenchError::UnknownScenario(_) => "unknown-scenario",
            BenchError::Io { .. } => "io-error",
            BenchError::Parse(_) => "parse-error",
            BenchError::NoRepetitions => "invalid-repetitions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchContext {
    pub user_id: String,
    pub role: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Scalar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchQuery {
    pub prompt: String,
    pub user_context: BenchContext,
    #[serde(default)]
    pub golden_final_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureFile {
    queries: Vec<BenchQuery>,
}

/// Reads a TOML or JSON fixture list (by extension).
pub fn load_fixtures(path: impl AsRef<Path>) -> Result<Vec<BenchQuery>, BenchError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let file: FixtureFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| BenchError::Parse(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| BenchError::Parse(e.to_string()))?
    };
    check_goldens(&file.queries)?;
    Ok(file.queries)
}

fn check_goldens(queries: &[BenchQuery]) -> Result<(), BenchError> {
    match queries
        .iter()
        .position(|q| q.golden_final_text.as_deref().is_none_or(|g| g.trim().is_empty()))
    {
        Some(index) => Err(BenchError::MissingGolden { index }),
        None => Ok(()),
    }
}

/// Lowercase, punctuation-stripped, whitespace-collapsed equality.
pub fn normalized_match(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: usize,
    pub repetition: usize,
    pub latency_ms: f64,
    pub steps: u32,
    pub sub_prompts: usize,
    pub cache_hits: usize,
    pub accurate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub queries: usize,
    pub repetitions: usize,
    pub mean_latency_ms: f64,
    /// Mean over the first repetition.
    pub cold_mean_latency_ms: f64,
    /// Mean over later repetitions; absent with a single repetition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_mean_latency_ms: Option<f64>,
    pub mean_steps: f64,
    /// Fraction of runs whose final text matches the golden answer.
    pub accuracy: f64,
    /// Fraction of sub-prompts served from the cache.
    pub cache_hit_rate: f64,
    pub outcomes: Vec<QueryOutcome>,
}

impl MetricsReport {
    pub fn outcome(&self, query: usize, repetition: usize) -> Option<&QueryOutcome> {
        self.outcomes.iter().find(|o| o.query == query && o.repetition == repetition)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario        {}", self.scenario)?;
        writeln!(f, "queries         {} x {} repetition(s)", self.queries, self.repetitions)?;
        writeln!(f, "mean latency    {:.2} ms", self.mean_latency_ms)?;
        writeln!(f, "cold latency    {:.2} ms", self.cold_mean_latency_ms)?;
        if let Some(warm) = self.warm_mean_latency_ms {
            writeln!(f, "warm latency    {warm:.2} ms")?;
        }
        writeln!(f, "mean steps      {:.2}", self.mean_steps)?;
        writeln!(f, "accuracy        {:.1}%", self.accuracy * 100.0)?;
        write!(f, "cache hit rate  {:.1}%", self.cache_hit_rate * 100.0)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs every query `repetitions` times (all queries, then again) under the
/// scenario, with a fresh cache shared across the run.
pub async fn run_bench(
    orchestrator: &Orchestrator,
    scenario: Scenario,
    queries: &[BenchQuery],
    repetitions: usize,
    cache_policy: CachePolicy,
) -> Result<MetricsReport, BenchError> {
    check_goldens(queries)?;
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let cache = SemanticCache::new(cache_policy);
    let mut outcomes = Vec::with_capacity(queries.len() * repetitions);

    for repetition in 0..repetitions {
        for (index, query) in queries.iter().enumerate() {
            let golden = query.golden_final_text.as_deref().unwrap_or_default();
            let started = Instant::now();
            let result = match prompt_for(query) {
                Ok(prompt) => match scenario {
                    Scenario::Baseline => orchestrator.handle_baseline(&prompt).await,
                    Scenario::Cache => orchestrator.handle(&prompt, Some(&cache), RetrievalMode::WholeDomain).await,
                    Scenario::CacheAndRules => orchestrator.handle(&prompt, Some(&cache), RetrievalMode::Rules).await,
                }
                .map_err(|e| e.to_string()),
                Err(e) => Err(e),
            };
            let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
            outcomes.push(match result {
                Ok(response) => QueryOutcome {
                    query: index,
                    repetition,
                    latency_ms,
                    steps: response.trace.step_count,
                    sub_prompts: response.trace.records.len(),
                    cache_hits: response.trace.cache_hits(),
                    accurate: normalized_match(&response.final_text, golden),
                    final_text: Some(response.final_text),
                    error: None,
                },
                Err(error) => QueryOutcome {
                    query: index,
                    repetition,
                    latency_ms,
                    steps: 0,
                    sub_prompts: 0,
                    cache_hits: 0,
                    accurate: false,
                    final_text: None,
                    error: Some(error),
                },
            });
        }
    }

    let sub_prompts: usize = outcomes.iter().map(|o| o.sub_prompts).sum();
    let hits: usize = outcomes.iter().map(|o| o.cache_hits).sum();
    Ok(MetricsReport {
        scenario,
        queries: queries.len(),
        repetitions,
        mean_latency_ms: mean(outcomes.iter().map(|o| o.latency_ms)).unwrap_or(0.0),
        cold_mean_latency_ms: mean(outcomes.iter().filter(|o| o.repetition == 0).map(|o| o.latency_ms)).unwrap_or(0.0),
        warm_mean_latency_ms: mean(outcomes.iter().filter(|o| o.repetition > 0).map(|o| o.latency_ms)),
        mean_steps: mean(outcomes.iter().filter(|o| o.error.is_none()).map(|o| f64::from(o.steps))).unwrap_or(0.0),
        accuracy: mean(outcomes.iter().map(|o| f64::from(u8::from(o.accurate)))).unwrap_or(0.0),
        cache_hit_rate: if sub_prompts == 0 {
            0.0
        } else {
            hits as f64 / sub_prompts as f64
        },
        outcomes,
    })
}

fn prompt_for(query: &BenchQuery) -> Result<Prompt, String> {
    let c = &query.user_context;
    let ctx = UserContext::new(c.user_id.clone(), c.role.clone(), c.attributes.clone()).map_err(|e| e.to_string())?;
    Prompt::new(query.prompt.clone(), ctx).map_err(|e| e.to_string())
}

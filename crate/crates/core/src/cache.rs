//! Semantic key-value cache for sub-prompt responses.
//!
//! Keys are normalized sub-prompt texts plus a fingerprint of the context
//! the answer depends on. A lookup hits the most similar stored key at or
//! above the similarity threshold; keys from different contexts never match.
//! Eviction is least-recently-used, with an optional idle TTL.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ServiceResponse;

pub const DEFAULT_CAPACITY: usize = 1024;
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.8;

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| !is_punctuation(*c))
        .flat_map(char::to_lowercase)
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '«' | '»' | '¿' | '¡' | '·'
        )
}

/// Stable short hash of the context an answer depends on.
pub fn fingerprint<'a, I>(parts: I) -> String
where
    I: IntoIterator<Item = (&'a str, String)>,
{
    let mut hasher = Sha256::new();
    for (key, value) in parts {
        hasher.update(key.as_bytes());
        hasher.update([0x1f]);
        hasher.update(value.as_bytes());
        hasher.update([0x1e]);
    }
    hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    normalized_text: String,
    context_fingerprint: String,
}

impl CacheKey {
    pub fn new(text: &str, context_fingerprint: impl Into<String>) -> Self {
        Self {
            normalized_text: normalize(text),
            context_fingerprint: context_fingerprint.into(),
        }
    }

    pub fn normalized_text(&self) -> &str {
        &self.normalized_text
    }

    pub fn context_fingerprint(&self) -> &str {
        &self.context_fingerprint
    }

    pub fn tokens(&self) -> BTreeSet<&str> {
        self.normalized_text.split_whitespace().collect()
    }
}

/// Similarity between cache keys, in `[0, 1]`.
pub trait KeySimilarity: Send + Sync + fmt::Debug {
    fn similarity(&self, a: &CacheKey, b: &CacheKey) -> f64;
}

/// Jaccard index of the token sets, zero across differing fingerprints.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenJaccard;

impl KeySimilarity for TokenJaccard {
    fn similarity(&self, a: &CacheKey, b: &CacheKey) -> f64 {
        if a.context_fingerprint != b.context_fingerprint {
            return 0.0;
        }
        let (ta, tb) = (a.tokens(), b.tokens());
        let union = ta.union(&tb).count();
        if union == 0 {
            return 1.0;
        }
        ta.intersection(&tb).count() as f64 / union as f64
    }
}

pub fn similarity(a: &CacheKey, b: &CacheKey) -> f64 {
    TokenJaccard.similarity(a, b)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CacheError {
    #[error("cache capacity must be at least 1")]
    ZeroCapacity,
    #[error("similarity threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct CachePolicy {
    capacity: usize,
    similarity_threshold: f64,
    ttl: Option<Duration>,
}

#[derive(Serialize, Deserialize)]
struct RawPolicy {
    #[serde(default = "default_capacity")]
    capacity: usize,
    #[serde(default = "default_threshold")]
    similarity_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ttl_ms: Option<u64>,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

fn default_threshold() -> f64 {
    DEFAULT_SIMILARITY_THRESHOLD
}

impl TryFrom<RawPolicy> for CachePolicy {
    type Error = CacheError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        CachePolicy::new(raw.capacity, raw.similarity_threshold, raw.ttl_ms.map(Duration::from_millis))
    }
}

impl From<CachePolicy> for RawPolicy {
    fn from(p: CachePolicy) -> Self {
        RawPolicy {
            capacity: p.capacity,
            similarity_threshold: p.similarity_threshold,
            ttl_ms: p.ttl.map(|d| d.as_millis() as u64),
        }
    }
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            ttl: None,
        }
    }
}

impl CachePolicy {
    pub fn new(capacity: usize, similarity_threshold: f64, ttl: Option<Duration>) -> Result<Self, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        if !(similarity_threshold > 0.0 && similarity_threshold <= 1.0) {
            return Err(CacheError::BadThreshold(similarity_threshold));
        }
        Ok(Self {
            capacity,
            similarity_threshold,
            ttl,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn similarity_threshold(&self) -> f64 {
        self.similarity_threshold
    }

    pub fn ttl(&self) -> Option<Duration> {
        self.ttl
    }
}

/// Time source for entry timestamps.
pub trait Clock: Send + Sync + fmt::Debug {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, t: Duration) {
        *self.now.lock() = t;
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub value: ServiceResponse,
    pub group_id: CacheKey,
    pub created_at: Duration,
    pub last_used_at: Duration,
    pub hit_count: u64,
    #[serde(skip)]
    touched: u64,
}

impl CacheEntry {
    fn recency(&self) -> (Duration, u64) {
        (self.last_used_at, self.touched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub size: usize,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<CacheKey, CacheEntry>,
    ticks: u64,
}

impl Inner {
    fn tick(&mut self) -> u64 {
        self.ticks += 1;
        self.ticks
    }
}

#[derive(Debug)]
pub struct SemanticCache {
    policy: RwLock<CachePolicy>,
    similarity: Box<dyn KeySimilarity>,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl SemanticCache {
    pub fn new(policy: CachePolicy) -> Self {
        Self::with_parts(policy, Box::new(TokenJaccard), Arc::new(SystemClock::default()))
    }

    pub fn with_parts(policy: CachePolicy, similarity: Box<dyn KeySimilarity>, clock: Arc<dyn Clock>) -> Self {
        Self {
            policy: RwLock::new(policy),
            similarity,
            clock,
            inner: Mutex::new(Inner::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> CachePolicy {
        *self.policy.read()
    }

    /// Swaps the policy and trims to the new capacity.
    pub fn set_policy(&self, policy: CachePolicy) {
        *self.policy.write() = policy;
        self.evict();
    }

    fn is_idle(policy: &CachePolicy, entry: &CacheEntry, now: Duration) -> bool {
        policy
            .ttl
            .is_some_and(|ttl| now.saturating_sub(entry.last_used_at) > ttl)
    }

    /// Best stored response for `key`, stamped as served from the cache.
    pub fn get(&self, key: &CacheKey) -> Option<ServiceResponse> {
        let policy = self.policy();
        let now = self.clock.now();
        let mut inner = self.inner.lock();

        let mut best: Option<(f64, (Duration, u64), &CacheKey)> = None;
        for entry in inner.entries.values() {
            if Self::is_idle(&policy, entry, now) {
                continue;
            }
            let score = self.similarity.similarity(key, &entry.key);
            if score < policy.similarity_threshold {
                continue;
            }
            let better = match &best {
                None => true,
                Some((s, recency, _)) => score > *s || (score == *s && entry.recency() > *recency),
            };
            if better {
                best = Some((score, entry.recency(), &entry.key));
            }
        }

        let Some((_, _, found)) = best else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return None;
        };
        let found = found.clone();
        let tick = inner.tick();
        let entry = inner.entries.get_mut(&found).expect("best entry exists");
        entry.hit_count += 1;
        entry.last_used_at = now.max(entry.last_used_at);
        entry.touched = tick;
        self.hits.fetch_add(1, Ordering::Relaxed);
        let mut value = entry.value.clone();
        value.from_cache = true;
        value.source_service = crate::model::CACHE_SOURCE.to_string();
        Some(value)
    }

    /// Stores a response, joining the group of the most similar existing key.
    pub fn put(&self, key: CacheKey, value: ServiceResponse) {
        let policy = self.policy();
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        let tick = inner.tick();

        if let Some(entry) = inner.entries.get_mut(&key) {
            entry.value = value;
            entry.last_used_at = now.max(entry.last_used_at);
            entry.touched = tick;
        } else {
            let group_id = inner
                .entries
                .values()
                .map(|e| (self.similarity.similarity(&key, &e.key), e))
                .filter(|(s, _)| *s >= policy.similarity_threshold)
                .max_by(|(sa, ea), (sb, eb)| sa.total_cmp(sb).then(ea.recency().cmp(&eb.recency())))
                .map(|(_, e)| e.group_id.clone())
                .unwrap_or_else(|| key.clone());
            inner.entries.insert(
                key.clone(),
                CacheEntry {
                    key,
                    value,
                    group_id,
                    created_at: now,
                    last_used_at: now,
                    hit_count: 0,
                    touched: tick,
                },
            );
        }
        let removed = Self::sweep_locked(&mut inner, &policy, now) + Self::evict_locked(&mut inner, &policy);
        self.evictions.fetch_add(removed as u64, Ordering::Relaxed);
    }

    fn evict_locked(inner: &mut Inner, policy: &CachePolicy) -> usize {
        let excess = inner.entries.len().saturating_sub(policy.capacity);
        if excess == 0 {
            return 0;
        }
        let mut by_age: Vec<(Duration, u64, CacheKey)> = inner
            .entries
            .values()
            .map(|e| (e.last_used_at, e.touched, e.key.clone()))
            .collect();
        by_age.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for (_, _, key) in by_age.into_iter().take(excess) {
            inner.entries.remove(&key);
        }
        excess
    }

    fn sweep_locked(inner: &mut Inner, policy: &CachePolicy, now: Duration) -> usize {
        let before = inner.entries.len();
        inner.entries.retain(|_, e| !Self::is_idle(policy, e, now));
        before - inner.entries.len()
    }

    /// Removes least-recently-used entries until the size fits the capacity.
    pub fn evict(&self) -> usize {
        let policy = self.policy();
        let removed = Self::evict_locked(&mut self.inner.lock(), &policy);
        self.evictions.fetch_add(removed as u64, Ordering::Relaxed);
        removed
    }

    /// Removes entries idle for longer than the TTL, then trims to capacity.
    pub fn sweep(&self) -> usize {
        let policy = self.policy();
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        let removed = Self::sweep_locked(&mut inner, &policy, now) + Self::evict_locked(&mut inner, &policy);
        self.evictions.fetch_add(removed as u64, Ordering::Relaxed);
        removed
    }

    pub fn clear(&self) {
        self.inner.lock().entries.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, key: &CacheKey) -> Option<CacheEntry> {
        self.inner.lock().entries.get(key).cloned()
    }

    /// Snapshot of all entries, least recently used first.
    pub fn entries(&self) -> Vec<CacheEntry> {
        let mut all: Vec<CacheEntry> = self.inner.lock().entries.values().cloned().collect();
        all.sort_by_key(|e| e.recency());
        all
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            size: self.len(),
        }
    }
}

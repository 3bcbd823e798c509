//! Uniform completion contract over pluggable text backends.
//!
//! Every model call in the crate goes through [`Gateway::complete`]; no other
//! module opens a network connection. Backends are registered by id, one of
//! them is the default, and requests are bounded by an in-flight pool and
//! retried on transient failures with exponential backoff.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use http::HttpBackend;
pub use mock::{MockBackend, MockRule, MockScript};

/// Prompt templates known to the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ConceptScoring,
    ScenarioKnowledge,
    RiskPatternExtraction,
    FactVerification,
    KnowledgeCheck,
    SuspectThenRuleOut,
    InitialAnalysis,
    ClaimClassification,
    TermExtraction,
    TermExplanation,
    PatternConsolidation,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::ConceptScoring,
        TemplateId::ScenarioKnowledge,
        TemplateId::RiskPatternExtraction,
        TemplateId::FactVerification,
        TemplateId::KnowledgeCheck,
        TemplateId::SuspectThenRuleOut,
        TemplateId::InitialAnalysis,
        TemplateId::ClaimClassification,
        TemplateId::TermExtraction,
        TemplateId::TermExplanation,
        TemplateId::PatternConsolidation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ConceptScoring => "concept_scoring",
            TemplateId::ScenarioKnowledge => "scenario_knowledge",
            TemplateId::RiskPatternExtraction => "risk_pattern_extraction",
            TemplateId::FactVerification => "fact_verification",
            TemplateId::KnowledgeCheck => "knowledge_check",
            TemplateId::SuspectThenRuleOut => "suspect_then_rule_out",
            TemplateId::InitialAnalysis => "initial_analysis",
            TemplateId::ClaimClassification => "claim_classification",
            TemplateId::TermExtraction => "term_extraction",
            TemplateId::TermExplanation => "term_explanation",
            TemplateId::PatternConsolidation => "pattern_consolidation",
        }
    }

    /// Whether the template's output feeds a comparison that needs the
    /// model's single most likely answer.
    pub fn default_greedy(self) -> bool {
        matches!(self, TemplateId::ConceptScoring | TemplateId::TermExplanation)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Line marker carrying a caller-supplied lookup key inside a prompt. The
/// mock backend keys its script on it; real backends see an inert comment.
const FIXTURE_OPEN: &str = "<!-- fixture-key: ";
const FIXTURE_CLOSE: &str = " -->";

/// Appends the fixture-key comment line to a rendered prompt.
pub fn with_fixture_key(text: &str, key: &str) -> String {
    let key = key.replace('\n', " ");
    let mut out = String::with_capacity(text.len() + key.len() + 24);
    out.push_str(text);
    if !text.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(FIXTURE_OPEN);
    out.push_str(&key);
    out.push_str(FIXTURE_CLOSE);
    out
}

/// The key embedded by [`with_fixture_key`], if any (last one wins).
pub fn fixture_key(text: &str) -> Option<&str> {
    text.lines()
        .rev()
        .find_map(|l| l.strip_prefix(FIXTURE_OPEN)?.strip_suffix(FIXTURE_CLOSE))
}

/// The prompt without fixture-key lines, as it reads to a human or a
/// training set.
pub fn strip_fixture_key(text: &str) -> String {
    text.lines()
        .filter(|l| !(l.starts_with(FIXTURE_OPEN) && l.ends_with(FIXTURE_CLOSE)))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub template_id: TemplateId,
    pub rendered_text: String,
    pub greedy: bool,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl PromptRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 2048;
    pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;

    pub fn new(template_id: TemplateId, rendered_text: impl Into<String>) -> Self {
        Self {
            template_id,
            rendered_text: rendered_text.into(),
            greedy: template_id.default_greedy(),
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            timeout_ms: Self::DEFAULT_TIMEOUT_MS,
        }
    }

    pub fn greedy(mut self, greedy: bool) -> Self {
        self.greedy = greedy;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.rendered_text.is_empty() {
            return Err(GatewayError::InvalidRequest("rendered_text is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidRequest("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
}

/// Failure reported by a single backend attempt.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Network failure or 5xx; retried.
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("timed out")]
    Timeout,
    /// Non-retryable rejection, e.g. a 4xx or an undecodable body.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("no scripted response for template {template} key {key:?}")]
    NoScript { template: TemplateId, key: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend} unavailable after {attempts} attempts: {detail}")]
    BackendUnavailable {
        backend: String,
        attempts: u32,
        detail: String,
    },
    #[error("backend {backend} timed out after {attempts} attempts")]
    Timeout { backend: String, attempts: u32 },
    #[error("backend {backend} returned an empty completion")]
    EmptyCompletion { backend: String },
    #[error("backend {backend} rejected the request: {detail}")]
    Rejected { backend: String, detail: String },
    #[error("backend {backend} has no script for template {template} key {key:?}")]
    NoScript {
        backend: String,
        template: TemplateId,
        key: Option<String>,
    },
    #[error("unknown backend {0}")]
    UnknownBackend(String),
    #[error("no backend registered")]
    NoBackend,
    #[error("backend id {0} already registered")]
    DuplicateId(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

/// A text-completion provider.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (0-based): base × 2ⁿ.
    pub fn backoff(&self, n: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1u64 << n.min(20)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub retry: RetryPolicy,
    pub pool_size: usize,
    /// Forces greedy decoding on every request (test profile).
    pub force_greedy: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            pool_size: 8,
            force_greedy: false,
        }
    }
}

struct Registry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    default: Option<String>,
}

/// Counting semaphore bounding in-flight requests.
struct Pool {
    free: Mutex<usize>,
    cond: Condvar,
}

struct PoolPermit<'a>(&'a Pool);

impl Pool {
    fn acquire(&self) -> PoolPermit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cond.wait(&mut free);
        }
        *free -= 1;
        PoolPermit(self)
    }
}

impl Drop for PoolPermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cond.notify_one();
    }
}

pub struct Gateway {
    registry: RwLock<Registry>,
    pool: Pool,
    config: GatewayConfig,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reg = self.registry.read();
        f.debug_struct("Gateway")
            .field("backends", &reg.backends.keys().collect::<Vec<_>>())
            .field("default", &reg.default)
            .field("config", &self.config)
            .finish()
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new(GatewayConfig::default())
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Self {
            registry: RwLock::new(Registry {
                backends: BTreeMap::new(),
                default: None,
            }),
            pool: Pool {
                free: Mutex::new(config.pool_size.max(1)),
                cond: Condvar::new(),
            },
            config,
        }
    }

    /// A gateway with a single scripted mock as default and the test profile
    /// (forced greedy, no backoff delay).
    pub fn with_mock(mock: MockBackend) -> Self {
        let gw = Self::new(GatewayConfig {
            retry: RetryPolicy {
                attempts: 3,
                base_backoff_ms: 0,
            },
            force_greedy: true,
            ..GatewayConfig::default()
        });
        gw.register("mock", Arc::new(mock), false).expect("fresh registry");
        gw
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Registers a backend built from a kind and string config.
    ///
    /// Recognised keys: `default` (`"true"` makes it the default), for http
    /// `endpoint` (required), `model`, `api_key_env`, `response_path`,
    /// `temperature`; for mock `script` (path to a JSON script file).
    pub fn register_backend(
        &self,
        id: &str,
        kind: BackendKind,
        config: &BTreeMap<String, String>,
    ) -> Result<(), GatewayError> {
        let make_default = match config.get("default").map(String::as_str) {
            None | Some("false") => false,
            Some("true") => true,
            Some(other) => {
                return Err(GatewayError::InvalidConfig(format!(
                    "default must be true or false, got {other:?}"
                )))
            }
        };
        let backend: Arc<dyn Backend> = match kind {
            BackendKind::Http => Arc::new(HttpBackend::from_config(config)?),
            BackendKind::Mock => match config.get("script") {
                Some(path) => Arc::new(MockBackend::from_script_file(path.as_ref())?),
                None => Arc::new(MockBackend::default()),
            },
        };
        self.register(id, backend, make_default)
    }

    /// Registers an already constructed backend. The first backend registered
    /// becomes the default unless a later one asks to be.
    pub fn register(&self, id: &str, backend: Arc<dyn Backend>, make_default: bool) -> Result<(), GatewayError> {
        if id.is_empty() {
            return Err(GatewayError::InvalidConfig("backend id is empty".into()));
        }
        let mut reg = self.registry.write();
        if reg.backends.contains_key(id) {
            return Err(GatewayError::DuplicateId(id.to_string()));
        }
        reg.backends.insert(id.to_string(), backend);
        if make_default || reg.default.is_none() {
            reg.default = Some(id.to_string());
        }
        Ok(())
    }

    /// Makes an already registered backend the default.
    pub fn set_default(&self, id: &str) -> Result<(), GatewayError> {
        let mut reg = self.registry.write();
        if !reg.backends.contains_key(id) {
            return Err(GatewayError::UnknownBackend(id.to_string()));
        }
        reg.default = Some(id.to_string());
        Ok(())
    }

    pub fn default_backend(&self) -> Option<String> {
        self.registry.read().default.clone()
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.registry.read().backends.keys().cloned().collect()
    }

    /// Completes through the default backend.
    pub fn complete(&self, req: &PromptRequest) -> Result<CompletionResult, GatewayError> {
        let id = self.default_backend().ok_or(GatewayError::NoBackend)?;
        self.complete_with(&id, req)
    }

    pub fn complete_with(&self, backend_id: &str, req: &PromptRequest) -> Result<CompletionResult, GatewayError> {
        req.validate()?;
        let backend = self
            .registry
            .read()
            .backends
            .get(backend_id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownBackend(backend_id.to_string()))?;

        let forced;
        let req = if self.config.force_greedy && !req.greedy {
            forced = req.clone().greedy(true);
            &forced
        } else {
            req
        };

        let _permit = self.pool.acquire();
        let started = Instant::now();
        let attempts = self.config.retry.attempts.max(1);
        let mut last = BackendError::Unavailable("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            match backend.complete(req) {
                Ok(text) if text.trim().is_empty() => {
                    return Err(GatewayError::EmptyCompletion {
                        backend: backend_id.to_string(),
                    })
                }
                Ok(text) => {
                    return Ok(CompletionResult {
                        text,
                        backend_id: backend_id.to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(e @ (BackendError::Unavailable(_) | BackendError::Timeout)) => {
                    tracing::debug!(backend = backend_id, attempt, error = %e, "transient backend failure");
                    last = e;
                }
                Err(BackendError::Rejected(detail)) => {
                    return Err(GatewayError::Rejected {
                        backend: backend_id.to_string(),
                        detail,
                    })
                }
                Err(BackendError::NoScript { template, key }) => {
                    return Err(GatewayError::NoScript {
                        backend: backend_id.to_string(),
                        template,
                        key,
                    })
                }
            }
        }
        Err(match last {
            BackendError::Timeout => GatewayError::Timeout {
                backend: backend_id.to_string(),
                attempts,
            },
            other => GatewayError::BackendUnavailable {
                backend: backend_id.to_string(),
                attempts,
                detail: other.to_string(),
            },
        })
    }
}

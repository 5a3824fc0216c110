//! Clients for the three external capabilities: image embedding, image
//! captioning, and text completion.
//!
//! Each capability has a wire client speaking one uniform JSON contract and a
//! deterministic mock. The mocks are exact: the caption mock joins a scene's
//! tags, and the completion mock computes the literal token-set difference
//! (or intersection, for consensus prompts) of the captions it finds in the
//! prompt.
//!
//! Wire contract:
//!
//! | capability | request | response |
//! |---|---|---|
//! | `POST /embed` | `{"id", "image_b64"}` | `{"id", "dim", "vec"}` |
//! | `GET /health` | | `{"status": "ok", "dim", "model"}` |
//! | `POST /caption` | `{"id", "image_b64", "prompt"}` | `{"id", "text"}` |
//! | `POST /complete` | `{"prompt", "max_tokens", "temperature"}` | `{"text"}` |

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, SceneRecord};
use crate::prompt::{parse_blocks, BlockRole};

pub const MOCK_CAPTION_PREFIX: &str = "a scene featuring: ";
pub const MOCK_NOTHING_NOTABLE: &str = "nothing notable";
pub const NO_DIFFERENCE: &str = "no distinguishing features found";

const BODY_EXCERPT_CHARS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("HTTP {status}: {body_excerpt}")]
    Status { status: u16, body_excerpt: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("embedding dim {found} does not match expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ProviderError> },
    #[error("invalid client config: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Transport { retryable, .. } => *retryable,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// True for failures of the remote service or the network, as opposed to
    /// bad input or configuration.
    pub fn is_transport(&self) -> bool {
        match self {
            ProviderError::Transport { .. } | ProviderError::Status { .. } | ProviderError::Protocol(_) | ProviderError::EmptyResponse => true,
            ProviderError::Exhausted { last, .. } => last.is_transport(),
            _ => false,
        }
    }
}

/// A string that never shows up in `Debug`, `Display` or serialized output.
#[derive(Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct SecretString(String);

impl SecretString {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for SecretString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretString(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    pub initial_ms: u64,
    pub multiplier: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { initial_ms: 250, multiplier: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub backoff: Backoff,
    /// Bearer token. Prefer `auth_token_env` so the secret stays out of
    /// config files.
    #[serde(default, skip_serializing)]
    pub auth_token: Option<SecretString>,
    /// Name of an environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default)]
    pub model_name: String,
    /// Minimum spacing between requests issued by one client.
    #[serde(default)]
    pub min_interval_ms: Option<u64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_max_retries() -> u32 {
    3
}

fn default_max_tokens() -> u32 {
    256
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff: Backoff::default(),
            auth_token: None,
            auth_token_env: None,
            model_name: String::new(),
            min_interval_ms: None,
            max_tokens: default_max_tokens(),
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: String| Err(ProviderError::Config(m));
        if reqwest::Url::parse(&self.endpoint).is_err() {
            return bad(format!("endpoint {:?} is not a URL", self.endpoint));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad(format!("timeout must be positive, got {}", self.timeout_secs));
        }
        if !(self.backoff.multiplier >= 1.0 && self.backoff.multiplier.is_finite()) {
            return bad(format!("backoff multiplier must be >= 1, got {}", self.backoff.multiplier));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff: Duration::from_millis(self.backoff.initial_ms),
            multiplier: self.backoff.multiplier,
        }
    }

    fn token(&self) -> Option<SecretString> {
        self.auth_token.clone().or_else(|| {
            let var = self.auth_token_env.as_ref()?;
            std::env::var(var).ok().map(SecretString)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl RetryPolicy {
    pub fn backoff_for(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(retry as i32))
    }

    /// Runs `op` until it succeeds, fails permanently, or retries run out.
    /// `op` receives the 1-based attempt number.
    pub fn run<T>(&self, label: &str, mut op: impl FnMut(u32) -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 1;
        loop {
            log::debug!("{label}: attempt {attempt}");
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt <= self.max_retries => {
                    let wait = self.backoff_for(attempt - 1);
                    log::warn!("{label}: attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) if attempt > 1 => {
                    log::warn!("{label}: attempt {attempt} failed ({e}); giving up");
                    return Err(ProviderError::Exhausted { attempts: attempt, last: Box::new(e) });
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub trait ImageEmbedder: Send + Sync {
    fn provider_id(&self) -> String;
    fn embed(&self, scene_id: &str, image: &[u8]) -> Result<EmbeddingVector, ProviderError>;
}

pub trait Captioner: Send + Sync {
    fn provider_id(&self) -> String;
    /// Caption for `scene`. Wire clients read the image from
    /// `scene.source_uri`; the mock reads `scene.tags`.
    fn caption(&self, scene: &SceneRecord, prompt: &str) -> Result<String, ProviderError>;
}

pub trait TextCompleter: Send + Sync {
    fn provider_id(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String, ProviderError>;
}

/// Embeds `image`, checking the result against the pool's declared width.
pub fn embed_image(
    client: &dyn ImageEmbedder,
    scene_id: &str,
    image: &[u8],
    expected_dim: Option<usize>,
) -> Result<EmbeddingVector, ProviderError> {
    if image.is_empty() {
        return Err(ProviderError::InvalidInput(format!("scene {scene_id:?}: empty image")));
    }
    let v = client.embed(scene_id, image)?;
    match expected_dim {
        Some(expected) if expected != v.dim() => Err(ProviderError::DimMismatch { expected, found: v.dim() }),
        _ => Ok(v),
    }
}

pub fn caption_image(client: &dyn Captioner, scene: &SceneRecord, prompt: &str) -> Result<String, ProviderError> {
    let text = client.caption(scene, prompt)?;
    if text.trim().is_empty() {
        return Err(ProviderError::EmptyResponse);
    }
    Ok(text)
}

pub fn complete_text(client: &dyn TextCompleter, prompt: &str) -> Result<String, ProviderError> {
    if prompt.trim().is_empty() {
        return Err(ProviderError::InvalidInput("empty prompt".into()));
    }
    let text = client.complete(prompt)?;
    if text.trim().is_empty() {
        return Err(ProviderError::EmptyResponse);
    }
    Ok(text)
}

/// Maps image bytes to a pseudo-random unit vector seeded by their hash.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl ImageEmbedder for MockEmbedder {
    fn provider_id(&self) -> String {
        format!("mock-embed/d{}/s{}", self.dim, self.seed)
    }

    fn embed(&self, _scene_id: &str, image: &[u8]) -> Result<EmbeddingVector, ProviderError> {
        if self.dim == 0 {
            return Err(ProviderError::Config("mock embedder dim must be positive".into()));
        }
        let digest = Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update(image).finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                let unit = v.into_iter().map(|x| f64::from((x / norm) as f32)).collect();
                if let Ok(e) = EmbeddingVector::new(unit) {
                    return Ok(e);
                }
            }
        }
    }
}

/// `"a scene featuring: " + sorted tags joined by ", "`.
#[derive(Debug, Clone, Default)]
pub struct MockCaptioner;

pub fn mock_caption_for_tags<'a>(tags: impl IntoIterator<Item = &'a String>) -> String {
    let tags: BTreeSet<&str> = tags.into_iter().map(String::as_str).collect();
    if tags.is_empty() {
        format!("{MOCK_CAPTION_PREFIX}{MOCK_NOTHING_NOTABLE}")
    } else {
        format!("{MOCK_CAPTION_PREFIX}{}", tags.into_iter().collect::<Vec<_>>().join(", "))
    }
}

impl Captioner for MockCaptioner {
    fn provider_id(&self) -> String {
        "mock-caption".into()
    }

    fn caption(&self, scene: &SceneRecord, _prompt: &str) -> Result<String, ProviderError> {
        Ok(mock_caption_for_tags(&scene.tags))
    }
}

/// Parses role-tagged blocks out of the prompt and answers with exact set
/// arithmetic over their comma-separated tokens.
#[derive(Debug, Clone, Default)]
pub struct MockCompleter;

/// Tokens of a caption or candidate explanation.
pub fn mock_tokens(text: &str) -> BTreeSet<String> {
    let body = text.strip_prefix(MOCK_CAPTION_PREFIX).unwrap_or(text);
    body.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty() && *t != MOCK_NOTHING_NOTABLE && *t != NO_DIFFERENCE)
        .map(str::to_string)
        .collect()
}

fn join_tokens(tokens: BTreeSet<String>) -> String {
    if tokens.is_empty() {
        NO_DIFFERENCE.to_string()
    } else {
        tokens.into_iter().collect::<Vec<_>>().join(", ")
    }
}

impl TextCompleter for MockCompleter {
    fn provider_id(&self) -> String {
        "mock-complete".into()
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let blocks = parse_blocks(prompt);
        let candidates: Vec<BTreeSet<String>> = blocks
            .iter()
            .filter(|(r, _)| matches!(r, BlockRole::Candidate(_)))
            .map(|(_, t)| mock_tokens(t))
            .collect();
        if !candidates.is_empty() {
            let mut iter = candidates.into_iter();
            let first = iter.next().unwrap_or_default();
            let common = iter.fold(first, |acc, c| acc.intersection(&c).cloned().collect());
            return Ok(join_tokens(common));
        }
        let novel = blocks
            .iter()
            .find(|(r, _)| *r == BlockRole::Novel)
            .map(|(_, t)| mock_tokens(t))
            .ok_or_else(|| ProviderError::InvalidInput("prompt has no novel or candidate block".into()))?;
        let seen: BTreeSet<String> = blocks
            .iter()
            .filter(|(r, _)| matches!(r, BlockRole::Reference(_)))
            .flat_map(|(_, t)| mock_tokens(t))
            .collect();
        Ok(join_tokens(novel.difference(&seen).cloned().collect()))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    id: &'a str,
    image_b64: String,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    id: String,
    dim: usize,
    vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub dim: usize,
    pub model: String,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    id: &'a str,
    image_b64: String,
    prompt: &'a str,
}

#[derive(Debug, Deserialize)]
struct CaptionResponse {
    id: String,
    text: String,
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct CompleteResponse {
    text: String,
}

/// Shared HTTP plumbing: timeouts, retries, auth, request spacing.
pub struct WireClient {
    config: ClientConfig,
    http: reqwest::blocking::Client,
    base: reqwest::Url,
    last_request: Mutex<Option<Instant>>,
}

impl fmt::Debug for WireClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WireClient").field("endpoint", &self.config.endpoint).finish_non_exhaustive()
    }
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(BODY_EXCERPT_CHARS).collect();
    if body.chars().count() > BODY_EXCERPT_CHARS {
        s.push('…');
    }
    s
}

fn transport_error(e: reqwest::Error) -> ProviderError {
    // connection failures and timeouts are worth another try
    let retryable = e.is_timeout() || e.is_connect() || e.is_request();
    ProviderError::Transport { message: e.to_string(), retryable }
}

impl WireClient {
    pub fn new(config: ClientConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let mut base = reqwest::Url::parse(&config.endpoint).map_err(|e| ProviderError::Config(e.to_string()))?;
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self { config, http, base, last_request: Mutex::new(None) })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn pace(&self) {
        let Some(ms) = self.config.min_interval_ms else { return };
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let gap = Duration::from_millis(ms);
            let elapsed = prev.elapsed();
            if elapsed < gap {
                std::thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn url(&self, path: &str) -> Result<reqwest::Url, ProviderError> {
        self.base.join(path).map_err(|e| ProviderError::Config(e.to_string()))
    }

    fn send<T: DeserializeOwned>(&self, label: &str, build: impl Fn() -> reqwest::blocking::RequestBuilder) -> Result<T, ProviderError> {
        let token = self.config.token();
        self.config.retry_policy().run(label, |attempt| {
            self.pace();
            let mut req = build();
            if let Some(t) = &token {
                req = req.bearer_auth(t.expose());
            }
            let started = Instant::now();
            let resp = req.send().map_err(transport_error)?;
            let status = resp.status();
            let body = resp.text().map_err(transport_error)?;
            log::debug!("{label}: attempt {attempt} -> HTTP {} in {:?} ({} bytes)", status.as_u16(), started.elapsed(), body.len());
            if !status.is_success() {
                return Err(ProviderError::Status { status: status.as_u16(), body_excerpt: excerpt(&body) });
            }
            serde_json::from_str(&body).map_err(|e| ProviderError::Protocol(format!("{e}; body: {}", excerpt(&body))))
        })
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, label: &str, path: &str, body: &B) -> Result<T, ProviderError> {
        let url = self.url(path)?;
        self.send(label, || self.http.post(url.clone()).json(body))
    }

    fn get<T: DeserializeOwned>(&self, label: &str, path: &str) -> Result<T, ProviderError> {
        let url = self.url(path)?;
        self.send(label, || self.http.get(url.clone()))
    }
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[derive(Debug)]
pub struct WireEmbedder {
    client: WireClient,
}

impl WireEmbedder {
    pub fn new(config: ClientConfig) -> Result<Self, ProviderError> {
        Ok(Self { client: WireClient::new(config)? })
    }

    pub fn health(&self) -> Result<HealthResponse, ProviderError> {
        self.client.get("embed health", "health")
    }
}

impl ImageEmbedder for WireEmbedder {
    fn provider_id(&self) -> String {
        format!("wire-embed/{}", self.client.config.model_name)
    }

    fn embed(&self, scene_id: &str, image: &[u8]) -> Result<EmbeddingVector, ProviderError> {
        let req = EmbedRequest { id: scene_id, image_b64: b64(image) };
        let resp: EmbedResponse = self.client.post(&format!("embed {scene_id}"), "embed", &req)?;
        if resp.id != scene_id {
            return Err(ProviderError::Protocol(format!("response id {:?} for request {scene_id:?}", resp.id)));
        }
        if resp.dim != resp.vec.len() {
            return Err(ProviderError::Protocol(format!("declared dim {} but {} components", resp.dim, resp.vec.len())));
        }
        EmbeddingVector::new(resp.vec).map_err(|e| ProviderError::Protocol(e.to_string()))
    }
}

/// Resolves a record's `source_uri` to a local file: `file://` URIs and
/// plain paths, relative paths against `base_dir`.
pub fn resolve_source(uri: &str, base_dir: Option<&Path>) -> Result<PathBuf, ProviderError> {
    if uri.is_empty() {
        return Err(ProviderError::InvalidInput("scene has no source_uri".into()));
    }
    let path = if let Some(rest) = uri.strip_prefix("file://") {
        PathBuf::from(rest)
    } else if uri.contains("://") {
        return Err(ProviderError::InvalidInput(format!("unsupported source_uri scheme in {uri:?}")));
    } else {
        PathBuf::from(uri)
    };
    Ok(match base_dir {
        Some(base) if path.is_relative() => base.join(path),
        _ => path,
    })
}

pub fn read_source(scene: &SceneRecord, base_dir: Option<&Path>) -> Result<Vec<u8>, ProviderError> {
    let path = resolve_source(&scene.source_uri, base_dir)?;
    let bytes = std::fs::read(&path)
        .map_err(|e| ProviderError::InvalidInput(format!("scene {:?}: reading {}: {e}", scene.id, path.display())))?;
    if bytes.is_empty() {
        return Err(ProviderError::InvalidInput(format!("scene {:?}: {} is empty", scene.id, path.display())));
    }
    Ok(bytes)
}

#[derive(Debug)]
pub struct WireCaptioner {
    client: WireClient,
    base_dir: Option<PathBuf>,
}

impl WireCaptioner {
    pub fn new(config: ClientConfig, base_dir: Option<PathBuf>) -> Result<Self, ProviderError> {
        Ok(Self { client: WireClient::new(config)?, base_dir })
    }
}

impl Captioner for WireCaptioner {
    fn provider_id(&self) -> String {
        format!("wire-caption/{}", self.client.config.model_name)
    }

    fn caption(&self, scene: &SceneRecord, prompt: &str) -> Result<String, ProviderError> {
        let image = read_source(scene, self.base_dir.as_deref())?;
        let req = CaptionRequest { id: &scene.id, image_b64: b64(&image), prompt };
        let resp: CaptionResponse = self.client.post(&format!("caption {}", scene.id), "caption", &req)?;
        if resp.id != scene.id {
            return Err(ProviderError::Protocol(format!("response id {:?} for request {:?}", resp.id, scene.id)));
        }
        Ok(resp.text)
    }
}

#[derive(Debug)]
pub struct WireCompleter {
    client: WireClient,
}

impl WireCompleter {
    pub fn new(config: ClientConfig) -> Result<Self, ProviderError> {
        Ok(Self { client: WireClient::new(config)? })
    }
}

impl TextCompleter for WireCompleter {
    fn provider_id(&self) -> String {
        format!("wire-complete/{}", self.client.config.model_name)
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let req = CompleteRequest { prompt, max_tokens: self.client.config.max_tokens, temperature: self.client.config.temperature };
        let resp: CompleteResponse = self.client.post("complete", "complete", &req)?;
        Ok(resp.text)
    }
}

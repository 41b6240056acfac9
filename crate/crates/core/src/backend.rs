//! Completion backends.
//!
//! All backends take a prompt and return only the continuation text. The HTTP
//! backend talks to any server exposing the usual text-completion endpoint:
//!
//! ```text
//! POST {endpoint_url}
//! Authorization: Bearer $API_KEY          (only when api_key_env is set)
//! {"model": "...", "prompt": "...", "max_tokens": 16, "temperature": 0.0, "stop": ["."]}
//!
//! 200 OK
//! {"choices": [{"text": " 0, 100"}]}
//! ```
//!
//! The offline backends are a nearest-neighbour mock that answers from the
//! prompt's own examples, a mock that always answers with prose, and a replay
//! backend that serves a recorded transcript after checking prompt hashes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{format_label, parse_prompt, EncodedEpisode};

/// Text returned by the malformed mock.
pub const MALFORMED_COMPLETION: &str = "I cannot determine the power.";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("replay file {path}, line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("replay entry {index}: prompt hash {actual} does not match recorded {expected}")]
    HashMismatch { index: usize, expected: String, actual: String },
    #[error("replay transcript exhausted after {index} completions")]
    Exhausted { index: usize },
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response: {0}")]
    InvalidResponse(String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

impl BackendError {
    /// Configuration and replay errors stop an experiment; everything else
    /// only fails the trial that hit it.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Config(_) | BackendError::Replay(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), max_tokens: 16, temperature: 0.0, stop: vec![".".into()] }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::Config("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Config("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Config(format!("invalid temperature {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpCompletion,
    NnMock,
    MalformedMock,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "http" | "http_completion" => Ok(BackendKind::HttpCompletion),
            "nn_mock" => Ok(BackendKind::NnMock),
            "malformed_mock" => Ok(BackendKind::MalformedMock),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!(
                "unknown backend `{other}` (expected http, nn_mock, malformed_mock or replay)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token. No header is sent
    /// when unset.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_inflight: usize,
    pub retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_base_ms: u64,
    pub replay_path: Option<PathBuf>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::NnMock,
            endpoint_url: None,
            model: String::new(),
            api_key_env: None,
            timeout_secs: 30.0,
            max_inflight: 4,
            retries: 2,
            backoff_base_ms: 1000,
            replay_path: None,
            max_tokens: 16,
            temperature: 0.0,
            stop: vec![".".into()],
        }
    }
}

impl BackendConfig {
    pub fn with_kind(kind: BackendKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn request(&self, prompt: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            stop: self.stop.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::HttpCompletion => {
                if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config("http backend needs endpoint_url".into()));
                }
                if self.max_inflight == 0 {
                    return Err(BackendError::Config("max_inflight must be at least 1".into()));
                }
                if !(self.timeout_secs > 0.0) {
                    return Err(BackendError::Config("timeout_secs must be positive".into()));
                }
            }
            BackendKind::Replay => {
                if self.replay_path.is_none() {
                    return Err(BackendError::Config("replay backend needs replay_path".into()));
                }
            }
            BackendKind::NnMock | BackendKind::MalformedMock => {}
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;

    /// Completes several requests, returning results in request order.
    fn complete_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        reqs.iter().map(|r| self.complete(r)).collect()
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }

    fn complete_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        (**self).complete_batch(reqs)
    }
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn CompletionBackend>, BackendError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::HttpCompletion => Box::new(HttpBackend::new(cfg)?),
        BackendKind::NnMock => Box::new(NnMock),
        BackendKind::MalformedMock => Box::new(MalformedMock),
        BackendKind::Replay => {
            let path = cfg.replay_path.as_ref().expect("validated");
            Box::new(ReplayBackend::new(load_replay(path)?))
        }
    })
}

/// Always answers with prose that does not parse.
#[derive(Debug, Clone, Copy, Default)]
pub struct MalformedMock;

impl CompletionBackend for MalformedMock {
    fn complete(&self, _req: &CompletionRequest) -> Result<String, BackendError> {
        Ok(MALFORMED_COMPLETION.to_string())
    }
}

/// Answers with the label of the in-context example whose encoded gains are
/// closest to the query.
#[derive(Debug, Clone, Copy, Default)]
pub struct NnMock;

impl CompletionBackend for NnMock {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let parsed = parse_prompt(&req.prompt)
            .map_err(|e| BackendError::InvalidResponse(format!("nn_mock cannot read prompt: {e}")))?;
        nearest_label(&parsed.shot_gains, &parsed.shot_powers, &parsed.query_gains)
            .map(|label| format_label(&label))
            .ok_or_else(|| BackendError::InvalidResponse("nn_mock prompt has no examples".into()))
    }
}

/// Nearest-neighbour completion for an encoded episode.
pub fn nn_mock_complete(encoded: &EncodedEpisode) -> Option<String> {
    nearest_label(&encoded.shot_gains, &encoded.shot_powers, &encoded.query_gains).map(|l| format_label(&l))
}

/// Label of the shot with the smallest squared distance to `query`; the
/// earliest shot wins ties.
pub fn nearest_label(shot_gains: &[[i64; 4]], shot_powers: &[[i64; 2]], query: &[i64; 4]) -> Option<[i64; 2]> {
    let dist = |g: &[i64; 4]| -> i128 {
        g.iter().zip(query).map(|(a, b)| (i128::from(*a) - i128::from(*b)).pow(2)).sum()
    };
    shot_gains
        .iter()
        .zip(shot_powers)
        .enumerate()
        .min_by_key(|(i, (g, _))| (dist(g), *i))
        .map(|(_, (_, p))| *p)
}

/// Counting semaphore bounding outstanding HTTP requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct HttpCompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct HttpCompletionResponse {
    choices: Vec<HttpChoice>,
}

#[derive(Deserialize)]
struct HttpChoice {
    text: String,
}

/// Blocking client for a text-completion endpoint.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    backoff_base: Duration,
    max_inflight: usize,
    inflight: Semaphore,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = cfg
            .endpoint_url
            .clone()
            .filter(|u| !u.is_empty())
            .ok_or_else(|| BackendError::Config("http backend needs endpoint_url".into()))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("credential environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        let max_inflight = cfg.max_inflight.max(1);
        Ok(Self {
            client,
            endpoint,
            model: cfg.model.clone(),
            api_key,
            retries: cfg.retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
            max_inflight,
            inflight: Semaphore::new(max_inflight),
        })
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let body = HttpCompletionBody {
            model: &self.model,
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            stop: &req.stop,
        };
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: text });
        }
        let parsed: HttpCompletionResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| BackendError::InvalidResponse("response has no choices".into()))
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.validate()?;
        let _permit = self.inflight.acquire();
        let mut attempt = 0;
        loop {
            match self.attempt(req) {
                Ok(text) => return Ok(text),
                Err(e) if attempt >= self.retries => return Err(e),
                Err(e) => {
                    log_retry(attempt, &e);
                    thread::sleep(self.backoff_base * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn complete_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<String, BackendError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|scope| {
            for _ in 0..self.max_inflight.min(reqs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = reqs.get(i) else { break };
                    *results[i].lock().unwrap() = Some(self.complete(req));
                });
            }
        });
        results.into_iter().map(|m| m.into_inner().unwrap().expect("every request issued")).collect()
    }
}

fn log_retry(attempt: u32, err: &BackendError) {
    eprintln!("completion attempt {} failed, retrying: {err}", attempt + 1);
}

/// One recorded completion. `completion` is `None` when the live call failed,
/// in which case `error` carries the message and replay reproduces the
/// failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_sha256: String,
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Reads a line-delimited JSON transcript. Blank lines are skipped.
pub fn load_replay(path: &Path) -> Result<Vec<ReplayEntry>, ReplayError> {
    let io = |source| ReplayError::Io { path: path.to_path_buf(), source };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| ReplayError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn record_replay(path: &Path, transcript: &[ReplayEntry]) -> Result<(), ReplayError> {
    let io = |source| ReplayError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::new();
    for entry in transcript {
        serde_json::to_writer(&mut buf, entry).expect("serializable entry");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&buf).map_err(io)?;
    Ok(())
}

/// Serves recorded completions in order, checking each prompt's hash.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: Vec<ReplayEntry>,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        Self { entries, cursor: Mutex::new(0) }
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut cursor = self.cursor.lock().unwrap();
        let index = *cursor;
        let entry = self.entries.get(index).ok_or(ReplayError::Exhausted { index })?;
        let actual = prompt_hash(&req.prompt);
        if actual != entry.prompt_sha256 {
            return Err(ReplayError::HashMismatch { index, expected: entry.prompt_sha256.clone(), actual }.into());
        }
        *cursor += 1;
        match &entry.completion {
            Some(text) => Ok(text.clone()),
            None => Err(BackendError::Transport(
                entry.error.clone().unwrap_or_else(|| "recorded failure".into()),
            )),
        }
    }
}

/// Wraps a backend and keeps a transcript of every completion it serves.
pub struct RecordingBackend<B> {
    inner: B,
    transcript: Mutex<Vec<ReplayEntry>>,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, transcript: Mutex::new(Vec::new()) }
    }

    pub fn transcript(&self) -> Vec<ReplayEntry> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn write(&self, path: &Path) -> Result<(), ReplayError> {
        record_replay(path, &self.transcript.lock().unwrap())
    }

    fn entry(req: &CompletionRequest, result: &Result<String, BackendError>) -> ReplayEntry {
        let (completion, error) = match result {
            Ok(text) => (Some(text.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        ReplayEntry { prompt_sha256: prompt_hash(&req.prompt), completion, error }
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let result = self.inner.complete(req);
        self.transcript.lock().unwrap().push(Self::entry(req, &result));
        result
    }

    fn complete_batch(&self, reqs: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        let results = self.inner.complete_batch(reqs);
        let mut transcript = self.transcript.lock().unwrap();
        transcript.extend(reqs.iter().zip(&results).map(|(r, res)| Self::entry(r, res)));
        results
    }
}

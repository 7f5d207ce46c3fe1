//! Similarity providers: anything that can score batches of same-window
//! (transcript chunk, report chunk) pairs.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::Chunk;
use crate::table::{self, TableError};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("pair {left} / {right}: windows {left_window} and {right_window} differ")]
    WindowMismatch {
        left: String,
        right: String,
        left_window: usize,
        right_window: usize,
    },
    #[error("no score for pair {0} / {1}")]
    MissingPair(String, String),
    #[error("provider returned a non-finite score for {0} / {1}")]
    NonFinite(String, String),
    #[error("provider returned {got} scores for {expected} pairs")]
    LengthMismatch { expected: usize, got: usize },
    #[error("scorer unavailable at {endpoint}: {message}")]
    Unavailable { endpoint: String, message: String },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("score table row {row}: {message}")]
    Parse { row: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub left: String,
    pub right: String,
    pub score: f64,
}

pub trait SimilarityProvider: Send + Sync {
    /// Short description recorded in manifests and logs.
    fn describe(&self) -> String;

    /// Raw scores, one per pair, in order. Callers go through [`score_pairs`],
    /// which checks windows and clamps.
    fn score_raw(&self, pairs: &[(&Chunk, &Chunk)]) -> Result<Vec<f64>, ProviderError>;
}

/// Scores a batch of (transcript, report) pairs, enforcing equal windows and
/// clamping to [0, 1]. Out-of-range raw values are logged.
pub fn score_pairs(
    provider: &dyn SimilarityProvider,
    pairs: &[(&Chunk, &Chunk)],
) -> Result<Vec<PairScore>, ProviderError> {
    for (l, r) in pairs {
        if l.window != r.window {
            return Err(ProviderError::WindowMismatch {
                left: l.chunk_id.clone(),
                right: r.chunk_id.clone(),
                left_window: l.window,
                right_window: r.window,
            });
        }
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let raw = provider.score_raw(pairs)?;
    if raw.len() != pairs.len() {
        return Err(ProviderError::LengthMismatch {
            expected: pairs.len(),
            got: raw.len(),
        });
    }
    pairs
        .iter()
        .zip(raw)
        .map(|((l, r), s)| {
            if !s.is_finite() {
                return Err(ProviderError::NonFinite(l.chunk_id.clone(), r.chunk_id.clone()));
            }
            let clamped = s.clamp(0.0, 1.0);
            if clamped != s {
                log::warn!("clamped score {s} for {} / {} to {clamped}", l.chunk_id, r.chunk_id);
            }
            Ok(PairScore {
                left: l.chunk_id.clone(),
                right: r.chunk_id.clone(),
                score: clamped,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConstantProvider(pub f64);

impl SimilarityProvider for ConstantProvider {
    fn describe(&self) -> String {
        format!("constant({})", self.0)
    }

    fn score_raw(&self, pairs: &[(&Chunk, &Chunk)]) -> Result<Vec<f64>, ProviderError> {
        Ok(vec![self.0; pairs.len()])
    }
}

/// Jaccard index of the two chunks' word sets. A deterministic stand-in for a
/// model when testing.
#[derive(Debug, Clone, Default)]
pub struct LexicalProvider;

pub fn jaccard(a: &std::collections::BTreeSet<String>, b: &std::collections::BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

impl SimilarityProvider for LexicalProvider {
    fn describe(&self) -> String {
        "lexical-jaccard".into()
    }

    fn score_raw(&self, pairs: &[(&Chunk, &Chunk)]) -> Result<Vec<f64>, ProviderError> {
        Ok(pairs.iter().map(|(l, r)| jaccard(&l.word_set, &r.word_set)).collect())
    }
}

/// Looks scores up in a precomputed table.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    scores: HashMap<(String, String), f64>,
    label: String,
}

impl FileProvider {
    pub fn new<I: IntoIterator<Item = PairScore>>(scores: I, label: impl Into<String>) -> Self {
        Self {
            scores: scores.into_iter().map(|p| ((p.left, p.right), p.score)).collect(),
            label: label.into(),
        }
    }

    pub fn from_reader<R: Read>(source: R, label: impl Into<String>) -> Result<Self, ProviderError> {
        Ok(Self::new(read_score_table(source)?, label))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, left: &str, right: &str) -> Option<f64> {
        self.scores.get(&(left.to_string(), right.to_string())).copied()
    }
}

impl SimilarityProvider for FileProvider {
    fn describe(&self) -> String {
        format!("file({})", self.label)
    }

    fn score_raw(&self, pairs: &[(&Chunk, &Chunk)]) -> Result<Vec<f64>, ProviderError> {
        pairs
            .iter()
            .map(|(l, r)| {
                self.get(&l.chunk_id, &r.chunk_id)
                    .ok_or_else(|| ProviderError::MissingPair(l.chunk_id.clone(), r.chunk_id.clone()))
            })
            .collect()
    }
}

pub const SCORE_HEADER: [&str; 3] = ["left_chunk_id", "right_chunk_id", "score"];

pub fn write_score_table<'a, W, I>(scores: I, sink: W) -> Result<(), ProviderError>
where
    W: Write,
    I: IntoIterator<Item = &'a PairScore>,
{
    let mut w = table::versioned_writer(sink, &SCORE_HEADER)?;
    for s in scores {
        w.write_record([s.left.as_str(), s.right.as_str(), &s.score.to_string()])
            .map_err(TableError::from)?;
    }
    w.flush().map_err(TableError::from)?;
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    left_chunk_id: String,
    right_chunk_id: String,
    score: f64,
}

pub fn read_score_table<R: Read>(source: R) -> Result<Vec<PairScore>, ProviderError> {
    let mut reader = table::versioned_reader(source)?;
    reader
        .deserialize::<ScoreRow>()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| ProviderError::Parse {
                row: i + 1,
                message: e.to_string(),
            })?;
            if !rec.score.is_finite() {
                return Err(ProviderError::Parse {
                    row: i + 1,
                    message: "score is not finite".into(),
                });
            }
            Ok(PairScore {
                left: rec.left_chunk_id,
                right: rec.right_chunk_id,
                score: rec.score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WirePair {
    pub left_text: String,
    pub right_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub pairs: Vec<WirePair>,
    /// Echoed in service logs; the client uses the first pair's chunk ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default)]
    pub model: String,
}

#[derive(Debug, Clone)]
pub struct RemoteSettings {
    /// Base URL, e.g. `http://127.0.0.1:8077`.
    pub endpoint: String,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout: Duration,
    /// How long to keep polling the health route before giving up.
    pub ready_timeout: Duration,
    pub poll_interval: Duration,
}

impl RemoteSettings {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            batch_size: 64,
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
            ready_timeout: Duration::from_secs(120),
            poll_interval: Duration::from_millis(250),
        }
    }
}

/// Client for the scoring service's JSON protocol.
pub struct RemoteProvider {
    settings: RemoteSettings,
    agent: ureq::Agent,
    slots: Mutex<usize>,
    freed: Condvar,
    /// Model id reported by the last successful health check; `None`
    /// until the service has been seen ready.
    model: Mutex<Option<String>>,
}

impl RemoteProvider {
    pub fn new(settings: RemoteSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            slots: Mutex::new(settings.max_in_flight.max(1)),
            settings,
            agent,
            freed: Condvar::new(),
            model: Mutex::new(None),
        }
    }

    fn url(&self, route: &str) -> String {
        format!("{}{route}", self.settings.endpoint.trim_end_matches('/'))
    }

    fn unavailable(&self, message: impl Into<String>) -> ProviderError {
        ProviderError::Unavailable {
            endpoint: self.settings.endpoint.clone(),
            message: message.into(),
        }
    }

    pub fn health(&self) -> Result<HealthResponse, ProviderError> {
        let mut resp = self
            .agent
            .get(&self.url("/v1/health"))
            .call()
            .map_err(|e| self.unavailable(e.to_string()))?;
        resp.body_mut()
            .read_json::<HealthResponse>()
            .map_err(|e| self.unavailable(format!("bad health body: {e}")))
    }

    /// Polls the health route until the service reports `ready`.
    pub fn wait_until_ready(&self) -> Result<String, ProviderError> {
        if let Some(m) = self.model() {
            return Ok(m);
        }
        let deadline = Instant::now() + self.settings.ready_timeout;
        loop {
            let last = match self.health() {
                Ok(h) if h.status == "ready" => {
                    *self.model.lock().unwrap_or_else(|e| e.into_inner()) = Some(h.model.clone());
                    return Ok(h.model);
                }
                Ok(h) => format!("status {}", h.status),
                Err(e) => e.to_string(),
            };
            if Instant::now() >= deadline {
                return Err(self.unavailable(format!("not ready before timeout ({last})")));
            }
            log::debug!("scorer not ready: {last}");
            std::thread::sleep(self.settings.poll_interval);
        }
    }

    pub fn model(&self) -> Option<String> {
        self.model.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn acquire(&self) {
        let mut free = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.freed.notify_one();
    }

    fn post_batch(&self, batch: &[(&Chunk, &Chunk)]) -> Result<Vec<f64>, ProviderError> {
        let body = ScoreRequest {
            pairs: batch
                .iter()
                .map(|(l, r)| WirePair {
                    left_text: l.text.clone(),
                    right_text: r.text.clone(),
                })
                .collect(),
            batch_id: batch
                .first()
                .map(|(l, r)| format!("{}|{}+{}", l.chunk_id, r.chunk_id, batch.len())),
        };
        let mut attempts = 0;
        loop {
            self.acquire();
            let result = self.agent.post(&self.url("/v1/score")).send_json(&body);
            self.release();
            let mut resp = result.map_err(|e| self.unavailable(e.to_string()))?;
            let status = resp.status().as_u16();
            if status == 503 && attempts < 3 {
                attempts += 1;
                *self.model.lock().unwrap_or_else(|e| e.into_inner()) = None;
                self.wait_until_ready()?;
                continue;
            }
            if status != 200 {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(self.unavailable(format!("HTTP {status}: {text}")));
            }
            let parsed: ScoreResponse = resp
                .body_mut()
                .read_json()
                .map_err(|e| self.unavailable(format!("bad score body: {e}")))?;
            if parsed.scores.len() != batch.len() {
                return Err(ProviderError::LengthMismatch {
                    expected: batch.len(),
                    got: parsed.scores.len(),
                });
            }
            return Ok(parsed.scores);
        }
    }
}

impl SimilarityProvider for RemoteProvider {
    fn describe(&self) -> String {
        // endpoint left out: it may come from the environment
        match self.model() {
            Some(m) => format!("remote({m})"),
            None => "remote".into(),
        }
    }

    fn score_raw(&self, pairs: &[(&Chunk, &Chunk)]) -> Result<Vec<f64>, ProviderError> {
        self.wait_until_ready()?;
        let mut out = Vec::with_capacity(pairs.len());
        for batch in pairs.chunks(self.settings.batch_size.max(1)) {
            out.extend(self.post_batch(batch)?);
        }
        Ok(out)
    }
}

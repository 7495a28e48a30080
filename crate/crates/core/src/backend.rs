//! Sources of masked-token probabilities.
//!
//! The language model is treated as an opaque oracle answering "how likely is
//! token `w` in mask slot `i` of this prompt". Three sources are provided:
//!
//! * [`MockVocabModel`], a deterministic count-based stand-in used by tests
//!   and synthetic experiments;
//! * [`PriorScoreFile`], a precomputed raw score matrix that bypasses the
//!   token level entirely;
//! * [`HttpScorer`], a client for a remote scoring service.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::ScoreMatrix;

/// One masked-LM lookup: probabilities of `tokens` at mask slot `position`
/// (1-based) of `prompt`.
#[derive(Debug, Clone)]
pub struct TokenProbQuery<'a> {
    pub prompt: &'a str,
    pub position: usize,
    pub tokens: &'a [String],
}

/// Per-node scoring request: one token sequence per label.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    pub node: usize,
    pub prompt: &'a str,
    pub num_masks: usize,
    pub labels: &'a [Vec<String>],
}

/// Anything that can return `ln M(i; token_i | prompt)` for every token of
/// every label in a request.
pub trait TokenScorer: Sync {
    fn token_log_probs(&self, request: &ScoreRequest<'_>) -> Result<Vec<Vec<f64>>>;
}

/// Count-based mock of a masked LM:
/// `p(w) = (1 + count(w in prompt)) / (smoothing + |prompt tokens|)`,
/// independent of the mask position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockVocabModel {
    pub vocab_size_smoothing: usize,
    pub case_fold: bool,
}

impl Default for MockVocabModel {
    fn default() -> Self {
        Self {
            vocab_size_smoothing: 1000,
            case_fold: true,
        }
    }
}

impl MockVocabModel {
    pub fn new(vocab_size_smoothing: usize, case_fold: bool) -> Result<Self> {
        if vocab_size_smoothing == 0 {
            return Err(Error::Invalid(
                "vocab_size_smoothing must be at least 1".into(),
            ));
        }
        Ok(Self {
            vocab_size_smoothing,
            case_fold,
        })
    }

    fn fold(&self, token: &str) -> String {
        if self.case_fold {
            token.to_lowercase()
        } else {
            token.to_owned()
        }
    }

    /// Whitespace tokenization, case folded when enabled.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(|t| self.fold(t)).collect()
    }

    pub fn token_prob(&self, query: &TokenProbQuery<'_>) -> Vec<f64> {
        let prompt_tokens = self.tokenize(query.prompt);
        let denom = (self.vocab_size_smoothing + prompt_tokens.len()) as f64;
        query
            .tokens
            .iter()
            .map(|token| {
                let token = self.fold(token);
                let count = prompt_tokens.iter().filter(|t| **t == token).count();
                (1 + count) as f64 / denom
            })
            .collect()
    }
}

impl TokenScorer for MockVocabModel {
    fn token_log_probs(&self, request: &ScoreRequest<'_>) -> Result<Vec<Vec<f64>>> {
        Ok(request
            .labels
            .iter()
            .map(|tokens| {
                let query = TokenProbQuery {
                    prompt: request.prompt,
                    position: 1,
                    tokens,
                };
                self.token_prob(&query).into_iter().map(f64::ln).collect()
            })
            .collect())
    }
}

/// Raw (pre-propagation, pre-normalization) score matrix on disk.
///
/// Format: optional `#` comment lines, a `num_nodes<TAB>num_labels` header,
/// then one line of space-separated decimals per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorScoreFile {
    pub scores: ScoreMatrix,
}

impl PriorScoreFile {
    pub fn num_nodes(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_labels(&self) -> usize {
        self.scores.cols()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file), path)
    }

    pub fn parse<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut header: Option<(usize, usize)> = None;
        let mut data = Vec::new();
        let mut rows_seen = 0;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let Some((num_nodes, num_labels)) = header else {
                let trimmed = line.trim();
                if trimmed.starts_with('#') || trimmed.is_empty() {
                    continue;
                }
                header = Some(parse_header(trimmed, path, lineno)?);
                continue;
            };
            if line.trim().is_empty() {
                continue;
            }
            if rows_seen == num_nodes {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("header declares {num_nodes} nodes but more rows follow"),
                ));
            }
            let before = data.len();
            for field in line.split_whitespace() {
                let value: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("invalid number {field:?}")))?;
                if !value.is_finite() {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("non-finite value {field:?}"),
                    ));
                }
                data.push(value);
            }
            if data.len() - before != num_labels {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!(
                        "expected {num_labels} values, found {}",
                        data.len() - before
                    ),
                ));
            }
            rows_seen += 1;
        }
        let Some((num_nodes, num_labels)) = header else {
            return Err(Error::parse(path, 0, "missing header line"));
        };
        if rows_seen != num_nodes {
            return Err(Error::Dimension(format!(
                "{}: header declares {num_nodes} nodes but {rows_seen} rows found",
                path.display()
            )));
        }
        Ok(Self {
            scores: ScoreMatrix::from_vec(num_nodes, num_labels, data)?,
        })
    }

    /// Serializes with the shortest decimal form that round-trips each value.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}\t{}", self.num_nodes(), self.num_labels())?;
        let mut line = String::new();
        for row in self.scores.row_iter() {
            line.clear();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v}").expect("writing to a String cannot fail");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn parse_header(line: &str, path: &Path, lineno: usize) -> Result<(usize, usize)> {
    let fields: Vec<_> = line.split_whitespace().collect();
    let parsed: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
    match parsed.as_deref() {
        Some([nodes, labels]) => Ok((*nodes, *labels)),
        _ => Err(Error::parse(
            path,
            lineno,
            format!("expected header \"num_nodes<TAB>num_labels\", got {line:?}"),
        )),
    }
}

#[derive(Debug, Serialize)]
struct WireLabel<'a> {
    tokens: &'a [String],
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    id: String,
    prompt: &'a str,
    num_masks: usize,
    labels: Vec<WireLabel<'a>>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    id: String,
    token_log_probs: Vec<Vec<f64>>,
}

/// Blocking client for `POST <endpoint>/score`.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    endpoint: String,
    /// Upper bound on concurrent requests while assembling a score matrix.
    pub max_inflight: usize,
    pub max_attempts: usize,
    pub initial_backoff: Duration,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .new_agent();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            max_inflight: 4,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(100),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_once(&self, body: &str) -> std::result::Result<String, String> {
        let url = format!("{}/score", self.endpoint);
        let mut response = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = response.status();
        if status != 200 {
            return Err(format!("HTTP status {status}"));
        }
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())
    }

    fn post_with_retry(&self, body: &str) -> Result<String> {
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.max_attempts.max(1) {
            match self.post_once(body) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
            if attempt < self.max_attempts {
                thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(Error::Transport {
            endpoint: self.endpoint.clone(),
            message: format!(
                "giving up after {} attempts: {last}",
                self.max_attempts.max(1)
            ),
        })
    }

    fn malformed(&self, message: impl Into<String>) -> Error {
        Error::MalformedResponse {
            endpoint: self.endpoint.clone(),
            message: message.into(),
        }
    }
}

impl TokenScorer for HttpScorer {
    fn token_log_probs(&self, request: &ScoreRequest<'_>) -> Result<Vec<Vec<f64>>> {
        let id = request.node.to_string();
        let wire = WireRequest {
            id: id.clone(),
            prompt: request.prompt,
            num_masks: request.num_masks,
            labels: request
                .labels
                .iter()
                .map(|tokens| WireLabel { tokens })
                .collect(),
        };
        let body = serde_json::to_string(&wire).expect("request serialization cannot fail");
        let text = self.post_with_retry(&body)?;
        let response: WireResponse =
            serde_json::from_str(&text).map_err(|e| self.malformed(e.to_string()))?;
        if response.id != id {
            return Err(self.malformed(format!(
                "id {:?} does not match request id {id:?}",
                response.id
            )));
        }
        if response.token_log_probs.len() != request.labels.len() {
            return Err(self.malformed(format!(
                "expected {} labels, got {}",
                request.labels.len(),
                response.token_log_probs.len()
            )));
        }
        for (k, (probs, tokens)) in response
            .token_log_probs
            .iter()
            .zip(request.labels)
            .enumerate()
        {
            if probs.len() != tokens.len() {
                return Err(self.malformed(format!(
                    "label {k}: expected {} token log-probs, got {}",
                    tokens.len(),
                    probs.len()
                )));
            }
            if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p > 0.0) {
                return Err(self.malformed(format!("label {k}: invalid log-prob {bad}")));
            }
        }
        Ok(response.token_log_probs)
    }
}

/// Where raw scores come from when assembling `Z̃`.
#[derive(Debug, Clone)]
pub enum Backend {
    Mock(MockVocabModel),
    Prior(PriorScoreFile),
    Http(HttpScorer),
}

impl Backend {
    /// Parses `mock`, `file:<path>` or `http:<url>`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if spec == "mock" {
            return Ok(Backend::Mock(MockVocabModel::default()));
        }
        if let Some(path) = spec.strip_prefix("file:") {
            return Ok(Backend::Prior(PriorScoreFile::load(path)?));
        }
        if let Some(url) = spec.strip_prefix("http:") {
            // Accept both `http:host:port` and `http:http://host:port`.
            let url = if url.starts_with("http://") || url.starts_with("https://") {
                url.to_owned()
            } else {
                format!("http://{url}")
            };
            return Ok(Backend::Http(HttpScorer::new(url)));
        }
        Err(Error::Config(format!(
            "unknown backend {spec:?}; expected mock, file:<path> or http:<url>"
        )))
    }
}

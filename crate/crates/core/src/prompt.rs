//! Prior logits generation: prompts, label scores, the raw score matrix,
//! column normalization and zero-shot prediction.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::backend::{Backend, MockVocabModel, ScoreRequest, TokenScorer};
use crate::error::{Error, Result};
use crate::graph::{propagate, NormalizedAdjacency};
use crate::matrix::{mean_std, ScoreMatrix};

/// Columns whose standard deviation falls below this are zeroed by
/// [`normalize_columns`].
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Label {
    pub text: String,
    pub tokens: Vec<String>,
}

/// Ordered label set. A label's position is its class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<Label>,
    max_tokens: usize,
}

impl LabelVocab {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if !seen.insert(label.text.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate label text {:?}",
                    label.text
                )));
            }
            if label.tokens.is_empty() {
                return Err(Error::Invalid(format!(
                    "label {:?} has no tokens",
                    label.text
                )));
            }
        }
        let max_tokens = labels.iter().map(|l| l.tokens.len()).max().unwrap_or(0);
        Ok(Self { labels, max_tokens })
    }

    /// Tokenizes each label text with the mock model's whitespace tokenizer.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], model: &MockVocabModel) -> Result<Self> {
        Self::new(
            texts
                .iter()
                .map(|t| Label {
                    text: t.as_ref().to_owned(),
                    tokens: model.tokenize(t.as_ref()),
                })
                .collect(),
        )
    }

    /// Reads one label per line (line number = class index). When
    /// `tokenization` is given, its JSON Lines `{"label", "tokens"}` entries
    /// replace the whitespace tokenization for the labels they name.
    pub fn load(
        path: impl AsRef<Path>,
        tokenization: Option<&Path>,
        model: &MockVocabModel,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let lines = match lines.iter().rposition(|l| !l.trim().is_empty()) {
            Some(last) => &lines[..=last],
            None => &[][..],
        };
        if let Some(blank) = lines.iter().position(|l| l.trim().is_empty()) {
            return Err(Error::parse(path, blank + 1, "blank label line"));
        }
        let texts: Vec<String> = lines.iter().map(|l| l.trim().to_owned()).collect();
        let mut vocab = Self::from_texts(&texts, model)?;
        if let Some(tok_path) = tokenization {
            vocab.apply_tokenization_file(tok_path)?;
        }
        Ok(vocab)
    }

    fn apply_tokenization_file(&mut self, path: &Path) -> Result<()> {
        #[derive(Deserialize)]
        struct Entry {
            label: String,
            tokens: Vec<String>,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: Entry = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
            let Some(label) = self.labels.iter_mut().find(|l| l.text == entry.label) else {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("unknown label {:?}", entry.label),
                ));
            };
            if entry.tokens.is_empty() {
                return Err(Error::parse(path, idx + 1, "empty token list"));
            }
            label.tokens = entry.tokens;
        }
        self.max_tokens = self
            .labels
            .iter()
            .map(|l| l.tokens.len())
            .max()
            .unwrap_or(0);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Number of mask slots in a prompt: the longest label tokenization.
    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn class_of(&self, text: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.text == text)
    }

    pub fn token_lists(&self) -> Vec<Vec<String>> {
        self.labels.iter().map(|l| l.tokens.clone()).collect()
    }
}

/// Renders `"<instruction>. <mask> ... <mask>. <text>"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub instruction: String,
    pub mask_token: String,
    pub mask_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            instruction: String::new(),
            mask_token: "<mask>".into(),
            mask_separator: " ".into(),
        }
    }
}

impl PromptTemplate {
    pub fn with_instruction(instruction: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            ..Self::default()
        }
    }

    pub fn build(&self, text: &str, num_masks: usize) -> String {
        build_prompt(self, text, num_masks)
    }
}

pub fn build_prompt(tpl: &PromptTemplate, text: &str, num_masks: usize) -> String {
    let masks = vec![tpl.mask_token.as_str(); num_masks].join(&tpl.mask_separator);
    if tpl.instruction.is_empty() {
        format!("{masks}. {text}")
    } else {
        format!("{}. {masks}. {text}", tpl.instruction)
    }
}

/// Node texts indexed by node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTexts {
    texts: Vec<String>,
}

impl NodeTexts {
    pub fn new(texts: Vec<String>) -> Self {
        Self { texts }
    }

    /// Reads JSON Lines `{"id": int, "text": str}`; ids must cover
    /// `0..n` exactly once each.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            id: usize,
            text: String,
        }
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<Option<String>> = Vec::new();
        let mut count = 0;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: Entry = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
            if entry.id >= entries.len() {
                entries.resize(entry.id + 1, None);
            }
            if entries[entry.id].replace(entry.text).is_some() {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("duplicate node id {}", entry.id),
                ));
            }
            count += 1;
        }
        if count != entries.len() {
            let missing = entries.iter().position(Option::is_none).unwrap_or(0);
            return Err(Error::Invalid(format!(
                "{}: node id {missing} missing (ids must cover 0..{})",
                path.display(),
                entries.len()
            )));
        }
        Ok(Self {
            texts: entries.into_iter().flatten().collect(),
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, text) in self.texts.iter().enumerate() {
            let line = serde_json::json!({ "id": id, "text": text });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn get(&self, node: usize) -> &str {
        &self.texts[node]
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.texts.iter().map(String::as_str)
    }
}

/// Unnormalized label log-probability: the sum of its token log-probabilities.
pub fn label_score(token_log_probs: &[f64]) -> Result<f64> {
    if token_log_probs.is_empty() {
        return Err(Error::Invalid(
            "label score needs at least one token".into(),
        ));
    }
    if let Some(bad) = token_log_probs.iter().find(|p| !p.is_finite() || **p > 0.0) {
        return Err(Error::Invalid(format!(
            "token log-probability {bad} is not a finite value <= 0"
        )));
    }
    Ok(token_log_probs.iter().sum())
}

fn score_node(
    scorer: &dyn TokenScorer,
    node: usize,
    text: &str,
    vocab: &LabelVocab,
    token_lists: &[Vec<String>],
    tpl: &PromptTemplate,
) -> Result<Vec<f64>> {
    let prompt = build_prompt(tpl, text, vocab.max_tokens());
    let request = ScoreRequest {
        node,
        prompt: &prompt,
        num_masks: vocab.max_tokens(),
        labels: token_lists,
    };
    let per_label = scorer.token_log_probs(&request)?;
    if per_label.len() != vocab.len() {
        return Err(Error::Dimension(format!(
            "backend returned {} label scores, expected {}",
            per_label.len(),
            vocab.len()
        )));
    }
    per_label
        .iter()
        .zip(vocab.labels())
        .map(|(probs, label)| {
            // Only the first n_l slots count toward a label with n_l tokens.
            let used = &probs[..label.tokens.len().min(probs.len())];
            label_score(used)
        })
        .collect()
}

fn assemble_with_scorer(
    texts: &NodeTexts,
    vocab: &LabelVocab,
    tpl: &PromptTemplate,
    scorer: &dyn TokenScorer,
    max_parallel: Option<usize>,
) -> Result<ScoreMatrix> {
    let token_lists = vocab.token_lists();
    let score = |node: usize| {
        score_node(scorer, node, texts.get(node), vocab, &token_lists, tpl).map_err(|e| {
            Error::Backend {
                node,
                source: Box::new(e),
            }
        })
    };
    let rows: Vec<Vec<f64>> = match max_parallel {
        None => (0..texts.len())
            .into_par_iter()
            .map(score)
            .collect::<Result<_>>()?,
        Some(workers) => bounded_map(texts.len(), workers.max(1), score)?,
    };
    ScoreMatrix::from_vec(texts.len(), vocab.len(), rows.concat())
}

/// Runs `f` over `0..n` on at most `workers` threads, keeping output order.
fn bounded_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    let next = AtomicUsize::new(0);
    let slots: std::sync::Mutex<Vec<Option<Result<T>>>> =
        std::sync::Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|s| s.expect("every index visited"))
        .collect()
}

/// Builds the raw score matrix `Z̃`: row `v`, column `c` is the label score of
/// label `c` under the prompt for node `v`. A prior-file backend returns its
/// matrix unchanged without building any prompt.
pub fn assemble_score_matrix(
    texts: &NodeTexts,
    vocab: &LabelVocab,
    tpl: &PromptTemplate,
    backend: &Backend,
) -> Result<ScoreMatrix> {
    match backend {
        Backend::Prior(file) => {
            if file.num_labels() != vocab.len() {
                return Err(Error::Dimension(format!(
                    "prior file has {} labels, label set has {}",
                    file.num_labels(),
                    vocab.len()
                )));
            }
            if file.num_nodes() != texts.len() {
                return Err(Error::Dimension(format!(
                    "prior file has {} nodes, texts file has {}",
                    file.num_nodes(),
                    texts.len()
                )));
            }
            Ok(file.scores.clone())
        }
        Backend::Mock(model) => assemble_with_scorer(texts, vocab, tpl, model, None),
        Backend::Http(client) => {
            assemble_with_scorer(texts, vocab, tpl, client, Some(client.max_inflight))
        }
    }
}

/// Standardizes every column to zero mean and unit population standard
/// deviation. Columns with σ below [`DEGENERATE_STD`] become zero.
pub fn normalize_columns(z: &ScoreMatrix) -> ScoreMatrix {
    let mut out = z.clone();
    for col in 0..z.cols() {
        let values = z.column(col);
        let (mean, std) = mean_std(&values);
        for (row, v) in values.iter().enumerate() {
            let normalized = if std < DEGENERATE_STD {
                0.0
            } else {
                (v - mean) / std
            };
            out.set(row, col, normalized);
        }
    }
    out
}

/// Row-wise argmax, ties to the smallest class index.
pub fn zero_shot_predict(z: &ScoreMatrix) -> Vec<usize> {
    z.row_argmax()
}

/// Stage switches for the prior-logit pipeline; turning them off gives the
/// `-GP` and `-Norm` ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlgOptions {
    pub steps: usize,
    pub propagate: bool,
    pub normalize: bool,
}

impl Default for PlgOptions {
    fn default() -> Self {
        Self {
            steps: 10,
            propagate: true,
            normalize: true,
        }
    }
}

/// `Z = normalize(Ã^P Z̃)` from an already assembled `Z̃`.
pub fn prior_logits(
    raw: &ScoreMatrix,
    adj: Option<&NormalizedAdjacency>,
    opts: PlgOptions,
) -> Result<ScoreMatrix> {
    let propagated = if opts.propagate && opts.steps > 0 {
        let adj =
            adj.ok_or_else(|| Error::Config("graph propagation requires an edge list".into()))?;
        propagate(raw, adj, opts.steps)?
    } else {
        if let Some(adj) = adj {
            if adj.num_nodes() != raw.rows() {
                return Err(Error::Dimension(format!(
                    "score matrix has {} rows but graph has {} nodes",
                    raw.rows(),
                    adj.num_nodes()
                )));
            }
        }
        raw.clone()
    };
    Ok(if opts.normalize {
        normalize_columns(&propagated)
    } else {
        propagated
    })
}

/// Full zero-shot pipeline from texts to predictions.
pub fn plg_pipeline(
    texts: &NodeTexts,
    vocab: &LabelVocab,
    tpl: &PromptTemplate,
    backend: &Backend,
    adj: Option<&NormalizedAdjacency>,
    opts: PlgOptions,
) -> Result<(ScoreMatrix, Vec<usize>)> {
    let raw = assemble_score_matrix(texts, vocab, tpl, backend)?;
    let z = prior_logits(&raw, adj, opts)?;
    let predictions = zero_shot_predict(&z);
    Ok((z, predictions))
}

pub fn write_predictions<W: Write>(predictions: &[usize], mut out: W) -> std::io::Result<()> {
    for p in predictions {
        writeln!(out, "{p}")?;
    }
    Ok(())
}

/// Reads one non-negative integer per line (predictions or ground truth).
pub fn load_class_file(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                Error::parse(path, i + 1, format!("invalid class index {:?}", l.trim()))
            })
        })
        .collect()
}

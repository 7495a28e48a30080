//! Planted-partition text-attributed graphs for desk-scale experiments.
//!
//! Each class gets a label phrase of one to three invented keywords. A node's
//! text repeats its class phrase one to three times, mixed with noise words
//! drawn uniformly from a pool shared by all nodes. The pool holds filler
//! words and every class keyword, so noise can mention the wrong class.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::MockVocabModel;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::prompt::{write_predictions, LabelVocab, NodeTexts};

pub const TEXTS_FILE: &str = "texts.jsonl";
pub const LABELS_FILE: &str = "labels.txt";
pub const EDGES_FILE: &str = "edges.txt";
pub const GT_FILE: &str = "gt.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub classes: usize,
    pub nodes_per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Noise words mixed into every node text.
    pub noise_words: usize,
    /// Filler (non-keyword) words in the shared noise pool.
    pub filler_words: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 4,
            nodes_per_class: 50,
            p_in: 0.3,
            p_out: 0.02,
            noise_words: 12,
            filler_words: 12,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.nodes_per_class == 0 {
            return Err(Error::Config("nodes_per_class must be at least 1".into()));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        Ok(())
    }

    /// Keyword count of class `c`'s label phrase; cycles 1, 2, 3 so label
    /// lengths always differ.
    pub fn label_length(class: usize) -> usize {
        1 + class % 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub params: SyntheticParams,
    pub graph: Graph,
    pub texts: NodeTexts,
    pub label_texts: Vec<String>,
    pub labels: LabelVocab,
    pub y: Vec<usize>,
}

fn invent_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut HashSet<String>) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if taken.insert(word.clone()) {
            words.push(word);
        }
    }
    words
}

pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<SyntheticDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();

    let keywords: Vec<Vec<String>> = (0..params.classes)
        .map(|c| invent_words(&mut rng, SyntheticParams::label_length(c), &mut taken))
        .collect();
    let label_texts: Vec<String> = keywords.iter().map(|k| k.join(" ")).collect();
    let mut pool = invent_words(&mut rng, params.filler_words, &mut taken);
    pool.extend(keywords.iter().flatten().cloned());

    let n = params.classes * params.nodes_per_class;
    let mut y: Vec<usize> = (0..n).map(|v| v % params.classes).collect();
    y.shuffle(&mut rng);

    let texts: Vec<String> = y
        .iter()
        .map(|&class| {
            let repeats = rng.random_range(1..=3);
            let mut words: Vec<&str> = Vec::new();
            for _ in 0..repeats {
                words.extend(keywords[class].iter().map(String::as_str));
            }
            if !pool.is_empty() {
                for _ in 0..params.noise_words {
                    words.push(&pool[rng.random_range(0..pool.len())]);
                }
            }
            words.shuffle(&mut rng);
            words.join(" ")
        })
        .collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if y[i] == y[j] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.random_bool(p) {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }

    Ok(SyntheticDataset {
        params: params.clone(),
        graph: Graph::from_edges(n, &edges)?,
        texts: NodeTexts::new(texts),
        labels: LabelVocab::from_texts(&label_texts, &MockVocabModel::default())?,
        label_texts,
        y,
    })
}

impl SyntheticDataset {
    pub fn num_nodes(&self) -> usize {
        self.y.len()
    }

    /// Writes the texts, labels, edge list and ground-truth files into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            f(&mut buf)
                .and_then(|_| std::fs::write(&path, &buf))
                .map_err(|e| Error::io(&path, e))
        };
        write(TEXTS_FILE, &|b| self.texts.write_jsonl(b))?;
        write(LABELS_FILE, &|b| {
            for label in &self.label_texts {
                writeln!(b, "{label}")?;
            }
            Ok(())
        })?;
        write(EDGES_FILE, &|b| self.graph.write_edge_list(b))?;
        write(GT_FILE, &|b| write_predictions(&self.y, b))
    }
}

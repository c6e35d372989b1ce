//! Confidence ranking and token-budget selection of source sequences.
//!
//! Sequences are scored with the sentence-max rule, ranked by
//! (score descending, id ascending), and accumulated until the token budget
//! is reached; the sequence that crosses the budget is included. The ranking
//! is kept in a bounded heap so a large corpus never fully resides in memory.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{featurize, ClassifierModel, FeaturizerConfig};
use crate::optim::CounterRng;

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("token budget must be at least 1")]
    ZeroBudget,
    #[error("token_count must be at least 1 (sequence {0})")]
    ZeroTokenCount(u64),
    #[error("duplicate sequence id {0}")]
    DuplicateId(u64),
    #[error("score {score} out of [0, 1] for sequence {id}")]
    ScoreOutOfRange { id: u64, score: f64 },
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
}

/// One source sequence; `token_count >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub id: u64,
    pub text: String,
    pub token_count: u64,
    pub sentences: Vec<String>,
}

impl Sequence {
    /// Build from raw text: whitespace token count, punctuation-split
    /// sentences. A blank text still counts one token so the invariant holds.
    pub fn from_text(id: u64, text: String) -> Self {
        let token_count = (text.split_whitespace().count() as u64).max(1);
        let sentences = split_sentences(&text);
        Self {
            id,
            text,
            token_count,
            sentences,
        }
    }
}

/// Split on terminal punctuation (. ! ?) followed by whitespace. Texts with
/// no terminal punctuation come back as a single sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut prev_terminal = false;
    for (i, ch) in text.char_indices() {
        if prev_terminal && ch.is_whitespace() {
            let s = text[start..i].trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            start = i;
        }
        prev_terminal = matches!(ch, '.' | '!' | '?');
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    if sentences.is_empty() {
        sentences.push(String::new());
    }
    sentences
}

/// A sequence reduced to its ranking key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub sequence_id: u64,
    pub score: f64,
    pub token_count: u64,
}

impl ScoredSequence {
    fn validate(&self) -> Result<(), SelectionError> {
        if self.token_count == 0 {
            return Err(SelectionError::ZeroTokenCount(self.sequence_id));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(SelectionError::ScoreOutOfRange {
                id: self.sequence_id,
                score: self.score,
            });
        }
        Ok(())
    }

    /// (score desc, id asc) ranking: true if self ranks strictly better.
    fn ranks_before(&self, other: &Self) -> bool {
        match self.score.partial_cmp(&other.score).unwrap() {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.sequence_id < other.sequence_id,
        }
    }
}

/// Max confidence over the sequence's sentences.
pub fn score_sequence(
    model: &ClassifierModel,
    featurizer: &FeaturizerConfig,
    seq: &Sequence,
) -> ScoredSequence {
    let score = seq
        .sentences
        .iter()
        .map(|s| model.confidence(&featurize(s, featurizer)))
        .fold(0.0f64, f64::max);
    ScoredSequence {
        sequence_id: seq.id,
        score,
        token_count: seq.token_count,
    }
}

/// Score a corpus across worker threads; shard results are concatenated in
/// shard order, so the output order equals input order regardless of
/// scheduling.
pub fn score_corpus(
    model: &ClassifierModel,
    featurizer: &FeaturizerConfig,
    corpus: &[Sequence],
    workers: usize,
) -> Vec<ScoredSequence> {
    let workers = workers.max(1).min(corpus.len().max(1));
    if workers == 1 {
        return corpus
            .iter()
            .map(|s| score_sequence(model, featurizer, s))
            .collect();
    }
    let chunk = corpus.len().div_ceil(workers);
    let mut out = Vec::with_capacity(corpus.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|shard| {
                scope.spawn(move || {
                    shard
                        .iter()
                        .map(|s| score_sequence(model, featurizer, s))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            out.extend(h.join().expect("scoring worker panicked"));
        }
    });
    out
}

/// Outcome of a budgeted selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted by (score desc, id asc).
    pub selected_ids: Vec<u64>,
    pub total_tokens: u64,
    pub budget: u64,
    /// Score of the worst selected sequence; 0 for an empty selection.
    pub cutoff_score: f64,
    /// Set when the budget exceeds the whole corpus.
    pub budget_exceeds_corpus: bool,
}

// Max-heap entry ordered so the *worst*-ranked item surfaces first.
#[derive(Debug, PartialEq)]
struct WorstFirst(ScoredSequence);

impl Eq for WorstFirst {}

impl PartialOrd for WorstFirst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for WorstFirst {
    fn cmp(&self, other: &Self) -> Ordering {
        if self.0.ranks_before(&other.0) {
            Ordering::Less
        } else if other.0.ranks_before(&self.0) {
            Ordering::Greater
        } else {
            Ordering::Equal
        }
    }
}

/// Select top-ranked sequences until the token budget is reached; the
/// sequence whose inclusion crosses the budget is included. Streaming: keeps
/// only candidates that could still make the cut, dropping the worst while
/// the rest alone already covers the budget.
pub fn select_top<I>(scored: I, token_budget: u64) -> Result<SelectionResult, SelectionError>
where
    I: IntoIterator<Item = ScoredSequence>,
{
    if token_budget == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    let mut heap: BinaryHeap<WorstFirst> = BinaryHeap::new();
    let mut seen = std::collections::HashSet::new();
    let mut heap_tokens: u64 = 0;
    for s in scored {
        s.validate()?;
        if !seen.insert(s.sequence_id) {
            return Err(SelectionError::DuplicateId(s.sequence_id));
        }
        heap.push(WorstFirst(s));
        heap_tokens += s.token_count;
        // drop the worst while the remainder still reaches the budget
        while let Some(worst) = heap.peek() {
            let rest = heap_tokens - worst.0.token_count;
            if rest >= token_budget {
                heap_tokens = rest;
                heap.pop();
            } else {
                break;
            }
        }
    }
    let mut kept: Vec<ScoredSequence> = heap.into_iter().map(|w| w.0).collect();
    kept.sort_by(|a, b| {
        if a.ranks_before(b) {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    });
    // the heap may retain one candidate past the crossing point; trim the
    // prefix to the exact stopping rule
    let mut total = 0u64;
    let mut take = 0;
    for s in &kept {
        total += s.token_count;
        take += 1;
        if total >= token_budget {
            break;
        }
    }
    kept.truncate(take);
    Ok(SelectionResult {
        cutoff_score: kept.last().map_or(0.0, |s| s.score),
        selected_ids: kept.iter().map(|s| s.sequence_id).collect(),
        total_tokens: total,
        budget: token_budget,
        budget_exceeds_corpus: total < token_budget,
    })
}

/// Seeded uniform shuffle, then the same prefix-by-budget stopping rule as
/// `select_top`. Reported ids keep shuffle order; cutoff is the mean score.
pub fn random_baseline(
    scored: &[ScoredSequence],
    token_budget: u64,
    seed: u64,
) -> Result<SelectionResult, SelectionError> {
    if token_budget == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    let mut seen = std::collections::HashSet::new();
    for s in scored {
        s.validate()?;
        if !seen.insert(s.sequence_id) {
            return Err(SelectionError::DuplicateId(s.sequence_id));
        }
    }
    let mut order: Vec<&ScoredSequence> = scored.iter().collect();
    let mut rng = CounterRng::substream(seed, "shuffle", 0);
    for i in (1..order.len()).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let mut total = 0u64;
    let mut take = 0;
    for s in &order {
        total += s.token_count;
        take += 1;
        if total >= token_budget {
            break;
        }
    }
    order.truncate(take);
    let mean_score = if order.is_empty() {
        0.0
    } else {
        order.iter().map(|s| s.score).sum::<f64>() / order.len() as f64
    };
    Ok(SelectionResult {
        selected_ids: order.iter().map(|s| s.sequence_id).collect(),
        total_tokens: total,
        budget: token_budget,
        cutoff_score: mean_score,
        budget_exceeds_corpus: total < token_budget,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: u64,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_count: Option<u64>,
}

/// Read a JSON-lines corpus: one object per line with fields `id`, `text`,
/// optional `token_count` (whitespace count when absent). Blank lines are
/// skipped; duplicate ids are an error.
pub fn read_corpus(path: &Path) -> Result<Vec<Sequence>, SelectionError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|source| SelectionError::BadRecord {
                line: lineno + 1,
                source,
            })?;
        if !seen.insert(rec.id) {
            return Err(SelectionError::DuplicateId(rec.id));
        }
        let mut seq = Sequence::from_text(rec.id, rec.text);
        if let Some(tc) = rec.token_count {
            if tc == 0 {
                return Err(SelectionError::ZeroTokenCount(rec.id));
            }
            seq.token_count = tc;
        }
        out.push(seq);
    }
    Ok(out)
}

/// Write a corpus in the same JSON-lines format.
pub fn write_corpus(path: &Path, corpus: &[Sequence]) -> Result<(), SelectionError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in corpus {
        let rec = CorpusRecord {
            id: seq.id,
            text: seq.text.clone(),
            token_count: Some(seq.token_count),
        };
        serde_json::to_writer(&mut f, &rec).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Write selected (id, score) pairs as JSON lines.
pub fn write_scores(path: &Path, scored: &[ScoredSequence]) -> Result<(), SelectionError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scored {
        serde_json::to_writer(&mut f, s).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

//! Distribution-closeness diagnostics: top-K frequent-term overlap between
//! two corpora.
//!
//! Content words are approximated by excluding a shipped function-word list;
//! the diagnostic is meant for relative comparisons (did selection move the
//! source distribution toward the target?), not absolute counts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Function words excluded from term counting: determiners, prepositions,
/// pronouns, conjunctions, auxiliaries, and a few high-frequency adverbs.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "no",
    "of", "in", "on", "at", "by", "for", "with", "about", "against", "between", "into",
    "through", "during", "before", "after", "above", "below", "to", "from", "up", "down",
    "out", "off", "over", "under", "i", "me", "my", "mine", "we", "us", "our", "ours", "you",
    "your", "yours", "he", "him", "his", "she", "her", "hers", "it", "its", "they", "them",
    "their", "theirs", "what", "which", "who", "whom", "whose", "and", "but", "or", "nor",
    "so", "yet", "if", "because", "as", "until", "while", "when", "where", "why", "how",
    "is", "am", "are", "was", "were", "be", "been", "being", "have", "has", "had", "having",
    "do", "does", "did", "doing", "will", "would", "shall", "should", "can", "could", "may",
    "might", "must", "not", "only", "own", "same", "than", "then", "too", "very", "just",
    "also", "there", "here", "all", "both", "more", "most", "other", "such",
];

/// Normalized term counts with an exclusion list applied.
#[derive(Debug, Clone, Default)]
pub struct TermFrequencyTable {
    counts: HashMap<String, u64>,
}

impl TermFrequencyTable {
    /// Count lowercased alphanumeric-trimmed tokens from an iterator of
    /// texts, skipping excluded terms and empty tokens.
    pub fn from_texts<'a, I>(texts: I, exclusion_list: &[&str]) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let excluded: std::collections::HashSet<&str> = exclusion_list.iter().copied().collect();
        let mut counts = HashMap::new();
        for text in texts {
            for raw in text.split_whitespace() {
                let term = raw
                    .trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase();
                if term.is_empty() || excluded.contains(term.as_str()) {
                    continue;
                }
                *counts.entry(term).or_insert(0u64) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, term: &str) -> u64 {
        self.counts.get(term).copied().unwrap_or(0)
    }

    pub fn distinct_terms(&self) -> usize {
        self.counts.len()
    }
}

/// An ordered top-k term list; `truncated` is set when the corpus had fewer
/// than k distinct terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopTerms {
    pub terms: Vec<String>,
    pub k: usize,
    pub truncated: bool,
}

/// The k most frequent terms, ties broken lexicographically.
pub fn top_k_terms(table: &TermFrequencyTable, k: usize) -> TopTerms {
    assert!(k >= 1, "k must be at least 1");
    let mut entries: Vec<(&String, u64)> = table.counts.iter().map(|(t, &c)| (t, c)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let truncated = entries.len() < k;
    entries.truncate(k);
    TopTerms {
        terms: entries.into_iter().map(|(t, _)| t.clone()).collect(),
        k,
        truncated,
    }
}

/// |top_k(A) ∩ top_k(B)|; symmetric by construction.
pub fn overlap_count(a: &TopTerms, b: &TopTerms) -> usize {
    let set: std::collections::HashSet<&String> = a.terms.iter().collect();
    b.terms.iter().filter(|t| set.contains(t)).count()
}

/// Diagnostic report: top-k lists plus overlaps of the source and selected
/// corpora with the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub k: usize,
    pub exclusion_list_hash: u64,
    pub target_top: TopTerms,
    pub source_top: TopTerms,
    pub selected_top: Option<TopTerms>,
    pub target_source_overlap: usize,
    pub target_selected_overlap: Option<usize>,
}

fn exclusion_hash(exclusion_list: &[&str]) -> u64 {
    // FNV-1a over the joined list; identifies which list produced a report
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for term in exclusion_list {
        for &b in term.as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Build the full report from raw text corpora.
pub fn diagnostics_report(
    target_texts: &[String],
    source_texts: &[String],
    selected_texts: Option<&[String]>,
    k: usize,
    exclusion_list: &[&str],
) -> DiagnosticsReport {
    let top = |texts: &[String]| {
        let table = TermFrequencyTable::from_texts(texts.iter().map(String::as_str), exclusion_list);
        top_k_terms(&table, k)
    };
    let target_top = top(target_texts);
    let source_top = top(source_texts);
    let selected_top = selected_texts.map(top);
    DiagnosticsReport {
        k,
        exclusion_list_hash: exclusion_hash(exclusion_list),
        target_source_overlap: overlap_count(&target_top, &source_top),
        target_selected_overlap: selected_top
            .as_ref()
            .map(|s| overlap_count(&target_top, s)),
        target_top,
        source_top,
        selected_top,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> TermFrequencyTable {
        TermFrequencyTable::from_texts([text], &[])
    }

    #[test]
    fn top_terms_by_count_then_lexicographic() {
        let t = top_k_terms(&table("b b a"), 2);
        assert_eq!(t.terms, ["b", "a"]);
        assert!(!t.truncated);
        let tied = top_k_terms(&table("z q z q m"), 2);
        assert_eq!(tied.terms, ["q", "z"]);
    }

    #[test]
    fn k_beyond_vocabulary_is_flagged() {
        let t = top_k_terms(&table("only two"), 10);
        assert_eq!(t.terms.len(), 2);
        assert!(t.truncated);
    }

    #[test]
    fn exclusion_list_is_applied() {
        let base = TermFrequencyTable::from_texts(["energy trading desk"], FUNCTION_WORDS);
        let noisy = TermFrequencyTable::from_texts(
            ["the energy and the trading of a desk the the"],
            FUNCTION_WORDS,
        );
        assert_eq!(top_k_terms(&base, 3), top_k_terms(&noisy, 3));
        assert_eq!(noisy.count("the"), 0);
    }

    #[test]
    fn normalization_strips_punctuation_and_case() {
        let t = table("Energy, energy! (energy)");
        assert_eq!(t.count("energy"), 3);
        assert_eq!(t.distinct_terms(), 1);
    }

    #[test]
    fn overlap_is_symmetric_and_bounded() {
        let a = top_k_terms(&table("x x y y z w"), 3);
        let b = top_k_terms(&table("y z z q q p"), 3);
        let ab = overlap_count(&a, &b);
        assert_eq!(ab, overlap_count(&b, &a));
        assert!(ab <= 3);
        assert_eq!(overlap_count(&a, &a), 3);
        let disjoint = top_k_terms(&table("aa bb cc"), 3);
        assert_eq!(overlap_count(&a, &disjoint), 0);
    }

    #[test]
    fn report_carries_overlaps() {
        let target = vec!["power grid outage".to_string()];
        let source = vec!["stock market power".to_string()];
        let selected = vec!["power grid trading".to_string()];
        let r = diagnostics_report(&target, &source, Some(&selected), 3, FUNCTION_WORDS);
        assert_eq!(r.target_source_overlap, 1);
        assert_eq!(r.target_selected_overlap, Some(2));
        assert_eq!(r.k, 3);
        let r2 = diagnostics_report(&target, &source, None, 3, &[]);
        assert!(r2.target_selected_overlap.is_none());
        assert_ne!(r.exclusion_list_hash, r2.exclusion_list_hash);
    }
}

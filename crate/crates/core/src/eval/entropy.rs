//! 2-gram Shannon entropy over spoken dialogue.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::RunLog;

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercased runs of alphanumeric characters. Whitespace and punctuation
/// both end a token and are dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn id(&self) -> &str {
        "ws"
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

/// Every non-whitespace character is a token. Useful for CJK dialogue.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn id(&self) -> &str {
        "char"
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .map(String::from)
            .collect()
    }
}

pub fn tokenizer_by_id(id: &str) -> Option<Box<dyn Tokenizer>> {
    match id {
        "ws" | "word" => Some(Box::new(WordTokenizer)),
        "char" => Some(Box::new(CharTokenizer)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub tokenizer: String,
    pub utterance_count: usize,
    pub token_count: usize,
    /// Total bigram occurrences.
    pub bigram_count: usize,
    pub distinct_bigram_count: usize,
    pub entropy_bits: f64,
    /// No bigram was found; the entropy is reported as 0.
    pub empty: bool,
}

/// Tokenizes each utterance on its own, so no bigram spans two utterances,
/// and computes H = -sum p(b) log2 p(b) over the adjacent token pairs.
pub fn bigram_entropy<S: AsRef<str>>(utterances: &[S], tokenizer: &dyn Tokenizer) -> EntropyReport {
    let mut counts: HashMap<(String, String), usize> = HashMap::new();
    let mut tokens = 0;
    for u in utterances {
        let toks = tokenizer.tokenize(u.as_ref());
        tokens += toks.len();
        for pair in toks.windows(2) {
            *counts.entry((pair[0].clone(), pair[1].clone())).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    // sort so float summation order does not depend on hash order
    let mut freq: Vec<usize> = counts.values().copied().collect();
    freq.sort_unstable();
    let entropy = if total == 0 {
        0.0
    } else {
        let n = total as f64;
        let h: f64 = freq
            .iter()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum();
        h.max(0.0)
    };
    EntropyReport {
        tokenizer: tokenizer.id().to_string(),
        utterance_count: utterances.len(),
        token_count: tokens,
        bigram_count: total,
        distinct_bigram_count: counts.len(),
        entropy_bits: entropy,
        empty: total == 0,
    }
}

/// Entropy of every successful speak record in a run.
pub fn run_entropy(log: &RunLog, tokenizer: &dyn Tokenizer) -> EntropyReport {
    bigram_entropy(&log.utterances(), tokenizer)
}

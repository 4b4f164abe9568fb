//! Corpus statistics: phone frequencies, length histogram, label counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::corpus::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_utterances: usize,
    pub total_tokens: usize,
    pub phone_freq: BTreeMap<String, usize>,
    /// Most frequent phones, ties ordered by phone string.
    pub top_k: Vec<(String, usize)>,
    /// Utterance length to number of utterances with that length.
    pub length_hist: BTreeMap<usize, usize>,
    pub mean_length: f64,
    /// Unlabeled utterances are not counted.
    pub label_counts: BTreeMap<String, usize>,
}

pub fn corpus_stats(utterances: &[Utterance], top_k: usize) -> Result<CorpusStats> {
    if utterances.is_empty() {
        return Err(Error::invalid("corpus_stats", "no utterances"));
    }
    let mut phone_freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut length_hist = BTreeMap::new();
    let mut label_counts = BTreeMap::new();
    let mut total_tokens = 0;
    for u in utterances {
        for p in &u.phones {
            *phone_freq.entry(p.clone()).or_default() += 1;
        }
        *length_hist.entry(u.phones.len()).or_default() += 1;
        total_tokens += u.phones.len();
        if let Some(l) = &u.label {
            *label_counts.entry(l.clone()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = phone_freq.iter().map(|(p, &n)| (p.clone(), n)).collect();
    ranked.sort_by_key(|e| std::cmp::Reverse(e.1));
    ranked.truncate(top_k);
    Ok(CorpusStats {
        n_utterances: utterances.len(),
        total_tokens,
        phone_freq,
        top_k: ranked,
        length_hist,
        mean_length: total_tokens as f64 / utterances.len() as f64,
        label_counts,
    })
}

impl CorpusStats {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

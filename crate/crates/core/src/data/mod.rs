//! Corpus ingestion, vocabulary and labels, rebalancing, statistics and
//! synthetic data.

pub mod corpus;
pub mod labels;
pub mod rebalance;
pub mod stats;
pub mod synth;
pub mod vocab;

pub use corpus::{load_corpus, parse_corpus, save_corpus, Split, Utterance};
pub use labels::LabelMap;
pub use rebalance::{rebalance_splits, split_counts, RebalancePlan, Shift, SplitCounts};
pub use stats::{corpus_stats, CorpusStats};
pub use synth::{synthesize_corpus, SignatureKind, SynthCorpus, SynthSpec, SynthTask};
pub use vocab::{Encoded, PhoneVocab, CLS, MASK, N_SPECIALS, PAD, UNK};

/// Builds the vocabulary of `utterances` keeping phones seen `min_count`
/// times or more.
pub fn build_vocab(utterances: &[Utterance], min_count: usize) -> crate::Result<PhoneVocab> {
    PhoneVocab::build(utterances, min_count)
}

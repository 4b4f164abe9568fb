//! Seeded synthetic phone corpora with planted class signatures.
//!
//! A [`SynthTask`] fixes the phone inventory and each class's signature
//! n-grams from `task_seed`; [`SynthTask::sample`] then draws utterances from
//! a separate seed, so train, dev and test files share one task.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::corpus::Utterance;
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

const FILLER_PHONES: [&str; 42] = [
    "a", "e", "i", "o", "u", "y", "ə", "ɛ", "ɔ", "ɤ", "ɑ", "æ", "p", "t", "k", "b", "d", "g", "m", "n", "ŋ", "f", "s",
    "ʃ", "x", "h", "ɕ", "ʂ", "ʐ", "l", "ɻ", "j", "w", "ts", "tɕ", "ʈʂ", "pʰ", "tʰ", "kʰ", "tsʰ", "tɕʰ", "ʈʂʰ",
];

const RESERVED_PHONES: [&str; 22] = [
    "ɓ", "ɗ", "ʄ", "ɠ", "ʛ", "ʘ", "ǀ", "ǃ", "ǂ", "ǁ", "ɬ", "ɮ", "ʎ", "ɲ", "ɴ", "ʀ", "ʁ", "ħ", "ʕ", "ʡ", "ʢ", "ɦ",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignatureKind {
    /// Signature phones never occur as filler.
    #[default]
    Reserved,
    /// Signatures are ordered n-grams over the filler inventory.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    /// Size of the filler phone inventory.
    pub vocab_size: usize,
    /// Utterance lengths are uniform over `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub ngram: usize,
    /// Alternative signatures per class; each utterance plants one.
    pub variants: usize,
    pub signature: SignatureKind,
    /// Probability that each planted signature phone is replaced by filler.
    pub noise: f64,
    /// Filler phones favoured by each class, and how often filler is drawn
    /// from that subset instead of the whole inventory.
    pub topic_phones: usize,
    pub topic_rate: f64,
    /// Emit `-` labels (masked-phone pretraining text).
    pub unlabeled: bool,
    pub task_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 16,
            vocab_size: 24,
            min_len: 4,
            max_len: 8,
            ngram: 3,
            variants: 1,
            signature: SignatureKind::Reserved,
            noise: 0.0,
            topic_phones: 0,
            topic_rate: 0.0,
            unlabeled: false,
            task_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("per_class", self.per_class),
            ("vocab_size", self.vocab_size),
            ("ngram", self.ngram),
            ("variants", self.variants),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.min_len < self.ngram || self.max_len < self.min_len {
            return Err(Error::config("min_len", "need ngram <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.topic_rate) {
            return Err(Error::config("topic_rate", "must lie in [0, 1]"));
        }
        if self.topic_phones > self.vocab_size {
            return Err(Error::config("topic_phones", "cannot exceed vocab_size"));
        }
        if self.signature == SignatureKind::Shared {
            let distinct = (self.vocab_size as f64).powi(self.ngram as i32);
            if distinct < (2 * self.n_classes * self.variants) as f64 {
                return Err(Error::config("vocab_size", "too small for distinct shared signatures"));
            }
        }
        Ok(())
    }
}

fn phone_name(pool: &[&str], i: usize) -> String {
    let base = pool[i % pool.len()];
    match i / pool.len() {
        0 => base.to_string(),
        round => format!("{base}{}", round + 1),
    }
}

/// The fixed part of a synthetic task: inventory, topics and signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    spec: SynthSpec,
    filler: Vec<String>,
    topics: Vec<Vec<String>>,
    /// `signatures[class][variant]` is an n-gram.
    signatures: Vec<Vec<Vec<String>>>,
}

/// Sampled utterances with their generating class.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub utterances: Vec<Utterance>,
    pub classes: Vec<usize>,
}

impl SynthTask {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(spec.task_seed, "synth-task");
        let filler: Vec<String> = (0..spec.vocab_size).map(|i| phone_name(&FILLER_PHONES, i)).collect();

        let topics = (0..spec.n_classes)
            .map(|_| filler.choose_multiple(&mut rng, spec.topic_phones).cloned().collect())
            .collect();

        let mut signatures: Vec<Vec<Vec<String>>> = Vec::with_capacity(spec.n_classes);
        match spec.signature {
            SignatureKind::Reserved => {
                let mut next = 0;
                for _ in 0..spec.n_classes {
                    let mut class = Vec::with_capacity(spec.variants);
                    for _ in 0..spec.variants {
                        class.push(
                            (next..next + spec.ngram)
                                .map(|i| phone_name(&RESERVED_PHONES, i))
                                .collect(),
                        );
                        next += spec.ngram;
                    }
                    signatures.push(class);
                }
            }
            SignatureKind::Shared => {
                let mut used: Vec<Vec<String>> = Vec::new();
                for _ in 0..spec.n_classes {
                    let mut class = Vec::with_capacity(spec.variants);
                    while class.len() < spec.variants {
                        let gram: Vec<String> = (0..spec.ngram)
                            .map(|_| filler[rng.gen_range(0..filler.len())].clone())
                            .collect();
                        if !used.contains(&gram) {
                            used.push(gram.clone());
                            class.push(gram);
                        }
                    }
                    signatures.push(class);
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            filler,
            topics,
            signatures,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn signatures(&self, class: usize) -> &[Vec<String>] {
        &self.signatures[class]
    }

    pub fn label_name(&self, class: usize) -> String {
        let width = (self.spec.n_classes.max(2) - 1).to_string().len();
        format!("class{class:0width$}")
    }

    /// `per_class` utterances of every class in seeded random order. Ids
    /// carry the seed so corpora drawn with different seeds never collide.
    pub fn sample(&self, seed: u64) -> SynthCorpus {
        let spec = &self.spec;
        let mut rng = substream(seed, "synth");
        let mut order: Vec<usize> = (0..spec.n_classes)
            .flat_map(|c| std::iter::repeat_n(c, spec.per_class))
            .collect();
        order.shuffle(&mut rng);

        let mut utterances = Vec::with_capacity(order.len());
        for (i, &class) in order.iter().enumerate() {
            let phones = self.draw_phones(class, &mut rng);
            let label = (!spec.unlabeled).then(|| self.label_name(class));
            utterances.push(Utterance {
                id: format!("s{seed}-{i:05}"),
                phones,
                label,
                split: None,
            });
        }
        SynthCorpus {
            utterances,
            classes: order,
        }
    }

    fn draw_filler(&self, class: usize, rng: &mut Rng) -> String {
        let topic = &self.topics[class];
        if !topic.is_empty() && rng.gen::<f64>() < self.spec.topic_rate {
            topic[rng.gen_range(0..topic.len())].clone()
        } else {
            self.filler[rng.gen_range(0..self.filler.len())].clone()
        }
    }

    fn draw_phones(&self, class: usize, rng: &mut Rng) -> Vec<String> {
        let spec = &self.spec;
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut phones: Vec<String> = (0..len).map(|_| self.draw_filler(class, rng)).collect();
        let variant = &self.signatures[class][rng.gen_range(0..spec.variants)];
        let start = rng.gen_range(0..=len - spec.ngram);
        for (k, p) in variant.iter().enumerate() {
            phones[start + k] = if spec.noise > 0.0 && rng.gen::<f64>() < spec.noise {
                self.filler[rng.gen_range(0..self.filler.len())].clone()
            } else {
                p.clone()
            };
        }
        phones
    }

    /// Rule classifier: the class whose signatures occur most often in
    /// `phones`, ties to the lower class; `None` when nothing matches.
    pub fn oracle(&self, phones: &[String]) -> Option<usize> {
        let n = self.spec.ngram;
        let mut best: Option<(usize, usize)> = None;
        for (class, variants) in self.signatures.iter().enumerate() {
            let hits: usize = phones
                .windows(n)
                .filter(|w| variants.iter().any(|v| v.as_slice() == *w))
                .count();
            if hits > 0 && best.is_none_or(|(_, b)| hits > b) {
                best = Some((class, hits));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Convenience wrapper: build the task from `spec` and sample with `seed`.
pub fn synthesize_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    Ok(SynthTask::new(spec)?.sample(seed))
}

//! Phone vocabulary with fixed special tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::data::corpus::Utterance;
use crate::error::{Error, Result};
use crate::fsio;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
pub const N_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; N_SPECIALS] = ["<pad>", "<unk>", "<cls>", "<mask>"];

const HEADER_PREFIX: &str = "#pslu-vocab";

/// Bijection between phone strings and ids. Ids `0..4` are the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids for one utterance. `pad_mask[i]` is true where `ids[i] == PAD`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl Encoded {
    /// Right-pads with PAD up to `len`; longer sequences are unchanged.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.pad_mask.push(true);
        }
        self
    }
}

impl PhoneVocab {
    /// Specials followed by `phones` in the given order.
    pub fn from_tokens<I, S>(phones: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(phones.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("vocab token {t:?} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Data(format!("vocab token {t:?} appears twice")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Phones seen at least `min_count` times, most frequent first; ties
    /// are ordered by the token string.
    pub fn build(utterances: &[Utterance], min_count: usize) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::invalid("build_vocab", "no utterances"));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for u in utterances {
            for p in &u.phones {
                *freq.entry(p.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(p, n)| n >= min_count.max(1) && !SPECIAL_TOKENS.contains(&p))
            .collect();
        // stable sort keeps the lexicographic order from the BTreeMap for ties
        ranked.sort_by_key(|e| std::cmp::Reverse(e.1));
        Self::from_tokens(ranked.into_iter().map(|(p, _)| p))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn phones(&self) -> &[String] {
        &self.tokens[N_SPECIALS..]
    }

    pub fn encode(&self, phones: &[String]) -> Vec<usize> {
        phones.iter().map(|p| self.id(p)).collect()
    }

    /// `[CLS]` followed by phone ids, truncated to `max_len`.
    pub fn encode_utterance(&self, u: &Utterance, max_len: usize) -> Result<Encoded> {
        if max_len < 2 {
            return Err(Error::invalid("encode_utterance", "max_len must be at least 2"));
        }
        let mut ids = Vec::with_capacity((u.phones.len() + 1).min(max_len));
        ids.push(CLS);
        ids.extend(u.phones.iter().take(max_len - 1).map(|p| self.id(p)));
        let pad_mask = vec![false; ids.len()];
        Ok(Encoded { ids, pad_mask })
    }

    /// Phone strings for `ids`, dropping CLS and PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != CLS && id != PAD)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// Header line, then one phone per line; line `n` after the header
    /// holds id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{HEADER_PREFIX} offset={N_SPECIALS} specials={}\n", SPECIAL_TOKENS.join(","));
        for t in self.phones() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let expected = format!("{HEADER_PREFIX} offset={N_SPECIALS} ");
        if !header.starts_with(&expected) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 1,
                msg: format!("expected header starting with `{}`", expected.trim_end()),
            });
        }
        Self::from_tokens(lines.map(str::to_string)).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsio::read_to_string(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_occupy_fixed_ids() {
        let v = PhoneVocab::from_tokens(["a"]).unwrap();
        for (id, t) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), id);
        }
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn duplicate_tokens_are_rejected() {
        assert!(PhoneVocab::from_tokens(["a", "a"]).is_err());
    }
}

//! Tab-separated phone-transcript corpora.
//!
//! One record per line: `id<TAB>label<TAB>phones[<TAB>split]`. Phones are
//! separated by single spaces; a label of `-` marks unlabeled text.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, dev or test)")),
        }
    }
}

/// One transcript. `phones` is never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub phones: Vec<String>,
    pub label: Option<String>,
    pub split: Option<Split>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, phones: &str, label: Option<&str>) -> Result<Self> {
        let id = id.into();
        let phones = split_phones(phones).map_err(|msg| Error::Data(format!("utterance {id}: {msg}")))?;
        Ok(Self {
            id,
            phones,
            label: label.map(str::to_string),
            split: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }
}

fn split_phones(field: &str) -> std::result::Result<Vec<String>, String> {
    if field.is_empty() {
        return Err("empty phone field".into());
    }
    let phones: Vec<String> = field.split(' ').map(str::to_string).collect();
    if phones.iter().any(String::is_empty) {
        return Err("empty phone token (phones are separated by single spaces)".into());
    }
    Ok(phones)
}

/// Parses corpus text; `origin` names the source in error messages.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<Utterance>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(parse_err(
                line_no,
                format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(parse_err(line_no, "empty utterance id".into()));
        }
        let label = match fields[1] {
            "" => return Err(parse_err(line_no, "empty label field (use `-` for unlabeled)".into())),
            "-" => None,
            l => Some(l.to_string()),
        };
        let phones = split_phones(fields[2]).map_err(|m| parse_err(line_no, m))?;
        let split = match fields.get(3) {
            Some(s) => Some(s.parse::<Split>().map_err(|m| parse_err(line_no, m))?),
            None => None,
        };
        out.push(Utterance {
            id: id.to_string(),
            phones,
            label,
            split,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyFile(origin.to_string()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let text = fsio::read_to_string(path)?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn format_corpus(utterances: &[Utterance]) -> String {
    let mut s = String::new();
    for u in utterances {
        s.push_str(&u.id);
        s.push('\t');
        s.push_str(u.label.as_deref().unwrap_or("-"));
        s.push('\t');
        s.push_str(&u.phones.join(" "));
        if let Some(split) = u.split {
            s.push('\t');
            s.push_str(split.as_str());
        }
        s.push('\n');
    }
    s
}

pub fn save_corpus(path: &Path, utterances: &[Utterance]) -> Result<()> {
    fsio::write_atomic(path, format_corpus(utterances).as_bytes())
}

/// Fails if an id is assigned to more than one split.
pub fn check_split_disjoint(utterances: &[Utterance]) -> Result<()> {
    let mut seen: std::collections::HashMap<&str, Option<Split>> = Default::default();
    for u in utterances {
        if let Some(prev) = seen.insert(&u.id, u.split) {
            if prev != u.split {
                return Err(Error::Data(format!("utterance {} appears in more than one split", u.id)));
            }
        }
    }
    Ok(())
}

pub fn check_unique_ids(utterances: &[Utterance]) -> Result<()> {
    let mut seen = HashSet::new();
    for u in utterances {
        if !seen.insert(u.id.as_str()) {
            return Err(Error::Data(format!("duplicate utterance id {}", u.id)));
        }
    }
    Ok(())
}

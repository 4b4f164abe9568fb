//! Intent names to contiguous class ids.

use std::collections::{BTreeSet, HashMap};

use crate::data::corpus::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    /// Ids follow the order of `names`.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("label map needs at least one label".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (id, n) in names.iter().enumerate() {
            if index.insert(n.clone(), id).is_some() {
                return Err(Error::Data(format!("label `{n}` listed twice")));
            }
        }
        Ok(Self { names, index })
    }

    /// Every label present in `utterances`, sorted by name.
    pub fn from_utterances(utterances: &[Utterance]) -> Result<Self> {
        let names: BTreeSet<&str> = utterances.iter().filter_map(|u| u.label.as_deref()).collect();
        if names.is_empty() {
            return Err(Error::Data("corpus has no labeled utterances".into()));
        }
        Self::new(names.into_iter().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Class id for each utterance; unlabeled or unknown labels are errors.
    pub fn encode(&self, utterances: &[Utterance]) -> Result<Vec<usize>> {
        utterances
            .iter()
            .map(|u| {
                let label = u
                    .label
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("utterance {} has no label", u.id)))?;
                self.id(label)
                    .ok_or_else(|| Error::Data(format!("utterance {}: unknown label `{label}`", u.id)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_contiguous_and_sorted() {
        let utts = vec![
            Utterance::new("1", "a", Some("Weather")).unwrap(),
            Utterance::new("2", "a", Some("Music")).unwrap(),
            Utterance::new("3", "a", Some("Weather")).unwrap(),
        ];
        let m = LabelMap::from_utterances(&utts).unwrap();
        assert_eq!(m.names(), ["Music", "Weather"]);
        assert_eq!(m.encode(&utts).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let m = LabelMap::new(vec!["A".into()]).unwrap();
        let utts = vec![Utterance::new("1", "a", Some("B")).unwrap()];
        assert!(m.encode(&utts).is_err());
    }
}

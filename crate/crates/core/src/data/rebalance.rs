//! Deterministic per-label, per-split rebalancing.
//!
//! A [`RebalancePlan`] is applied in four stages: drop excluded ids, rename
//! labels, move seeded samples between splits, then down- or up-sample each
//! (label, split) cell to its target count. Upsampling duplicates records
//! from the same cell, so no id ever crosses a split boundary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{check_unique_ids, Split, Utterance};
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut usize {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

/// Moves `count` randomly chosen `label` records from one split to another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub label: String,
    pub from: Split,
    pub to: Split,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RebalancePlan {
    /// Old label name to new name; several old names may merge into one.
    pub label_names: BTreeMap<String, String>,
    pub exclude_ids: Vec<String>,
    pub shift: Vec<Shift>,
    /// Final count per (renamed) label and split.
    pub targets: BTreeMap<String, SplitCounts>,
}

impl RebalancePlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Count of records per label and split.
pub fn split_counts(utterances: &[Utterance]) -> BTreeMap<String, SplitCounts> {
    let mut out: BTreeMap<String, SplitCounts> = BTreeMap::new();
    for u in utterances {
        if let (Some(label), Some(split)) = (&u.label, u.split) {
            *out.entry(label.clone()).or_default().get_mut(split) += 1;
        }
    }
    out
}

/// Applies `plan` under `seed`. Output is ordered by split, then label, then
/// input order, with duplicates after the originals of their cell.
pub fn rebalance_splits(utterances: &[Utterance], plan: &RebalancePlan, seed: u64) -> Result<Vec<Utterance>> {
    check_unique_ids(utterances)?;
    let excluded: HashSet<&str> = plan.exclude_ids.iter().map(String::as_str).collect();
    let position: HashMap<&str, usize> = utterances.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();

    // (label, split) -> records in input order
    let mut cells: BTreeMap<(String, Split), Vec<Utterance>> = BTreeMap::new();
    for u in utterances.iter().filter(|u| !excluded.contains(u.id.as_str())) {
        let label = u
            .label
            .as_deref()
            .ok_or_else(|| Error::Data(format!("utterance {} has no label", u.id)))?;
        let split = u
            .split
            .ok_or_else(|| Error::Data(format!("utterance {} has no split column", u.id)))?;
        let label = plan.label_names.get(label).map(String::as_str).unwrap_or(label);
        let mut u = u.clone();
        u.label = Some(label.to_string());
        cells.entry((label.to_string(), split)).or_default().push(u);
    }

    let present: HashSet<&str> = cells.keys().map(|(l, _)| l.as_str()).collect();
    if let Some(missing) = plan.targets.keys().find(|l| !present.contains(l.as_str())) {
        return Err(Error::Data(format!("label `{missing}` is absent from the corpus")));
    }
    if let Some(extra) = present.iter().find(|l| !plan.targets.contains_key(**l)) {
        return Err(Error::Data(format!("label `{extra}` has no target counts")));
    }

    let mut rng = substream(seed, "rebalance");

    for s in &plan.shift {
        if s.from == s.to {
            return Err(Error::config("shift", format!("{}: source and destination are both {}", s.label, s.from)));
        }
        let pool = cells.entry((s.label.clone(), s.from)).or_default();
        if s.count > pool.len() {
            return Err(Error::Data(format!(
                "cannot shift {} `{}` records from {} (only {} available)",
                s.count,
                s.label,
                s.from,
                pool.len()
            )));
        }
        let mut chosen = index::sample(&mut rng, pool.len(), s.count).into_vec();
        chosen.sort_unstable();
        let mut moved = Vec::with_capacity(s.count);
        for &i in chosen.iter().rev() {
            moved.push(pool.remove(i));
        }
        moved.reverse();
        let dest = cells.entry((s.label.clone(), s.to)).or_default();
        for mut u in moved {
            u.split = Some(s.to);
            dest.push(u);
        }
        // keep destination cells in input order regardless of shift history
        dest.sort_by_key(|u| position[u.id.as_str()]);
    }

    let mut out = Vec::new();
    for split in Split::ALL {
        for (label, counts) in &plan.targets {
            let pool = cells.remove(&(label.clone(), split)).unwrap_or_default();
            let target = counts.get(split);
            out.extend(resample(pool, target, label, split, &mut rng)?);
        }
    }
    Ok(out)
}

fn resample(
    pool: Vec<Utterance>,
    target: usize,
    label: &str,
    split: Split,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<Utterance>> {
    let n = pool.len();
    if target <= n {
        let mut keep = index::sample(rng, n, target).into_vec();
        keep.sort_unstable();
        let mut pool: Vec<Option<Utterance>> = pool.into_iter().map(Some).collect();
        return Ok(keep.into_iter().filter_map(|i| pool[i].take()).collect());
    }
    if n == 0 {
        return Err(Error::Data(format!(
            "cannot upsample `{label}` in {split} to {target}: no records to duplicate"
        )));
    }
    // cycle through a shuffled pool so duplicates spread evenly
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = pool.clone();
    for k in 0..target - n {
        let mut dup = pool[order[k % n]].clone();
        dup.id = format!("{}~dup{}", dup.id, k / n + 1);
        out.push(dup);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(cells: &[(&str, Split, usize)]) -> Vec<Utterance> {
        let mut out = Vec::new();
        for &(label, split, n) in cells {
            for i in 0..n {
                out.push(
                    Utterance::new(format!("{label}-{split}-{i}"), "a b", Some(label))
                        .unwrap()
                        .with_split(split),
                );
            }
        }
        out
    }

    #[test]
    fn upsampling_duplicates_within_the_cell() {
        let utts = corpus(&[("A", Split::Train, 3)]);
        let plan = RebalancePlan {
            targets: [("A".to_string(), SplitCounts { train: 7, dev: 0, test: 0 })].into(),
            ..Default::default()
        };
        let out = rebalance_splits(&utts, &plan, 0).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|u| u.split == Some(Split::Train)));
        let unique: HashSet<&str> = out.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(unique.len(), 7);
    }

    #[test]
    fn shift_more_than_available_is_rejected() {
        let utts = corpus(&[("A", Split::Test, 2)]);
        let plan = RebalancePlan {
            shift: vec![Shift {
                label: "A".into(),
                from: Split::Test,
                to: Split::Train,
                count: 3,
            }],
            targets: [("A".to_string(), SplitCounts::default())].into(),
            ..Default::default()
        };
        assert!(rebalance_splits(&utts, &plan, 0).is_err());
    }
}

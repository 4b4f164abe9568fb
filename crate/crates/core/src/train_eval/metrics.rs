//! Accuracy, per-class precision/recall/F1 and macro averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `TP / (TP + ½(FP + FN))`; zero when all three counts are zero.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
    if denom == 0.0 {
        0.0
    } else {
        tp as f64 / denom
    }
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion matrix indexed `[gold][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub matrix: Vec<Vec<usize>>,
}

impl ConfusionCounts {
    pub fn new(predictions: &[usize], gold: &[usize], n_classes: usize) -> Result<Self> {
        if predictions.len() != gold.len() {
            return Err(Error::invalid(
                "evaluate",
                format!("{} predictions for {} gold labels", predictions.len(), gold.len()),
            ));
        }
        if n_classes == 0 {
            return Err(Error::invalid("evaluate", "n_classes must be positive"));
        }
        let mut matrix = vec![vec![0; n_classes]; n_classes];
        for (&p, &g) in predictions.iter().zip(gold) {
            for c in [p, g] {
                if c >= n_classes {
                    return Err(Error::TargetOutOfRange {
                        target: c,
                        classes: n_classes,
                    });
                }
            }
            matrix[g][p] += 1;
        }
        Ok(Self { matrix })
    }

    pub fn n_classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn n(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.n_classes()).map(|c| self.matrix[c][c]).sum()
    }

    pub fn tp(&self, c: usize) -> usize {
        self.matrix[c][c]
    }

    pub fn fp(&self, c: usize) -> usize {
        (0..self.n_classes()).filter(|&g| g != c).map(|g| self.matrix[g][c]).sum()
    }

    pub fn fn_(&self, c: usize) -> usize {
        (0..self.n_classes()).filter(|&p| p != c).map(|p| self.matrix[c][p]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold instances of this class.
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub macro_avg: MacroAverage,
    pub accuracy: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let classes: Vec<ClassReport> = (0..counts.n_classes())
            .map(|c| {
                let (tp, fp, fn_) = (counts.tp(c), counts.fp(c), counts.fn_(c));
                ClassReport {
                    label: c.to_string(),
                    precision: ratio(tp, tp + fp),
                    recall: ratio(tp, tp + fn_),
                    f1: f1_score(tp, fp, fn_),
                    support: tp + fn_,
                    tp,
                    fp,
                    fn_,
                }
            })
            .collect();
        let avg = |f: fn(&ClassReport) -> f64| macro_average(&classes.iter().map(f).collect::<Vec<_>>());
        let macro_avg = MacroAverage {
            precision: avg(|c| c.precision),
            recall: avg(|c| c.recall),
            f1: avg(|c| c.f1),
        };
        Self {
            macro_avg,
            accuracy: ratio(counts.correct(), counts.n()),
            n: counts.n(),
            classes,
        }
    }

    /// Replaces numeric class labels with names.
    pub fn with_label_names(mut self, names: &[String]) -> Self {
        for (row, name) in self.classes.iter_mut().zip(names) {
            row.label = name.clone();
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Scores `predictions` against `gold` over classes `0..n_classes`.
pub fn evaluate(predictions: &[usize], gold: &[usize], n_classes: usize) -> Result<EvalReport> {
    Ok(EvalReport::from_counts(&ConfusionCounts::new(predictions, gold, n_classes)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_class_scores_zero_but_counts_in_macro() {
        let r = evaluate(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(r.classes[2].f1, 0.0);
        assert!((r.macro_avg.f1 - 2.0 / 3.0).abs() < 1e-15);
    }
}

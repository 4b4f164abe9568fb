//! Optimizer, fine-tuning loop, prediction and evaluation metrics.

pub mod finetune;
pub mod metrics;
pub mod optim;

pub use finetune::{argmax, finetune, predict, predict_logits, EpochRecord, Example, FinetuneOutcome, TrainConfig};
pub use metrics::{evaluate, f1_score, macro_average, ClassReport, ConfusionCounts, EvalReport, MacroAverage};
pub use optim::{Adam, AdamConfig};

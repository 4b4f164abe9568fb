//! Intent fine-tuning with dev-set model selection, and prediction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardCtx, SequenceModel};
use crate::numerics::{Graph, Real, Var};
use crate::rng::{substream, Rng};
use crate::train_eval::metrics::evaluate;
use crate::train_eval::optim::{Adam, AdamConfig};

/// One encoded utterance and its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a strictly higher dev macro-F1.
    pub patience: Option<usize>,
    /// Stop once training accuracy (eval mode) reaches this value.
    pub target_train_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            patience: None,
            target_train_accuracy: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if let Some(a) = self.target_train_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("target_train_accuracy", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
    pub dev_macro_f1: f64,
    pub train_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights the model holds on return; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
}

impl FinetuneOutcome {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.history[e - 1])
    }

    /// `epoch,train_loss,dev_acc,dev_macro_f1` rows.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_acc,dev_macro_f1\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.dev_acc, r.dev_macro_f1));
        }
        s
    }
}

/// One optimizer step on the loss built by `loss_fn`. Returns the loss and
/// hands back the dropout stream.
pub(crate) fn optimize_step<T, M, F>(
    model: &mut M,
    adam: &mut Adam,
    dropout: Rng,
    step: usize,
    loss_fn: F,
) -> Result<(f64, Rng)>
where
    T: Real,
    M: SequenceModel<T>,
    F: FnOnce(&M, &mut Graph<T>, &[Var], &mut ForwardCtx<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let mut ctx = ForwardCtx::train(dropout);
    let loss_var = loss_fn(model, &mut g, &vars, &mut ctx).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    })?;
    let loss = g.value(loss_var).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    let mut grads = g.backward(loss_var);
    model.params_mut().collect_grads(&mut grads, &vars);
    adam.step(model.params_mut())?;
    model.params_mut().zero_grads();
    model.absorb_batch_stats(&mut ctx);
    let rng = ctx.into_rng().expect("training context owns a dropout stream");
    Ok((loss, rng))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode logits for each sequence.
pub fn predict_logits<T: Real, M: SequenceModel<T>>(model: &M, seqs: &[Vec<usize>]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let vars = model.params().bind_constants(&mut g);
        let batch: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let logits = model.classify_batch(&mut g, &vars, &batch, &mut ForwardCtx::eval())?;
        let c = model.n_classes();
        out.extend(g.value(logits).data().chunks(c).map(<[T]>::to_vec));
    }
    Ok(out)
}

pub fn predict<T: Real, M: SequenceModel<T>>(model: &M, seqs: &[Vec<usize>]) -> Result<Vec<usize>> {
    Ok(predict_logits(model, seqs)?.iter().map(|r| argmax(r)).collect())
}

fn split_examples(examples: &[Example]) -> (Vec<Vec<usize>>, Vec<usize>) {
    examples.iter().map(|e| (e.ids.clone(), e.label)).unzip()
}

/// Trains on `train` with cross-entropy, scores `dev` after every epoch and
/// leaves `model` holding the weights of the last epoch with the highest
/// dev macro-F1.
pub fn finetune<T: Real, M: SequenceModel<T>>(
    model: &mut M,
    train: &[Example],
    dev: &[Example],
    optimizer: &AdamConfig,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("dev split is empty".into()));
    }
    let n_classes = model.n_classes();
    if let Some(e) = train.iter().chain(dev).find(|e| e.label >= n_classes) {
        return Err(Error::TargetOutOfRange {
            target: e.label,
            classes: n_classes,
        });
    }

    let mut adam = Adam::new(optimizer.clone(), model.params())?;
    let mut shuffle = substream(config.seed, "shuffle");
    let mut dropout = substream(config.seed, "dropout");
    let (dev_ids, dev_gold) = split_examples(dev);
    let (train_ids, train_gold) = split_examples(train);

    let mut outcome = FinetuneOutcome::default();
    let mut best: Option<(f64, crate::params::ParamSet<T>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| train[i].ids.as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let (loss, rng) = optimize_step(model, &mut adam, dropout, step, |m, g, vars, ctx| {
                let logits = m.classify_batch(g, vars, &seqs, ctx)?;
                g.cross_entropy(logits, &targets)
            })?;
            dropout = rng;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;

        let report = evaluate(&predict(model, &dev_ids)?, &dev_gold, n_classes)?;
        let train_acc = match config.target_train_accuracy {
            Some(_) => Some(evaluate(&predict(model, &train_ids)?, &train_gold, n_classes)?.accuracy),
            None => None,
        };
        tracing::info!(
            epoch,
            train_loss,
            dev_acc = report.accuracy,
            dev_macro_f1 = report.macro_avg.f1,
            "finetune epoch"
        );
        outcome.history.push(EpochRecord {
            epoch,
            train_loss,
            dev_acc: report.accuracy,
            dev_macro_f1: report.macro_avg.f1,
            train_acc,
        });

        let prev = best.as_ref().map(|(f1, _)| *f1);
        if prev.is_none_or(|f1| report.macro_avg.f1 >= f1) {
            // Patience counts epochs without strict improvement.
            if prev.is_none_or(|f1| report.macro_avg.f1 > f1) {
                since_best = 0;
            } else {
                since_best += 1;
            }
            best = Some((report.macro_avg.f1, model.params().clone()));
            outcome.best_epoch = Some(epoch);
        } else {
            since_best += 1;
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
        if let (Some(target), Some(acc)) = (config.target_train_accuracy, train_acc) {
            if acc >= target {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(outcome)
}

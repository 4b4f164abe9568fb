//! Masked-phone pretraining with dynamic masking.
//!
//! Every call to [`dynamic_mask`] draws a fresh mask, so each epoch sees a
//! different corruption of the same corpus.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{MASK, N_SPECIALS};
use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::numerics::Real;
use crate::rng::{substream, Rng};
use crate::train_eval::finetune::optimize_step;
use crate::train_eval::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    /// Probability that each maskable position becomes a target.
    pub mask_rate: f64,
    /// Of the targets: fraction replaced by MASK, by a random phone, or kept.
    pub replace_mask_frac: f64,
    pub replace_random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            replace_mask_frac: 0.8,
            replace_random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config("mask_rate", "must lie in [0, 1]"));
        }
        let fracs = [self.replace_mask_frac, self.replace_random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::config("replace_mask_frac", "fractions must be nonnegative"));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("keep_frac", "mask, random and keep fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Corrupted sequences with their prediction targets. `positions[i]` and
/// `originals[i]` are parallel and sorted by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub corrupted: Vec<Vec<usize>>,
    pub positions: Vec<Vec<usize>>,
    pub originals: Vec<Vec<usize>>,
}

impl MaskedBatch {
    pub fn n_targets(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

/// Phone ids are maskable; special tokens (PAD, UNK, CLS, MASK) are not.
pub fn is_maskable(id: usize) -> bool {
    id >= N_SPECIALS
}

pub fn dynamic_mask(batch: &[Vec<usize>], policy: &MaskingPolicy, vocab_size: usize, rng: &mut Rng) -> Result<MaskedBatch> {
    policy.validate()?;
    if policy.replace_random_frac > 0.0 && vocab_size <= N_SPECIALS {
        return Err(Error::invalid("dynamic_mask", "random replacement needs at least one phone"));
    }
    let mut out = MaskedBatch {
        corrupted: Vec::with_capacity(batch.len()),
        positions: Vec::with_capacity(batch.len()),
        originals: Vec::with_capacity(batch.len()),
    };
    let mask_cut = policy.replace_mask_frac;
    let random_cut = mask_cut + policy.replace_random_frac;
    for seq in batch {
        let mut corrupted = seq.clone();
        let mut positions = Vec::new();
        let mut originals = Vec::new();
        for (i, &id) in seq.iter().enumerate() {
            if !is_maskable(id) || !(rng.gen::<f64>() < policy.mask_rate) {
                continue;
            }
            positions.push(i);
            originals.push(id);
            let u: f64 = rng.gen();
            if u < mask_cut {
                corrupted[i] = MASK;
            } else if u < random_cut {
                corrupted[i] = rng.gen_range(N_SPECIALS..vocab_size);
            }
        }
        out.corrupted.push(corrupted);
        out.positions.push(positions);
        out.originals.push(originals);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            max_steps: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainOutcome {
    /// `(step, loss)` for every optimizer step; steps count from 0.
    pub loss_curve: Vec<(usize, f64)>,
    /// Mean loss over each epoch's steps.
    pub epoch_losses: Vec<f64>,
}

impl PretrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.loss_curve {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

/// Minimises masked-phone cross-entropy over `corpus` (encoded sequences).
/// Batches whose mask selects no position are skipped.
pub fn pretrain<T: Real, M: SequenceModel<T>>(
    model: &mut M,
    corpus: &[Vec<usize>],
    policy: &MaskingPolicy,
    optimizer: &AdamConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    policy.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut adam = Adam::new(optimizer.clone(), model.params())?;
    let mut shuffle = substream(config.seed, "shuffle");
    let mut masking = substream(config.seed, "masking");
    let mut dropout = substream(config.seed, "dropout");
    let vocab_size = model.vocab_size();

    let mut outcome = PretrainOutcome::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let masked = dynamic_mask(&batch, policy, vocab_size, &mut masking)?;
            if masked.n_targets() == 0 {
                continue;
            }
            let targets: Vec<usize> = masked.originals.iter().flatten().copied().collect();
            let seqs: Vec<&[usize]> = masked.corrupted.iter().map(Vec::as_slice).collect();
            let (loss, rng) = optimize_step(model, &mut adam, dropout, step, |m, g, vars, ctx| {
                let logits = m.mlm_batch(g, vars, &seqs, &masked.positions, ctx)?;
                g.cross_entropy(logits, &targets)
            })?;
            dropout = rng;
            outcome.loss_curve.push((step, loss));
            epoch_sum += loss;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps > 0 {
            let mean = epoch_sum / epoch_steps as f64;
            tracing::info!(epoch, mean_loss = mean, steps = step, "pretrain epoch");
            outcome.epoch_losses.push(mean);
        }
        if config.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    Ok(outcome)
}

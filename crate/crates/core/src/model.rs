//! Shared model interface and the per-step forward context.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, BaselineModel};
use crate::error::Result;
use crate::numerics::{BatchStats, Graph, Real, Var};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::transformer::{EncoderModel, TransformerConfig};

/// Std of the masked-phone heads and the transformer classifier at init, so
/// the first losses sit near ln(outputs) whatever the encoder produces.
pub const HEAD_INIT_STD: f64 = 0.02;

/// State threaded through one forward pass: train/eval mode, the dropout
/// stream, and batch-norm statistics observed in training mode.
#[derive(Debug)]
pub struct ForwardCtx<T: Real> {
    training: bool,
    dropout_rng: Option<Rng>,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnUpdate<T: Real> {
    pub mean_idx: usize,
    pub var_idx: usize,
    pub stats: BatchStats<T>,
}

impl<T: Real> ForwardCtx<T> {
    /// Inference: dropout off, batch norm uses running statistics.
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training with dropout drawn from `rng`.
    pub fn train(rng: Rng) -> Self {
        Self {
            training: true,
            dropout_rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    /// Training-mode normalisation with dropout disabled; used for gradient
    /// checks where the forward pass must be a deterministic function.
    pub fn train_deterministic() -> Self {
        Self {
            training: true,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn into_rng(self) -> Option<Rng> {
        self.dropout_rng
    }

    /// Inverted dropout; identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| self.training && rate > 0.0) else {
            return Ok(x);
        };
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = (0..g.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        g.mul_const(x, mask)
    }
}

/// A sequence classifier that can also be pretrained with masked-token
/// prediction.
pub trait SequenceModel<T: Real> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    fn vocab_size(&self) -> usize;
    fn n_classes(&self) -> usize;

    /// Class logits for each sequence, stacked into a `batch × n_classes` matrix.
    fn classify_batch(&self, g: &mut Graph<T>, vars: &[Var], batch: &[&[usize]], ctx: &mut ForwardCtx<T>)
        -> Result<Var>;

    /// Vocabulary logits at the requested positions of each sequence,
    /// stacked in batch order into a `Σ|positions| × vocab_size` matrix.
    fn mlm_batch(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[&[usize]],
        positions: &[Vec<usize>],
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var>;

    /// Folds statistics gathered during a training forward pass into any
    /// running estimates the model keeps.
    fn absorb_batch_stats(&mut self, _ctx: &mut ForwardCtx<T>) {}

    /// Eval-mode logits for a single sequence.
    fn logits(&self, ids: &[usize]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.params().bind_constants(&mut g);
        let out = self.classify_batch(&mut g, &vars, &[ids], &mut ForwardCtx::eval())?;
        Ok(g.value(out).data().to_vec())
    }
}

impl<T: Real> ParamSet<T> {
    /// Binds every tensor as a constant (no gradient tracking).
    pub fn bind_constants(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.iter().map(|p| g.constant(p.tensor.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Baseline,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Transformer => f.write_str("transformer"),
            ModelKind::Baseline => f.write_str("baseline"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Baseline(BaselineConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Transformer(_) => ModelKind::Transformer,
            ModelConfig::Baseline(_) => ModelKind::Baseline,
        }
    }

    pub fn with_sizes(mut self, vocab_size: usize, n_classes: usize) -> Self {
        match &mut self {
            ModelConfig::Transformer(c) => {
                c.vocab_size = vocab_size;
                c.n_classes = n_classes;
            }
            ModelConfig::Baseline(c) => {
                c.vocab_size = vocab_size;
                c.n_classes = n_classes;
            }
        }
        self
    }

    pub fn max_seq_len(&self) -> Option<usize> {
        match self {
            ModelConfig::Transformer(c) => Some(c.max_seq_len),
            ModelConfig::Baseline(_) => None,
        }
    }
}

/// Either model family behind one type.
#[derive(Debug, Clone)]
pub enum Model<T: Real> {
    Transformer(EncoderModel<T>),
    Baseline(BaselineModel<T>),
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match config {
            ModelConfig::Transformer(c) => Model::Transformer(EncoderModel::new(c.clone(), rng)?),
            ModelConfig::Baseline(c) => Model::Baseline(BaselineModel::new(c.clone(), rng)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Transformer(m) => ModelConfig::Transformer(m.config().clone()),
            Model::Baseline(m) => ModelConfig::Baseline(m.config().clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind()
    }

    /// Re-creates the classifier head for `n_classes` outputs, keeping every
    /// other parameter. Used when fine-tuning from a pretrained checkpoint.
    pub fn reset_classifier(&mut self, n_classes: usize, rng: &mut Rng) -> Result<()> {
        match self {
            Model::Transformer(m) => m.reset_classifier(n_classes, rng),
            Model::Baseline(m) => m.reset_classifier(n_classes, rng),
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        match self {
            Model::Transformer(m) => Model::Transformer(m.cast()),
            Model::Baseline(m) => Model::Baseline(m.cast()),
        }
    }
}

impl<T: Real> SequenceModel<T> for Model<T> {
    fn params(&self) -> &ParamSet<T> {
        match self {
            Model::Transformer(m) => m.params(),
            Model::Baseline(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Model::Transformer(m) => m.params_mut(),
            Model::Baseline(m) => m.params_mut(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            Model::Transformer(m) => m.vocab_size(),
            Model::Baseline(m) => m.vocab_size(),
        }
    }

    fn n_classes(&self) -> usize {
        match self {
            Model::Transformer(m) => m.n_classes(),
            Model::Baseline(m) => m.n_classes(),
        }
    }

    fn classify_batch(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[&[usize]],
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        match self {
            Model::Transformer(m) => m.classify_batch(g, vars, batch, ctx),
            Model::Baseline(m) => m.classify_batch(g, vars, batch, ctx),
        }
    }

    fn mlm_batch(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[&[usize]],
        positions: &[Vec<usize>],
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        match self {
            Model::Transformer(m) => m.mlm_batch(g, vars, batch, positions, ctx),
            Model::Baseline(m) => m.mlm_batch(g, vars, batch, positions, ctx),
        }
    }

    fn absorb_batch_stats(&mut self, ctx: &mut ForwardCtx<T>) {
        match self {
            Model::Transformer(m) => m.absorb_batch_stats(ctx),
            Model::Baseline(m) => m.absorb_batch_stats(ctx),
        }
    }
}

/// Checks token ids against the vocabulary.
pub(crate) fn check_ids(ids: &[usize], vocab_size: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(crate::Error::invalid("forward", "empty token sequence"));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(crate::Error::TokenOutOfRange { id, vocab_size });
    }
    Ok(())
}

pub(crate) fn check_positions(positions: &[usize], len: usize) -> Result<()> {
    if positions.is_empty() {
        return Err(crate::Error::invalid("mlm_forward", "no target positions"));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= len) {
        return Err(crate::Error::invalid(
            "mlm_forward",
            format!("target position {p} outside sequence of length {len}"),
        ));
    }
    Ok(())
}

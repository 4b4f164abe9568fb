//! Transformer encoder over phone ids with classification and masked-phone heads.
//!
//! Layers use the post-norm arrangement
//!
//! ```text
//! y   = LayerNorm(x + Dropout(MultiHead(x)))
//! out = LayerNorm(y + Dropout(FFN(y)))
//! FFN(y) = ReLU(y W1 + b1) W2 + b2
//! ```
//!
//! with learned position embeddings added to the token embeddings. The
//! classifier reads the hidden state of the leading CLS token (or the mean
//! over positions) and the masked-phone head projects every selected
//! position onto the vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_ids, check_positions, ForwardCtx, SequenceModel, HEAD_INIT_STD};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::params::ParamSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state at position 0 (the prepended CLS token).
    #[default]
    Cls,
    /// Mean of all hidden states.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
    pub layer_norm_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_layers: 4,
            max_seq_len: 128,
            n_classes: 4,
            dropout_rate: 0.1,
            pooling: Pooling::Cls,
            layer_norm_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("layer_norm_eps", "must be positive"));
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, c) = (self.vocab_size, self.d_model, self.d_ff, self.n_classes);
        let embeddings = v * d + self.max_seq_len * d;
        // 3 projections of d×d_k per head (= 3d²) plus the d×d output projection
        let attention = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let norms = 4 * d;
        let heads = (d * c + c) + (d * v + v);
        embeddings + self.n_layers * (attention + ffn + norms) + heads
    }
}

/// Graph handles to one layer's attention parameters.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
}

/// Graph handles to one layer's position-wise feed-forward parameters.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attention: AttentionWeights,
    pub ffn: FfnWeights,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    /// `T_q × T_k` attention distribution.
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k) V`, with `pad_mask[j] == true` excluding key `j`.
pub fn scaled_dot_product_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    pad_mask: Option<&[bool]>,
) -> Result<Attention> {
    let (_, dq) = g.value(q).dims2()?;
    let (tk, dk) = g.value(k).dims2()?;
    let (tv, _) = g.value(v).dims2()?;
    if dq != dk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: g.shape(q).to_vec(),
            right: g.shape(k).to_vec(),
        });
    }
    if tk != tv {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: g.shape(k).to_vec(),
            right: g.shape(v).to_vec(),
        });
    }
    if let Some(mask) = pad_mask {
        if mask.len() != tk {
            return Err(Error::invalid(
                "attention",
                format!("mask has {} entries for {tk} keys", mask.len()),
            ));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::AllKeysMasked);
        }
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::lit(1.0 / (dk as f64).sqrt()))?;
    let weights = g.softmax_masked(scaled, 1, pad_mask)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// Self-attention with one projection triple per head; head outputs are
/// concatenated and projected by `w_o`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttentionWeights,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(w.w_q.len());
    for ((&wq, &wk), &wv) in w.w_q.iter().zip(&w.w_k).zip(&w.w_v) {
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        heads.push(scaled_dot_product_attention(g, q, k, v, pad_mask)?.output);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(concat, w.w_o)
}

pub fn feed_forward<T: Real>(g: &mut Graph<T>, x: Var, w: &FfnWeights) -> Result<Var> {
    let h = g.matmul(x, w.w1)?;
    let h = g.add_row_bias(h, w.b1)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, w.w2)?;
    g.add_row_bias(out, w.b2)
}

pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: &LayerWeights,
    pad_mask: Option<&[bool]>,
    eps: f64,
    dropout_rate: f64,
    ctx: &mut ForwardCtx<T>,
) -> Result<Var> {
    let attn = multi_head_attention(g, x, &w.attention, pad_mask)?;
    let attn = ctx.dropout(g, attn, dropout_rate)?;
    let y = g.add(x, attn)?;
    let y = g.layer_norm(y, w.ln1.0, w.ln1.1, T::lit(eps))?;
    let ff = feed_forward(g, y, &w.ffn)?;
    let ff = ctx.dropout(g, ff, dropout_rate)?;
    let out = g.add(y, ff)?;
    g.layer_norm(out, w.ln2.0, w.ln2.1, T::lit(eps))
}

#[derive(Debug, Clone)]
struct LayerIndex {
    w_q: Vec<usize>,
    w_k: Vec<usize>,
    w_v: Vec<usize>,
    w_o: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln1: (usize, usize),
    ln2: (usize, usize),
}

#[derive(Debug, Clone)]
struct EncoderIndex {
    tokens: usize,
    positions: usize,
    layers: Vec<LayerIndex>,
    cls_w: usize,
    cls_b: usize,
    mlm_w: usize,
    mlm_b: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T: Real> {
    config: TransformerConfig,
    params: ParamSet<T>,
    idx: EncoderIndex,
}

impl<T: Real> EncoderModel<T> {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, f, dk) = (config.vocab_size, config.d_model, config.d_ff, config.d_k());
        let mut p = ParamSet::new();
        let tokens = p.add("embed.tokens", Tensor::randn(&[v, d], 0.1, rng));
        let positions = p.add("embed.positions", Tensor::randn(&[config.max_seq_len, d], 0.1, rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut proj = |kind: &str| -> Vec<usize> {
                (0..config.n_heads)
                    .map(|h| p.add(format!("layers.{l}.attn.head{h}.{kind}"), Tensor::xavier(d, dk, rng)))
                    .collect()
            };
            let w_q = proj("w_q");
            let w_k = proj("w_k");
            let w_v = proj("w_v");
            layers.push(LayerIndex {
                w_q,
                w_k,
                w_v,
                w_o: p.add(format!("layers.{l}.attn.w_o"), Tensor::xavier(d, d, rng)),
                w1: p.add(format!("layers.{l}.ffn.w1"), Tensor::xavier(d, f, rng)),
                b1: p.add(format!("layers.{l}.ffn.b1"), Tensor::zeros(&[f])),
                w2: p.add(format!("layers.{l}.ffn.w2"), Tensor::xavier(f, d, rng)),
                b2: p.add(format!("layers.{l}.ffn.b2"), Tensor::zeros(&[d])),
                ln1: (
                    p.add(format!("layers.{l}.ln1.gain"), Tensor::ones(&[d])),
                    p.add(format!("layers.{l}.ln1.bias"), Tensor::zeros(&[d])),
                ),
                ln2: (
                    p.add(format!("layers.{l}.ln2.gain"), Tensor::ones(&[d])),
                    p.add(format!("layers.{l}.ln2.bias"), Tensor::zeros(&[d])),
                ),
            });
        }
        let cls_w = p.add("classifier.weight", Tensor::randn(&[d, config.n_classes], HEAD_INIT_STD, rng));
        let cls_b = p.add("classifier.bias", Tensor::zeros(&[config.n_classes]));
        let mlm_w = p.add("mlm.weight", Tensor::randn(&[d, v], HEAD_INIT_STD, rng));
        let mlm_b = p.add("mlm.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config,
            params: p,
            idx: EncoderIndex {
                tokens,
                positions,
                layers,
                cls_w,
                cls_b,
                mlm_w,
                mlm_b,
            },
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
            idx: self.idx.clone(),
        }
    }

    pub fn reset_classifier(&mut self, n_classes: usize, rng: &mut Rng) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::config("n_classes", "must be positive"));
        }
        let d = self.config.d_model;
        self.config.n_classes = n_classes;
        *self.params.tensor_mut(self.idx.cls_w) = Tensor::randn(&[d, n_classes], HEAD_INIT_STD, rng);
        *self.params.tensor_mut(self.idx.cls_b) = Tensor::zeros(&[n_classes]);
        Ok(())
    }

    /// Graph handles for layer `l`, given vars bound from this model's params.
    pub fn layer_weights(&self, vars: &[Var], l: usize) -> LayerWeights {
        let li = &self.idx.layers[l];
        let pick = |ids: &[usize]| ids.iter().map(|&i| vars[i]).collect::<Vec<_>>();
        LayerWeights {
            attention: AttentionWeights {
                w_q: pick(&li.w_q),
                w_k: pick(&li.w_k),
                w_v: pick(&li.w_v),
                w_o: vars[li.w_o],
            },
            ffn: FfnWeights {
                w1: vars[li.w1],
                b1: vars[li.b1],
                w2: vars[li.w2],
                b2: vars[li.b2],
            },
            ln1: (vars[li.ln1.0], vars[li.ln1.1]),
            ln2: (vars[li.ln2.0], vars[li.ln2.1]),
        }
    }

    /// Final hidden states `z` (`T × d_model`) for one sequence.
    pub fn encode_vars(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        ids: &[usize],
        pad_mask: Option<&[bool]>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        check_ids(ids, self.config.vocab_size)?;
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        let tok = g.gather_rows(vars[self.idx.tokens], ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(vars[self.idx.positions], &positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..self.config.n_layers {
            let w = self.layer_weights(vars, l);
            x = encoder_layer(
                g,
                x,
                &w,
                pad_mask,
                self.config.layer_norm_eps,
                self.config.dropout_rate,
                ctx,
            )?;
        }
        Ok(x)
    }

    fn pool(&self, g: &mut Graph<T>, z: Var, pad_mask: Option<&[bool]>) -> Result<Var> {
        match self.config.pooling {
            Pooling::Cls => g.gather_rows(z, &[0]),
            Pooling::Mean => {
                let rows = g.shape(z)[0];
                let keep: Vec<usize> = (0..rows).filter(|&i| pad_mask.is_none_or(|m| !m[i])).collect();
                let kept = g.gather_rows(z, &keep)?;
                g.mean_rows(kept)
            }
        }
    }

    fn classifier_head(&self, g: &mut Graph<T>, vars: &[Var], pooled: Var) -> Result<Var> {
        let logits = g.matmul(pooled, vars[self.idx.cls_w])?;
        g.add_row_bias(logits, vars[self.idx.cls_b])
    }

    fn mlm_head(&self, g: &mut Graph<T>, vars: &[Var], hidden: Var) -> Result<Var> {
        let logits = g.matmul(hidden, vars[self.idx.mlm_w])?;
        g.add_row_bias(logits, vars[self.idx.mlm_b])
    }

    /// Eval-mode hidden states for one sequence.
    pub fn encode(&self, ids: &[usize], pad_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind_constants(&mut g);
        let z = self.encode_vars(&mut g, &vars, ids, pad_mask, &mut ForwardCtx::eval())?;
        Ok(g.value(z).clone())
    }

    /// Eval-mode class logits for one sequence.
    pub fn classify_forward(&self, ids: &[usize], pad_mask: Option<&[bool]>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind_constants(&mut g);
        let z = self.encode_vars(&mut g, &vars, ids, pad_mask, &mut ForwardCtx::eval())?;
        let pooled = self.pool(&mut g, z, pad_mask)?;
        let out = self.classifier_head(&mut g, &vars, pooled)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Eval-mode vocabulary logits (`|positions| × vocab_size`).
    pub fn mlm_forward(&self, ids: &[usize], positions: &[usize]) -> Result<Tensor<T>> {
        check_positions(positions, ids.len())?;
        let mut g = Graph::new();
        let vars = self.params.bind_constants(&mut g);
        let z = self.encode_vars(&mut g, &vars, ids, None, &mut ForwardCtx::eval())?;
        let h = g.gather_rows(z, positions)?;
        let out = self.mlm_head(&mut g, &vars, h)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Real> SequenceModel<T> for EncoderModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn classify_batch(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[&[usize]],
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for ids in batch {
            let z = self.encode_vars(g, vars, ids, None, ctx)?;
            let pooled = self.pool(g, z, None)?;
            rows.push(self.classifier_head(g, vars, pooled)?);
        }
        g.concat_rows(&rows)
    }

    fn mlm_batch(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[&[usize]],
        positions: &[Vec<usize>],
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let mut rows = Vec::new();
        for (ids, pos) in batch.iter().zip(positions) {
            if pos.is_empty() {
                continue;
            }
            check_positions(pos, ids.len())?;
            let z = self.encode_vars(g, vars, ids, None, ctx)?;
            let h = g.gather_rows(z, pos)?;
            rows.push(self.mlm_head(g, vars, h)?);
        }
        if rows.is_empty() {
            return Err(Error::invalid("mlm_forward", "no target positions in batch"));
        }
        g.concat_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            max_seq_len: 6,
            n_classes: 3,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = TransformerConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn rejects_overlong_sequence() {
        let m = EncoderModel::<f32>::new(tiny(), &mut substream(0, "init")).unwrap();
        let err = m.encode(&[1; 7], None).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 7, max: 6 }));
        assert!(matches!(
            m.encode(&[10], None),
            Err(Error::TokenOutOfRange { id: 10, .. })
        ));
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for cfg in [tiny(), TransformerConfig::default()] {
            let m = EncoderModel::<f32>::new(cfg.clone(), &mut substream(0, "init")).unwrap();
            assert_eq!(m.params().trainable_numel(), cfg.parameter_count());
        }
    }
}

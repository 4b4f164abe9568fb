//! CNN + LSTM reference classifier.
//!
//! Embedded phones pass through parallel same-padded 1-D convolutions (one
//! per kernel size), each followed by batch normalisation and ReLU. The
//! channel outputs are concatenated per time step and read by a
//! unidirectional LSTM whose final hidden state feeds a linear classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_ids, check_positions, BnUpdate, ForwardCtx, SequenceModel, HEAD_INIT_STD};
use crate::numerics::{BatchStats, Graph, Real, Tensor, Var};
use crate::params::ParamSet;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Output channels of each convolution.
    pub conv_channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub n_classes: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 64,
            conv_channels: 64,
            kernel_sizes: vec![3, 5],
            lstm_hidden: 128,
            lstm_layers: 1,
            n_classes: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("conv_channels", self.conv_channels),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("n_classes", self.n_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::config("kernel_sizes", "at least one kernel is required"));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(
                "kernel_sizes",
                format!("kernel size {k} must be odd for same-length padding"),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must lie in (0, 1]"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.conv_channels * self.kernel_sizes.len()
    }

    /// Closed-form count of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let (v, e, ch, h, c) = (
            self.vocab_size,
            self.embed_dim,
            self.conv_channels,
            self.lstm_hidden,
            self.n_classes,
        );
        let convs: usize = self.kernel_sizes.iter().map(|k| k * e * ch + 2 * ch).sum();
        let first = self.lstm_input_dim() * 4 * h + h * 4 * h + 4 * h;
        let rest = (self.lstm_layers - 1) * (h * 4 * h + h * 4 * h + 4 * h);
        v * e + convs + first + rest + (h * c + c) + (h * v + v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnWeights {
    pub gain: Var,
    pub bias: Var,
}

/// Which statistics batch normalisation uses.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T: Real> {
    /// Statistics of the rows being normalised (training).
    Batch,
    /// Fixed running estimates (evaluation).
    Running { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `input_dim × 4H`, gate blocks ordered input, forget, cell, output.
    pub w_ih: Var,
    /// `H × 4H`
    pub w_hh: Var,
    /// `4H`
    pub bias: Var,
    pub hidden: usize,
}

/// Same-padded 1-D convolution over time. `weight` is `(kernel·C_in) × C_out`
/// with row `j·C_in + c` holding tap `j` of input channel `c`.
pub fn conv1d_same<T: Real>(g: &mut Graph<T>, x: Var, kernel: usize, weight: Var) -> Result<Var> {
    let windows = g.unfold(x, kernel)?;
    g.matmul(windows, weight)
}

pub fn bn_relu<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    bn: BnWeights,
    mode: BnMode<'_, T>,
    eps: f64,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let (y, stats) = match mode {
        BnMode::Batch => {
            let (y, s) = g.batch_norm_train(x, bn.gain, bn.bias, T::lit(eps))?;
            (y, Some(s))
        }
        BnMode::Running { mean, var } => (g.batch_norm_eval(x, bn.gain, bn.bias, mean, var, T::lit(eps))?, None),
    };
    Ok((g.relu(y)?, stats))
}

/// Convolution, batch normalisation and ReLU over one `T × C_in` sequence.
pub fn conv_bn_relu<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    kernel: usize,
    weight: Var,
    bn: BnWeights,
    mode: BnMode<'_, T>,
    eps: f64,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let conv = conv1d_same(g, x, kernel, weight)?;
    bn_relu(g, conv, bn, mode, eps)
}

fn lstm_steps<T: Real>(g: &mut Graph<T>, x: Var, w: &LstmWeights) -> Result<Vec<Var>> {
    let h = w.hidden;
    let t_len = g.value(x).dims2()?.0;
    let projected = g.matmul(x, w.w_ih)?;
    let projected = g.add_row_bias(projected, w.bias)?;
    let mut states = Vec::with_capacity(t_len);
    let mut prev: Option<(Var, Var)> = None;
    for t in 0..t_len {
        let mut gates = g.gather_rows(projected, &[t])?;
        if let Some((h_prev, _)) = prev {
            let rec = g.matmul(h_prev, w.w_hh)?;
            gates = g.add(gates, rec)?;
        }
        let i = g.slice_cols(gates, 0, h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(gates, h, 2 * h)?;
        let f = g.sigmoid(f)?;
        let c_in = g.slice_cols(gates, 2 * h, 3 * h)?;
        let c_in = g.tanh(c_in)?;
        let o = g.slice_cols(gates, 3 * h, 4 * h)?;
        let o = g.sigmoid(o)?;
        let write = g.mul(i, c_in)?;
        let c = match prev {
            Some((_, c_prev)) => {
                let kept = g.mul(f, c_prev)?;
                g.add(kept, write)?
            }
            None => write,
        };
        let c_act = g.tanh(c)?;
        let h_t = g.mul(o, c_act)?;
        states.push(h_t);
        prev = Some((h_t, c));
    }
    Ok(states)
}

/// Hidden states at every step (`T × H`) from zero initial state.
pub fn lstm_states<T: Real>(g: &mut Graph<T>, x: Var, w: &LstmWeights) -> Result<Var> {
    let states = lstm_steps(g, x, w)?;
    g.concat_rows(&states)
}

/// Final hidden state `h_T` (`1 × H`) from zero initial state.
pub fn lstm_forward<T: Real>(g: &mut Graph<T>, x: Var, w: &LstmWeights) -> Result<Var> {
    let states = lstm_steps(g, x, w)?;
    Ok(*states.last().expect("sequence has at least one step"))
}

#[derive(Debug, Clone)]
struct ConvIndex {
    kernel: usize,
    weight: usize,
    gain: usize,
    bias: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone)]
struct BaselineIndex {
    embedding: usize,
    convs: Vec<ConvIndex>,
    lstm: Vec<(usize, usize, usize)>,
    cls_w: usize,
    cls_b: usize,
    mlm_w: usize,
    mlm_b: usize,
}

#[derive(Debug, Clone)]
pub struct BaselineModel<T: Real> {
    config: BaselineConfig,
    params: ParamSet<T>,
    idx: BaselineIndex,
}

impl<T: Real> BaselineModel<T> {
    pub fn new(config: BaselineConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, ch, h) = (
            config.vocab_size,
            config.embed_dim,
            config.conv_channels,
            config.lstm_hidden,
        );
        let mut p = ParamSet::new();
        let embedding = p.add("embed.tokens", Tensor::randn(&[v, e], 1.0, rng));
        let convs = config
            .kernel_sizes
            .iter()
            .map(|&k| ConvIndex {
                kernel: k,
                weight: p.add(format!("conv{k}.weight"), Tensor::xavier(k * e, ch, rng)),
                gain: p.add(format!("conv{k}.bn.gain"), Tensor::ones(&[ch])),
                bias: p.add(format!("conv{k}.bn.bias"), Tensor::zeros(&[ch])),
                running_mean: p.add_buffer(format!("conv{k}.bn.running_mean"), Tensor::zeros(&[ch])),
                running_var: p.add_buffer(format!("conv{k}.bn.running_var"), Tensor::ones(&[ch])),
            })
            .collect();
        let bound = 1.0 / (h as f64).sqrt();
        let lstm = (0..config.lstm_layers)
            .map(|l| {
                let input = if l == 0 { config.lstm_input_dim() } else { h };
                (
                    p.add(format!("lstm.{l}.w_ih"), Tensor::rand_uniform(&[input, 4 * h], bound, rng)),
                    p.add(format!("lstm.{l}.w_hh"), Tensor::rand_uniform(&[h, 4 * h], bound, rng)),
                    p.add(format!("lstm.{l}.bias"), Tensor::zeros(&[4 * h])),
                )
            })
            .collect();
        // A 0.02 head over saturating LSTM outputs starves the encoder of
        // gradient and generalizes worse from 64 examples.
        let cls_w = p.add("classifier.weight", Tensor::xavier(h, config.n_classes, rng));
        let cls_b = p.add("classifier.bias", Tensor::zeros(&[config.n_classes]));
        let mlm_w = p.add("mlm.weight", Tensor::randn(&[h, v], HEAD_INIT_STD, rng));
        let mlm_b = p.add("mlm.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config,
            params: p,
            idx: BaselineIndex {
                embedding,
                convs,
                lstm,
                cls_w,
                cls_b,
                mlm_w,
                mlm_b,
            },
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> BaselineModel<U> {
        BaselineModel {
            config: self.config.clone(),
            params: self.params.cast(),
            idx: self.idx.clone(),
        }
    }

    pub fn reset_classifier(&mut self, n_classes: usize, rng: &mut Rng) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::config("n_classes", "must be positive"));
        }
        let h = self.config.lstm_hidden;
        self.config.n_classes = n_classes;
        *self.params.tensor_mut(self.idx.cls_w) = Tensor::xavier(h, n_classes, rng);
        *self.params.tensor_mut(self.idx.cls_b) = Tensor::zeros(&[n_classes]);
        Ok(())
    }

    pub fn lstm_weights(&self, vars: &[Var], layer: usize) -> LstmWeights {
        let (w_ih, w_hh, bias) = self.idx.lstm[layer];
        LstmWeights {
            w_ih: vars[w_ih],
            w_hh: vars[w_hh],
            bias: vars[bias],
            hidden: self.config.lstm_hidden,
        }
    }

    /// Per-sequence convolutional features (`T × lstm_input_dim`).
    fn features(&self, g: &mut Graph<T>, vars: &[Var], batch: &[&[usize]], ctx: &mut ForwardCtx<T>) -> Result<Vec<Var>> {
        if batch.is_empty() {
            return Err(Error::invalid("baseline_forward", "empty batch"));
        }
        let mut embedded = Vec::with_capacity(batch.len());
        for ids in batch {
            check_ids(ids, self.config.vocab_size)?;
            embedded.push(g.gather_rows(vars[self.idx.embedding], ids)?);
        }
        let eps = self.config.bn_eps;
        let mut per_kernel: Vec<Vec<Var>> = Vec::with_capacity(self.idx.convs.len());
        for conv in &self.idx.convs {
            let bn = BnWeights {
                gain: vars[conv.gain],
                bias: vars[conv.bias],
            };
            let outputs = embedded
                .iter()
                .map(|&x| conv1d_same(g, x, conv.kernel, vars[conv.weight]))
                .collect::<Result<Vec<_>>>()?;
            if ctx.is_training() {
                // statistics over every time step of every sequence in the batch
                let stacked = g.concat_rows(&outputs)?;
                let (y, stats) = bn_relu(g, stacked, bn, BnMode::Batch, eps)?;
                ctx.bn_updates.push(BnUpdate {
                    mean_idx: conv.running_mean,
                    var_idx: conv.running_var,
                    stats: stats.expect("batch mode returns statistics"),
                });
                let mut start = 0;
                let mut split = Vec::with_capacity(batch.len());
                for ids in batch {
                    split.push(g.slice_rows(y, start, start + ids.len())?);
                    start += ids.len();
                }
                per_kernel.push(split);
            } else {
                let mean = self.params.tensor(conv.running_mean).data();
                let var = self.params.tensor(conv.running_var).data();
                let mut outs = Vec::with_capacity(batch.len());
                for x in outputs {
                    outs.push(bn_relu(g, x, bn, BnMode::Running { mean, var }, eps)?.0);
                }
                per_kernel.push(outs);
            }
        }
        (0..batch.len())
            .map(|i| {
                let parts: Vec<Var> = per_kernel.iter().map(|k| k[i]).collect();
                if parts.len() == 1 {
                    Ok(parts[0])
                } else {
                    g.concat_cols(&parts)
                }
            })
            .collect()
    }

    fn lstm_stack(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut seq = x;
        for l in 0..self.config.lstm_layers {
            let w = self.lstm_weights(vars, l);
            seq = lstm_states(g, seq, &w)?;
        }
        Ok(seq)
    }

    fn last_hidden(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let n = self.config.lstm_layers;
        let mut seq = x;
        for l in 0..n - 1 {
            let w = self.lstm_weights(vars, l);
            seq = lstm_states(g, seq, &w)?;
        }
        let w = self.lstm_weights(vars, n - 1);
        lstm_forward(g, seq, &w)
    }

    /// Eval-mode class logits for one sequence.
    pub fn baseline_forward(&self, ids: &[usize]) -> Result<Vec<T>> {
        self.logits(ids)
    }
}

impl<T: Real> SequenceModel<T> for BaselineModel<T> {
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
        let feats = self.features(g, vars, batch, ctx)?;
        let mut rows = Vec::with_capacity(feats.len());
        for x in feats {
            let h = self.last_hidden(g, vars, x)?;
            let logits = g.matmul(h, vars[self.idx.cls_w])?;
            rows.push(g.add_row_bias(logits, vars[self.idx.cls_b])?);
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
        for (ids, pos) in batch.iter().zip(positions) {
            if !pos.is_empty() {
                check_positions(pos, ids.len())?;
            }
        }
        if positions.iter().all(Vec::is_empty) {
            return Err(Error::invalid("mlm_forward", "no target positions in batch"));
        }
        let feats = self.features(g, vars, batch, ctx)?;
        let mut rows = Vec::new();
        for (x, pos) in feats.into_iter().zip(positions) {
            if pos.is_empty() {
                continue;
            }
            let states = self.lstm_stack(g, vars, x)?;
            let h = g.gather_rows(states, pos)?;
            let logits = g.matmul(h, vars[self.idx.mlm_w])?;
            rows.push(g.add_row_bias(logits, vars[self.idx.mlm_b])?);
        }
        g.concat_rows(&rows)
    }

    /// Exponential moving average of batch statistics; the variance estimate
    /// uses the unbiased `n/(n-1)` correction.
    fn absorb_batch_stats(&mut self, ctx: &mut ForwardCtx<T>) {
        let m = T::lit(self.config.bn_momentum);
        for update in ctx.bn_updates.drain(..) {
            let n = update.stats.rows;
            let correction = if n > 1 {
                T::lit(n as f64 / (n as f64 - 1.0))
            } else {
                T::one()
            };
            let mean = self.params.tensor_mut(update.mean_idx).data_mut();
            for (r, &b) in mean.iter_mut().zip(&update.stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let var = self.params.tensor_mut(update.var_idx).data_mut();
            for (r, &b) in var.iter_mut().zip(&update.stats.var) {
                *r = (T::one() - m) * *r + m * b * correction;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn rejects_even_kernels() {
        let cfg = BaselineConfig {
            kernel_sizes: vec![3, 4],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for layers in [1, 2] {
            let cfg = BaselineConfig {
                lstm_layers: layers,
                vocab_size: 30,
                ..Default::default()
            };
            let m = BaselineModel::<f32>::new(cfg.clone(), &mut substream(0, "init")).unwrap();
            assert_eq!(m.params().trainable_numel(), cfg.parameter_count());
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let m = BaselineModel::<f32>::new(BaselineConfig::default(), &mut substream(0, "init")).unwrap();
        assert!(m.baseline_forward(&[]).is_err());
    }
}

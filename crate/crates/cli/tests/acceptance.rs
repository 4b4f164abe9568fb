//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slu_core::baseline::BaselineConfig;
use slu_core::checkpoint::Checkpoint;
use slu_core::data::{
    build_vocab, rebalance_splits, split_counts, PhoneVocab, RebalancePlan, Split, SplitCounts, SynthCorpus,
    SynthSpec, SynthTask, Utterance, CLS, N_SPECIALS, PAD,
};
use slu_core::model::{ForwardCtx, Model, ModelConfig, SequenceModel};
use slu_core::numerics::{finite_diff_check, GradCheckOptions, Graph, Tensor, Var};
use slu_core::pretrain::{dynamic_mask, is_maskable, pretrain, MaskingPolicy, PretrainConfig};
use slu_core::rng::substream;
use slu_core::train_eval::{evaluate, f1_score, finetune, predict, AdamConfig, Example, TrainConfig};
use slu_core::transformer::{scaled_dot_product_attention, TransformerConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_transformer() -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        n_layers: 2,
        max_seq_len: 64,
        ..Default::default()
    })
}

fn both_kinds() -> [ModelConfig; 2] {
    [small_transformer(), ModelConfig::Baseline(BaselineConfig::default())]
}

fn encode(vocab: &PhoneVocab, corpus: &SynthCorpus) -> Vec<Example> {
    corpus
        .utterances
        .iter()
        .zip(&corpus.classes)
        .map(|(u, &label)| Example {
            ids: vocab.encode_utterance(u, 64).unwrap().ids,
            label,
        })
        .collect()
}

fn ids(examples: &[Example]) -> Vec<Vec<usize>> {
    examples.iter().map(|e| e.ids.clone()).collect()
}

// Differentiable ops and both models, 64-bit, 1e-6 relative, 5 probes per tensor.
fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-6;
    const PROBES: usize = 5;
    let t0 = Instant::now();
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let c = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let bias = Tensor::<f64>::randn(&[4], 1.0, &mut r);
    let gain = Tensor::<f64>::randn(&[4], 1.0, &mut r);
    let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let mut kinked = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    kinked.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });

    type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> slu_core::Result<Var>>;
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, Op)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        ("add", vec![a.clone(), c.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row_bias", vec![a.clone(), bias.clone()], Box::new(|g, v| g.add_row_bias(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], 1.3))),
        ("mul_const", vec![a.clone()], Box::new(|g, v| g.mul_const(v[0], (0..12).map(|i| i as f64 / 7.0).collect()))),
        ("relu", vec![kinked], Box::new(|g, v| g.relu(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|g, v| g.tanh(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("softmax", vec![a.clone()], Box::new(|g, v| g.softmax(v[0], 1))),
        (
            "softmax_masked",
            vec![a.clone()],
            Box::new(|g, v| g.softmax_masked(v[0], 1, Some(&[false, false, true, false]))),
        ),
        (
            "layer_norm",
            vec![a.clone(), gain.clone(), bias.clone()],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "batch_norm_train",
            vec![a.clone(), gain.clone(), bias.clone()],
            Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)),
        ),
        (
            "batch_norm_eval",
            vec![a.clone(), gain.clone(), bias.clone()],
            Box::new(|g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.2, 0.0, -0.1, 0.4], &[0.5, 1.0, 2.0, 1.5], 1e-5)),
        ),
        ("gather_rows", vec![a.clone()], Box::new(|g, v| g.gather_rows(v[0], &[1, 1, 0]))),
        ("concat_cols", vec![a.clone(), c.clone()], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![a.clone(), c.clone()], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("slice_cols", vec![a.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
        ("slice_rows", vec![a.clone()], Box::new(|g, v| g.slice_rows(v[0], 0, 2))),
        ("unfold", vec![a.clone()], Box::new(|g, v| g.unfold(v[0], 3))),
        ("mean_rows", vec![a.clone()], Box::new(|g, v| g.mean_rows(v[0]))),
        ("cross_entropy", vec![a.clone()], Box::new(|g, v| g.cross_entropy(v[0], &[2, 0, 3]))),
        (
            "attention",
            vec![q, a.clone(), c.clone()],
            Box::new(|g, v| scaled_dot_product_attention(g, v[0], v[1], v[2], Some(&[false, true, false])).map(|a| a.output)),
        ),
    ];
    // A fixed random projection makes every output coordinate matter.
    let project = |g: &mut Graph<f64>, y: Var, seed: u64| -> slu_core::Result<Var> {
        let w = Tensor::randn(g.shape(y), 1.0, &mut rng(seed));
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    };
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (i, (name, inputs, op)) in cases.drain(..).enumerate() {
        let want: usize = inputs.iter().map(|t| t.numel().min(PROBES)).sum();
        let report = finite_diff_check(name, &inputs, GradCheckOptions::new(PROBES, TOL), |g, v| {
            let y = op(g, v)?;
            project(g, y, 100 + i as u64)
        })
        .map_err(|e| format!("{name}: {e}"))?;
        ensure!(report.passed, "{name}: {report:?}");
        ensure!(report.probe_count == want, "{name}: {} probes, wanted {want}", report.probe_count);
        worst = worst.max(report.max_relative_error);
        probes += report.probe_count;
    }

    let tiny = [
        ModelConfig::Transformer(TransformerConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 2,
            max_seq_len: 10,
            dropout_rate: 0.1,
            ..Default::default()
        }),
        ModelConfig::Baseline(BaselineConfig {
            embed_dim: 8,
            conv_channels: 4,
            kernel_sizes: vec![3, 5],
            lstm_hidden: 8,
            ..Default::default()
        }),
    ];
    let batch: Vec<Vec<usize>> = vec![vec![CLS, 4, 5, 9, 4], vec![CLS, 11, 6]];
    let refs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
    for cfg in tiny {
        let cfg = cfg.with_sizes(12, 3);
        let m = Model::<f64>::new(&cfg, &mut substream(7, "init")).map_err(|e| e.to_string())?;
        let inputs: Vec<Tensor<f64>> = m.params().iter().map(|p| p.tensor.clone()).collect();
        let want: usize = inputs.iter().map(|t| t.numel().min(PROBES)).sum();
        for head in ["classify", "mlm"] {
            let report = finite_diff_check(head, &inputs, GradCheckOptions::new(PROBES, TOL), |g, v| {
                let mut ctx = ForwardCtx::train_deterministic();
                if head == "classify" {
                    let logits = m.classify_batch(g, v, &refs, &mut ctx)?;
                    g.cross_entropy(logits, &[1, 2])
                } else {
                    let logits = m.mlm_batch(g, v, &refs, &[vec![1, 3], vec![2]], &mut ctx)?;
                    g.cross_entropy(logits, &[4, 9, 7])
                }
            })
            .map_err(|e| format!("{} {head}: {e}", cfg.kind()))?;
            ensure!(report.passed, "{} {head}: {report:?}", cfg.kind());
            ensure!(report.probe_count == want, "{} {head}: {} probes", cfg.kind(), report.probe_count);
            worst = worst.max(report.max_relative_error);
            probes += report.probe_count;
        }
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{probes} probes, worst relative error {worst:.1e}, {:.1}s", elapsed.as_secs_f64()))
}

fn attention_invariants() -> Outcome {
    let mut r = rng(2);
    let mut worst_sum = 0.0f64;
    let mut worst_mean = 0.0f64;
    let mut worst_masked = 0.0f64;
    for case in 0..500 {
        let (tq, tk, d, dv) = (r.gen_range(1..7), r.gen_range(1..9), r.gen_range(1..6), r.gen_range(1..5));
        let mut mask: Vec<bool> = (0..tk).map(|_| r.gen_bool(0.4)).collect();
        let keep = r.gen_range(0..tk);
        mask[keep] = false;
        let k = Tensor::<f64>::randn(&[tk, d], 3.0, &mut r);
        let v = Tensor::<f64>::randn(&[tk, dv], 1.0, &mut r);
        for zero_q in [false, true] {
            let q = if zero_q {
                Tensor::zeros(&[tq, d])
            } else {
                Tensor::randn(&[tq, d], 3.0, &mut r)
            };
            let mut g = Graph::<f64>::new();
            let (qv, kv, vv) = (g.constant(q), g.constant(k.clone()), g.constant(v.clone()));
            let att = scaled_dot_product_attention(&mut g, qv, kv, vv, Some(&mask)).map_err(|e| e.to_string())?;
            let w = g.value(att.weights);
            for i in 0..tq {
                let row = w.row(i);
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                for (j, &m) in mask.iter().enumerate() {
                    if m {
                        worst_masked = worst_masked.max(row[j]);
                    }
                }
            }
            if zero_q {
                let unmasked: Vec<usize> = (0..tk).filter(|&j| !mask[j]).collect();
                let out = g.value(att.output);
                for i in 0..tq {
                    for c in 0..dv {
                        let mean = unmasked.iter().map(|&j| v.row(j)[c]).sum::<f64>() / unmasked.len() as f64;
                        worst_mean = worst_mean.max((out.row(i)[c] - mean).abs());
                    }
                }
            }
        }
        ensure!(worst_sum <= 1e-6, "case {case}: row sum off by {worst_sum:e}");
        ensure!(worst_mean <= 1e-6, "case {case}: zero-query output off the value mean by {worst_mean:e}");
        ensure!(worst_masked < 1e-12, "case {case}: masked key weight {worst_masked:e}");
    }
    Ok(format!(
        "500 cases: |row sum - 1| <= {worst_sum:.1e}, zero-query mean error {worst_mean:.1e}, masked weight <= {worst_masked:.1e}"
    ))
}

fn masking_statistics() -> Outcome {
    const V: usize = 40;
    let mut r = rng(3);
    let corpus: Vec<Vec<usize>> = (0..12_000)
        .map(|_| {
            let len = r.gen_range(1..20);
            let mut s = vec![CLS];
            s.extend((0..len).map(|_| r.gen_range(N_SPECIALS..V)));
            s.resize(21, PAD);
            s
        })
        .collect();
    let maskable = corpus.iter().flatten().filter(|&&t| is_maskable(t)).count();
    ensure!(maskable >= 100_000, "only {maskable} maskable tokens");
    let policy = MaskingPolicy::default();
    ensure!(policy.mask_rate == 0.15, "default rate {}", policy.mask_rate);
    let mut stream = substream(0, "masking");
    let first = dynamic_mask(&corpus, &policy, V, &mut stream).map_err(|e| e.to_string())?;
    let second = dynamic_mask(&corpus, &policy, V, &mut stream).map_err(|e| e.to_string())?;
    let rate = first.n_targets() as f64 / maskable as f64;
    ensure!((0.14..=0.16).contains(&rate), "empirical rate {rate}");
    let specials_targeted = corpus
        .iter()
        .zip(&first.positions)
        .any(|(s, pos)| pos.iter().any(|&i| !is_maskable(s[i])));
    ensure!(!specials_targeted, "a special token was selected");
    ensure!(first.positions != second.positions, "two passes chose the same mask set");
    let moved = first.positions.iter().zip(&second.positions).filter(|(a, b)| a != b).count();
    Ok(format!(
        "{maskable} maskable tokens, rate {rate:.4}, second pass differs on {moved}/{} sequences",
        corpus.len()
    ))
}

fn learnability() -> Outcome {
    let spec = SynthSpec::default();
    ensure!(spec.noise == 0.0 && spec.n_classes == 4, "default task is not the noise-free 4-class task");
    let task = SynthTask::new(&spec).map_err(|e| e.to_string())?;
    let (train, dev, test) = (task.sample(10), task.sample(20), task.sample(30));
    ensure!(train.utterances.len() == 64, "{} training examples", train.utterances.len());
    let vocab = build_vocab(&train.utterances, 1).map_err(|e| e.to_string())?;
    let (tr, dv, te) = (encode(&vocab, &train), encode(&vocab, &dev), encode(&vocab, &test));
    let oracle: Vec<Option<usize>> = test.utterances.iter().map(|u| task.oracle(&u.phones)).collect();
    let gold: Vec<usize> = tr.iter().map(|e| e.label).collect();

    let mut notes = Vec::new();
    for cfg in both_kinds() {
        let cfg = cfg.with_sizes(vocab.len(), spec.n_classes);
        let kind = cfg.kind();
        let t0 = Instant::now();
        let mut model = Model::<f32>::new(&cfg, &mut substream(0, "init")).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            epochs: 200,
            ..Default::default()
        };
        let outcome =
            finetune(&mut model, &tr, &dv, &AdamConfig::for_model(kind), &tc).map_err(|e| e.to_string())?;
        let elapsed = t0.elapsed();
        let train_pred = predict(&model, &ids(&tr)).map_err(|e| e.to_string())?;
        let acc = evaluate(&train_pred, &gold, spec.n_classes).map_err(|e| e.to_string())?.accuracy;
        let test_pred = predict(&model, &ids(&te)).map_err(|e| e.to_string())?;
        let agree = test_pred.iter().zip(&oracle).filter(|(p, o)| Some(**p) == **o).count();
        ensure!(acc == 1.0, "{kind}: train accuracy {acc}");
        ensure!(elapsed < Duration::from_secs(300), "{kind}: took {elapsed:?}");
        ensure!(agree == oracle.len(), "{kind}: {agree}/{} test predictions match the rule", oracle.len());
        notes.push(format!(
            "{kind} epoch {} of 200, {agree}/{} rule matches, {:.1}s",
            outcome.best_epoch.unwrap_or(0),
            oracle.len(),
            elapsed.as_secs_f64()
        ));
    }
    Ok(notes.join("; "))
}

fn pretraining_direction() -> Outcome {
    let base = SynthSpec {
        min_len: 6,
        max_len: 12,
        variants: 4,
        topic_phones: 4,
        topic_rate: 0.5,
        noise: 0.1,
        ..Default::default()
    };
    let task = |per_class: usize, unlabeled: bool| {
        SynthTask::new(&SynthSpec {
            per_class,
            unlabeled,
            ..base.clone()
        })
        .map_err(|e| e.to_string())
    };
    let (train_task, dev_task, mlm_task) = (task(8, false)?, task(32, false)?, task(500, true)?);
    let mut notes = Vec::new();
    let mut failed = Vec::new();
    for cfg in both_kinds() {
        let (mut pre_sum, mut scratch_sum) = (0.0, 0.0);
        for seed in 0..5u64 {
            let train = train_task.sample(100 + seed);
            let dev = dev_task.sample(200 + seed);
            let mlm = mlm_task.sample(300 + seed);
            ensure!(train.utterances.len() == 32 && mlm.utterances.len() == 2000, "split sizes");
            let all: Vec<Utterance> = mlm.utterances.iter().chain(&train.utterances).cloned().collect();
            let vocab = build_vocab(&all, 1).map_err(|e| e.to_string())?;
            let (tr, dv) = (encode(&vocab, &train), encode(&vocab, &dev));
            let corpus: Vec<Vec<usize>> =
                mlm.utterances.iter().map(|u| vocab.encode_utterance(u, 64).unwrap().ids).collect();

            let cfg = cfg.clone().with_sizes(vocab.len(), base.n_classes);
            let opt = AdamConfig::for_model(cfg.kind());
            let tc = TrainConfig {
                seed,
                ..Default::default()
            };
            let mut scratch = Model::<f32>::new(&cfg, &mut substream(seed, "init")).map_err(|e| e.to_string())?;
            let mut pre = scratch.clone();
            let pc = PretrainConfig {
                epochs: 5,
                seed,
                ..Default::default()
            };
            pretrain(&mut pre, &corpus, &MaskingPolicy::default(), &opt, &pc).map_err(|e| e.to_string())?;
            pre.reset_classifier(base.n_classes, &mut substream(seed, "classifier"))
                .map_err(|e| e.to_string())?;
            let f1 = |m: &mut Model<f32>| -> Result<f64, String> {
                let o = finetune(m, &tr, &dv, &opt, &tc).map_err(|e| e.to_string())?;
                Ok(o.best().map_or(0.0, |r| r.dev_macro_f1))
            };
            scratch_sum += f1(&mut scratch)?;
            pre_sum += f1(&mut pre)?;
        }
        let (p, s) = (pre_sum / 5.0, scratch_sum / 5.0);
        let kind = cfg.kind();
        notes.push(format!("{kind} pretrained {p:.3} vs scratch {s:.3}"));
        if p < s {
            failed.push(kind.to_string());
        }
    }
    ensure!(failed.is_empty(), "pretraining behind for {failed:?}: {}", notes.join("; "));
    Ok(format!("mean dev macro-F1 over 5 seeds: {}", notes.join("; ")))
}

fn metrics_oracle() -> Outcome {
    let mut cells = [[0usize; 4]; 4];
    for (c, tp) in [73, 51, 45, 68].into_iter().enumerate() {
        cells[c][c] = tp;
    }
    cells[0][1] = 40;
    cells[0][2] = 1;
    cells[1][2] = 58;
    cells[2][3] = 51;
    cells[3][0] = 13;
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (g, row) in cells.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pred.extend(std::iter::repeat_n(p, n));
            gold.extend(std::iter::repeat_n(g, n));
        }
    }
    let report = evaluate(&pred, &gold, 4).map_err(|e| e.to_string())?;
    let rounded: Vec<f64> = report.classes.iter().map(|c| (c.f1 * 100.0).round() / 100.0).collect();
    ensure!(rounded == [0.73, 0.51, 0.45, 0.68], "per-class F1 {rounded:?}");
    let table_macro = report.macro_avg.f1;
    ensure!((table_macro * 100.0).round() / 100.0 == 0.59, "macro F1 {table_macro}");

    let mut r = rng(6);
    let k = 6;
    let pred: Vec<usize> = (0..1000).map(|_| r.gen_range(0..k)).collect();
    let gold: Vec<usize> = (0..1000).map(|_| r.gen_range(0..k)).collect();
    let report = evaluate(&pred, &gold, k).map_err(|e| e.to_string())?;
    let mut matrix = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.iter().zip(&gold) {
        matrix[g][p] += 1;
    }
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = matrix[c][c];
        let fp: usize = (0..k).filter(|&g| g != c).map(|g| matrix[g][c]).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| matrix[c][p]).sum();
        let row = &report.classes[c];
        ensure!((row.tp, row.fp, row.fn_) == (tp, fp, fn_), "class {c} counts differ");
        let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
        let f1 = if denom == 0.0 { 0.0 } else { tp as f64 / denom };
        ensure!(row.f1 == f1, "class {c}: F1 {} vs {f1}", row.f1);
        f1s.push(f1);
    }
    let brute_macro = f1s.iter().sum::<f64>() / k as f64;
    ensure!(report.macro_avg.f1 == brute_macro, "macro {} vs {brute_macro}", report.macro_avg.f1);
    let correct = (0..k).map(|c| matrix[c][c]).sum::<usize>();
    ensure!(report.accuracy == correct as f64 / 1000.0, "accuracy differs");

    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (tp, fp, fn_) = (r.gen_range(1..1000usize), r.gen_range(0..1000usize), r.gen_range(0..1000usize));
        let (p, rc) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
        worst = worst.max((f1_score(tp, fp, fn_) - 2.0 * p * rc / (p + rc)).abs());
    }
    ensure!(worst <= 1e-12, "count form differs from 2PR/(P+R) by {worst:e}");
    Ok(format!("macro F1 {table_macro:.4} -> 0.59; 1000 pairs exact; 2PR/(P+R) within {worst:.1e}"))
}

fn checkpoint_round_trip() -> Outcome {
    let vocab = PhoneVocab::from_tokens((0..20).map(|i| format!("p{i}"))).map_err(|e| e.to_string())?;
    let v = vocab.len();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(7);
    let random_seq = |r: &mut ChaCha8Rng| -> Vec<usize> {
        let len = r.gen_range(1..30);
        std::iter::once(CLS).chain((0..len).map(|_| r.gen_range(N_SPECIALS..v))).collect()
    };
    for cfg in both_kinds() {
        let cfg = cfg.with_sizes(v, 3);
        let mut model = Model::<f32>::new(&cfg, &mut substream(1, "init")).map_err(|e| e.to_string())?;
        let train: Vec<Example> = (0..12).map(|i| Example { ids: random_seq(&mut r), label: i % 3 }).collect();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        finetune(&mut model, &train, &train, &AdamConfig::default(), &tc).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{}.ckpt", cfg.kind()));
        let labels = vec!["a".to_string(), "b".into(), "c".into()];
        Checkpoint::new(model.clone(), vocab.clone(), labels, 64)
            .and_then(|c| c.save(&path))
            .map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        for i in 0..10 {
            let s = random_seq(&mut r);
            let a = model.logits(&s).map_err(|e| e.to_string())?;
            let b = back.model.logits(&s).map_err(|e| e.to_string())?;
            let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(same, "{}: input {i} logits {a:?} vs {b:?}", cfg.kind());
        }
    }
    Ok("both kinds bit-identical on 10 random inputs".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_pslu"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "pslu {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(())
    };
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"model": {"kind": "transformer", "d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1, "max_seq_len": 32},
            "finetune": {"epochs": 5, "batch_size": 8}, "seed": 3}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for run_id in ["a", "b"] {
        for (split, seed) in [("train", "1"), ("dev", "2"), ("test", "3")] {
            run(&["synth", "--seed", seed, "--out", &p(&format!("{run_id}-{split}.tsv"))])?;
        }
        let ckpt = p(&format!("{run_id}.ckpt"));
        run(&[
            "finetune",
            "--config",
            &p("cfg.json"),
            "--train",
            &p(&format!("{run_id}-train.tsv")),
            "--dev",
            &p(&format!("{run_id}-dev.tsv")),
            "--out",
            &ckpt,
        ])?;
        let report = p(&format!("{run_id}.json"));
        run(&["eval", "--ckpt", &ckpt, "--test", &p(&format!("{run_id}-test.tsv")), "--out", &report])?;
        reports.push(std::fs::read(&report).map_err(|e| e.to_string())?);
    }
    ensure!(reports[0] == reports[1], "eval reports differ");
    Ok(format!("two synth->finetune->eval runs gave the same {}-byte report", reports[0].len()))
}

fn data_pipeline() -> Outcome {
    let original: [(&str, [usize; 3]); 4] = [
        ("Map", [5093, 921, 1578]),
        ("Music", [2189, 381, 676]),
        ("Weather", [341, 378, 2660]),
        ("Video", [205, 195, 1641]),
    ];
    let mut corpus = Vec::new();
    for (label, counts) in original {
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for i in 0..n {
                let u = Utterance::new(format!("{label}-{split}-{i}"), "a b", Some(label)).map_err(|e| e.to_string())?;
                corpus.push(u.with_split(split));
            }
        }
    }
    let targets: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/catslu_targets.json");
    let plan = RebalancePlan::load(&targets).map_err(|e| e.to_string())?;
    let out = rebalance_splits(&corpus, &plan, 0).map_err(|e| e.to_string())?;
    let expected: BTreeMap<String, SplitCounts> = [
        ("Navigation", (2934, 666, 1109)),
        ("Music", (1524, 251, 463)),
        ("Weather", (1463, 211, 417)),
        ("Video", (1004, 163, 487)),
    ]
    .into_iter()
    .map(|(l, (train, dev, test))| (l.to_string(), SplitCounts { train, dev, test }))
    .collect();
    let got = split_counts(&out);
    ensure!(got == expected, "counts {got:?}");
    Ok("train {2934, 1524, 1463, 1004}, dev {666, 251, 211, 163}, test {1109, 463, 417, 487}".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("attention invariants", attention_invariants),
        ("masking statistics", masking_statistics),
        ("learnability", learnability),
        ("pretraining direction", pretraining_direction),
        ("metrics oracle", metrics_oracle),
        ("checkpoint round trip", checkpoint_round_trip),
        ("determinism", determinism),
        ("data pipeline", data_pipeline),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

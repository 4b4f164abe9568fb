//! One function per subcommand. Each validates its paths up front and
//! registers every file it writes, so a failure leaves nothing behind.

use std::path::{Path, PathBuf};

use slu_core::checkpoint::Checkpoint;
use slu_core::data::corpus::format_corpus;
use slu_core::data::{
    build_vocab, corpus_stats, load_corpus, rebalance_splits, split_counts, synthesize_corpus, LabelMap, PhoneVocab,
    RebalancePlan, Split, SynthSpec, Utterance,
};
use slu_core::fsio;
use slu_core::model::Model;
use slu_core::pretrain::pretrain;
use slu_core::rng::substream;
use slu_core::train_eval::{evaluate, finetune, predict, Example};

use crate::config::{Overrides, Phase, RunConfig};
use crate::error::{CliError, Result};

/// Files written so far; removed on drop unless committed.
#[derive(Default)]
struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        fsio::write_atomic(path, bytes)?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

/// The parent directory must exist and `out` must not be one of the inputs.
fn require_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(CliError::Usage(format!("{}: directory does not exist", parent.display())));
    }
    if out.is_dir() {
        return Err(CliError::Usage(format!("{}: is a directory", out.display())));
    }
    let out_abs = std::path::absolute(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    for input in inputs {
        if std::path::absolute(input).is_ok_and(|a| a == out_abs) {
            return Err(CliError::Usage(format!("{}: output would overwrite an input", out.display())));
        }
    }
    Ok(())
}

/// `<out>` with `suffix` appended to the file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn load_config(path: Option<&Path>, overrides: &Overrides, phase: Phase) -> Result<RunConfig> {
    if let Some(p) = path {
        require_file(p)?;
    }
    let mut config = RunConfig::load(path)?;
    config.apply(overrides, phase);
    config.validate()?;
    Ok(config)
}

fn encode_len(config: &RunConfig, model: &Model<f32>) -> usize {
    match model.config().max_seq_len() {
        Some(max) => config.max_len.min(max),
        None => config.max_len,
    }
}

fn encode_ids(vocab: &PhoneVocab, utts: &[Utterance], max_len: usize) -> Result<Vec<Vec<usize>>> {
    utts.iter()
        .map(|u| Ok(vocab.encode_utterance(u, max_len)?.ids))
        .collect()
}

fn examples(vocab: &PhoneVocab, labels: &LabelMap, utts: &[Utterance], max_len: usize) -> Result<Vec<Example>> {
    let gold = labels.encode(utts)?;
    Ok(encode_ids(vocab, utts, max_len)?
        .into_iter()
        .zip(gold)
        .map(|(ids, label)| Example { ids, label })
        .collect())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value).map_err(slu_core::Error::from)? + "\n")
}

pub fn prep(input: &Path, targets: &Path, seed: u64, out_dir: &Path) -> Result<()> {
    require_file(input)?;
    require_file(targets)?;
    let utts = load_corpus(input)?;
    if let Some(u) = utts.iter().find(|u| u.split.is_none()) {
        return Err(CliError::Usage(format!(
            "{}: utterance `{}` has no split column",
            input.display(),
            u.id
        )));
    }
    let plan = RebalancePlan::load(targets)?;
    let balanced = rebalance_splits(&utts, &plan, seed)?;

    std::fs::create_dir_all(out_dir).map_err(|source| slu_core::Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let counts_path = out_dir.join("counts.json");
    let split_paths: Vec<(Split, PathBuf)> =
        Split::ALL.iter().map(|&s| (s, out_dir.join(format!("{s}.tsv")))).collect();
    for path in split_paths.iter().map(|(_, p)| p).chain([&counts_path]) {
        require_output(path, &[input, targets])?;
    }

    let mut outputs = Outputs::default();
    for (split, path) in &split_paths {
        let part: Vec<Utterance> = balanced
            .iter()
            .filter(|u| u.split == Some(*split))
            .map(|u| Utterance { split: None, ..u.clone() })
            .collect();
        outputs.write(path, format_corpus(&part).as_bytes())?;
        tracing::info!(split = %split, utterances = part.len(), "wrote split");
    }
    outputs.write(&counts_path, to_json(&split_counts(&balanced))?.as_bytes())?;
    outputs.commit();
    Ok(())
}

pub fn stats(input: &Path, top_k: usize, out: &Path) -> Result<()> {
    require_file(input)?;
    require_output(out, &[input])?;
    let s = corpus_stats(&load_corpus(input)?, top_k)?;
    let mut outputs = Outputs::default();
    outputs.write(out, s.to_json()?.as_bytes())?;
    outputs.commit();
    Ok(())
}

pub fn synth(spec_path: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec: SynthSpec = match spec_path {
        Some(p) => {
            require_file(p)?;
            serde_json::from_str(&fsio::read_to_string(p)?).map_err(|e| CliError::Config {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?
        }
        None => SynthSpec::default(),
    };
    require_output(out, &spec_path.into_iter().collect::<Vec<_>>())?;
    let corpus = synthesize_corpus(&spec, seed)?;
    let mut outputs = Outputs::default();
    outputs.write(out, format_corpus(&corpus.utterances).as_bytes())?;
    outputs.commit();
    tracing::info!(utterances = corpus.utterances.len(), seed, "synthesized corpus");
    Ok(())
}

pub fn pretrain_cmd(
    config: Option<&Path>,
    overrides: &Overrides,
    corpus: &Path,
    out: &Path,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let config = load_config(config, overrides, Phase::Pretrain)?;
    require_file(corpus)?;
    let loss_path = loss_csv.map_or_else(|| sibling(out, ".loss.csv"), Path::to_path_buf);
    require_output(out, &[corpus])?;
    require_output(&loss_path, &[corpus])?;

    let utts = load_corpus(corpus)?;
    let vocab = build_vocab(&utts, config.min_count)?;
    // placeholder head; fine-tuning replaces it
    let model_config = config.model.clone().with_sizes(vocab.len(), 1);
    let mut model: Model<f32> = Model::new(&model_config, &mut substream(config.seed, "init"))?;
    let seqs = encode_ids(&vocab, &utts, encode_len(&config, &model))?;
    let optimizer = config.optimizer(model.kind());
    let outcome = pretrain(
        &mut model,
        &seqs,
        &config.masking,
        &optimizer,
        &config.pretrain_config(),
    )?;

    let mut outputs = Outputs::default();
    outputs.write(&loss_path, outcome.loss_csv().as_bytes())?;
    let max_len = encode_len(&config, &model);
    outputs.write(out, &Checkpoint::new(model, vocab, vec![], max_len)?.to_bytes()?)?;
    outputs.commit();
    Ok(())
}

pub struct FinetuneArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a Overrides,
    pub train: &'a Path,
    pub dev: &'a Path,
    pub init: Option<&'a Path>,
    pub out: &'a Path,
    pub history: Option<&'a Path>,
}

pub fn finetune_cmd(a: FinetuneArgs<'_>) -> Result<()> {
    let config = load_config(a.config, a.overrides, Phase::Finetune)?;
    let mut inputs = vec![a.train, a.dev];
    inputs.extend(a.init);
    for p in &inputs {
        require_file(p)?;
    }
    let history_path = a.history.map_or_else(|| sibling(a.out, ".history.csv"), Path::to_path_buf);
    require_output(a.out, &inputs)?;
    require_output(&history_path, &inputs)?;

    let train_utts = load_corpus(a.train)?;
    let dev_utts = load_corpus(a.dev)?;
    let labels = LabelMap::from_utterances(&train_utts)?;
    let mut init_rng = substream(config.seed, "init");
    let (mut model, vocab) = match a.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut model = ckpt.model;
            if model.kind() != config.model.kind() {
                tracing::warn!(checkpoint = %model.kind(), "model kind comes from the checkpoint");
            }
            model.reset_classifier(labels.len(), &mut init_rng)?;
            (model, ckpt.vocab)
        }
        None => {
            let vocab = build_vocab(&train_utts, config.min_count)?;
            let model_config = config.model.clone().with_sizes(vocab.len(), labels.len());
            (Model::new(&model_config, &mut init_rng)?, vocab)
        }
    };
    let max_len = encode_len(&config, &model);
    let train = examples(&vocab, &labels, &train_utts, max_len)?;
    let dev = examples(&vocab, &labels, &dev_utts, max_len)?;
    let optimizer = config.optimizer(model.kind());
    let outcome = finetune(
        &mut model,
        &train,
        &dev,
        &optimizer,
        &config.train_config(),
    )?;
    if let Some(best) = outcome.best() {
        tracing::info!(epoch = best.epoch, dev_macro_f1 = best.dev_macro_f1, "kept best dev epoch");
    }

    let mut outputs = Outputs::default();
    outputs.write(&history_path, outcome.history_csv().as_bytes())?;
    let ckpt = Checkpoint::new(model, vocab, labels.names().to_vec(), max_len)?;
    outputs.write(a.out, &ckpt.to_bytes()?)?;
    outputs.commit();
    Ok(())
}

fn load_classifier(path: &Path) -> Result<(Checkpoint, LabelMap)> {
    require_file(path)?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.labels.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: checkpoint has no intent labels; fine-tune it first",
            path.display()
        )));
    }
    let labels = LabelMap::new(ckpt.labels.clone())?;
    Ok((ckpt, labels))
}

fn predict_utts(ckpt: &Checkpoint, utts: &[Utterance]) -> Result<Vec<usize>> {
    Ok(predict(&ckpt.model, &encode_ids(&ckpt.vocab, utts, ckpt.max_len)?)?)
}

pub fn eval(ckpt_path: &Path, test: &Path, out: &Path) -> Result<()> {
    require_file(test)?;
    require_output(out, &[ckpt_path, test])?;
    let (ckpt, labels) = load_classifier(ckpt_path)?;
    let utts = load_corpus(test)?;
    let gold = labels.encode(&utts)?;
    let pred = predict_utts(&ckpt, &utts)?;
    let report = evaluate(&pred, &gold, labels.len())?.with_label_names(labels.names());
    tracing::info!(accuracy = report.accuracy, macro_f1 = report.macro_avg.f1, n = report.n, "evaluated");
    let mut outputs = Outputs::default();
    outputs.write(out, report.to_json()?.as_bytes())?;
    outputs.commit();
    Ok(())
}

pub fn predict_cmd(ckpt_path: &Path, input: &Path, out: &Path) -> Result<()> {
    require_file(input)?;
    require_output(out, &[ckpt_path, input])?;
    let (ckpt, labels) = load_classifier(ckpt_path)?;
    let utts = load_corpus(input)?;
    let pred = predict_utts(&ckpt, &utts)?;
    let labelled: Vec<Utterance> = utts
        .into_iter()
        .zip(pred)
        .map(|(u, p)| Utterance {
            label: labels.name(p).map(str::to_string),
            ..u
        })
        .collect();
    let mut outputs = Outputs::default();
    outputs.write(out, format_corpus(&labelled).as_bytes())?;
    outputs.commit();
    Ok(())
}

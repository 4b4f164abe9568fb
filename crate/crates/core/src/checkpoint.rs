//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PSLU1"  u32 version  u8 kind
//! u32 len  meta JSON {"config": .., "labels": [..], "max_len": n}
//! u32 len  vocab file text
//! u32 n    n × (u32 len, name, u8 trainable, u32 ndim, ndim × u64 dim, numel × f32)
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PhoneVocab;
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{Model, ModelConfig, ModelKind, SequenceModel};
use crate::numerics::Tensor;
use crate::rng::substream;

pub const MAGIC: &[u8; 5] = b"PSLU1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    labels: Vec<String>,
    max_len: usize,
}

/// Everything needed to rebuild a model for inference without other files.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: PhoneVocab,
    /// Class names in class-id order; empty for a pretraining-only model.
    pub labels: Vec<String>,
    /// Encoded length (CLS included) the model was trained with.
    pub max_len: usize,
}

fn kind_byte(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Transformer => 0,
        ModelKind::Baseline => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("checkpoint", "section exceeds 4 GiB"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(out, bytes.len())?;
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes"))).map_err(|_| Error::Checkpoint {
            offset: at,
            msg: format!("{what} does not fit in memory"),
        })
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)?;
        self.take(n, what)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.bytes(what)?).map_err(|_| Error::Checkpoint {
            offset: at,
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

impl Checkpoint {
    pub fn new(model: Model<f32>, vocab: PhoneVocab, labels: Vec<String>, max_len: usize) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("model expects {} tokens but the vocabulary has {}", model.vocab_size(), vocab.len()),
            ));
        }
        if !labels.is_empty() && labels.len() != model.n_classes() {
            return Err(Error::invalid(
                "checkpoint",
                format!("{} label names for {} classes", labels.len(), model.n_classes()),
            ));
        }
        if max_len < 2 || model.config().max_seq_len().is_some_and(|m| max_len > m) {
            return Err(Error::invalid("checkpoint", format!("encoded length {max_len} does not fit the model")));
        }
        Ok(Self {
            model,
            vocab,
            labels,
            max_len,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.model.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(kind_byte(config.kind()));
        let meta = Meta {
            config,
            labels: self.labels.clone(),
            max_len: self.max_len,
        };
        put_bytes(&mut out, serde_json::to_string(&meta)?.as_bytes())?;
        put_bytes(&mut out, self.vocab.to_file_string().as_bytes())?;
        let params = self.model.params();
        put_u32(&mut out, params.len())?;
        for p in params.iter() {
            put_bytes(&mut out, p.name.as_bytes())?;
            out.push(u8::from(p.trainable));
            put_u32(&mut out, p.tensor.shape().len())?;
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: "bad magic, not a checkpoint".into(),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let at = r.pos;
        let kind = r.u8("model kind")?;
        let meta_at = r.pos;
        let meta: Meta = serde_json::from_str(r.text("metadata")?).map_err(|e| Error::Checkpoint {
            offset: meta_at,
            msg: format!("metadata: {e}"),
        })?;
        if kind != kind_byte(meta.config.kind()) {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("kind byte {kind} disagrees with the {} config", meta.config.kind()),
            });
        }
        let vocab_at = r.pos;
        let vocab = PhoneVocab::parse(r.text("vocabulary")?, "<checkpoint>").map_err(|e| Error::Checkpoint {
            offset: vocab_at,
            msg: format!("vocabulary: {e}"),
        })?;

        let mut model = Model::<f32>::new(&meta.config, &mut substream(0, "init")).map_err(|e| Error::Checkpoint {
            offset: meta_at,
            msg: format!("config: {e}"),
        })?;
        let expected = model.params().len();
        let at = r.pos;
        let n = r.u32("tensor count")?;
        if n != expected {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("{n} tensors, the config defines {expected}"),
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let name = r.text("tensor name")?.to_string();
            let trainable = r.u8("trainable flag")? != 0;
            let ndim = r.u32("rank")?;
            let shape = (0..ndim).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| r.fail(format!("`{name}` shape {shape:?} overflows")))?;
            let data: Vec<f32> = r
                .take(numel * 4, &format!("`{name}` data"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let Some(idx) = model.params().index_of(&name) else {
                return Err(Error::Checkpoint {
                    offset: at,
                    msg: format!("unknown tensor `{name}`"),
                });
            };
            let want = model.params().get(idx);
            if want.tensor.shape() != shape.as_slice() || want.trainable != trainable {
                return Err(Error::Checkpoint {
                    offset: at,
                    msg: format!("tensor `{name}` has shape {shape:?}, the config expects {:?}", want.tensor.shape()),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint {
                    offset: at,
                    msg: format!("duplicate tensor `{name}`"),
                });
            }
            model.params_mut().assign(&name, Tensor::new(shape, data)?)?;
        }
        if r.pos != buf.len() {
            return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Self::new(model, vocab, meta.labels, meta.max_len).map_err(|e| Error::Checkpoint {
            offset: meta_at,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read_bytes(path)?)
    }
}

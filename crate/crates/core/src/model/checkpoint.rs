//! Binary checkpoint format.
//!
//! ```text
//! "MXL1"                      magic
//! u32 LE                      format version
//! u32 LE + UTF-8              config record (key=value lines, includes head kind)
//! per tensor, canonical order:
//!   u32 LE + UTF-8            name
//!   u32 LE                    rank
//!   u64 LE * rank             dims
//!   f64 LE * prod(dims)       values
//! u32 LE                      CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{HeadKind, Model, ModelConfig, ModelError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXL1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_record(model: &Model) -> String {
    let c = model.config();
    format!(
        "n_layers={}\nhidden={}\nn_heads={}\nff_dim={}\nvocab_size={}\nmax_len={}\nn_classes={}\ndropout={}\nhead={}\n",
        c.n_layers,
        c.hidden,
        c.n_heads,
        c.ff_dim,
        c.vocab_size,
        c.max_len,
        c.n_classes,
        c.dropout,
        model.head_kind()
    )
}

fn parse_config_record(text: &str) -> Result<(ModelConfig, HeadKind)> {
    let mut cfg = ModelConfig::default();
    let mut head = None;
    let malformed = |m: String| ModelError::Malformed(m);
    for line in text.lines() {
        let (key, value) = line.split_once('=').ok_or_else(|| malformed(format!("config line {line:?}")))?;
        let int = || value.parse::<usize>().map_err(|_| malformed(format!("bad integer for {key}: {value:?}")));
        match key {
            "n_layers" => cfg.n_layers = int()?,
            "hidden" => cfg.hidden = int()?,
            "n_heads" => cfg.n_heads = int()?,
            "ff_dim" => cfg.ff_dim = int()?,
            "vocab_size" => cfg.vocab_size = int()?,
            "max_len" => cfg.max_len = int()?,
            "n_classes" => cfg.n_classes = int()?,
            "dropout" => {
                cfg.dropout = value.parse().map_err(|_| malformed(format!("bad dropout {value:?}")))?;
            }
            "head" => {
                head = Some(match value {
                    "mlm" => HeadKind::Mlm,
                    "classifier" => HeadKind::Classifier,
                    other => return Err(malformed(format!("unknown head kind {other:?}"))),
                })
            }
            other => return Err(malformed(format!("unknown config key {other:?}"))),
        }
    }
    let head = head.ok_or_else(|| malformed("config record lacks head kind".into()))?;
    Ok((cfg, head))
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let record = config_record(model);
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    out.extend_from_slice(record.as_bytes());
    let params = model.params();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Malformed("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Malformed("non UTF-8 string".into()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(ModelError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(ModelError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let (config, head) = parse_config_record(&r.string()?)?;
    config.validate()?;

    // Start from a correctly shaped skeleton and fill it by name.
    let mut model = Model::init(config, 0)?.swap_head(head, 0);
    let names = model.params().names();
    let params = model.params_mut();
    for (expected, tensor) in names.iter().zip(params.tensors_mut()) {
        let name = r.string()?;
        if &name != expected {
            return Err(ModelError::Malformed(format!("expected tensor {expected}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != tensor.shape() {
            return Err(ModelError::Malformed(format!("tensor {name} has shape {dims:?}, expected {:?}", tensor.shape())));
        }
        for v in tensor.data_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::Malformed("trailing data after last tensor".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}

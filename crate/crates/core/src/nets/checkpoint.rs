//! Binary checkpoint: magic, version, `key=value` config text, training
//! metadata, then every named array as little-endian f32.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;

const MAGIC: &[u8; 8] = b"CXRCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub best_val_loss: f64,
    pub seed: u64,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            epoch: 0,
            best_val_loss: f64::INFINITY,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    /// Extra `key=value` settings stored with the model (for example the
    /// preprocessing a classifier expects).
    pub extra: Vec<(String, String)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            extra: Vec::new(),
            meta: CheckpointMeta::default(),
        }
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn render(section: &[(String, String)]) -> String {
    section.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(format!("bad config line `{l}`")))
        })
        .collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &render(&ckpt.model.config().to_kv()));
    put_str(&mut out, &render(&ckpt.train.to_kv()));
    put_str(&mut out, &render(&ckpt.extra));
    out.extend_from_slice(&ckpt.meta.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.best_val_loss.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.seed.to_le_bytes());
    let arrays: Vec<_> = ckpt.model.store().named_arrays().collect();
    put_u32(&mut out, arrays.len() as u32);
    for (name, t) in arrays {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format("checkpoint string is not UTF-8"))
    }
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let model_cfg = ModelConfig::from_kv(&parse_kv(r.str()?)?)?;
    let mut train = TrainConfig::segmentation();
    for (k, v) in parse_kv(r.str()?)? {
        train.set(&k, &v)?;
    }
    let extra = parse_kv(r.str()?)?;
    let meta = CheckpointMeta {
        epoch: r.u64()?,
        best_val_loss: f64::from_bits(r.u64()?),
        seed: r.u64()?,
    };
    let mut model = Model::build(&model_cfg, 0)?;
    let count = r.u32()? as usize;
    let expected = model.store().named_arrays().count();
    if count != expected {
        return Err(Error::format(format!("checkpoint holds {count} arrays, config needs {expected}")));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("array size overflow"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        loaded.push((name, Tensor::new(shape, values)?));
    }
    if r.pos != data.len() {
        return Err(Error::format("trailing bytes after checkpoint arrays"));
    }
    for ((name, dst), (lname, src)) in model.store_mut().named_arrays_mut().zip(loaded) {
        if name != lname || dst.shape() != src.shape() {
            return Err(Error::format(format!(
                "array `{lname}` {:?} does not match `{name}` {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src;
    }
    Ok(Checkpoint {
        model,
        train,
        extra,
        meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&data)
}

//! Binary checkpoint: magic `CFFM`, version, a `key = value` config block,
//! named parameter tensors and an optional optimizer section.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};

use super::config::{parse_kv, ModelConfig};
use super::net::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFFM";
pub const CHECKPOINT_VERSION: u32 = 1;
const STEP_KEY: &str = "train_step";

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Present when the file carries optimizer moments.
    pub adam: Option<AdamState>,
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model, adam: Option<&AdamState>) -> Vec<u8> {
    let mut text = model.config.to_text();
    if let Some(a) = adam {
        text.push_str(&format!("{STEP_KEY} = {}\n", a.step));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        put_entry(&mut out, name, t);
    }
    if let Some(a) = adam {
        out.extend_from_slice(&(2 * model.store.len() as u32).to_le_bytes());
        for (prefix, moments) in [("adam.m", &a.m), ("adam.v", &a.v)] {
            for ((_, name, _), t) in model.store.iter().zip(moments) {
                put_entry(&mut out, &format!("{prefix}.{name}"), t);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("shape {shape:?} of {name:?} overflows")))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name:?}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut pairs = parse_kv(text)?;
    let step = match pairs.iter().position(|(k, _)| k == STEP_KEY) {
        Some(i) => {
            let (_, v) = pairs.remove(i);
            Some(v.parse::<u64>().map_err(|_| Error::Format(format!("invalid {STEP_KEY} {v:?}")))?)
        }
        None => None,
    };
    let config = ModelConfig::from_pairs(&pairs)?;
    let mut model = Model::build(&config, config.seed)?;

    let n = r.u32("parameter count")? as usize;
    if n != model.store.len() {
        return Err(Error::Dimension(format!("checkpoint has {n} parameters, config implies {}", model.store.len())));
    }
    for _ in 0..n {
        let (name, t) = r.entry()?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Dimension(format!("parameter {name:?} does not belong to this config")))?;
        if model.store.get(id).shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "{name:?} has shape {:?}, config implies {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        *model.store.get_mut(id) = t;
    }

    let adam = match step {
        None => None,
        Some(step) => {
            let count = r.u32("optimizer entry count")? as usize;
            if count != 2 * n {
                return Err(Error::Format(format!("optimizer section has {count} entries, expected {}", 2 * n)));
            }
            let mut state = AdamState::new(&model.store, config.lr);
            state.step = step;
            for _ in 0..count {
                let (name, t) = r.entry()?;
                let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                    (&mut state.m, p)
                } else if let Some(p) = name.strip_prefix("adam.v.") {
                    (&mut state.v, p)
                } else {
                    return Err(Error::Format(format!("unexpected optimizer entry {name:?}")));
                };
                let id = model.store.id(pname).ok_or_else(|| Error::Format(format!("moment for unknown {pname:?}")))?;
                if t.shape() != model.store.get(id).shape() {
                    return Err(Error::Dimension(format!("moment {name:?} has shape {:?}", t.shape())));
                }
                slot[id.index()] = t;
            }
            Some(state)
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, adam })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, adam: Option<&AdamState>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, adam))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

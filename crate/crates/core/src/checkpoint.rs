//! EAMC checkpoints: magic, version, config text and a named tensor table,
//! all little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::multiscale::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor4};

pub const MAGIC: &[u8; 4] = b"EAMC";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("length {v} does not fit the checkpoint format")))?;
    put_u32(out, v);
    Ok(())
}

pub fn encode<T: Element>(model: &Model, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    let config = format!("{}dtype={}\n", model.config.to_text(), T::DTYPE);
    put_len(&mut out, config.len())?;
    out.extend_from_slice(config.as_bytes());
    put_len(&mut out, store.len())?;
    for (_, name, value) in store.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 4);
        for d in value.shape().dims() {
            put_len(&mut out, d)?;
        }
        out.reserve(value.data().len() * T::BYTES);
        for &v in value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Config(format!("{what} is not UTF-8")))
    }
}

/// Splits the stored config text into the model config and the dtype.
fn parse_config(text: &str) -> Result<(ModelConfig, String)> {
    let mut dtype = None;
    let mut rest = String::new();
    for line in text.lines() {
        match line.strip_prefix("dtype=") {
            Some(d) => dtype = Some(d.trim().to_string()),
            None => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let dtype = dtype.ok_or_else(|| Error::Config("checkpoint config lacks a dtype".into()))?;
    Ok((ModelConfig::from_text(&rest)?, dtype))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Model, ParamStore<T>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let (config, dtype) = parse_config(r.string("config block")?)?;
    if dtype != T::DTYPE {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint stores {dtype} tensors, {} requested",
            T::DTYPE
        )));
    }
    let mut store = ParamStore::new();
    let model = Model::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32("tensor count")? as usize;
    if count != store.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {count} tensors, the configured model has {}",
            store.len()
        )));
    }
    let mut seen = vec![false; store.len()];
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")?;
        if rank != 4 {
            return Err(Error::ConfigMismatch(format!("tensor `{name}` has rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor extent")? as usize;
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * T::BYTES, name)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let id = store.id(name)?;
        seen[id.index()] = true;
        store.set_value(id, Tensor4::new(dims, data)?)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = store.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::MissingParam(name));
    }
    if r.pos != bytes.len() {
        return Err(Error::Config(format!("{} trailing bytes after the tensor table", bytes.len() - r.pos)));
    }
    Ok((model, store))
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &Model, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(model, store)?).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Model, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode(&bytes)
}

/// Fails unless the stored attention variant is `requested`.
pub fn expect_variant(model: &Model, requested: AttentionVariant) -> Result<()> {
    let stored = model.config.eam.variant;
    if stored != requested {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was trained with variant {stored}, but {requested} was requested"
        )));
    }
    Ok(())
}

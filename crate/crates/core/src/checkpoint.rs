//! Binary checkpoints:
//!
//! ```text
//! magic    8 bytes "VIFCKPT1"
//! version  u32 LE  (1)
//! config   u32 LE byte length + flat key=value UTF-8 text
//! records  per parameter:
//!            name length u32 LE, name bytes,
//!            shape rank u32 LE, dims u32 LE each,
//!            payload f64 LE
//! ```
//!
//! Loading rebuilds the model from the embedded config, then overwrites
//! every registered parameter from its record; the record set must cover
//! the registered set exactly. Values round-trip bit-identically.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::config::{model_config_from_kv, model_config_to_kv, KvMap};
use crate::error::{Result, VifError};
use crate::model::VifModel;

const MODULE: &str = "checkpoint";
pub const CKPT_MAGIC: &[u8; 8] = b"VIFCKPT1";
pub const CKPT_VERSION: u32 = 1;

/// Keys in the config block that carry metadata rather than model structure
/// get this prefix.
pub const META_PREFIX: &str = "meta.";

pub fn save<W: Write>(w: &mut W, model: &VifModel, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut kv = model_config_to_kv(&model.cfg);
    for (k, v) in meta {
        kv.set(&format!("{META_PREFIX}{k}"), v);
    }
    let cfg_text = kv.render();

    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    w.write_all(cfg_text.as_bytes())?;

    for (_, name, shape, values) in model.store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a, R: Read> {
    r: &'a mut R,
    offset: u64,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.r
            .read_exact(buf)
            .map_err(|_| VifError::format(MODULE, format!("truncated while reading {what}"), at))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Read one record header; None at clean EOF.
    fn maybe_u32(&mut self) -> Result<Option<u32>> {
        let mut b = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = self.r.read(&mut b[got..])?;
            if n == 0 {
                if got == 0 {
                    return Ok(None);
                }
                return Err(VifError::format(
                    MODULE,
                    "truncated record header",
                    self.offset + got as u64,
                ));
            }
            got += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(b)))
    }
}

/// Load a checkpoint, returning the model and any `meta.*` keys.
pub fn load<R: Read>(r: &mut R) -> Result<(VifModel, BTreeMap<String, String>)> {
    let mut cur = Cursor { r, offset: 0 };
    let mut magic = [0u8; 8];
    cur.exact(&mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(VifError::format(MODULE, "bad magic", 0));
    }
    let version = cur.u32("version")?;
    if version != CKPT_VERSION {
        return Err(VifError::format(MODULE, format!("unsupported version {version}"), 8));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    cur.exact(&mut cfg_bytes, "config block")?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| VifError::format(MODULE, "config block is not UTF-8", 16))?;
    let kv = KvMap::parse(&cfg_text)?;
    let mut meta = BTreeMap::new();
    for (k, v) in &kv.0 {
        if let Some(stripped) = k.strip_prefix(META_PREFIX) {
            meta.insert(stripped.to_string(), v.clone());
        }
    }
    let cfg = model_config_from_kv(&kv)?;

    // Rebuild the canonical parameter set, then overwrite from records.
    let mut model = VifModel::init(cfg, 0)
        .map_err(|e| VifError::format(MODULE, format!("config rebuild failed: {e}"), 16))?;
    let mut filled = vec![false; model.store.len()];
    loop {
        let Some(name_len) = cur.maybe_u32()? else { break };
        let mut name_bytes = vec![0u8; name_len as usize];
        cur.exact(&mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| VifError::format(MODULE, "parameter name is not UTF-8", cur.offset))?;
        let rank = cur.u32("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 8];
        cur.exact(&mut payload, &format!("payload of {name}"))?;

        let idx = model.store.idx(&name).map_err(|_| {
            VifError::format(MODULE, format!("unknown parameter '{name}'"), cur.offset)
        })?;
        if model.store.shape_of(idx) != shape.as_slice() {
            return Err(VifError::format(
                MODULE,
                format!(
                    "parameter '{name}' has shape {:?} in file vs {:?} expected",
                    shape,
                    model.store.shape_of(idx)
                ),
                cur.offset,
            ));
        }
        if filled[idx] {
            return Err(VifError::format(
                MODULE,
                format!("duplicate record for '{name}'"),
                cur.offset,
            ));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store.values_mut(idx) = values;
        filled[idx] = true;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(VifError::format(
            MODULE,
            format!("missing record for '{}'", model.store.name(missing)),
            cur.offset,
        ));
    }
    Ok((model, meta))
}

pub fn save_to_path(path: &std::path::Path, model: &VifModel, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(&mut f, model, meta)?;
    use std::io::Write as _;
    f.flush()?;
    Ok(())
}

pub fn load_from_path(path: &std::path::Path) -> Result<(VifModel, BTreeMap<String, String>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load(&mut f)
}

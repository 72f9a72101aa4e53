//! Little-endian binary containers.
//!
//! Parameters:
//! `"MXRPARAM" | u32 version | [u8; 32] config digest | u32 count` then per
//! array `u32 name_len | name | u32 ndim | u64 dims… | f64 values…`.
//!
//! Emitted features:
//! `"MXRFEATS" | u32 version | u32 levels` then per level
//! `u64 count | u64 dim | count × (u8 level, u32 row, u32 col) | count·dim f64`.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::TokenKey;
use crate::model::Model;
use crate::tensor::{ParamStore, Tensor};

pub const PARAM_MAGIC: &[u8; 8] = b"MXRPARAM";
pub const FEATURE_MAGIC: &[u8; 8] = b"MXRFEATS";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format { what: self.what, detail: format!("truncated at byte {}", self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format { what: self.what, detail: format!("length {n} too large") })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Format { what: self.what, detail: "length overflow".into() })?;
        Ok(self.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Format { what: self.what, detail: "bad magic".into() });
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format { what: self.what, detail: format!("unsupported version {v}") });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format { what: self.what, detail: format!("{} trailing bytes", self.buf.len() - self.pos) });
        }
        Ok(())
    }
}

pub fn encode_params(digest: &[u8; 32], store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * 8);
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Returns the stored config digest and the named arrays.
pub fn decode_params(bytes: &[u8]) -> Result<([u8; 32], ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0, what: "parameter container" };
    r.header(PARAM_MAGIC)?;
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format { what: "parameter container", detail: "name is not UTF-8".into() })?
            .to_string();
        if store.id(&name).is_some() {
            return Err(Error::Format { what: "parameter container", detail: format!("duplicate array {name}") });
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            what: "parameter container",
            detail: format!("shape {shape:?} overflows"),
        })?;
        let data = r.f64s(len)?;
        store.add(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok((digest, store))
}

pub fn save_model(model: &Model) -> Vec<u8> {
    encode_params(&model.config().digest(), model.store())
}

/// Loads parameters for `cfg`; the stored digest must match.
pub fn load_model(cfg: EncoderConfig, bytes: &[u8]) -> Result<Model> {
    let (digest, store) = decode_params(bytes)?;
    if digest != cfg.digest() {
        return Err(Error::Format { what: "parameter container", detail: "config digest does not match".into() });
    }
    Model::with_params(cfg, store)
}

/// Per-level `(keys, features)` of one sample.
pub fn encode_features(levels: &[(Vec<TokenKey>, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(levels.len() as u32).to_le_bytes());
    for (keys, feats) in levels {
        let dim = if keys.is_empty() { feats.shape().last().copied().unwrap_or(0) } else { feats.len() / keys.len() };
        out.extend_from_slice(&(keys.len() as u64).to_le_bytes());
        out.extend_from_slice(&(dim as u64).to_le_bytes());
        for k in keys {
            out.push(k.level.get());
            out.extend_from_slice(&k.row.to_le_bytes());
            out.extend_from_slice(&k.col.to_le_bytes());
        }
        for v in feats.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<(Vec<TokenKey>, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0, what: "feature export" };
    r.header(FEATURE_MAGIC)?;
    let levels = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..levels {
        let count = r.len()?;
        let dim = r.len()?;
        let mut keys = Vec::new();
        for _ in 0..count {
            let (level, row, col) = (r.u8()?, r.u32()?, r.u32()?);
            keys.push(TokenKey::new(level, row, col).map_err(|e| Error::Format { what: "feature export", detail: e.to_string() })?);
        }
        let n = count.checked_mul(dim).ok_or_else(|| Error::Format { what: "feature export", detail: "size overflow".into() })?;
        let data = r.f64s(n)?;
        out.push((keys, Tensor::new(vec![count, dim], data)?));
    }
    r.finish()?;
    Ok(out)
}

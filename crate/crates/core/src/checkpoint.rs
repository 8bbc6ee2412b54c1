//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LMNCKPT"  u32 version  u32 len  config text (key=value lines)
//! u32 tensor count, then per tensor:
//!   u32 name len  name  u32 rank  u64 extents…  f32 values…
//! ```

use std::io::{Read, Write};
use std::path::Path;

use lmn_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{LmnError, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 7] = b"LMNCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LmnError::Checkpoint(format!("truncated at byte {}", self.pos)));
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LmnError::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model<f32>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(LmnError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(LmnError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_text(&c.string()?)?;
    let mut model = Model::<f32>::new(config)?;
    let expected = model.named_params();
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(LmnError::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want) in &expected {
        let name = c.string()?;
        if &name != want_name {
            return Err(LmnError::Checkpoint(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want.shape() {
            return Err(LmnError::Checkpoint(format!(
                "`{name}` has shape {shape:?}, config implies {:?}",
                want.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(Tensor::param(data, &shape)?);
    }
    if c.pos != buf.len() {
        return Err(LmnError::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    model.set_params(tensors)?;
    Ok(model)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| LmnError::io(&tmp, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| LmnError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LmnError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LmnError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| LmnError::io(path, e))?;
    from_bytes(&buf)
}

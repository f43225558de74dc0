//! Checkpoint container: `RDNS1`, a length-prefixed key-sorted JSON block,
//! a tensor count, then tensor records.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{RecordReader, Tensor};

pub const MAGIC: &[u8; 5] = b"RDNS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    // serde_json's default map is ordered by key, so this text is canonical.
    let json = serde_json::to_string(&ckpt.config)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for t in &ckpt.tensors {
        t.write_record(w)?;
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = RecordReader::new(bytes);
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let len = r.read_u64("config length")?;
    let at = r.position();
    let text = r.take(len as usize, "config")?;
    let config = serde_json::from_slice(text).map_err(|e| Error::Parse {
        offset: at as u64,
        message: format!("config json: {e}"),
    })?;
    let count = r.read_u64("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        tensors.push(r.read_tensor()?);
    }
    if !r.is_at_end() {
        return Err(Error::Parse {
            offset: r.position() as u64,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

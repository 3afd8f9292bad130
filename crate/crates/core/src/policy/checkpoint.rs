//! Named-tensor checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DASHCKPT"
//! version      u32       1
//! header_len   u32       byte length of the JSON header
//! header       JSON      {"architecture": {...}, "vocab": [...] | null,
//!                         "tensors": [{"name": ..., "shape": [...]}, ...]}
//! data         f64 LE    each tensor row-major, in header order
//! ```
//!
//! See `docs/checkpoint-format.md` for the compatibility rules.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, PolicyParams, Vocab};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DASHCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    vocab: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub vocab: Option<Vec<String>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(mut w: impl Write, params: &PolicyParams, vocab: Option<&Vocab>) -> Result<()> {
    let layout = params.arch().layout();
    let header = Header {
        architecture: *params.arch(),
        vocab: vocab.map(|v| v.tokens().to_vec()),
        tensors: layout
            .tensors()
            .iter()
            .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for x in params.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let arch = header.architecture;
    arch.validate()?;

    let layout = arch.layout();
    let mut data = vec![0.0; layout.total()];
    for entry in &header.tensors {
        let spec = layout.get(&entry.name).ok_or_else(|| bad(format!("unknown tensor {:?}", entry.name)))?;
        if spec.shape != entry.shape {
            return Err(bad(format!("tensor {:?} has shape {:?}, expected {:?}", entry.name, entry.shape, spec.shape)));
        }
        let mut bytes = vec![0u8; spec.len() * 8];
        r.read_exact(&mut bytes)?;
        for (x, chunk) in data[spec.range()].iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    if header.tensors.len() != layout.tensors().len() {
        return Err(bad(format!(
            "{} tensors stored, architecture has {}",
            header.tensors.len(),
            layout.tensors().len()
        )));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let params = PolicyParams::from_vec(arch, data).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { params, vocab: header.vocab })
}

/// Writes to a sibling temp file first so an interrupted save never clobbers
/// the previous checkpoint.
pub fn save_checkpoint(path: &Path, params: &PolicyParams, vocab: Option<&Vocab>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut f, params, vocab)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture { vocab_size: 6, embed_dim: 4, n_heads: 1, ff_dim: 5, context: 6, n_layers: 2 }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = PolicyParams::random(arch(), 11, 1.3).unwrap();
        let vocab = Vocab::with_symbols("abc").unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, Some(&vocab)).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.params.as_slice(), params.as_slice());
        assert_eq!(ck.vocab.unwrap(), vocab.tokens());
    }

    #[test]
    fn rejects_corruption() {
        let params = PolicyParams::random(arch(), 1, 1.0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, None).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(truncated).is_err());
        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(read_checkpoint(nan.as_slice()).is_err());
    }
}

//! Binary checkpoint format.
//!
//! Layout: magic `TADT`, u32 version (LE), u64 header length (LE), JSON
//! header, raw little-endian float payload. The header's `tensors` object
//! maps each tensor name to `{shape, dtype, offset}`; offsets index into
//! the payload in header (name-sorted) order. A `meta` object carries
//! run metadata (config, normalization stats, optimizer step).

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TADT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    meta: serde_json::Value,
}

pub fn save<S: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, &Tensor<S>>,
    meta: serde_json::Value,
) -> Result<()> {
    let elem = std::mem::size_of::<S>() as u64;
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.insert(
            name.clone(),
            TensorEntry { shape: t.shape, dtype: S::DTYPE.to_string(), offset },
        );
        offset += t.data.len() as u64 * elem;
    }
    let header = serde_json::to_vec(&Header { tensors: entries, meta })?;

    let mut payload = Vec::with_capacity(offset as usize);
    for (_, t) in tensors {
        S::write_le_bytes(&t.data, &mut payload);
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub struct Checkpoint<S> {
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub meta: serde_json::Value,
}

pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)
        .map_err(|_| Error::Checkpoint("missing version".into()))?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unknown version {version}")));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)
        .map_err(|_| Error::Checkpoint("missing header length".into()))?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header json: {e}")))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let elem = std::mem::size_of::<S>() as u64;
    let mut tensors = BTreeMap::new();
    for (name, e) in header.tensors {
        if e.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dtype {} but {} was requested",
                e.dtype,
                S::DTYPE
            )));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + (n as u64 * elem) as usize;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' extends past payload ({end} > {})",
                payload.len()
            )));
        }
        let data = S::read_le_bytes(&payload[start..end])?;
        tensors.insert(name, Tensor { shape: e.shape, data, grad: None });
    }
    Ok(Checkpoint { tensors, meta: header.meta })
}

/// Reads only the dtype recorded in a checkpoint ("f32" or "f64").
pub fn peek_dtype(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &prefix[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(prefix[8..16].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header json: {e}")))?;
    Ok(header
        .tensors
        .values()
        .next()
        .map(|e| e.dtype.clone())
        .unwrap_or_else(|| "f32".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_tensors() -> BTreeMap<String, Tensor<f32>> {
        let mut rng = stream(1, "ckpt", 0);
        let mut m = BTreeMap::new();
        m.insert("b.weight".to_string(), Tensor::randn(3, 4, 1.0, &mut rng));
        m.insert("a.bias".to_string(), Tensor::randn(1, 4, 1.0, &mut rng));
        m
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let tensors = sample_tensors();
        let refs: BTreeMap<String, &Tensor<f32>> =
            tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        save(&path, &refs, serde_json::json!({"step": 7})).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.tensors.len(), 2);
        for (k, t) in &tensors {
            assert_eq!(&loaded.tensors[k].data, &t.data);
            assert_eq!(loaded.tensors[k].shape, t.shape);
        }
        assert_eq!(loaded.meta["step"], 7);
    }

    #[test]
    fn truncated_payload_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let tensors = sample_tensors();
        let refs: BTreeMap<String, &Tensor<f32>> =
            tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        save(&path, &refs, serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let tensors = sample_tensors();
        let refs: BTreeMap<String, &Tensor<f32>> =
            tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        save(&path, &refs, serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'T';
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_payload_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let tensors = sample_tensors();
        let refs: BTreeMap<String, &Tensor<f32>> =
            tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        save(&path, &refs, serde_json::Value::Null).unwrap();
        // Inflate a declared shape so it overruns the payload.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let bloated = header.replace("[3,4]", "[300,4]");
        assert_ne!(header, bloated);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(bloated.len() as u64).to_le_bytes());
        out.extend_from_slice(bloated.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        std::fs::write(&path, &out).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dtype_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let tensors = sample_tensors();
        let refs: BTreeMap<String, &Tensor<f32>> =
            tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        save(&path, &refs, serde_json::Value::Null).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), "f32");
        assert!(matches!(load::<f64>(&path), Err(Error::Checkpoint(_))));
    }
}

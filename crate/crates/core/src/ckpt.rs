//! Checkpoint files: JSON header + raw f32 little-endian weight blobs.
//!
//! Layout: magic `IBVCCKPT`, u32-LE header length, JSON header, then each
//! tensor's data in header order. The model hash (sha256 of the whole file)
//! identifies a network in bitstream headers, so encode and decode can refuse
//! to run with mismatched weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IBVCCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

pub struct LoadedCkpt {
    pub meta: serde_json::Value,
    pub ps: ParamStore<f32>,
    /// sha256 of the file bytes.
    pub hash: [u8; 32],
}

/// Serialize a parameter store; returns the file hash.
pub fn save(path: &Path, meta: &serde_json::Value, ps: &ParamStore<f32>) -> Result<[u8; 32]> {
    let header = Header {
        version: VERSION,
        meta: meta.clone(),
        tensors: ps
            .iter()
            .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape() })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + hjson.len() + ps.num_scalars() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&hjson);
    for (_, t) in ps.iter() {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn load(path: &Path) -> Result<LoadedCkpt> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash: [u8; 32] = Sha256::digest(&bytes).into();
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::Corrupt("checkpoint header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} not supported (expected {VERSION})",
            header.version
        )));
    }
    let mut ps = ParamStore::new();
    let mut off = 12 + hlen;
    for te in &header.tensors {
        let n: usize = te.shape.iter().product();
        let end = off + n * 4;
        if bytes.len() < end {
            return Err(Error::Corrupt(format!("weights truncated at {:?}", te.name)));
        }
        let data: Vec<f32> = bytes[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ps.insert(&te.name, Tensor::from_vec(te.shape, data)?);
        off = end;
    }
    if off != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after weights",
            bytes.len() - off
        )));
    }
    Ok(LoadedCkpt { meta: header.meta, ps, hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trip_preserves_bits_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f32>::new();
        crate::nn::init_conv(&mut ps, "a", 4, 3, 3, &mut rng);
        crate::nn::init_conv(&mut ps, "b", 2, 4, 1, &mut rng);
        let meta = serde_json::json!({"lambda_id": 2, "arch": {"c": 16}});
        let h1 = save(&p, &meta, &ps).unwrap();
        let lc = load(&p).unwrap();
        assert_eq!(lc.hash, h1);
        assert_eq!(lc.meta["lambda_id"], 2);
        assert_eq!(lc.ps.names(), ps.names());
        for (n, t) in ps.iter() {
            assert_eq!(lc.ps.get(n).data(), t.data(), "{n}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ps = ParamStore::<f32>::new();
        save(&p, &serde_json::json!({}), &ps).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load(&p).is_err());

        // Truncated weights.
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f32>::new();
        crate::nn::init_conv(&mut ps, "a", 2, 2, 3, &mut rng);
        save(&p, &serde_json::json!({}), &ps).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&p).is_err());
    }
}

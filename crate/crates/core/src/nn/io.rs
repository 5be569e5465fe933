//! Checkpoint blobs: named tensors as little-endian f32 with a content hash.

use super::ParamStore;
use crate::tensor::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{Cursor, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CVWT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

fn serialize<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    buf.write_u32::<LittleEndian>(store.len() as u32).unwrap();
    for (_, name, value) in store.iter() {
        buf.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u8(value.ndim() as u8).unwrap();
        for &d in value.shape() {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &x in value.iter() {
            buf.write_f32::<LittleEndian>(x.to_f64v() as f32).unwrap();
        }
    }
    buf
}

pub fn save_params<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<(), IoError> {
    let bytes = serialize(store);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// SHA-256 of the canonical serialization, hex-encoded. Used to pin frozen
/// encoders and stamp reports.
pub fn params_hash<S: Scalar>(store: &ParamStore<S>) -> String {
    let bytes = serialize(store);
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a checkpoint into an existing store with identical names/shapes
/// (the model is rebuilt from config first, then weights are restored).
pub fn load_params<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<(), IoError> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::Format("wrong magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(IoError::Format(format!("unsupported version {version}")));
    }
    let count = cur.read_u32::<LittleEndian>()? as usize;
    if count != store.len() {
        return Err(IoError::Format(format!(
            "parameter count mismatch: checkpoint {count}, model {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = cur.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| IoError::Format("invalid parameter name".into()))?;
        let ndim = cur.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::lit(cur.read_f32::<LittleEndian>()? as f64));
        }
        let id = store
            .id_of(&name)
            .ok_or_else(|| IoError::Format(format!("unknown parameter {name}")))?;
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| IoError::Format(format!("bad shape for {name}: {e}")))?;
        if arr.shape() != store.get(id).shape() {
            return Err(IoError::Format(format!("shape mismatch for {name}")));
        }
        *store.get_mut(id) = arr;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_and_hash_stability() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", randn(&[3, 2], 1.0, &mut rng));
        store.add("a.bias", randn(&[2], 1.0, &mut rng));
        let h1 = params_hash(&store);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_params(&store, &path).unwrap();

        let mut store2 = ParamStore::<f32>::new();
        store2.add("a.weight", ArrayD::zeros(IxDyn(&[3, 2])));
        store2.add("a.bias", ArrayD::zeros(IxDyn(&[2])));
        load_params(&mut store2, &path).unwrap();
        assert_eq!(params_hash(&store2), h1);
        assert_eq!(store.get(ParamId(0)), store2.get(ParamId(0)));
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", ArrayD::zeros(IxDyn(&[1])));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_params(&store, &path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("x", ArrayD::zeros(IxDyn(&[1])));
        other.add("y", ArrayD::zeros(IxDyn(&[1])));
        assert!(load_params(&mut other, &path).is_err());
    }

    use super::super::ParamId;
}

//! Versioned binary checkpoints of a [`ParamStore`].
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "IUMADCKP"
//! version u32
//! len     u64      byte length of the JSON manifest
//! manifest         {"meta": ..., "tensors": [{"name", "shape", "trainable"}, ...]}
//! data             f64 values of every tensor, in manifest order
//! digest  32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"IUMADCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor>,
}

pub fn encode_checkpoint(store: &ParamStore, meta: &str) -> Vec<u8> {
    let manifest = Manifest {
        meta: meta.to_string(),
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(json.len() + 8 * store.num_scalars() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rest = &body[20 + len..];
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(Error::Checkpoint(format!("truncated data for {}", t.name)));
        }
        let (chunk, tail) = rest.split_at(8 * n);
        let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::new(&t.shape, data)?);
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after data"));
    }
    Ok(Checkpoint { manifest, values })
}

pub fn save_checkpoint(store: &ParamStore, path: &Path, meta: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies checkpoint values into `store`; names, order and shapes must match.
pub fn restore(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    if ids.len() != ckpt.values.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.values.len(),
            ids.len()
        )));
    }
    for ((id, entry), value) in ids.iter().zip(&ckpt.manifest.tensors).zip(&ckpt.values) {
        if store.name(*id) != entry.name || store.value(*id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{} {:?} does not match checkpoint entry {} {:?}",
                store.name(*id),
                store.value(*id).shape(),
                entry.name,
                value.shape()
            )));
        }
    }
    for (id, value) in ids.into_iter().zip(&ckpt.values) {
        *store.value_mut(id) = value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        s.add_frozen("b", Tensor::scalar(f64::MIN_POSITIVE));
        s
    }

    #[test]
    fn roundtrip_restores_values_exactly() {
        let s = store();
        let ck = decode_checkpoint(&encode_checkpoint(&s, "meta")).unwrap();
        assert_eq!(ck.manifest.meta, "meta");
        assert!(!ck.manifest.tensors[1].trainable);
        let mut t = store();
        t.value_mut(t.find("a.w").unwrap()).data_mut()[0] = 9.0;
        restore(&mut t, &ck).unwrap();
        for id in s.ids() {
            assert_eq!(s.value(id), t.value(id));
        }
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let mut bytes = encode_checkpoint(&store(), "");
        bytes[30] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2]));
        other.add("b", Tensor::scalar(0.0));
        let ck = decode_checkpoint(&encode_checkpoint(&store(), "")).unwrap();
        assert!(restore(&mut other, &ck).is_err());
    }
}

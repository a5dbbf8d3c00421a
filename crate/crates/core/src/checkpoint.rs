//! Self-describing parameter container shared by all trained models.
//!
//! Layout: magic, little-endian u32 format version, u64 header length, JSON
//! header, raw little-endian `f32` tensor data, then a SHA-256 digest of
//! everything before it.

use std::fs;
use std::path::Path;

use nodule_nn::{Module, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NODRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family, e.g. `backbone`, `siamese`, `detector`.
    pub kind: String,
    /// Digest of the tensor names and shapes.
    pub topology_hash: String,
    /// Model-specific description (config, tap shapes, anchors, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

pub fn topology_hash(tensors: &[(String, Tensor<f32>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// SHA-256 of all tensor names, shapes and values; used to detect any change
/// in a parameter set.
pub fn parameter_checksum<M: Module<f32> + ?Sized>(module: &M) -> String {
    let mut named = Vec::new();
    module.named_tensors("", &mut named);
    let mut h = Sha256::new();
    h.update(topology_hash(&named).as_bytes());
    for (_, t) in &named {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_module<M: Module<f32> + ?Sized>(kind: &str, meta: serde_json::Value, module: &M) -> Self {
        let mut named = Vec::new();
        module.named_tensors("", &mut named);
        Self::from_named(kind, meta, named)
    }

    pub fn from_named(kind: &str, meta: serde_json::Value, named: Vec<(String, Tensor<f32>)>) -> Self {
        let topology_hash = topology_hash(&named);
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset });
            offset += t.len();
            tensors.push(t);
        }
        Self { header: CheckpointHeader { kind: kind.to_string(), topology_hash, meta, tensors: entries }, tensors }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(Error::CorruptCheckpoint(format!("expected a {kind} checkpoint, found {}", self.header.kind)))
        }
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.meta.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("bad model description: {e}")))
    }

    /// Copy tensors into `module`, which must have exactly the same names and
    /// shapes in the same order.
    pub fn load_into<M: Module<f32> + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut targets = Vec::new();
        module.named_tensors_mut("", &mut targets);
        if targets.len() != self.tensors.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, dst), (entry, src)) in targets.into_iter().zip(self.header.tensors.iter().zip(&self.tensors)) {
            if name != entry.name || dst.shape() != src.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor mismatch: model has {name} {:?}, checkpoint has {} {:?}",
                    dst.shape(),
                    entry.name,
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + 4 * n + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing magic or file truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version.to_string(), expected: FORMAT_VERSION.to_string() });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (file truncated or modified)"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
        let data = &body[header_end..];
        if data.len() % 4 != 0 {
            return Err(corrupt("data section is not a whole number of f32 values"));
        }
        let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            let slice = values.get(e.offset..e.offset + len).ok_or_else(|| corrupt("tensor extends past the data section"))?;
            tensors.push(Tensor::from_vec(&e.shape, slice.to_vec()));
        }
        let named: Vec<(String, Tensor<f32>)> = header.tensors.iter().map(|e| e.name.clone()).zip(tensors.iter().cloned()).collect();
        if topology_hash(&named) != header.topology_hash {
            return Err(corrupt("topology hash does not match the tensor table"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.as_os_str().is_empty() || !path.is_file() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::from_named(
            "test",
            serde_json::json!({"width": 3}),
            vec![
                ("a.weight".into(), Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0])),
                ("a.bias".into(), Tensor::from_vec(&[2], vec![0.1, 7.0])),
            ],
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, c.header);
        for (a, b) in back.tensors.iter().zip(&c.tensors) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let i = bytes.len() - DIGEST_LEN - 3;
        bytes[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn missing_paths_are_not_found() {
        assert!(matches!(Checkpoint::load(""), Err(Error::CheckpointNotFound(_))));
        assert!(matches!(Checkpoint::load("/nonexistent/model.ckpt"), Err(Error::CheckpointNotFound(_))));
    }
}

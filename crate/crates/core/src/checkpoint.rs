//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CASCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as contiguous little-endian `f32` values.
//! The header lists each tensor's name, shape and byte offset relative to the
//! start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CASCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub variant: Variant,
    pub config_hash: String,
    pub classes: usize,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

/// A model with the configuration hash it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.model.params.len());
        let mut data = Vec::with_capacity(self.model.params.num_values() * 4);
        for (name, t) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            variant: self.model.variant,
            config_hash: self.config_hash.clone(),
            classes: self.model.classes,
            spec: self.model.spec.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        let data = &bytes[data_start..];

        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(bad(format!(
                    "tensor `{}` at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * n;
            let raw = data
                .get(entry.offset..end)
                .ok_or_else(|| bad(format!("tensor `{}` is truncated", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(&entry.name, Tensor::new(&entry.shape, values)?);
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected_offset
            )));
        }
        let model = Model::from_params(header.variant, header.spec, header.classes, params)?;
        Ok(Self {
            model,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SpectrogramConfig;
    use crate::se_net::SeNetConfig;
    use crate::sid_net::SidNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(variant: Variant) -> Model {
        let spec = ModelSpec {
            frontend: SpectrogramConfig {
                window_ms: 8.0,
                hop_ms: 8.0,
                fft_size: 128,
                segment_seconds: 0.12,
            },
            se: SeNetConfig::with_width(2),
            sid: SidNetConfig::scaled([2; 8], [1; 8], 4),
        };
        Model::new(variant, spec, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(Variant::SeMsSidMs);
        let ck = Checkpoint {
            model: m.clone(),
            config_hash: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let x = Tensor::uniform(
            &m.spec.input_shape(),
            0.0,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let a = m.logits(&x).unwrap();
        let b = back.model.logits(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint {
            model: model(Variant::Sid),
            config_hash: "h".into(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn header_variant_must_match_tensors() {
        let ck = Checkpoint {
            model: model(Variant::SeSid),
            config_hash: "h".into(),
        };
        let bytes = ck.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let swapped = header.replacen("\"SE+SID\"", "\"SID\"", 1);
        assert_eq!(swapped.len(), header.len() - 3);
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(swapped.len() as u64).to_le_bytes());
        forged.extend_from_slice(swapped.as_bytes());
        forged.extend_from_slice(&bytes[16 + len..]);
        assert!(Checkpoint::from_bytes(&forged).is_err());
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "RACX" | version: u16 LE | manifest_len: u32 LE | manifest JSON | payload
//! ```
//!
//! The manifest holds the model config, a `(name, shape, offset)` table and
//! hex SHA-256 digests of the token and code vocabularies. The payload is
//! every tensor as little-endian `f32`, concatenated in manifest order;
//! offsets are byte offsets into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{expected_shapes, RacParameters};
use crate::corpus::{CodeVocabulary, TokenVocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RACX";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabDigests {
    pub tokens: String,
    pub codes: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    vocab_digests: VocabDigests,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: RacParameters,
    pub digests: VocabDigests,
}

impl Checkpoint {
    /// Fails with a compatibility error when either vocabulary differs from
    /// the one the checkpoint was written with.
    pub fn verify(&self, tokens: &TokenVocabulary, codes: &CodeVocabulary) -> Result<()> {
        let actual = tokens.digest();
        if actual != self.digests.tokens {
            return Err(Error::Compatibility(format!(
                "token vocabulary digest {actual} does not match checkpoint {}",
                self.digests.tokens
            )));
        }
        let actual = codes.digest();
        if actual != self.digests.codes {
            return Err(Error::Compatibility(format!(
                "code vocabulary digest {actual} does not match checkpoint {}",
                self.digests.codes
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(params: &RacParameters, config: &ModelConfig, digests: &VocabDigests) -> Result<Vec<u8>> {
    params.check_shapes(config)?;
    let mut offset = 0;
    let tensors = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            let entry = TensorEntry { name, shape: t.shape().to_vec(), offset };
            offset += t.len() * 4;
            entry
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { config: config.clone(), tensors, vocab_digests: digests.clone() })?;
    let manifest_len =
        u32::try_from(manifest.len()).map_err(|_| Error::Config("checkpoint manifest exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params.named() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("expected at least {HEADER_LEN} header bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("missing RACX magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let manifest_end = HEADER_LEN + manifest_len;
    if bytes.len() < manifest_end {
        return Err(Error::Corrupt(format!(
            "expected {manifest_end} bytes through the manifest, found {}",
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| Error::Corrupt(format!("manifest is not valid JSON: {e}")))?;
    manifest.config.validate()?;

    let expected = expected_shapes(&manifest.config);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Corrupt(format!("manifest entry {} found where {name} was expected", entry.name)));
        }
        if &entry.shape != shape {
            return Err(Error::Corrupt(format!(
                "tensor {name} has manifest shape {:?}, config implies {shape:?}",
                entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(Error::Corrupt(format!("tensor {name} at offset {}, expected {offset}", entry.offset)));
        }
        offset += shape.iter().product::<usize>() * 4;
    }
    let payload = &bytes[manifest_end..];
    if payload.len() != offset {
        return Err(Error::Corrupt(format!(
            "expected {} bytes in total, found {}",
            manifest_end + offset,
            bytes.len()
        )));
    }

    let values = manifest
        .tensors
        .iter()
        .map(|entry| {
            let n: usize = entry.shape.iter().product();
            let data = payload[entry.offset..entry.offset + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(entry.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = RacParameters::from_ordered(&manifest.config, values)?;
    if !params.is_finite() {
        return Err(Error::Corrupt("checkpoint holds non-finite weights".into()));
    }
    Ok(Checkpoint { config: manifest.config, params, digests: manifest.vocab_digests })
}

pub fn save_checkpoint(
    params: &RacParameters,
    config: &ModelConfig,
    digests: &VocabDigests,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config, digests)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, RacParameters, VocabDigests) {
        let config =
            ModelConfig { embed_dim: 8, attention_heads: 2, ffn_dim: 8, conv_width: 3, ..ModelConfig::new(12, 3) };
        let params = RacParameters::init(&config).unwrap();
        let digests = VocabDigests { tokens: "aa".into(), codes: "bb".into() };
        (config, params, digests)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (config, params, digests) = small();
        let first = encode_checkpoint(&params, &config, &digests).unwrap();
        let loaded = decode_checkpoint(&first).unwrap();
        let second = encode_checkpoint(&loaded.params, &loaded.config, &loaded.digests).unwrap();
        assert_eq!(first, second);
        for ((_, a), (_, b)) in params.named().iter().zip(loaded.params.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let (config, params, digests) = small();
        let bytes = encode_checkpoint(&params, &config, &digests).unwrap();
        assert_eq!(&bytes[..4], b"RACX");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
        assert_eq!(manifest["vocab_digests"]["tokens"], "aa");
        assert_eq!(manifest["tensors"][0]["name"], "token_embedding");
        assert_eq!(bytes.len() - 10 - len, config.parameter_count() * 4);
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let (config, params, digests) = small();
        let bytes = encode_checkpoint(&params, &config, &digests).unwrap();
        let cut = &bytes[..bytes.len() - 7];
        let msg = decode_checkpoint(cut).unwrap_err().to_string();
        assert!(msg.contains(&bytes.len().to_string()) && msg.contains(&cut.len().to_string()), "{msg}");
    }

    #[test]
    fn tampered_shape_names_tensor() {
        let (config, params, digests) = small();
        let bytes = encode_checkpoint(&params, &config, &digests).unwrap();
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[10..10 + len]).unwrap();
        manifest["tensors"][5]["shape"] = serde_json::json!([8, 9]);
        let name = manifest["tensors"][5]["name"].as_str().unwrap().to_string();
        let m = serde_json::to_vec(&manifest).unwrap();
        let mut tampered = bytes[..6].to_vec();
        tampered.extend_from_slice(&(m.len() as u32).to_le_bytes());
        tampered.extend_from_slice(&m);
        tampered.extend_from_slice(&bytes[10 + len..]);
        let err = decode_checkpoint(&tampered).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        assert!(err.to_string().contains(&name), "{err}");
    }

    #[test]
    fn bad_magic_is_corruption() {
        let (config, params, digests) = small();
        let mut bytes = encode_checkpoint(&params, &config, &digests).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Corrupt(_))));
    }
}

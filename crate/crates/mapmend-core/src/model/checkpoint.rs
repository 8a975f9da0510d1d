//! Self-describing binary checkpoint: magic, format version, a JSON header
//! carrying the model kind and config, the raw f32 parameter stream, and a
//! SHA-256 trailer. Loading restores bit-identical forward behavior.

use super::{Generator, GeneratorConfig, Model, ModelError, StubModel};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MMENDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<GeneratorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stub: Option<StubModel>,
}

/// Serialize a model to the checkpoint byte format.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let (header, payload): (Header, Vec<u8>) = match model {
        Model::Generator(gen) => {
            let mut payload = Vec::with_capacity(gen.param_count() * 4);
            for slice in gen.params() {
                for v in slice {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            (
                Header {
                    kind: "generator".into(),
                    config: Some(gen.config().clone()),
                    stub: None,
                },
                payload,
            )
        }
        Model::Stub(stub) => {
            (Header { kind: "stub".into(), config: None, stub: Some(*stub) }, Vec::new())
        }
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = sha256(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parse the checkpoint byte format back into a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, ModelError> {
    let corrupt = |msg: &str| ModelError::CheckpointCorrupt(msg.to_string());
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(corrupt("file too short for header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 32 {
        return Err(corrupt("file too short for digest"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != digest {
        return Err(corrupt("digest mismatch"));
    }
    let mut pos = 12usize;
    let header_len = read_u64(body, &mut pos).ok_or_else(|| corrupt("truncated header length"))?
        as usize;
    if pos + header_len > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[pos..pos + header_len])
        .map_err(|e| corrupt(&format!("header parse: {e}")))?;
    pos += header_len;
    let payload_len =
        read_u64(body, &mut pos).ok_or_else(|| corrupt("truncated payload length"))? as usize;
    if pos + payload_len != body.len() {
        return Err(corrupt("payload length mismatch"));
    }
    let payload = &body[pos..pos + payload_len];
    match header.kind.as_str() {
        "stub" => {
            let stub = header.stub.ok_or_else(|| corrupt("stub header missing stub spec"))?;
            Ok(Model::Stub(stub))
        }
        "generator" => {
            let config =
                header.config.ok_or_else(|| corrupt("generator header missing config"))?;
            let mut gen = Generator::new(config)?;
            if payload.len() != gen.param_count() * 4 {
                return Err(corrupt(&format!(
                    "parameter payload holds {} bytes, model needs {}",
                    payload.len(),
                    gen.param_count() * 4
                )));
            }
            let mut offset = 0usize;
            for slice in gen.params_mut() {
                for v in slice.iter_mut() {
                    *v = f32::from_le_bytes(payload[offset..offset + 4].try_into().unwrap());
                    offset += 4;
                }
            }
            Ok(Model::Generator(Box::new(gen)))
        }
        other => Err(corrupt(&format!("unknown model kind {other:?}"))),
    }
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Option<u64> {
    let end = pos.checked_add(8)?;
    if end > bytes.len() {
        return None;
    }
    let v = u64::from_le_bytes(bytes[*pos..end].try_into().unwrap());
    *pos = end;
    Some(v)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

fn sha256(data: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(data).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BinaryMask, IntensityImage};
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> Model {
        Model::new_generator(GeneratorConfig {
            depth: 2,
            base_channels: 8,
            parameter_seed: seed,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn probe(model: &Model) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = IntensityImage::new(Array3::from_shape_fn((3, 16, 16), |_| {
            rng.gen_range(0.0f32..1.0)
        }))
        .unwrap();
        let mut mask = BinaryMask::zeros(16, 16);
        for r in 4..9 {
            for c in 6..11 {
                mask.set(r, c, 1);
            }
        }
        let out = model.forward(&image, &mask).unwrap();
        out.field.data().iter().copied().take(40).collect()
    }

    #[test]
    fn round_trip_restores_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model(3);
        let before = probe(&model);
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(before, probe(&loaded));
    }

    #[test]
    fn stub_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stub.ckpt");
        let stub = Model::Stub(StubModel { field_raw: [0.1, -0.2, 0.0, 0.5], missing: 0.25, obsolete: 0.75 });
        save_checkpoint(&stub, &path).unwrap();
        match load_checkpoint(&path).unwrap() {
            Model::Stub(s) => {
                assert_eq!(s.field_raw, [0.1, -0.2, 0.0, 0.5]);
                assert_eq!(s.missing, 0.25);
            }
            _ => panic!("expected stub"),
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = encode_checkpoint(&small_model(1));
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains(&CHECKPOINT_VERSION.to_string()), "{msg}");
    }

    #[test]
    fn truncated_file_is_a_corrupt_error() {
        let bytes = encode_checkpoint(&small_model(2));
        for cut in [5usize, 13, 40, bytes.len() - 7] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, ModelError::CheckpointCorrupt(_)),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn flipped_payload_bit_is_detected() {
        let mut bytes = encode_checkpoint(&small_model(4));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, ModelError::CheckpointCorrupt(_)));
    }
}

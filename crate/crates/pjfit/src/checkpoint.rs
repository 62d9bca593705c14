//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PJFCKPT\0"            8-byte magic
//! version: u32           currently 1
//! manifest_len: u64
//! manifest               UTF-8 TOML: [model], [dims], optional [train], [[params]] {name, shape}
//! values                 f64 bit patterns of every parameter, in manifest order
//! sha256: [u8; 32]       digest of everything above
//! ```

use std::path::Path;

use pjfit_core::model::{Dimensions, Model, ModelConfig};
use pjfit_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use crate::codec::{check_envelope, seal, Cursor};
use crate::error::{Error, Result};
use crate::manifest::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PJFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    dims: Dimensions,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Training settings the parameters came from, when known.
    pub train: Option<TrainConfig>,
}

pub fn encode_checkpoint(model: &Model, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let store = model.params();
    let header = Header {
        model: model.config().clone(),
        dims: model.dims(),
        train: train.cloned(),
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| pjfit_core::Error::Config(e.to_string()))?;
    let mut bytes = Vec::with_capacity(64 + text.len() + 8 * store.num_scalars());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    for (_, t) in store.iter() {
        for v in t.values() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    seal(&mut bytes);
    Ok(bytes)
}

pub fn save_checkpoint(path: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, train)?)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let body = check_envelope(path, bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut cur = Cursor::new(body, path);
    let len = cur.len()?;
    let text = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    let mut model = Model::new(header.model, header.dims, 0)?;
    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != header.params.len() {
        return Err(Error::format(
            path,
            format!("{} parameters stored, model has {}", header.params.len(), ids.len()),
        ));
    }
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let store = model.params_mut();
        if store.name(id) != entry.name || store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::format(
                path,
                format!("stored parameter {} {:?} does not match {} {:?}", entry.name, entry.shape, store.name(id), store.get(id).shape()),
            ));
        }
        for v in store.get_mut(id).values_mut() {
            *v = cur.f64()?;
        }
    }
    if !cur.is_done() {
        return Err(Error::format(path, "trailing bytes after parameter values"));
    }
    Ok(Checkpoint {
        model,
        train: header.train,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pjfit_core::encoders::CrossEncoderConfig;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            d_w: 8,
            d_j: 4,
            k: 2,
            encoder: CrossEncoderConfig {
                layers: 1,
                heads: 2,
                ff_width: 8,
                max_tokens: 8,
            },
            intention_hidden: vec![4],
            d_o: 4,
            prediction_hidden: vec![4],
            ..Default::default()
        };
        let dims = Dimensions {
            vocab_size: 12,
            num_users: 3,
            num_jobs: 5,
        };
        Model::new(cfg, dims, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = tiny();
        let id = model.params().ids().next().unwrap();
        model.params_mut().get_mut(id).values_mut()[0] = -0.0;
        model.params_mut().get_mut(id).values_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let train = TrainConfig::default();
        let bytes = encode_checkpoint(&model, Some(&train)).unwrap();
        let back = decode_checkpoint(Path::new("x"), &bytes).unwrap();
        assert_eq!(back.train, Some(train));
        assert_eq!(back.model.config(), model.config());
        for ((_, a), (_, b)) in back.model.params().iter().zip(model.params().iter()) {
            let bits = |t: &pjfit_core::tensor::Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode_checkpoint(&back.model, back.train.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&tiny(), None).unwrap();
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n / 2] ^= 1;
        assert!(matches!(decode_checkpoint(Path::new("x"), &flipped), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(Path::new("x"), &bytes[..40]), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(Path::new("x"), b"PJFCACHE"), Err(Error::Format { .. })));
    }
}

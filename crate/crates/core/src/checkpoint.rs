//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "SANCKPT\0" | u32 version | u32 len + TOML header
//! | u32 blob count | blobs: (u32 len + name, u32 rank, u64 dims.., f64 LE data)
//! | u32 CRC-32 of all preceding bytes
//! ```
//!
//! The header carries the model configuration, the gloss vocabulary and,
//! when present, optimizer settings. Adam moments are stored as blobs named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::ctc::GlossVocabulary;
use crate::error::{Result, SanError};
use crate::model::{SanConfig, SanModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SANCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    epochs_done: usize,
    glosses: Vec<String>,
    model: SanConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    adam: AdamConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SanModel,
    pub vocabulary: GlossVocabulary,
    pub optimizer: Option<Adam>,
    pub epochs_done: usize,
}

fn write_blob(w: &mut ByteWriter, name: &str, t: &Tensor) -> Result<()> {
    w.str(name)?;
    w.len_u32(t.shape().len())?;
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            epochs_done: self.epochs_done,
            glosses: self.vocabulary.glosses().to_vec(),
            model: self.model.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                adam: o.config.clone(),
            }),
        };
        let text = toml::to_string(&header).map_err(|e| SanError::Contract(e.to_string()))?;

        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&text)?;
        let n_params = self.model.store.len();
        let blobs = n_params * if self.optimizer.is_some() { 3 } else { 1 };
        w.len_u32(blobs)?;
        for p in self.model.store.iter() {
            write_blob(&mut w, &p.name, &p.value)?;
        }
        if let Some(opt) = &self.optimizer {
            for (p, m) in self.model.store.iter().zip(&opt.m) {
                write_blob(&mut w, &format!("adam.m/{}", p.name), m)?;
            }
            for (p, v) in self.model.store.iter().zip(&opt.v) {
                write_blob(&mut w, &format!("adam.v/{}", p.name), v)?;
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::checked(buf, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let header_at = r.offset();
        let text = r.str()?;
        let header: Header = toml::from_str(&text).map_err(|e| SanError::Format {
            offset: header_at,
            detail: format!("header: {e}"),
        })?;
        let vocabulary = GlossVocabulary::new(header.glosses)?;
        let mut model = SanModel::uninitialized(header.model)?;
        let mut optimizer = header
            .optimizer
            .map(|o| {
                let mut adam = Adam::new(o.adam, &model.store);
                adam.step = o.step;
                adam
            });

        let count = r.len()?;
        let mut seen = vec![false; model.store.len() * 3];
        for _ in 0..count {
            let at = r.offset();
            let name = r.str()?;
            let rank = r.len()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let data = r.f64s(shape.iter().product())?;
            let tensor = Tensor::new(shape, data)?;

            let (slot, param_name) = match name.split_once('/') {
                Some(("adam.m", rest)) => (1, rest),
                Some(("adam.v", rest)) => (2, rest),
                _ => (0, name.as_str()),
            };
            let id = model.store.id(param_name).ok_or_else(|| SanError::Format {
                offset: at,
                detail: format!("unknown parameter {name}"),
            })?;
            if model.store.value(id).shape() != tensor.shape() {
                return Err(SanError::Format {
                    offset: at,
                    detail: format!("shape mismatch for {name}"),
                });
            }
            let dst = match (slot, optimizer.as_mut()) {
                (0, _) => &mut model.store.get_mut(id).value,
                (1, Some(o)) => &mut o.m[id.index()],
                (2, Some(o)) => &mut o.v[id.index()],
                _ => {
                    return Err(SanError::Format {
                        offset: at,
                        detail: format!("optimizer blob {name} without optimizer header"),
                    })
                }
            };
            *dst = tensor;
            seen[slot * model.store.len() + id.index()] = true;
        }
        r.expect_end()?;
        let needed = if optimizer.is_some() { 3 } else { 1 };
        if let Some(missing) = seen[..needed * model.store.len()].iter().position(|s| !s) {
            let name = &model.store.iter().nth(missing % model.store.len()).expect("index").name;
            return Err(SanError::Format {
                offset: r.offset(),
                detail: format!("missing blob for {name}"),
            });
        }
        Ok(Checkpoint {
            model,
            vocabulary,
            optimizer,
            epochs_done: header.epochs_done,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn sample() -> Checkpoint {
        let mut cfg = SanConfig::toy(3, 4, 4);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_k = 4;
        cfg.d_ff = 8;
        cfg.n_layers = 1;
        cfg.variant = Variant::Relmask;
        let model = SanModel::new(cfg, 7).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &model.store);
        adam.step = 12;
        adam.m[0].data_mut()[0] = 0.125;
        adam.v[3].data_mut()[1] = 3.5e-7;
        Checkpoint {
            model,
            vocabulary: GlossVocabulary::synthetic(3),
            optimizer: Some(adam),
            epochs_done: 4,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.model.store.bit_identical(&ck.model.store));
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.vocabulary, ck.vocabulary);
        assert_eq!(back.epochs_done, 4);
        let (a, b) = (back.optimizer.unwrap(), ck.optimizer.unwrap());
        assert_eq!(a.step, 12);
        assert_eq!(a.m, b.m);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn without_optimizer() {
        let mut ck = sample();
        ck.optimizer = None;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.optimizer.is_none());
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(SanError::Format { .. })));
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(SanError::Format { .. })));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(SanError::Format { offset: 0, .. })
        ));
    }
}

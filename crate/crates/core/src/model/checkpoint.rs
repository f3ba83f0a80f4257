//! Checkpoint layout (little-endian): `"APNT"`, version u32, the six
//! transformer config fields as u32, a u32 tensor count, then per tensor a
//! u16 name length, UTF-8 name, u32 rank, u32 dims and f64 values.

use std::fs;
use std::path::Path;

use super::{ModelParams, TransformerConfig};
use crate::error::{Error, LoadError, Result};
use crate::numeric::Tensor;

const MAGIC: [u8; 4] = *b"APNT";
const VERSION: u32 = 1;

/// Config plus an ordered directory of named tensors. Model parameters,
/// optimizer moments and run metadata share the directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).map(Tensor::item)
    }

    /// Rebuilds model parameters from the entries they own.
    pub fn model_params(&self) -> Result<ModelParams> {
        let bands = |prefix: &str| self.get(&format!("map.{prefix}.weight")).map(Tensor::rows);
        let mut params = ModelParams::zeros(self.config, bands("source"), bands("target"))?;
        let mut tensors = Vec::with_capacity(params.len());
        for name in params.names() {
            let t = self.get(name).ok_or_else(|| {
                LoadError::InvalidHeader(format!("checkpoint lacks tensor {name}"))
            })?;
            tensors.push(t.clone());
        }
        params
            .set_tensors(tensors)
            .map_err(|_| LoadError::InvalidHeader("tensor shapes disagree with config".into()))?;
        Ok(params)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let c = &ck.config;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.d_model,
        c.n_heads,
        c.d_head,
        c.d_feed,
        c.n_encoders,
        c.patch_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Argument(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(LoadError::Truncated {
                needed: self.at.saturating_add(n),
                available: self.bytes.len(),
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(LoadError::BadMagic {
            expected: MAGIC,
            found,
        }
        .into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LoadError::UnsupportedVersion(version).into());
    }
    let mut f = [0usize; 6];
    for v in f.iter_mut() {
        *v = r.u32()? as usize;
    }
    let config = TransformerConfig {
        d_model: f[0],
        n_heads: f[1],
        d_head: f[2],
        d_feed: f[3],
        n_encoders: f[4],
        patch_size: f[5],
    };
    config
        .validate()
        .map_err(|e| LoadError::InvalidHeader(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LoadError::InvalidHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(8)
                .ok_or_else(|| LoadError::InvalidHeader("tensor too large".into()))?,
        )?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(
            LoadError::InvalidHeader(format!("{} trailing bytes", bytes.len() - r.at)).into(),
        );
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), name in "[a-z.0-9]{1,20}") {
            let n = values.len();
            let ck = Checkpoint {
                config: TransformerConfig { d_model: 4, n_heads: 2, d_head: 3, d_feed: 5, n_encoders: 1, patch_size: 3 },
                tensors: vec![
                    (name, Tensor::new(vec![n], values).unwrap()),
                    ("adam.step".into(), Tensor::scalar(17.0)),
                ],
            };
            let bytes = encode_checkpoint(&ck).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_fields() {
        let ck = Checkpoint {
            config: TransformerConfig::default(),
            tensors: vec![],
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(&bytes[..4], b"APNT");
        let words: Vec<u32> = bytes[4..]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 100, 8, 64, 1024, 2, 9, 0]);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Load(LoadError::BadMagic { .. }))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..10]),
            Err(Error::Load(LoadError::Truncated { .. }))
        ));
    }

    #[test]
    fn model_params_survive_the_directory() {
        let cfg = TransformerConfig {
            d_model: 4,
            n_heads: 2,
            d_head: 3,
            d_feed: 5,
            n_encoders: 2,
            patch_size: 3,
        };
        let mut params = ModelParams::zeros(cfg, None, Some(6)).unwrap();
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v = (i * 100 + j) as f64);
        }
        let ck = Checkpoint {
            config: cfg,
            tensors: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap())
            .unwrap()
            .model_params()
            .unwrap();
        assert_eq!(back, params);
    }
}

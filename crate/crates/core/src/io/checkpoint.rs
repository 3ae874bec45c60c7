//! "EDTR" weight files.
//!
//! Layout (little-endian): magic, `u32` version, 32-byte config digest,
//! `u32` length plus config text, `u32` record count, then per tensor in
//! sorted name order: `u32` name length, name, `u32` rank, `u32` dims and
//! `f32` values.

use super::bytes::Reader;
use crate::error::{Error, Result};
use crate::pipeline::{Edter, ModelConfig};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"EDTR";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &Edter) -> Vec<u8> {
    let text = model.cfg().to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.cfg().digest());
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let tensors = model.store.named_tensors();
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for d in t.shape() {
            put_u32(&mut out, *d);
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Rebuilds the model described by the embedded configuration. With
/// `expected`, the stored digest must match that configuration.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Edter> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let len = r.u32()? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Parse {
        offset: at + e.valid_up_to(),
        msg: "config text is not UTF-8".into(),
    })?;
    let cfg = ModelConfig::from_text(text)?;
    if cfg.digest() != digest || expected.is_some_and(|e| e.digest() != digest) {
        return Err(Error::DigestMismatch);
    }

    let count = r.u32()? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Parse {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or(Error::Parse {
            offset: at,
            msg: format!("tensor {name} is too large"),
        })?;
        let data = r.f32s(numel)?.into_iter().map(f64::from).collect();
        if records.insert(name.clone(), Tensor::from_parts(dims, data)).is_some() {
            return Err(Error::Parse {
                offset: at,
                msg: format!("duplicate tensor {name}"),
            });
        }
    }
    if !r.at_end() {
        return Err(Error::Parse {
            offset: r.offset(),
            msg: "trailing bytes after last tensor".into(),
        });
    }

    let mut model = Edter::skeleton(&cfg)?;
    let wanted: Vec<String> = model.store.named_tensors().keys().map(|k| k.to_string()).collect();
    if let Some(missing) = wanted.iter().find(|k| !records.contains_key(*k)) {
        return Err(Error::Input(format!("checkpoint lacks tensor {missing}")));
    }
    for (name, t) in records {
        model.store.set_tensor(&name, t)?;
    }
    model.mark_loaded();
    Ok(model)
}

pub fn save(path: &Path, model: &Edter) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Edter> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bimla::DecoderKind;
    use crate::vit::EncoderConfig;

    fn tiny() -> ModelConfig {
        let enc = EncoderConfig {
            patch_size: 16,
            depth: 4,
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            mlp_ratio: 2,
            taps: [1, 2, 3, 4],
        };
        ModelConfig {
            image_size: (32, 32),
            local: EncoderConfig {
                patch_size: 8,
                ..enc.clone()
            },
            global: enc,
            path_channels: 4,
            smooth_channels: 4,
            decoder: DecoderKind::BiMla,
            ffm: true,
            two_stage: true,
        }
    }

    #[test]
    fn round_trip_within_one_ulp() {
        let m = Edter::new(&tiny(), 5).unwrap();
        let bytes = encode(&m);
        let back = decode(&bytes, Some(&tiny())).unwrap();
        assert!(back.is_loaded());
        let (a, b) = (m.store.named_tensors(), back.store.named_tensors());
        assert_eq!(a.len(), b.len());
        for (name, t) in &a {
            let u = b[name];
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                let (xf, yf) = (*x as f32, *y as f32);
                let ulps = (xf.to_bits() as i64 - yf.to_bits() as i64).abs();
                assert!(ulps <= 1, "{name}: {x} vs {y}");
            }
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn distinct_failures() {
        let bytes = encode(&Edter::new(&tiny(), 6).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, None), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad, None), Err(Error::Version { found: 9, .. })));
        let mut other = tiny();
        other.ffm = false;
        assert!(matches!(decode(&bytes, Some(&other)), Err(Error::DigestMismatch)));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert!(matches!(decode(&bad, None), Err(Error::DigestMismatch)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3], None), Err(Error::Truncated { .. })));
    }
}

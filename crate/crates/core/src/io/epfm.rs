//! "EPFM" float rasters: magic, `u32` height, `u32` width, then `f32`
//! samples, all little-endian.

use super::bytes::Reader;
use crate::error::{Error, Result};
use crate::pipeline::EdgeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"EPFM";

pub fn encode(map: &EdgeMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EdgeMap> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let data = r.f32s(h * w)?.into_iter().map(f64::from).collect();
    if !r.at_end() {
        return Err(Error::Parse {
            offset: r.offset(),
            msg: "trailing bytes after payload".into(),
        });
    }
    EdgeMap::new(h, w, data)
}

pub fn save(path: &Path, map: &EdgeMap) -> Result<()> {
    std::fs::write(path, encode(map)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<EdgeMap> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let m = EdgeMap::new(2, 3, vec![0.0, 1.0, 0.25, 0.1f32 as f64, 1e-7f32 as f64, 0.5]).unwrap();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncation_detected() {
        let m = EdgeMap::new(2, 2, vec![0.5; 4]).unwrap();
        let bytes = encode(&m);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(b"EPFX"), Err(Error::BadMagic { .. })));
    }
}

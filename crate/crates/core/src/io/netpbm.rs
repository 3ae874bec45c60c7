//! Binary PGM (P5) and PPM (P6) rasters with 8-bit samples.

use crate::error::{Error, Result};
use crate::eval::BinaryMap;
use crate::pipeline::EdgeMap;
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn parse(bytes: &[u8]) -> Result<Raster> {
    let mut h = Header { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(h.err("expected P5 or P6 magic")),
    };
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.err("expected whitespace before pixel data")),
    }
    let need = width * height * channels;
    let have = bytes.len() - h.pos;
    if have < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated pixel data: {need} bytes expected, {have} present"),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples: bytes[h.pos..h.pos + need].to_vec(),
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    out.extend_from_slice(&r.samples);
    out
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` image in `[0, 1]`; grayscale files are replicated.
pub fn raster_to_image(r: &Raster) -> Tensor {
    let n = r.width * r.height;
    let scale = r.maxval as f64;
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let s = if r.channels == 1 { r.samples[i] } else { r.samples[i * 3 + c] };
            data[c * n + i] = s as f64 / scale;
        }
    }
    Tensor::from_parts(vec![3, r.height, r.width], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(raster_to_image(&read(path)?))
}

pub fn image_to_raster(img: &Tensor) -> Result<Raster> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("image", s, &[3, 0, 0]));
    }
    let n = s[1] * s[2];
    let mut samples = vec![0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            samples[i * 3 + c] = quantize(img.data()[c * n + i]);
        }
    }
    Ok(Raster {
        width: s[2],
        height: s[1],
        channels: 3,
        maxval: 255,
        samples,
    })
}

pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    write(path, &image_to_raster(img)?)
}

/// 8-bit grayscale with `round(255 p)`.
pub fn save_edge_map(path: &Path, map: &EdgeMap) -> Result<()> {
    write(
        path,
        &Raster {
            width: map.width,
            height: map.height,
            channels: 1,
            maxval: 255,
            samples: map.data.iter().map(|v| quantize(*v)).collect(),
        },
    )
}

/// First channel scaled to `[0, 1]`.
pub fn load_edge_map(path: &Path) -> Result<EdgeMap> {
    let r = read(path)?;
    let scale = r.maxval as f64;
    let data = r.samples.iter().step_by(r.channels).map(|s| *s as f64 / scale).collect();
    EdgeMap::new(r.height, r.width, data)
}

pub fn save_binary(path: &Path, map: &BinaryMap) -> Result<()> {
    write(
        path,
        &Raster {
            width: map.width,
            height: map.height,
            channels: 1,
            maxval: 255,
            samples: map.data.iter().map(|b| if *b { 255 } else { 0 }).collect(),
        },
    )
}

/// Nonzero samples are edge pixels.
pub fn load_binary(path: &Path) -> Result<BinaryMap> {
    let r = read(path)?;
    let data = r.samples.iter().step_by(r.channels).map(|s| *s != 0).collect();
    Ok(BinaryMap::new(r.height, r.width, data))
}

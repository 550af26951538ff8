//! Row-major `H x W x C` rasters and their on-disk formats.
//!
//! * PDR1: `"PDR1"`, then little-endian `u32` H, W, C, dtype (0 = f32,
//!   1 = u8), then the row-major little-endian payload.
//! * Binary PPM (P6) for 3-channel images in `[0, 1]`, stored as `round(255 x)`.
//! * Binary PGM (P5) for 8-bit grayscale.

use std::path::Path;

use crate::error::{Error, Result};

pub const PDR_MAGIC: &[u8; 4] = b"PDR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} raster needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        self.data[(i * self.width + j) * self.channels + c]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: T) {
        self.data[(i * self.width + j) * self.channels + c] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let (w, c) = (self.width, self.channels);
        for i in 0..self.height {
            for j in 0..w {
                let src = (i * w + (w - 1 - j)) * c;
                let dst = (i * w + j) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }
}

/// Element types a PDR1 file can hold.
pub trait PdrElement: Copy {
    const DTYPE: u32;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(b: &[u8]) -> Self;
}

impl PdrElement for f32 {
    const DTYPE: u32 = 0;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().unwrap())
    }
}

impl PdrElement for u8 {
    const DTYPE: u32 = 1;
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(b: &[u8]) -> Self {
        b[0]
    }
}

pub fn encode_pdr<T: PdrElement>(r: &Raster<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + r.data.len() * T::SIZE);
    out.extend_from_slice(PDR_MAGIC);
    for v in [r.height as u32, r.width as u32, r.channels as u32, T::DTYPE] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &r.data {
        v.put(&mut out);
    }
    out
}

pub fn decode_pdr<T: PdrElement>(bytes: &[u8]) -> std::result::Result<Raster<T>, String> {
    if bytes.len() < 20 || &bytes[..4] != PDR_MAGIC {
        return Err("not a PDR1 raster (bad magic or short header)".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (h, w, c, dtype) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    if dtype != T::DTYPE {
        return Err(format!("dtype code {dtype}, expected {}", T::DTYPE));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or("raster dimensions overflow")?;
    let payload = &bytes[20..];
    if payload.len() != n * T::SIZE {
        return Err(format!(
            "payload is {} bytes, {h}x{w}x{c} needs {}",
            payload.len(),
            n * T::SIZE
        ));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::get).collect();
    Ok(Raster {
        height: h,
        width: w,
        channels: c,
        data,
    })
}

pub fn write_pdr<T: PdrElement>(path: &Path, r: &Raster<T>) -> Result<()> {
    std::fs::write(path, encode_pdr(r)).map_err(|e| Error::io(path, e))
}

pub fn read_pdr<T: PdrElement>(path: &Path) -> Result<Raster<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pdr(&bytes).map_err(|m| Error::data(path, m))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(r: &Raster<f32>) -> Result<Vec<u8>> {
    if r.channels != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", r.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend(r.data.iter().map(|&v| quantize(v)));
    Ok(out)
}

fn parse_netpbm<'a>(bytes: &'a [u8], magic: &str) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the payload.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != magic {
        return Err(format!("expected {magic}, found {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval}, expected 255"));
    }
    Ok((w, h, bytes.get(i + 1..).unwrap_or(&[])))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Raster<f32>, String> {
    let (w, h, payload) = parse_netpbm(bytes, "P6")?;
    if payload.len() != w * h * 3 {
        return Err(format!("payload is {} bytes, expected {}", payload.len(), w * h * 3));
    }
    Ok(Raster {
        height: h,
        width: w,
        channels: 3,
        data: payload.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn write_ppm(path: &Path, r: &Raster<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(r)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Raster<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::data(path, m))
}

pub fn encode_pgm(r: &Raster<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Raster<u8>, String> {
    let (w, h, payload) = parse_netpbm(bytes, "P5")?;
    if payload.len() != w * h {
        return Err(format!("payload is {} bytes, expected {}", payload.len(), w * h));
    }
    Ok(Raster {
        height: h,
        width: w,
        channels: 1,
        data: payload.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdr_round_trip_and_errors() {
        let r = Raster::new(2, 3, 1, vec![1.5f32, -0.0, 7.25, f32::MAX, 1e-30, 2.0]).unwrap();
        let bytes = encode_pdr(&r);
        assert_eq!(&bytes[..4], b"PDR1");
        assert_eq!(bytes.len(), 20 + 24);
        let back: Raster<f32> = decode_pdr(&bytes).unwrap();
        assert_eq!(encode_pdr(&back), bytes);
        assert!(decode_pdr::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pdr::<u8>(&bytes).is_err());
        let m = Raster::new(1, 2, 1, vec![0u8, 1]).unwrap();
        assert_eq!(decode_pdr::<u8>(&encode_pdr(&m)).unwrap(), m);
    }

    #[test]
    fn ppm_round_trip_on_quantized_values() {
        let data: Vec<f32> = (0..12).map(|k| (k * 20) as f32 / 255.0).collect();
        let r = Raster::new(2, 2, 3, data).unwrap();
        let back = decode_ppm(&encode_ppm(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let r = Raster::new(2, 3, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        let f = r.flip_horizontal();
        assert_eq!(f.at(0, 0, 1), r.at(0, 2, 1));
        assert_eq!(f.flip_horizontal(), r);
    }
}

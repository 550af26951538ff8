//! Space-to-depth latent codec.
//!
//! `latent(i, j, c f² + a f + b) = raster(i f + a, j f + b, c)`. The map is a
//! permutation of entries, so it is linear, norm-preserving and exactly
//! invertible.

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const PATCH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ImageLatent,
    DepthLatent,
    Noise,
}

/// `H' x W' x C'` latent, row-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
    pub provenance: Provenance,
}

pub fn encode<T: Copy>(r: &Raster<T>, provenance: Provenance) -> Result<LatentTensor<T>> {
    encode_with(r, PATCH, provenance)
}

pub fn encode_with<T: Copy>(r: &Raster<T>, f: usize, provenance: Provenance) -> Result<LatentTensor<T>> {
    if f == 0 || r.height % f != 0 || r.width % f != 0 {
        return Err(Error::Shape(format!(
            "{}x{} raster is not divisible by patch factor {f}",
            r.height, r.width
        )));
    }
    let (h, w, c) = (r.height / f, r.width / f, r.channels * f * f);
    let mut data = Vec::with_capacity(r.data.len());
    for i in 0..h {
        for j in 0..w {
            for ch in 0..r.channels {
                for a in 0..f {
                    for b in 0..f {
                        data.push(r.at(i * f + a, j * f + b, ch));
                    }
                }
            }
        }
    }
    Ok(LatentTensor {
        height: h,
        width: w,
        channels: c,
        data,
        provenance,
    })
}

pub fn decode<T: Copy>(z: &LatentTensor<T>) -> Result<Raster<T>> {
    decode_with(z, PATCH)
}

pub fn decode_with<T: Copy>(z: &LatentTensor<T>, f: usize) -> Result<Raster<T>> {
    if f == 0 || z.channels % (f * f) != 0 {
        return Err(Error::Shape(format!(
            "{} latent channels are not a multiple of {}",
            z.channels,
            f * f
        )));
    }
    if z.data.len() != z.height * z.width * z.channels {
        return Err(Error::Shape("latent data does not match its shape".into()));
    }
    let c = z.channels / (f * f);
    let (h, w) = (z.height * f, z.width * f);
    let mut data = z.data.clone();
    let mut k = 0;
    for i in 0..z.height {
        for j in 0..z.width {
            for ch in 0..c {
                for a in 0..f {
                    for b in 0..f {
                        data[((i * f + a) * w + j * f + b) * c + ch] = z.data[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Raster::new(h, w, c, data)
}

/// Image latent with pixel values mapped from `[0, 1]` to `[-1, 1]` first.
pub fn encode_image(image: &Raster<f32>) -> Result<LatentTensor<f64>> {
    encode(&image.map(|v| 2.0 * v as f64 - 1.0), Provenance::ImageLatent)
}

impl<T: Copy> LatentTensor<T> {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<T>,
        provenance: Provenance,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} latent needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            provenance,
        })
    }

    /// Channel-major `[C', H', W']` copy, the layout the denoiser consumes.
    pub fn to_planes(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            out.extend((0..hw).map(|p| self.data[p * self.channels + c]));
        }
        out
    }

    pub fn from_planes(
        height: usize,
        width: usize,
        channels: usize,
        planes: &[T],
        provenance: Provenance,
    ) -> Result<Self> {
        let hw = height * width;
        if planes.len() != hw * channels {
            return Err(Error::Shape("plane data does not match latent shape".into()));
        }
        let data = (0..hw)
            .flat_map(|p| (0..channels).map(move |c| planes[c * hw + p]))
            .collect();
        Self::new(height, width, channels, data, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Raster<f64> {
        Raster::new(h, w, c, (0..h * w * c).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn shapes_and_layout() {
        let r = Raster::new(64, 64, 1, vec![0.0f32; 4096]).unwrap();
        let z = encode(&r, Provenance::DepthLatent).unwrap();
        assert_eq!((z.height, z.width, z.channels), (32, 32, 4));
        let r = ramp(4, 4, 3);
        let z = encode(&r, Provenance::ImageLatent).unwrap();
        // latent(i, j, c*4 + a*2 + b) == raster(2i + a, 2j + b, c)
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    for a in 0..2 {
                        for b in 0..2 {
                            let l = z.data[(i * 2 + j) * 12 + c * 4 + a * 2 + b];
                            assert_eq!(l, r.at(2 * i + a, 2 * j + b, c));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn round_trips_and_errors() {
        let r = ramp(6, 8, 2);
        let z = encode(&r, Provenance::DepthLatent).unwrap();
        assert_eq!(decode(&z).unwrap(), r);
        let planes = z.to_planes();
        let back = LatentTensor::from_planes(3, 4, 8, &planes, Provenance::Noise).unwrap();
        assert_eq!(back.data, z.data);
        assert!(encode(&ramp(5, 4, 1), Provenance::DepthLatent).is_err());
        let bad = LatentTensor::new(2, 2, 3, vec![0.0; 12], Provenance::Noise).unwrap();
        assert!(decode(&bad).is_err());
    }
}

//! Dense real-valued grids: images (1 or 3 channels) and density maps (1 channel).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use densim_tensor::{Elem, Tensor};

use crate::error::{Error, Result};

/// Row-major grid with interleaved channels (`[y][x][c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Magic bytes of the density raster file.
pub const DENSITY_MAGIC: &[u8; 4] = b"L2HD";

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("raster needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    /// Single-channel raster from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(height, width, 1, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sum of every value, accumulated in order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_density(&self) -> bool {
        self.channels == 1 && self.data.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Single channel `c` as its own raster.
    pub fn channel(&self, c: usize) -> Raster {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Raster { height: self.height, width: self.width, channels: 1, data }
    }

    /// Zero-pads on the right and bottom to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Raster> {
        if height < self.height || width < self.width {
            return Err(Error::Shape(format!(
                "cannot pad {}x{} down to {height}x{width}",
                self.height, self.width
            )));
        }
        let mut out = Raster::zeros(height, width, self.channels);
        let row = self.width * self.channels;
        for y in 0..self.height {
            out.data[y * width * self.channels..y * width * self.channels + row]
                .copy_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        Ok(out)
    }

    /// Zero-pads right/bottom so both dimensions are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Raster {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        self.pad_to(h, w).expect("padding up never shrinks")
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Raster> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::CropTooLarge {
                crop_h: height,
                crop_w: width,
                height: self.height,
                width: self.width,
            });
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Raster { height, width, channels: self.channels, data })
    }

    pub fn hflip(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Sum over non-overlapping `f x f` blocks; dimensions must be multiples of `f`.
    pub fn block_sum(&self, f: usize) -> Result<Raster> {
        if f == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible into {f}x{f} blocks",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / f, self.width / f);
        let mut out = Raster::zeros(h, w, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let i = ((y / f) * w + x / f) * self.channels + c;
                    out.data[i] += self.get(y, x, c);
                }
            }
        }
        Ok(out)
    }

    /// `(C, H, W)` tensor.
    pub fn to_chw<T: Elem>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![T::zero(); h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = T::from_f64(self.get(y, x, ch));
                }
            }
        }
        Tensor::new(vec![c, h, w], data)
    }

    /// Inverse of [`Raster::to_chw`]; accepts `(C, H, W)` or `(H, W)`.
    pub fn from_chw<T: Elem>(t: &Tensor<T>) -> Result<Raster> {
        let (c, h, w) = match t.shape() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            s => return Err(Error::Shape(format!("expected (C,H,W) tensor, got {s:?}"))),
        };
        let mut out = Raster::zeros(h, w, c);
        let d = t.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, ch, d[(ch * h + y) * w + x].to_f64());
                }
            }
        }
        Ok(out)
    }

    /// Decodes an 8-bit PNG (grey or RGB) to values in `[0, 1]`.
    pub fn read_png(path: &Path) -> Result<Raster> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)?;
        let (channels, bytes, w, h) = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                (1, g.as_raw().clone(), g.width(), g.height())
            }
            _ => {
                let rgb = img.to_rgb8();
                (3, rgb.as_raw().clone(), rgb.width(), rgb.height())
            }
        };
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Raster::new(h as usize, w as usize, channels, data)
    }

    /// Writes an 8-bit PNG, clamping values to `[0, 1]`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
            c => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Density file: `L2HD`, u32 LE height, u32 LE width, u32 reserved (0),
    /// then row-major little-endian f32 values.
    pub fn write_density(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.density_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn density_bytes(&self) -> Result<Vec<u8>> {
        if self.channels != 1 {
            return Err(Error::Shape("density files are single-channel".into()));
        }
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(DENSITY_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn read_density(path: &Path) -> Result<Raster> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::density_from_bytes(&bytes)
    }

    pub fn density_from_bytes(bytes: &[u8]) -> Result<Raster> {
        if bytes.len() < 16 || &bytes[..4] != DENSITY_MAGIC {
            return Err(Error::Format("not an L2HD density file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w, reserved) = (word(4), word(8), word(12));
        if reserved != 0 {
            return Err(Error::Format(format!("reserved header word is {reserved}, expected 0")));
        }
        if bytes.len() != 16 + 4 * h * w {
            return Err(Error::Format(format!(
                "payload of {} bytes does not match {h}x{w}",
                bytes.len() - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Raster::new(h, w, 1, data)
    }

    /// Max-normalized greyscale rendering of a density map.
    pub fn heat_render(&self) -> Raster {
        let m = self.max();
        if m > 0.0 {
            self.map(|v| v / m)
        } else {
            self.map(|_| 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_file_round_trips_f32_values_bitwise() {
        let r = Raster::from_rows(&[vec![0.5, 1.25, 0.0], vec![3.0, 1e-7, 2.5]]).unwrap();
        let bytes = r.density_bytes().unwrap();
        assert_eq!(&bytes[..4], b"L2HD");
        assert_eq!(bytes.len(), 16 + 4 * 6);
        let back = Raster::density_from_bytes(&bytes).unwrap();
        assert_eq!(back.density_bytes().unwrap(), bytes);
        assert_eq!(back.height(), 2);
        assert_eq!(back.width(), 3);
    }

    #[test]
    fn density_file_rejects_bad_header() {
        assert!(Raster::density_from_bytes(b"XXXX0000000000000000").is_err());
        let mut bytes = Raster::zeros(1, 1, 1).density_bytes().unwrap();
        bytes[12] = 1;
        assert!(Raster::density_from_bytes(&bytes).is_err());
    }

    #[test]
    fn block_sum_preserves_total() {
        let data: Vec<f64> = (0..32 * 48).map(|i| (i % 13) as f64 * 0.01).collect();
        let r = Raster::new(32, 48, 1, data).unwrap();
        let b = r.block_sum(16).unwrap();
        assert_eq!((b.height(), b.width()), (2, 3));
        assert!((b.sum() - r.sum()).abs() < 1e-9);
    }

    #[test]
    fn pad_crop_and_flip() {
        let r = Raster::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let p = r.pad_to_multiple(2);
        assert_eq!((p.height(), p.width()), (2, 4));
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.hflip().data(), &[3.0, 2.0, 1.0]);
        assert_eq!(r.crop(0, 1, 1, 2).unwrap().data(), &[2.0, 3.0]);
        assert!(matches!(r.crop(0, 2, 1, 2), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn chw_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64).collect();
        let r = Raster::new(2, 3, 3, data).unwrap();
        let t = r.to_chw::<f64>();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(Raster::from_chw(&t).unwrap(), r);
    }

    #[test]
    fn png_round_trip_is_quantized_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let r = Raster::new(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        r.write_png(&path).unwrap();
        let back = Raster::read_png(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

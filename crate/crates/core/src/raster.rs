//! Single-channel float images and their PNG/JPEG encodings.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain(format!("empty raster {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::domain(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped at the borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn flipped_horizontally(&self) -> Raster {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Quantizes to 8 bits, clamping to `[0, 1]` first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Reads any PNG or JPEG and converts it to 8-bit luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let luma = img.into_luma8();
        let (w, h) = luma.dimensions();
        Self::from_u8(w as usize, h as usize, luma.as_raw())
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::BitDepth::Eight, &self.to_u8())
    }
}

/// Binary mask written as a 1-bit PNG; `true` pixels are foreground.
pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::domain("mask length does not match its extent"));
    }
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, width, height, png::BitDepth::One, &packed)
}

/// Loads a mask PNG of any bit depth; non-zero pixels are foreground.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let raster = Raster::load(path)?;
    let mask = raster.data.iter().map(|&v| v > 0.5).collect();
    Ok((raster.width, raster.height, mask))
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let to_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let bytes: Vec<u8> = (0..=255u8).cycle().take(40 * 7).collect();
        let r = Raster::from_u8(40, 7, &bytes).unwrap();
        r.save_png(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn one_bit_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask: Vec<bool> = (0..13 * 5).map(|i| i % 3 == 0).collect();
        save_mask_png(&path, 13, 5, &mask).unwrap();
        let (w, h, back) = load_mask_png(&path).unwrap();
        assert_eq!((w, h), (13, 5));
        assert_eq!(back, mask);
    }

    #[test]
    fn bilinear_interpolates_between_pixels() {
        let r = Raster::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(r.sample_bilinear(0.5, 0.0), 0.5);
        assert_eq!(r.sample_bilinear(-3.0, 0.0), 0.0);
        assert_eq!(r.sample_bilinear(9.0, 0.0), 1.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Raster::new(0, 3, vec![]).is_err());
        assert!(Raster::new(2, 2, vec![0.0; 3]).is_err());
    }
}

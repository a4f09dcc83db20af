//! Raster containers: RGB portrait images, binary masks and probability maps.
//!
//! All containers are row-major. Images store interleaved RGB in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{validation, Result};

/// An RGB image with channel values in `[0, 1]`, stored interleaved (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct PortraitImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PortraitImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(validation("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(validation("image buffer length does not match 3*width*height"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(validation("image channel values must lie in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    /// Builds an image from 8-bit interleaved RGB, mapping 0..=255 onto [0, 1].
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(validation("rgb8 buffer length does not match 3*width*height"));
        }
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(width, height, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
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

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Pixel as 8-bit RGB (rounded).
    pub fn pixel_u8(&self, x: usize, y: usize) -> [u8; 3] {
        let p = self.pixel(x, y);
        [to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * 3;
                let dst = (y * self.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = vec![0.0f32; width * height * 3];
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..3 {
                    let at = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * 3 + c];
                    let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                    let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                    data[(y * width + x) * 3 + c] = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
                }
            }
        }
        Self { width, height, data }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(validation("crop window exceeds image bounds"));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Self { width, height, data })
    }

    /// Planar (CHW) copy of the pixel data.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        out
    }
}

fn to_u8(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// A generic single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Strictly binary map, one byte per pixel holding 0 or 1.
pub type MaskMap = Plane<u8>;

/// Per-pixel probabilities in `[0, 1]`.
pub type ProbMap = Plane<f64>;

/// Guidance signals fed to a decoder; same representation as a probability map.
pub type GuidanceMap = ProbMap;

impl<T: Copy> Plane<T> {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            let sx = ((x * self.width) / width).min(self.width - 1);
            let sy = ((y * self.height) / height).min(self.height - 1);
            self.get(sx, sy)
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(validation("crop window exceeds map bounds"));
        }
        Ok(Self::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y)))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl MaskMap {
    /// Validates that every value is 0 or 1.
    pub fn new_mask(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(validation("mask buffer length does not match width*height"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(validation("mask values must be binary"));
        }
        Ok(Self { width, height, data })
    }

    /// Binarizes 8-bit gray values: `v >= threshold` becomes 1.
    pub fn from_gray8(width: usize, height: usize, bytes: &[u8], threshold: u8) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(validation("gray8 buffer length does not match width*height"));
        }
        Ok(Self { width, height, data: bytes.iter().map(|&b| u8::from(b >= threshold)).collect() })
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Number of pixels set in `self` but not in `superset`.
    pub fn containment_violations(&self, superset: &MaskMap) -> usize {
        self.data.iter().zip(&superset.data).filter(|(&a, &b)| a != 0 && b == 0).count()
    }

    pub fn to_prob(&self) -> ProbMap {
        self.map(f64::from)
    }
}

impl ProbMap {
    pub fn new_prob(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(validation("probability buffer length does not match width*height"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(validation("probabilities must lie in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    /// 8-bit encoding `round(255 p)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&p| libm::round(p.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    pub fn from_gray8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new_prob(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        let img = PortraitImage::from_rgb8(1, 2, &[255, 255, 255, 0, 0, 0]).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_binarization_at_128() {
        let m = MaskMap::from_gray8(4, 1, &[0, 127, 128, 255], 128).unwrap();
        assert_eq!(m.data(), &[0, 0, 1, 1]);
        let m = MaskMap::from_gray8(2, 1, &[0, 255], 128).unwrap();
        assert_eq!(m.data(), &[0, 1]);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(PortraitImage::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(MaskMap::new_mask(1, 1, vec![2]).is_err());
        assert!(ProbMap::new_prob(1, 1, vec![-0.1]).is_err());
    }

    #[test]
    fn resize_shapes() {
        let img = PortraitImage::filled(100, 80, [0.5, 0.2, 0.1]);
        let r = img.resize_bilinear(64, 64);
        assert_eq!((r.width(), r.height()), (64, 64));
        assert!((r.pixel(10, 10)[0] - 0.5).abs() < 1e-6);
        let m = MaskMap::filled(100, 80, 1u8).resize_nearest(64, 64);
        assert_eq!((m.width(), m.height()), (64, 64));
        assert_eq!(m.count(), 64 * 64);
    }

    #[test]
    fn flip_is_involution() {
        let img = PortraitImage::new(3, 1, (0..9).map(|v| v as f32 / 9.0).collect()).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(2, 0));
    }
}

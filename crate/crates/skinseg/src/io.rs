//! Raster files: 8-bit RGB images, 8-bit grayscale masks and probability maps
//! with an optional raw float sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use skinseg_core::{MaskMap, PortraitImage, ProbMap};

use crate::error::{Error, Result};

pub const MASK_THRESHOLD: u8 = 128;
const SIDECAR_MAGIC: &[u8; 4] = b"SKPF";

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::Input(format!("{} does not exist", path.display())));
    }
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_image(path: &Path) -> Result<PortraitImage> {
    let rgb = open(path)?.to_rgb8();
    Ok(PortraitImage::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())?)
}

/// Reads a single-channel mask and binarizes it at 128.
pub fn read_mask(path: &Path) -> Result<MaskMap> {
    let img = open(path)?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        DynamicImage::ImageLuma16(_) => img.to_luma8(),
        other => {
            return Err(skinseg_core::Error::Validation(format!(
                "{}: mask must be single-channel grayscale, found {:?}",
                path.display(),
                other.color()
            ))
            .into())
        }
    };
    Ok(MaskMap::from_gray8(gray.width() as usize, gray.height() as usize, gray.as_raw(), MASK_THRESHOLD)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

pub fn write_image(path: &Path, image: &PortraitImage) -> Result<()> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8()).expect("buffer size matches");
    save(path, DynamicImage::ImageRgb8(buf))
}

fn write_gray(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, bytes).expect("buffer size matches");
    save(path, DynamicImage::ImageLuma8(buf))
}

/// Writes a binary mask as 0/255.
pub fn write_mask(path: &Path, mask: &MaskMap) -> Result<()> {
    write_gray(path, mask.width(), mask.height(), mask.to_gray8())
}

/// Sidecar path of a probability raster: same stem, `.f32` extension.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("f32")
}

/// Writes `round(255 p)` as 8-bit grayscale and, if `raw`, the exact values as little-endian `f32`.
pub fn write_prob(path: &Path, p: &ProbMap, raw: bool) -> Result<()> {
    write_gray(path, p.width(), p.height(), p.to_gray8())?;
    if raw {
        let mut bytes = Vec::with_capacity(12 + 4 * p.len());
        bytes.extend_from_slice(SIDECAR_MAGIC);
        bytes.extend_from_slice(&(p.width() as u32).to_le_bytes());
        bytes.extend_from_slice(&(p.height() as u32).to_le_bytes());
        for &v in p.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let side = sidecar_path(path);
        fs::write(&side, bytes).map_err(|e| Error::io(side, e))?;
    }
    Ok(())
}

/// Reads a probability map, preferring the raw sidecar when one exists.
pub fn read_prob(path: &Path) -> Result<ProbMap> {
    let side = sidecar_path(path);
    if side.exists() {
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let bad = || Error::Input(format!("{}: malformed probability sidecar", side.display()));
        if bytes.len() < 12 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(bad());
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * w * h {
            return Err(bad());
        }
        let data = bytes[12..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        return Ok(ProbMap::new_prob(w, h, data)?);
    }
    let img = open(path)?.to_luma8();
    Ok(ProbMap::from_gray8(img.width() as usize, img.height() as usize, img.as_raw())?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Input(format!("{} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

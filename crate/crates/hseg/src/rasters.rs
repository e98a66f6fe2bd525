//! On-disk raster formats.
//!
//! `.img` holds one 16-bit grayscale channel: an 8-byte header of width
//! then height (both u32 little-endian) followed by `width * height` u16
//! little-endian samples in row-major order. `.lbl` uses the same header
//! followed by one u8 class index per pixel. Float fields export to 8-bit
//! PNG after min-max scaling, with the scale recorded in a text sidecar.

use std::fs;
use std::path::Path;

use crate::labels::{LabelMap, CLASS_COUNT};
use crate::{Error, Result};

/// One 16-bit grayscale channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster16 {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl Raster16 {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("raster dimensions {width}x{height} must be positive")));
        }
        if data.len() != width * height {
            return Err(Error::Format(format!(
                "raster {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Raster16 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        Raster16 { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u16) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Copy the `width x height` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Raster16> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Format(format!(
                "crop {width}x{height}+{x}+{y} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for row in y..y + height {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + width]);
        }
        Raster16::new(width, height, data)
    }
}

fn header(width: usize, height: usize) -> [u8; 8] {
    let mut h = [0u8; 8];
    h[..4].copy_from_slice(&(width as u32).to_le_bytes());
    h[4..].copy_from_slice(&(height as u32).to_le_bytes());
    h
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "{}: truncated header ({} bytes, need 8)",
            path.display(),
            bytes.len()
        )));
    }
    let width = u32::from_le_bytes(bytes[..4].try_into().expect("sized")) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().expect("sized")) as usize;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "{}: dimensions {width}x{height} must be positive",
            path.display()
        )));
    }
    Ok((width, height))
}

pub fn write_img(path: &Path, raster: &Raster16) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 2 * raster.data.len());
    bytes.extend_from_slice(&header(raster.width, raster.height));
    for &v in &raster.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_img(path: &Path) -> Result<Raster16> {
    let bytes = fs::read(path)?;
    let (width, height) = parse_header(&bytes, path)?;
    let expect = 8 + 2 * width * height;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: {width}x{height} image needs {expect} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<u16> = bytes[8..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().expect("sized")))
        .collect();
    Raster16::new(width, height, data)
}

pub fn write_lbl(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.raw().len());
    bytes.extend_from_slice(&header(labels.width(), labels.height()));
    bytes.extend_from_slice(labels.raw());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_lbl(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (width, height) = parse_header(&bytes, path)?;
    let expect = 8 + width * height;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: {width}x{height} label map needs {expect} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    for &b in &bytes[8..] {
        if b as usize >= CLASS_COUNT {
            return Err(Error::InvalidClass(b));
        }
    }
    LabelMap::from_raw(width, height, bytes[8..].to_vec())
}

/// Export a float field as an 8-bit grayscale PNG, min-max scaled, and
/// write `<path>.range.txt` recording the original min and max. A
/// constant field maps to mid-gray.
pub fn write_png_scaled(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<(f32, f32)> {
    if values.len() != width * height {
        return Err(Error::Format(format!(
            "png export {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "{}: non-finite value in png export",
            path.display()
        )));
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .expect("length checked above");
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: png encode failed: {e}", path.display())))?;
    let sidecar = {
        let mut s = path.as_os_str().to_owned();
        s.push(".range.txt");
        std::path::PathBuf::from(s)
    };
    fs::write(sidecar, format!("min={min}\nmax={max}\n"))?;
    Ok((min, max))
}

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major `height × width × 3` raster with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl RgbRaster {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn pixel(&self, u: u32, v: u32) -> [f32; 3] {
        let i = (v as usize * self.width as usize + u as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: u32, v: u32, rgb: [f32; 3]) {
        let i = (v as usize * self.width as usize + u as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel class map for a camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl LabelRaster {
    pub fn filled(width: u32, height: u32, class: u16) -> Self {
        Self {
            width,
            height,
            data: vec![class; width as usize * height as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[v as usize * self.width as usize + u as usize]
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| Error::format(path, format!("unreadable raster: {e}")))
}

/// Reads an 8-bit RGB raster, scaling each channel by 1/255.
pub fn read_image(path: impl AsRef<Path>) -> Result<RgbRaster> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageRgb8(img) => Ok(RgbRaster {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }),
        other => Err(Error::format(
            path,
            format!("expected 8-bit RGB raster, found {:?}", other.color()),
        )),
    }
}

/// Writes a raster as 8-bit RGB PNG, rounding to the nearest code.
pub fn write_image(path: impl AsRef<Path>, raster: &RgbRaster) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(raster.width, raster.height, bytes)
        .ok_or_else(|| Error::contract("raster buffer does not match its dimensions"))?;
    img.save(path)
        .map_err(|e| Error::format(path, format!("cannot write raster: {e}")))
}

/// Reads an 8-bit single-channel label image (class ID per pixel).
pub fn read_label_image(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(img) => Ok(LabelRaster {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as u16).collect(),
        }),
        other => Err(Error::format(
            path,
            format!("expected 8-bit grayscale label image, found {:?}", other.color()),
        )),
    }
}

pub fn write_label_image(path: impl AsRef<Path>, labels: &LabelRaster) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = labels.data.iter().map(|&v| v.min(255) as u8).collect();
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(labels.width, labels.height, bytes)
        .ok_or_else(|| Error::contract("label buffer does not match its dimensions"))?;
    img.save(path)
        .map_err(|e| Error::format(path, format!("cannot write label image: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_red_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        RgbImage::from_pixel(1, 1, Rgb([255, 0, 0])).save(&path).unwrap();
        let r = read_image(&path).unwrap();
        assert_eq!((r.width, r.height), (1, 1));
        assert_eq!(r.data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn black_raster_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        RgbImage::new(2, 2).save(&path).unwrap();
        let r = read_image(&path).unwrap();
        assert_eq!(r.data, vec![0.0; 12]);
    }

    #[test]
    fn grayscale_is_rejected_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        GrayImage::new(2, 2).save(&path).unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(read_label_image(&path).is_ok());
    }

    #[test]
    fn write_read_round_trip_on_codes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let mut r = RgbRaster::new(3, 2);
        r.set_pixel(2, 1, [1.0, 128.0 / 255.0, 0.0]);
        write_image(&path, &r).unwrap();
        assert_eq!(read_image(&path).unwrap(), r);
    }
}

//! 8-bit PNG reading and writing for `[H, W, 3]` images and `[H, W]` masks.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match *img.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::shape("write_rgb", &[0, 0, 3], img.shape())),
    };
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let out = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_gray(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match *img.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::shape("write_gray", &[0, 0], img.shape())),
    };
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let out = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

/// RGB image as `[H, W, 3]` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Mask as `[H, W]`, binarized at half intensity.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(&[2, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        let back = read_rgb(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = dir.path().join("m.png");
        write_gray(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        assert!(matches!(read_rgb(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}

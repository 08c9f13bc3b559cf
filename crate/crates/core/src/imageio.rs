//! 8-bit PNG interchange for image tensors in `[-1, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};

use crate::domain::ImageTensor;
use crate::{Error, Result};

fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn to_rgb8(img: &ImageTensor) -> Result<RgbImage> {
    let (h, w) = (img.height(), img.width());
    let data = img.to_vec()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([
            quantize(data[i]),
            quantize(data[plane + i]),
            quantize(data[2 * plane + i]),
        ])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    ImageTensor::from_chw(data, h, w)
}

/// Decodes an image file and, if `size` is given and differs, resizes it to
/// `size x size` with bilinear filtering.
pub fn load_rgb8(path: &Path, size: Option<usize>) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: format!("cannot decode image: {e}"),
        })?
        .to_rgb8();
    Ok(match size {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    })
}

pub fn load_png(path: &Path, size: Option<usize>) -> Result<ImageTensor> {
    from_rgb8(&load_rgb8(path, size)?)
}

pub fn save_rgb8(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: format!("cannot write PNG: {e}"),
        })
}

pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    save_rgb8(path, &to_rgb8(img)?)
}

/// Tiles equally sized images row-major into `cols` columns.
pub fn grid(images: &[ImageTensor], cols: usize) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("grid needs at least one image"))?;
    if cols == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let (h, w) = (first.height() as u32, first.width() as u32);
    let rows = images.len().div_ceil(cols) as u32;
    let mut out = RgbImage::new(w * cols as u32, h * rows);
    for (i, img) in images.iter().enumerate() {
        if img.height() as u32 != h || img.width() as u32 != w {
            return Err(Error::invalid("grid images must share one size"));
        }
        let tile = to_rgb8(img)?;
        let (gx, gy) = ((i % cols) as u32 * w, (i / cols) as u32 * h);
        image::imageops::replace(&mut out, &tile, gx as i64, gy as i64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_exactly() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { Rgb([0, 0, 0]) } else { Rgb([255; 3]) });
        let t = from_rgb8(&img).unwrap().to_vec().unwrap();
        assert_eq!(t[0], -1.0);
        assert_eq!(t[1], 1.0);
        assert_eq!(to_rgb8(&from_rgb8(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 16).map(|i| (i as f32 / 24.0) - 1.0).collect();
        let img = ImageTensor::from_chw(data.clone(), 4, 4).unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p, None).unwrap().to_vec().unwrap();
        for (a, b) in data.iter().zip(back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn grid_tiles_row_major() {
        let a = ImageTensor::filled(-1.0, 2, 2).unwrap();
        let b = ImageTensor::filled(1.0, 2, 2).unwrap();
        let g = grid(&[a.clone(), b.clone(), b], 2).unwrap();
        assert_eq!((g.width(), g.height()), (4, 4));
        assert_eq!(g.get_pixel(0, 0).0, [0; 3]);
        assert_eq!(g.get_pixel(2, 0).0, [255; 3]);
        assert_eq!(g.get_pixel(0, 2).0, [255; 3]);
        assert_eq!(g.get_pixel(3, 3).0, [0; 3]);
    }
}

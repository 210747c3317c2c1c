//! Conversions between PNG files and `[C, H, W]` float arrays, resizing and grids.
//!
//! Images live in `[-1, 1]`; masks in `[0, 1]` with one channel.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// Threshold applied to 8-bit mask files.
pub const MASK_THRESHOLD: u8 = 128;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}

pub fn array_to_rgb(a: ArrayView3<f32>) -> RgbImage {
    let (_, h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| to_u8((a[[c, y, x]] + 1.0) * 0.5)))
    })
}

/// Binary `{0, 1}` mask from an 8-bit grayscale image.
pub fn gray_to_mask(img: &GrayImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD)
    })
}

/// Grayscale rendering of a `[1, H, W]` map in `[0, 1]`.
pub fn mask_to_gray(a: ArrayView3<f32>) -> GrayImage {
    let (_, h, w) = a.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(a[[0, y as usize, x as usize]])]))
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    Ok(rgb_to_array(&open(path)?.to_rgb8()))
}

pub fn load_mask(path: &Path) -> Result<Array3<f32>> {
    Ok(gray_to_mask(&open(path)?.to_luma8()))
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb(a: ArrayView3<f32>, path: &Path) -> Result<()> {
    save(DynamicImage::ImageRgb8(array_to_rgb(a)), path)
}

pub fn save_mask(a: ArrayView3<f32>, path: &Path) -> Result<()> {
    save(DynamicImage::ImageLuma8(mask_to_gray(a)), path)
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(a: ArrayView3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, sh, sw) = a.dim();
    if (sh, sw) == (h, w) {
        return a.to_owned();
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / dst as f32;
        (0..dst)
            .map(|i| {
                let p = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (p.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, p - i0 as f32)
            })
            .collect()
    };
    let ys = taps(h, sh);
    let xs = taps(w, sw);
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = a[[k, y0, x0]] * (1.0 - fx) + a[[k, y0, x1]] * fx;
        let bot = a[[k, y1, x0]] * (1.0 - fx) + a[[k, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Nearest-neighbour resize; keeps binary maps binary.
pub fn resize_nearest(a: ArrayView3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, sh, sw) = a.dim();
    let pick = |i: usize, dst: usize, src: usize| ((i * src + src / 2) / dst).min(src - 1);
    Array3::from_shape_fn((c, h, w), |(k, y, x)| a[[k, pick(y, h, sh), pick(x, w, sw)]])
}

/// Tiles equally sized `[3, H, W]` images into rows of `cols`, separated by `pad` white pixels.
pub fn grid(images: &[Array3<f32>], cols: usize, pad: usize) -> Result<Array3<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image grid".into()))?;
    let (c, h, w) = first.dim();
    if images.iter().any(|im| im.dim() != (c, h, w)) {
        return Err(Error::Shape("grid images differ in shape".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = Array3::from_elem((c, rows * (h + pad) + pad, cols * (w + pad) + pad), 1.0);
    for (i, im) in images.iter().enumerate() {
        let (r, q) = (i / cols, i % cols);
        let (y, x) = (pad + r * (h + pad), pad + q * (w + pad));
        out.slice_mut(s![.., y..y + h, x..x + w]).assign(im);
    }
    Ok(out)
}

/// Mask or switch map in `[0, 1]` spread to three channels in `[-1, 1]` for grids.
pub fn map_to_rgb(a: ArrayView3<f32>) -> Array3<f32> {
    let (_, h, w) = a.dim();
    Array3::from_shape_fn((3, h, w), |(_, y, x)| a[[0, y, x]] * 2.0 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_lattice() {
        let a = Array3::from_shape_fn((3, 5, 4), |(c, y, x)| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 127.5 - 1.0);
        let back = rgb_to_array(&array_to_rgb(a.view()));
        assert!(a.iter().zip(back.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn mask_threshold() {
        let img = GrayImage::from_raw(3, 1, vec![0, 127, 255]).unwrap();
        let m = gray_to_mask(&img);
        assert_eq!(m.as_slice().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn nearest_resize_keeps_checkerboard_binary() {
        let a = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((x + y) % 2) as f32);
        for (h, w) in [(5, 5), (16, 16), (13, 7)] {
            let r = resize_nearest(a.view(), h, w);
            assert!(r.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let a = Array3::from_shape_fn((2, 4, 6), |(c, y, x)| (c + y * x) as f32);
        assert_eq!(resize_bilinear(a.view(), 4, 6), a);
        let k = Array3::from_elem((1, 5, 5), 0.25);
        assert!(resize_bilinear(k.view(), 9, 3).iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}

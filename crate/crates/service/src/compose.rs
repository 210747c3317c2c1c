//! Pasting a generated crop back into the full base image.

use image::{Rgb, RgbImage};
use mcgan::imageio::{resize_bilinear, resize_nearest};
use mcgan::losses::erode;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Minimum bbox side in pixels.
pub const MIN_SIDE: u32 = 8;

/// Per-channel difference (in `[0, 1]` units) above which a crop pixel counts
/// as altered by the generator and survives mask blending.
pub const ALTERED_THRESHOLD: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn validate(&self, width: u32, height: u32) -> Result<(), ApiError> {
        if self.w < MIN_SIDE || self.h < MIN_SIDE {
            return Err(ApiError::bad_request(format!(
                "bbox {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
                self.w, self.h
            )));
        }
        let right = self.x as u64 + self.w as u64;
        let bottom = self.y as u64 + self.h as u64;
        if right > width as u64 || bottom > height as u64 {
            return Err(ApiError::bad_request(format!(
                "bbox {self:?} exceeds image {width}x{height}"
            )));
        }
        Ok(())
    }

    /// Base-image pixel covering the center of model pixel `(u, v)` of a `mw×mh` crop.
    pub fn model_to_base(&self, u: usize, v: usize, mw: usize, mh: usize) -> (u32, u32) {
        let fx = (u as f64 + 0.5) * self.w as f64 / mw as f64;
        let fy = (v as f64 + 0.5) * self.h as f64 / mh as f64;
        let x = (fx.floor() as u32).min(self.w - 1);
        let y = (fy.floor() as u32).min(self.h - 1);
        (self.x + x, self.y + y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    /// The bbox region is replaced by the resized crop.
    #[default]
    FullPaste,
    /// The crop is blended in with a feathered mask.
    MaskBlend,
}

/// The bbox region of `img` as a `[3, h, w]` array in `[-1, 1]`.
pub fn crop(img: &RgbImage, bbox: &BBox) -> Array3<f32> {
    Array3::from_shape_fn((3, bbox.h as usize, bbox.w as usize), |(c, y, x)| {
        img.get_pixel(bbox.x + x as u32, bbox.y + y as u32)[c] as f32 / 127.5 - 1.0
    })
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Box blur of radius `r` with edge clamping.
fn box_blur(a: &Array2<f32>, r: usize) -> Array2<f32> {
    if r == 0 {
        return a.clone();
    }
    let (h, w) = a.dim();
    let pass = |src: &Array2<f32>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for d in -(r as i64)..=(r as i64) {
                let (yy, xx) = if horizontal {
                    (y as i64, (x as i64 + d).clamp(0, w as i64 - 1))
                } else {
                    ((y as i64 + d).clamp(0, h as i64 - 1), x as i64)
                };
                acc += src[[yy as usize, xx as usize]];
            }
            acc / (2 * r + 1) as f32
        })
    };
    pass(&pass(a, true), false)
}

/// Blend weights over the bbox: the eroded, feathered generated mask united
/// with the pixels the generator visibly changed.
pub fn blend_alpha(crop_img: &Array3<f32>, base_crop: &Array3<f32>, mask: &Array3<f32>, feather: usize) -> Array2<f32> {
    let (_, h, w) = crop_img.dim();
    let binary = mask.index_axis(ndarray::Axis(0), 0).mapv(|v| v >= 0.5);
    let eroded = erode(&binary, 3).mapv(|b| if b { 1.0f32 } else { 0.0 });
    let soft = box_blur(&eroded, feather);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let altered = (0..3).any(|c| (crop_img[[c, y, x]] - base_crop[[c, y, x]]).abs() * 0.5 > ALTERED_THRESHOLD);
        if altered {
            1.0
        } else {
            soft[[y, x]]
        }
    })
}

/// Pastes the generated image (`[3, H, W]`) and mask (`[1, H, W]`) into `base` at `bbox`.
/// Pixels outside the bbox are copied from `base` unchanged.
pub fn compose(
    base: &RgbImage,
    bbox: &BBox,
    gen_image: &Array3<f32>,
    gen_mask: &Array3<f32>,
    mode: ComposeMode,
    feather: usize,
) -> Result<RgbImage, ApiError> {
    bbox.validate(base.width(), base.height())?;
    let (h, w) = (bbox.h as usize, bbox.w as usize);
    let patch = resize_bilinear(gen_image.view(), h, w);
    let mut out = base.clone();
    match mode {
        ComposeMode::FullPaste => {
            for y in 0..h {
                for x in 0..w {
                    let px = Rgb([0, 1, 2].map(|c| to_u8(patch[[c, y, x]])));
                    out.put_pixel(bbox.x + x as u32, bbox.y + y as u32, px);
                }
            }
        }
        ComposeMode::MaskBlend => {
            let base_crop = crop(base, bbox);
            let mask = resize_nearest(gen_mask.view(), h, w);
            let alpha = blend_alpha(&patch, &base_crop, &mask, feather);
            for y in 0..h {
                for x in 0..w {
                    let a = alpha[[y, x]];
                    if a == 0.0 {
                        continue;
                    }
                    let px = Rgb([0, 1, 2].map(|c| to_u8(a * patch[[c, y, x]] + (1.0 - a) * base_crop[[c, y, x]])));
                    out.put_pixel(bbox.x + x as u32, bbox.y + y as u32, px);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_bounds() {
        let b = BBox { x: 10, y: 10, w: 8, h: 8 };
        assert!(b.validate(18, 18).is_ok());
        assert!(b.validate(17, 18).is_err());
        assert!(BBox { w: 7, ..b }.validate(100, 100).is_err());
    }

    #[test]
    fn model_pixels_map_inside_bbox() {
        for &(w, h, mw) in &[(8u32, 13u32, 64usize), (200, 31, 64), (64, 64, 64)] {
            let b = BBox { x: 5, y: 9, w, h };
            for v in 0..mw {
                for u in 0..mw {
                    let (x, y) = b.model_to_base(u, v, mw, mw);
                    assert!(x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let a = Array2::from_elem((5, 7), 0.5f32);
        assert!(box_blur(&a, 2).iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}

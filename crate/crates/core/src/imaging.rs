//! PNG panels and grids for qualitative output.

use std::path::Path;

use cddsa_autograd::{Scalar, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{CddsaError, Result};

const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [230, 80, 60], [250, 220, 70], [70, 160, 230], [120, 220, 120], [200, 120, 220]];
const GAP: u32 = 2;

/// `(C, H, W)` image in `[0, 1]` with one or three channels.
pub fn tensor_to_rgb<T: Scalar>(image: &Tensor<T>) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(CddsaError::Shape(format!("cannot render {s:?} as an image")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let px = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if c == 1 {
            let g = px(d[i]);
            Rgb([g, g, g])
        } else {
            Rgb([px(d[i]), px(d[h * w + i]), px(d[2 * h * w + i])])
        }
    }))
}

pub fn labels_to_rgb(labels: &[u8], height: usize, width: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| Rgb(PALETTE[labels[y as usize * width + x as usize] as usize % PALETTE.len()]))
}

/// Lays `panels` out left to right, wrapping after `cols`.
pub fn grid(panels: &[RgbImage], cols: usize) -> Result<RgbImage> {
    let first = panels.first().ok_or_else(|| CddsaError::Validation("empty image grid".into()))?;
    let (pw, ph) = first.dimensions();
    if panels.iter().any(|p| p.dimensions() != (pw, ph)) {
        return Err(CddsaError::Shape("grid panels must share dimensions".into()));
    }
    let cols = cols.clamp(1, panels.len()) as u32;
    let rows = (panels.len() as u32).div_ceil(cols);
    let mut out = RgbImage::from_pixel(cols * pw + (cols - 1) * GAP, rows * ph + (rows - 1) * GAP, Rgb([255, 255, 255]));
    for (k, p) in panels.iter().enumerate() {
        let (r, c) = (k as u32 / cols, k as u32 % cols);
        image::imageops::replace(&mut out, p, (c * (pw + GAP)) as i64, (r * (ph + GAP)) as i64);
    }
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CddsaError::io(path, std::io::Error::other(e.to_string())))
}

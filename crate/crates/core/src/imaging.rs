//! Grayscale image I/O and resampling into network tensors.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(img.to_luma8())
}

pub fn save_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })
}

/// Bilinear resize with corner alignment into a `[1, height, width]` tensor
/// scaled to `[0, 1]`.
pub fn resize_to_tensor<T: Scalar>(img: &GrayImage, width: usize, height: usize) -> Tensor<T> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let src: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let scale = |from: usize, to: usize| if to <= 1 || from <= 1 { 0.0 } else { (from - 1) as f64 / (to - 1) as f64 };
    let (fx, fy) = (scale(sw, width), scale(sh, height));
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = y as f64 * fy;
        let y0 = (sy.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f64;
        for x in 0..width {
            let sx = x as f64 * fx;
            let x0 = (sx.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(T::lit(top * (1.0 - ty) + bot * ty));
        }
    }
    Tensor::from_vec(&[1, height, width], out).expect("sized buffer")
}

/// Mirrors a `[C, H, W]` tensor left to right.
pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = t.chw();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let img = GrayImage::from_fn(5, 4, |x, y| image::Luma([(x * 40 + y * 10) as u8]));
        let t: Tensor<f64> = resize_to_tensor(&img, 5, 4);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(t.at3(0, y, x), img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0);
            }
        }
    }

    #[test]
    fn corners_are_preserved() {
        let img = GrayImage::from_fn(9, 7, |x, y| image::Luma([(x * 20 + y * 3) as u8]));
        let t: Tensor<f64> = resize_to_tensor(&img, 4, 5);
        assert_eq!(t.at3(0, 0, 0), img.get_pixel(0, 0)[0] as f64 / 255.0);
        assert!((t.at3(0, 4, 3) - img.get_pixel(8, 6)[0] as f64 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_eq!(hflip(&t).at3(1, 2, 0), t.at3(1, 2, 3));
    }
}

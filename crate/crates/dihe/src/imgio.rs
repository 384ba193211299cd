//! Image file handling and pixel-space helpers.
//!
//! Images travel through the pipeline as (h, w, 3) tensors with intensities
//! in [-1, 1]; files are 8-bit RGB PNG mapped linearly from [0, 255].

use crate::tensor::Tensor;
use image::{ImageBuffer, Rgb};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image decode error: {0}")]
    Decode(#[from] image::ImageError),
}

pub fn to_pixels(t: &Tensor<f32>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    assert_eq!(t.shape().len(), 3, "expected (h,w,3) tensor");
    assert_eq!(t.shape()[2], 3);
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut buf = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = t.data()[(y * w + x) * 3 + c];
                (((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0)) as u8
            });
            buf.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    buf
}

pub fn from_pixels(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((h * w * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                data.push(px[c] as f32 / 255.0 * 2.0 - 1.0);
            }
        }
    }
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<(), ImageError> {
    to_pixels(t).save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>, ImageError> {
    let img = image::open(path)?.into_rgb8();
    Ok(from_pixels(&img))
}

/// Bilinear resampling of an (h, w, 3) tensor.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    assert_eq!(t.shape()[2], 3);
    let mut out = vec![0.0f32; out_h * out_w * 3];
    for oy in 0..out_h {
        // Sample at pixel centers.
        let fy = ((oy as f32 + 0.5) * h as f32 / out_h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * w as f32 / out_w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for c in 0..3 {
                let p = |y: usize, x: usize| t.data()[(y * w + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(oy * out_w + ox) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}

/// Separable gaussian blur with kernel radius ceil(3 sigma) and edge clamping.
pub fn gaussian_blur(t: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    if sigma <= 0.0 {
        return t.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut tmp = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * t.data()[(y * w + sx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Values exactly representable in 8 bits survive the roundtrip.
        let data: Vec<f32> = (0..4 * 4 * 3)
            .map(|i| ((i * 17) % 256) as f32 / 255.0 * 2.0 - 1.0)
            .collect();
        let t = Tensor::new(vec![4, 4, 3], data);
        save_png(&t, &path).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_identity() {
        let t = Tensor::new(vec![3, 3, 3], (0..27).map(|i| i as f32 / 27.0).collect());
        let r = resize_bilinear(&t, 3, 3);
        for (a, b) in t.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let t = Tensor::full(vec![8, 8, 3], 0.25f32);
        let b = gaussian_blur(&t, 1.2);
        for &v in b.data() {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }
}

//! 8-bit non-interlaced PNG in/out. Tensors hold [0,1] intensities; the u8
//! quantization here is the only precision step between memory and disk, so
//! images snapped to the u8 grid round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use image::{GrayImage, ImageReader, RgbImage, RgbaImage};
use std::path::Path;

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Snap a [0,1] tensor onto the 8-bit grid (round(v*255)/255).
pub fn quantize<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::from_f64(from_u8(to_u8(Scalar::to_f64(v) as f32)) as f64))
}

fn rgb_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::shape(format!("expected 3xHxW image, got {other:?}"))),
    }
}

pub fn save_rgb_png<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (h, w) = rgb_dims(image)?;
    let data = image.data();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                to_u8(Scalar::to_f64(data[y * w + x]) as f32),
                to_u8(Scalar::to_f64(data[h * w + y * w + x]) as f32),
                to_u8(Scalar::to_f64(data[2 * h * w + y * w + x]) as f32),
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn save_rgba_png<T: Scalar>(path: &Path, image: &Tensor<T>, alpha: &Tensor<T>) -> Result<()> {
    let (h, w) = rgb_dims(image)?;
    if alpha.shape() != [1, h, w] {
        return Err(Error::shape(format!(
            "alpha {:?} does not match image {}x{}",
            alpha.shape(),
            h,
            w
        )));
    }
    let data = image.data();
    let a = alpha.data();
    let mut out = RgbaImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgba([
                to_u8(Scalar::to_f64(data[y * w + x]) as f32),
                to_u8(Scalar::to_f64(data[h * w + y * w + x]) as f32),
                to_u8(Scalar::to_f64(data[2 * h * w + y * w + x]) as f32),
                to_u8(Scalar::to_f64(a[y * w + x]) as f32),
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save(path)?;
    Ok(())
}

/// Binary mask as an 8-bit grayscale PNG (ink = 255).
pub fn save_mask_png<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    let (h, w) = match mask.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected 1xHxW mask, got {other:?}"))),
    };
    let data = mask.data();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if Scalar::to_f64(data[y * w + x]) > 0.5 { 255 } else { 0 };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path)?;
    Ok(())
}

/// RGB + alpha channels of a PNG; plain RGB files get alpha = 1 everywhere.
pub fn load_rgba_png(path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let img = ImageReader::open(path)?.decode()?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut rgb = vec![0.0f32; 3 * h * w];
    let mut alpha = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            rgb[y * w + x] = from_u8(px[0]);
            rgb[h * w + y * w + x] = from_u8(px[1]);
            rgb[2 * h * w + y * w + x] = from_u8(px[2]);
            alpha[y * w + x] = from_u8(px[3]);
        }
    }
    Ok((
        Tensor::new(vec![3, h, w], rgb)?,
        Tensor::new(vec![1, h, w], alpha)?,
    ))
}

/// RGB image with any alpha composited over white.
pub fn load_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let (rgb, alpha) = load_rgba_png(path)?;
    let (h, w) = rgb_dims(&rgb)?;
    let mut out = rgb.into_data();
    let a = alpha.data();
    for c in 0..3 {
        for i in 0..h * w {
            out[c * h * w + i] = out[c * h * w + i] * a[i] + (1.0 - a[i]);
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Binary mask from a grayscale PNG (threshold at 50%).
pub fn load_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = if img.get_pixel(x as u32, y as u32)[0] >= 128 {
                1.0
            } else {
                0.0
            };
        }
    }
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_rgba_roundtrips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut rng = crate::numerics::Rng::new(3);
        let img = quantize(&rng.uniform_tensor::<f32>(&[3, 8, 8], 0.0, 1.0));
        let alpha = Tensor::from_fn(&[1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        save_rgba_png(&path, &img, &alpha).unwrap();
        let (back, alpha_back) = load_rgba_png(&path).unwrap();
        assert_eq!(back.data(), img.data());
        assert_eq!(alpha_back.data(), alpha.data());
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Tensor::from_fn(&[1, 5, 7], |i| ((i % 2) == 0) as u8 as f32);
        save_mask_png(&path, &mask).unwrap();
        let back = load_mask_png(&path).unwrap();
        assert_eq!(back.data(), mask.data());
    }
}

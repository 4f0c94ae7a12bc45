//! Blueprint extraction: adaptive threshold on the luminance image followed by
//! color inversion, yielding white-on-black line art (ink = 1).

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlueprintParams {
    /// Odd window edge length of the local mean.
    pub window: usize,
    /// Threshold offset below the local mean, on [0,1] intensities.
    pub c: f64,
}

impl Default for BlueprintParams {
    fn default() -> Self {
        BlueprintParams { window: 9, c: 0.02 }
    }
}

/// Rec.601 luminance of an RGB image.
pub fn luminance<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected 3xHxW, got {other:?}"))),
    };
    let d = image.data();
    let plane = h * w;
    let (cr, cg, cb) = (
        T::from_f64(0.299),
        T::from_f64(0.587),
        T::from_f64(0.114),
    );
    let data = (0..plane)
        .map(|i| cr * d[i] + cg * d[plane + i] + cb * d[2 * plane + i])
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Ink mask: pixel is ink iff its luminance falls below the local mean
/// (window x window, edge replication) minus `c`. Output values are exactly
/// 0 or 1.
pub fn extract_blueprint<T: Scalar>(
    image: &Tensor<T>,
    window: usize,
    c: f64,
) -> Result<Tensor<T>> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::config(format!(
            "adaptive threshold window must be odd and >= 3, got {window}"
        )));
    }
    let gray = luminance(image)?;
    let (h, w) = (gray.shape()[1], gray.shape()[2]);
    let g = gray.data();
    let r = (window / 2) as isize;
    let inv_count = 1.0 / (window * window) as f64;
    let cc = T::from_f64(c);
    let mut out = vec![T::zero(); h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = T::zero();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    sum = sum + g[yy * w + xx];
                }
            }
            let mean = sum * T::from_f64(inv_count);
            let idx = y as usize * w + x as usize;
            out[idx] = if g[idx] < mean - cc { T::one() } else { T::zero() };
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Fraction of ink pixels in a mask.
pub fn ink_fraction<T: Scalar>(mask: &Tensor<T>) -> f64 {
    let n = mask.numel() as f64;
    let ink = mask
        .data()
        .iter()
        .filter(|v| Scalar::to_f64(**v) > 0.5)
        .count() as f64;
    ink / n
}

/// Empty-image rejection: too little ink in the extracted blueprint.
pub fn is_empty_image<T: Scalar>(
    image: &Tensor<T>,
    min_ink_fraction: f64,
    params: &BlueprintParams,
) -> Result<bool> {
    let bp = extract_blueprint(image, params.window, params.c)?;
    Ok(ink_fraction(&bp) < min_ink_fraction)
}

/// 3x3 box dilation of a binary mask.
pub fn dilate<T: Scalar>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match mask.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected 1xHxW mask, got {other:?}"))),
    };
    let m = mask.data();
    let mut out = vec![T::zero(); h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hit = false;
            'scan: for dy in -1..=1 {
                for dx in -1..=1 {
                    let yy = y + dy;
                    let xx = x + dx;
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        if Scalar::to_f64(m[yy as usize * w + xx as usize]) > 0.5 {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
            }
            if hit {
                out[y as usize * w + x as usize] = T::one();
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_image_has_no_ink() {
        let img = Tensor::<f64>::full(&[3, 8, 8], 0.4);
        let bp = extract_blueprint(&img, 5, 0.02).unwrap();
        assert!(bp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_strictly_binary() {
        let mut rng = crate::numerics::Rng::new(8);
        let img = rng.uniform_tensor::<f64>(&[3, 12, 12], 0.0, 1.0);
        let bp = extract_blueprint(&img, 3, 0.02).unwrap();
        assert!(bp.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn even_window_is_config_error() {
        let img = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!(matches!(
            extract_blueprint(&img, 4, 0.02),
            Err(Error::Config(_))
        ));
        assert!(extract_blueprint(&img, 1, 0.02).is_err());
    }

    #[test]
    fn step_edge_ink_matches_per_pixel_oracle() {
        // vertical black-on-white step edge: left half dark, right half white
        let (h, w) = (10usize, 12usize);
        let img = Tensor::from_fn(&[3, h, w], |i| {
            let x = i % w;
            if x < w / 2 {
                0.1
            } else {
                1.0
            }
        });
        let window = 5usize;
        let c = 0.02;
        let bp = extract_blueprint(&img, window, c).unwrap();

        // independent per-pixel local-mean computation on the luminance image
        let gray: Vec<f64> = (0..h * w)
            .map(|i| {
                0.299 * img.data()[i] + 0.587 * img.data()[h * w + i] + 0.114 * img.data()[2 * h * w + i]
            })
            .collect();
        let r = (window / 2) as isize;
        let mut any_ink = false;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sum = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        sum += gray[yy * w + xx];
                    }
                }
                let mean = sum / (window * window) as f64;
                let idx = y as usize * w + x as usize;
                let expect = if gray[idx] < mean - c { 1.0 } else { 0.0 };
                assert_eq!(bp.data()[idx], expect, "pixel ({y},{x})");
                if expect == 1.0 {
                    // ink appears only on the dark side of the boundary band
                    assert!((x as usize) < w / 2, "ink on bright side at ({y},{x})");
                    any_ink = true;
                }
            }
        }
        assert!(any_ink, "step edge must produce ink");
    }

    #[test]
    fn empty_image_rejection_boundaries() {
        let params = BlueprintParams::default();
        let white = Tensor::<f64>::full(&[3, 16, 16], 1.0);
        assert!(is_empty_image(&white, 0.005, &params).unwrap());
        // threshold 0 never rejects
        assert!(!is_empty_image(&white, 0.0, &params).unwrap());
    }

    #[test]
    fn dilation_grows_by_one_pixel() {
        let mask = Tensor::from_fn(&[1, 5, 5], |i| (i == 12) as u8 as f64); // center
        let d = dilate(&mask).unwrap();
        let expect: usize = d.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(expect, 9);
    }
}

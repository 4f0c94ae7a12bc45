//! Deterministic 64-dimensional image descriptor used for similarity mining:
//! 16-bin color histograms per RGB channel over the foreground (48 values)
//! plus a 4x4 grid of mean foreground luminance (16 values), L2-normalized.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

pub const EMBED_DIM: usize = 64;
const BINS: usize = 16;
const GRID: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEmbedding {
    pub vector: Vec<f32>,
}

impl FeatureEmbedding {
    pub fn cosine(&self, other: &FeatureEmbedding) -> f32 {
        // vectors are unit-norm, so the dot product is the cosine
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Descriptor of the foreground (alpha > 0.5) of an image.
pub fn embed<T: Scalar>(image: &Tensor<T>, alpha: &Tensor<T>) -> Result<FeatureEmbedding> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected 3xHxW, got {other:?}"))),
    };
    if alpha.shape() != [1, h, w] {
        return Err(Error::shape(format!(
            "alpha {:?} does not match image {h}x{w}",
            alpha.shape()
        )));
    }
    let plane = h * w;
    let img = image.data();
    let a = alpha.data();

    let mut hist = vec![0.0f64; 3 * BINS];
    let mut cell_sum = vec![0.0f64; GRID * GRID];
    let mut cell_count = vec![0usize; GRID * GRID];
    let mut fg = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if Scalar::to_f64(a[i]) <= 0.5 {
                continue;
            }
            fg += 1;
            let r = Scalar::to_f64(img[i]);
            let g = Scalar::to_f64(img[plane + i]);
            let b = Scalar::to_f64(img[2 * plane + i]);
            for (c, v) in [r, g, b].into_iter().enumerate() {
                let bin = ((v * BINS as f64) as usize).min(BINS - 1);
                hist[c * BINS + bin] += 1.0;
            }
            let cell = (y * GRID / h) * GRID + (x * GRID / w);
            cell_sum[cell] += 0.299 * r + 0.587 * g + 0.114 * b;
            cell_count[cell] += 1;
        }
    }
    if fg == 0 {
        return Err(Error::EmptyImage(
            "embedding needs at least one foreground pixel".into(),
        ));
    }

    let mut v = Vec::with_capacity(EMBED_DIM);
    for bin in &hist {
        v.push((bin / fg as f64) as f32);
    }
    for (s, n) in cell_sum.iter().zip(&cell_count) {
        v.push(if *n == 0 { 0.0 } else { (s / *n as f64) as f32 });
    }
    debug_assert_eq!(v.len(), EMBED_DIM);
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm == 0.0 {
        return Err(Error::EmptyImage("all-zero descriptor".into()));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(FeatureEmbedding { vector: v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sprites::generate_sprites;

    #[test]
    fn self_similarity_is_one() {
        let sprites = generate_sprites(2, 1, 32, 3).unwrap();
        let e = embed(&sprites[0].image, &sprites[0].alpha).unwrap();
        let n: f32 = e.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_transparent_alpha_is_empty_image_error() {
        let img = Tensor::<f32>::full(&[3, 8, 8], 0.5);
        let alpha = Tensor::<f32>::zeros(&[1, 8, 8]);
        assert!(matches!(
            embed(&img, &alpha),
            Err(Error::EmptyImage(_))
        ));
    }

    #[test]
    fn hue_rotation_drops_similarity_below_threshold() {
        // cycling RGB channels is a 120-degree hue rotation
        let sprites = generate_sprites(12, 1, 32, 17).unwrap();
        for s in &sprites {
            let plane = 32 * 32;
            let d = s.image.data();
            let rotated = Tensor::from_fn(&[3, 32, 32], |i| {
                let c = i / plane;
                let p = i % plane;
                d[((c + 2) % 3) * plane + p]
            });
            let a = embed(&s.image, &s.alpha).unwrap();
            let b = embed(&rotated, &s.alpha).unwrap();
            assert!(
                a.cosine(&b) < 0.9,
                "identity {}: hue-rotated cosine {}",
                s.identity_id,
                a.cosine(&b)
            );
        }
    }

    #[test]
    fn same_identity_poses_are_similar() {
        // the mining threshold must hold for at least 95% of same-identity pairs
        let sprites = generate_sprites(25, 6, 32, 29).unwrap();
        let embeds: Vec<FeatureEmbedding> = sprites
            .iter()
            .map(|s| embed(&s.image, &s.alpha).unwrap())
            .collect();
        let mut total = 0usize;
        let mut above = 0usize;
        for i in 0..sprites.len() {
            for j in 0..i {
                if sprites[i].identity_id == sprites[j].identity_id {
                    total += 1;
                    if embeds[i].cosine(&embeds[j]) >= 0.9 {
                        above += 1;
                    }
                }
            }
        }
        assert!(total > 100);
        let frac = above as f64 / total as f64;
        assert!(
            frac >= 0.95,
            "only {above}/{total} = {frac:.3} of same-identity pairs reach 0.9"
        );
    }
}

//! Quantitative checks of the two conditioning pathways: does the output
//! follow the blueprint's structure, and does it take its colors from the
//! prompt? Each metric is a pure function of image tensors, so reports are
//! reproducible from saved files alone. The control experiment contrasts true
//! conditions against shuffled ones; the gap measures causal control.

use crate::data::blueprint::{dilate, extract_blueprint, BlueprintParams};
use crate::data::TrainingPair;
use crate::error::{Error, Result};
use crate::model::DualCondModel;
use crate::numerics::tensor::{Scalar, Tensor};
use crate::sampler::{generate, SampleConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Intersection-over-union of two masks after 1-pixel dilation (tolerant to
/// 1-px drift). Two empty masks count as identical.
pub fn dilated_iou<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mask shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let da = dilate(a)?;
    let db = dilate(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in da.data().iter().zip(db.data()) {
        let xa = Scalar::to_f64(*x) > 0.5;
        let yb = Scalar::to_f64(*y) > 0.5;
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Structural fidelity: IoU between the blueprint extracted from the output
/// and the conditioning blueprint.
pub fn edge_iou<T: Scalar>(
    output: &Tensor<T>,
    blueprint: &Tensor<T>,
    window: usize,
    c: f64,
) -> Result<f64> {
    let extracted = extract_blueprint(output, window, c)?;
    if extracted.shape() != blueprint.shape() {
        return Err(Error::shape(format!(
            "blueprint {:?} does not match output resolution {:?}",
            blueprint.shape(),
            extracted.shape()
        )));
    }
    dilated_iou(&extracted, blueprint)
}

const COLOR_BINS: usize = 32;

fn foreground_histograms<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<[Vec<f64>; 3]> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected 3xHxW, got {other:?}"))),
    };
    if mask.shape() != [1, h, w] {
        return Err(Error::shape("mask does not match image"));
    }
    let plane = h * w;
    let mut hists = [
        vec![0.0f64; COLOR_BINS],
        vec![0.0f64; COLOR_BINS],
        vec![0.0f64; COLOR_BINS],
    ];
    let mut count = 0usize;
    for i in 0..plane {
        if Scalar::to_f64(mask.data()[i]) <= 0.5 {
            continue;
        }
        count += 1;
        for (ch, hist) in hists.iter_mut().enumerate() {
            let v = Scalar::to_f64(image.data()[ch * plane + i]);
            let bin = ((v * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
            hist[bin] += 1.0;
        }
    }
    if count == 0 {
        return Err(Error::EmptyImage("color histogram over empty mask".into()));
    }
    for hist in &mut hists {
        for v in hist.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(hists)
}

/// Color fidelity: mean over RGB of the L1 distance between 32-bin
/// foreground-normalized histograms. 0 for identical palettes; 2 per fully
/// disjoint channel pair.
pub fn color_distance<T: Scalar>(
    output: &Tensor<T>,
    prompt: &Tensor<T>,
    out_mask: &Tensor<T>,
    prompt_mask: &Tensor<T>,
) -> Result<f64> {
    let a = foreground_histograms(output, out_mask)?;
    let b = foreground_histograms(prompt, prompt_mask)?;
    let mut total = 0.0;
    for ch in 0..3 {
        total += a[ch]
            .iter()
            .zip(&b[ch])
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    }
    Ok(total / 3.0)
}

/// Foreground of a generated image over the white background convention:
/// any channel deviating from white by more than 0.08.
pub fn foreground_mask<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected 3xHxW, got {other:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        let dev = (1.0 - Scalar::to_f64(d[i]))
            .max(1.0 - Scalar::to_f64(d[plane + i]))
            .max(1.0 - Scalar::to_f64(d[2 * plane + i]));
        if dev > 0.08 {
            T::one()
        } else {
            T::zero()
        }
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sample: SampleConfig,
    pub window: usize,
    pub c: f64,
    /// Minimum number of held-out pairs the experiment accepts.
    pub min_pairs: usize,
    /// Write per-pair images under `eval_out/{pair}/{variant}.png` when set.
    #[serde(skip)]
    pub out_dir: Option<std::path::PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sample: SampleConfig::default(),
            window: 9,
            c: 0.02,
            min_pairs: 20,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean edge IoU under true conditions.
    pub edge_iou: f64,
    /// Mean edge IoU when each pair gets another pair's blueprint.
    pub edge_iou_shuffled_blueprint: f64,
    /// Mean color distance to the true prompt under true conditions.
    pub color_emd: f64,
    /// Mean color distance to the true prompt when prompts are shuffled.
    pub color_emd_shuffled_prompt: f64,
    /// edge_iou - edge_iou_shuffled_blueprint: the causal effect of the
    /// blueprint pathway (exactly 0 for a zero-initialized model).
    pub control_gap: f64,
    /// Fraction of pairs where the true prompt beats the shuffled prompt.
    pub color_better_fraction: f64,
    pub n_samples: usize,
}

/// Generate under (i) true conditions, (ii) a shuffled blueprint, and
/// (iii) a shuffled prompt for every held-out pair; metrics are always
/// computed against the pair's own conditions. Seeds are fixed per pair, so
/// variant (ii) of a condition-blind model is bit-identical to (i).
pub fn control_experiment<T: Scalar>(
    model: &DualCondModel<T>,
    test_pairs: &[TrainingPair],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test_pairs.len() < cfg.min_pairs {
        return Err(Error::config(format!(
            "control experiment needs at least {} pairs, got {}",
            cfg.min_pairs,
            test_pairs.len()
        )));
    }
    let n = test_pairs.len();
    let mut iou_true = 0.0;
    let mut iou_shuf = 0.0;
    let mut emd_true = 0.0;
    let mut emd_shuf = 0.0;
    let mut color_better = 0usize;
    let params = BlueprintParams {
        window: cfg.window,
        c: cfg.c,
    };

    for (i, pair) in test_pairs.iter().enumerate() {
        let other = &test_pairs[(i + 1) % n]; // fixed derangement
        let seed = cfg.sample.seed.wrapping_add(i as u64);
        let run = |prompt: &Tensor<f32>, blueprint: &Tensor<f32>| -> Result<Tensor<T>> {
            let scfg = SampleConfig {
                seed,
                ..cfg.sample.clone()
            };
            generate(model, &prompt.cast::<T>(), &blueprint.cast::<T>(), &scfg)
        };

        let out_true = run(&pair.prompt, &pair.blueprint)?;
        let out_shuf_bp = run(&pair.prompt, &other.blueprint)?;
        let out_shuf_prompt = run(&other.prompt, &pair.blueprint)?;

        let bp = pair.blueprint.cast::<T>();
        iou_true += edge_iou(&out_true, &bp, params.window, params.c)?;
        iou_shuf += edge_iou(&out_shuf_bp, &bp, params.window, params.c)?;

        let prompt = pair.prompt.cast::<T>();
        let prompt_mask = foreground_mask(&prompt)?;
        let d_true = match foreground_mask(&out_true) {
            Ok(m) if m.data().iter().any(|v| Scalar::to_f64(*v) > 0.5) => {
                color_distance(&out_true, &prompt, &m, &prompt_mask)?
            }
            _ => 2.0, // blank output: maximal distance
        };
        let d_shuf = match foreground_mask(&out_shuf_prompt) {
            Ok(m) if m.data().iter().any(|v| Scalar::to_f64(*v) > 0.5) => {
                color_distance(&out_shuf_prompt, &prompt, &m, &prompt_mask)?
            }
            _ => 2.0,
        };
        emd_true += d_true;
        emd_shuf += d_shuf;
        if d_true < d_shuf {
            color_better += 1;
        }

        if let Some(dir) = &cfg.out_dir {
            let pair_dir = dir.join(format!("{i:03}"));
            std::fs::create_dir_all(&pair_dir)?;
            crate::imageio::save_rgb_png(&pair_dir.join("true.png"), &out_true)?;
            crate::imageio::save_rgb_png(&pair_dir.join("shuf_bp.png"), &out_shuf_bp)?;
            crate::imageio::save_rgb_png(&pair_dir.join("shuf_prompt.png"), &out_shuf_prompt)?;
        }
    }

    let nf = n as f64;
    let report = EvalReport {
        edge_iou: iou_true / nf,
        edge_iou_shuffled_blueprint: iou_shuf / nf,
        color_emd: emd_true / nf,
        color_emd_shuffled_prompt: emd_shuf / nf,
        control_gap: (iou_true - iou_shuf) / nf,
        color_better_fraction: color_better as f64 / nf,
        n_samples: n,
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_equal_masks_is_one() {
        let m = Tensor::from_fn(&[1, 8, 8], |i| ((i / 8) == 3) as u8 as f64);
        assert_eq!(dilated_iou(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn blank_output_scores_zero_against_nonempty() {
        let blank = Tensor::<f64>::zeros(&[1, 8, 8]);
        let m = Tensor::from_fn(&[1, 8, 8], |i| ((i / 8) == 3) as u8 as f64);
        assert_eq!(dilated_iou(&blank, &m).unwrap(), 0.0);
        // the image-level metric: a uniform white output extracts no ink
        let white = Tensor::<f64>::full(&[3, 8, 8], 1.0);
        assert_eq!(edge_iou(&white, &m, 5, 0.02).unwrap(), 0.0);
    }

    #[test]
    fn crafted_masks_give_three_fifths() {
        // rows {2,3} and {3,4} dilate to row bands {1..4} and {2..5}:
        // intersection 3 rows, union 5 rows
        let a = Tensor::from_fn(&[1, 8, 8], |i| {
            let r = i / 8;
            (r == 2 || r == 3) as u8 as f64
        });
        let b = Tensor::from_fn(&[1, 8, 8], |i| {
            let r = i / 8;
            (r == 3 || r == 4) as u8 as f64
        });
        let iou = dilated_iou(&a, &b).unwrap();
        assert!((iou - 0.6).abs() < 1e-12, "iou {iou}");
    }

    #[test]
    fn color_distance_contracts() {
        let full = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let red = Tensor::from_fn(&[3, 4, 4], |i| if i < 16 { 1.0 } else { 0.0 });
        let blue = Tensor::from_fn(&[3, 4, 4], |i| if i >= 32 { 1.0 } else { 0.0 });
        // identical images: zero
        assert_eq!(color_distance(&red, &red, &full, &full).unwrap(), 0.0);
        // red vs blue: R and B histograms fully disjoint (2 each), G identical
        let d = color_distance(&red, &blue, &full, &full).unwrap();
        assert!((d - 4.0 / 3.0).abs() < 1e-12, "distance {d}");
        // symmetry
        let e = color_distance(&blue, &red, &full, &full).unwrap();
        assert_eq!(d, e);
        // empty mask errors
        let empty = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(matches!(
            color_distance(&red, &blue, &empty, &full),
            Err(Error::EmptyImage(_))
        ));
    }

    #[test]
    fn too_few_pairs_is_config_error() {
        let model =
            DualCondModel::<f32>::init(crate::config::ModelConfig::tiny(), 1).unwrap();
        let cfg = EvalConfig {
            min_pairs: 20,
            ..EvalConfig::default()
        };
        let err = control_experiment(&model, &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

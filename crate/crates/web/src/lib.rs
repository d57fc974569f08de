//! Browser bindings for three small views of the segmentation toolkit:
//! a synthetic scene with its colorized label mask, an IoU/Dice explorer
//! on perturbed predictions, and the footprint of stacked dilated
//! convolutions.
//!
//! Everything that computes lives in plain functions so it can be tested
//! natively; the `#[wasm_bindgen]` items only move buffers and JSON across.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use nestseg::data::{
    colorize_mask, encode_mask, generate_synthetic, palette, EncodeMode, LabelMapping, SynthSpec, BACKGROUND,
    CLASPER_YELLOW,
};
use nestseg::metrics::{class_counts, image_scores};
use nestseg::model::dilated_receptive_field;
use nestseg::{TaskKind, TaskSpec};

const MISMATCH: [u8; 3] = [255, 255, 255];
const EMPTY_CELL: [u8; 3] = [24, 24, 24];

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `[H, W, 3]` colors to a row-major RGBA buffer for `ImageData`.
pub fn rgba(rgb: &Array3<u8>) -> Vec<u8> {
    let (h, w, _) = rgb.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&[rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]], 255]);
        }
    }
    out
}

/// One synthetic frame and its class mask.
pub fn build_scene(task: TaskKind, seed: u64, height: usize, width: usize) -> nestseg::Result<(Array3<u8>, Array2<u8>)> {
    let spec = SynthSpec { num_videos: 1, ..SynthSpec::new(1, height, width, task, seed) };
    let sample = generate_synthetic(&spec)?.pop().expect("one sample");
    let raw = sample.raw_mask.expect("synthetic frames carry masks");
    let (mask, _) = encode_mask(&raw, &LabelMapping::default_for(task), EncodeMode::Strict)?;
    Ok((sample.image, mask))
}

/// Shifts `mask` by `(dx, dy)` with background entering at the border, then
/// replaces a `noise` fraction of pixels with uniformly drawn classes.
pub fn perturb(mask: &Array2<u8>, dx: i32, dy: i32, noise: f64, classes: u8, seed: u64) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = (y as i64 - dy as i64, x as i64 - dx as i64);
        let shifted = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
            mask[[sy as usize, sx as usize]]
        } else {
            0
        };
        if rng.random::<f64>() < noise {
            rng.random_range(0..classes)
        } else {
            shifted
        }
    })
}

#[derive(Debug, Serialize)]
struct ClassRow {
    class: u8,
    name: String,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    iou: Option<f64>,
    dice: Option<f64>,
}

/// Per-class counts and image-level scores as a JSON object.
pub fn score_report(pred: &Array2<u8>, gt: &Array2<u8>, task: TaskKind) -> nestseg::Result<String> {
    let spec = TaskSpec::new(task);
    let names = LabelMapping::default_for(task).class_names;
    let rows: Vec<ClassRow> = class_counts(pred, gt, &spec)?
        .into_iter()
        .map(|(c, k)| ClassRow {
            class: c,
            name: names[c as usize].clone(),
            tp: k.tp,
            fp: k.fp,
            fn_: k.fn_,
            iou: k.iou(),
            dice: k.dice(),
        })
        .collect();
    let (iou, dice) = image_scores(pred, gt, &spec)?;
    Ok(json!({ "iou": iou, "dice": dice, "classes": rows }).to_string())
}

/// Prediction colors with every disagreeing pixel painted white.
pub fn error_overlay(pred: &Array2<u8>, gt: &Array2<u8>, task: TaskKind) -> nestseg::Result<Array3<u8>> {
    let mut rgb = colorize_mask(pred, task)?;
    for (((y, x), &p), &g) in pred.indexed_iter().zip(gt.iter()) {
        if p != g {
            for ch in 0..3 {
                rgb[[y, x, ch]] = MISMATCH[ch];
            }
        }
    }
    Ok(rgb)
}

/// Number of weight paths from each input cell to the centre output of a
/// chain of dilated `kernel x kernel` convolutions, on a `size x size` grid.
pub fn receptive_counts(kernel: usize, rates: &[usize], size: usize) -> Array2<u64> {
    let mut counts = Array2::<u64>::zeros((size, size));
    counts[[size / 2, size / 2]] = 1;
    let half = (kernel / 2) as i64;
    for &rate in rates {
        let mut next = Array2::<u64>::zeros((size, size));
        for ((y, x), &c) in counts.indexed_iter() {
            if c == 0 {
                continue;
            }
            for ky in -half..=half {
                for kx in -half..=half {
                    let (ny, nx) = (y as i64 + ky * rate as i64, x as i64 + kx * rate as i64);
                    if (0..size as i64).contains(&ny) && (0..size as i64).contains(&nx) {
                        next[[ny as usize, nx as usize]] += c;
                    }
                }
            }
        }
        counts = next;
    }
    counts
}

/// Footprint summary: analytic width, measured extent and how much of the
/// bounding square is actually reached.
pub fn receptive_summary(kernel: usize, rates: &[usize], counts: &Array2<u64>) -> String {
    let hits: Vec<(usize, usize)> = counts.indexed_iter().filter(|(_, &c)| c > 0).map(|(i, _)| i).collect();
    let (ys, xs): (Vec<usize>, Vec<usize>) = hits.iter().copied().unzip();
    let extent = match (xs.iter().min(), xs.iter().max(), ys.iter().min(), ys.iter().max()) {
        (Some(x0), Some(x1), Some(y0), Some(y1)) => (x1 - x0 + 1).max(y1 - y0 + 1),
        _ => 0,
    };
    let coverage = if extent == 0 { 0.0 } else { hits.len() as f64 / (extent * extent) as f64 };
    json!({
        "analytic": dilated_receptive_field(kernel, rates),
        "extent": extent,
        "reached": hits.len(),
        "coverage": coverage,
    })
    .to_string()
}

/// Log-scaled heat map from background purple to clasper yellow.
pub fn heat_colors(counts: &Array2<u64>) -> Array3<u8> {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let (h, w) = counts.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        let c = counts[[y, x]];
        if c == 0 {
            return EMPTY_CELL[ch];
        }
        let t = (c as f64).ln_1p() / max.ln_1p();
        let (a, b) = (BACKGROUND[ch] as f64, CLASPER_YELLOW[ch] as f64);
        (a + (b - a) * t).round() as u8
    })
}

fn parse_task(task: &str) -> Result<TaskKind, JsError> {
    task.parse().map_err(js_err)
}

/// A synthetic frame held in the page between interactions.
#[wasm_bindgen]
pub struct Scene {
    task: TaskKind,
    image: Array3<u8>,
    mask: Array2<u8>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(task: &str, seed: u32, height: u32, width: u32) -> Result<Scene, JsError> {
        let task = parse_task(task)?;
        let (image, mask) = build_scene(task, seed as u64, height as usize, width as usize).map_err(js_err)?;
        Ok(Scene { task, image, mask })
    }

    pub fn width(&self) -> u32 {
        self.mask.dim().1 as u32
    }

    pub fn height(&self) -> u32 {
        self.mask.dim().0 as u32
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.image)
    }

    pub fn mask_rgba(&self) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&colorize_mask(&self.mask, self.task).map_err(js_err)?))
    }

    /// `[{class, name, color}]` for the legend.
    pub fn legend(&self) -> String {
        let names = LabelMapping::default_for(self.task).class_names;
        let rows: Vec<_> = palette(self.task)
            .iter()
            .zip(names)
            .enumerate()
            .map(|(c, (rgb, name))| json!({ "class": c, "name": name, "color": format!("rgb({},{},{})", rgb[0], rgb[1], rgb[2]) }))
            .collect();
        serde_json::Value::from(rows).to_string()
    }

    /// Scores a shifted, noisy copy of the ground truth against it.
    pub fn explore(&self, dx: i32, dy: i32, noise: f64, seed: u32) -> Result<Exploration, JsError> {
        let pred = perturb(&self.mask, dx, dy, noise, self.task.label_classes() as u8, seed as u64);
        let report = score_report(&pred, &self.mask, self.task).map_err(js_err)?;
        let overlay = rgba(&error_overlay(&pred, &self.mask, self.task).map_err(js_err)?);
        Ok(Exploration { report, overlay })
    }
}

#[wasm_bindgen]
pub struct Exploration {
    report: String,
    overlay: Vec<u8>,
}

#[wasm_bindgen]
impl Exploration {
    pub fn report(&self) -> String {
        self.report.clone()
    }

    pub fn overlay(&self) -> Vec<u8> {
        self.overlay.clone()
    }
}

#[wasm_bindgen]
pub struct Footprint {
    size: u32,
    summary: String,
    pixels: Vec<u8>,
}

#[wasm_bindgen]
impl Footprint {
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn summary(&self) -> String {
        self.summary.clone()
    }

    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
}

/// Footprint of a dilated chain given as comma-separated rates, e.g. `"1,2,4,8"`.
#[wasm_bindgen]
pub fn receptive_field(kernel: u32, rates: &str, size: u32) -> Result<Footprint, JsError> {
    let rates: Vec<usize> = rates
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| js_err(format!("bad dilation rate `{s}`"))))
        .collect::<Result<_, _>>()?;
    if kernel % 2 == 0 || kernel == 0 {
        return Err(js_err("kernel must be odd"));
    }
    if rates.iter().any(|&r| r == 0) {
        return Err(js_err("dilation rates must be positive"));
    }
    let counts = receptive_counts(kernel as usize, &rates, size as usize);
    Ok(Footprint {
        size,
        summary: receptive_summary(kernel as usize, &rates, &counts),
        pixels: rgba(&heat_colors(&counts)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_and_labelled() {
        let (img, mask) = build_scene(TaskKind::Parts, 3, 64, 96).unwrap();
        let (img2, mask2) = build_scene(TaskKind::Parts, 3, 64, 96).unwrap();
        assert_eq!((&img, &mask), (&img2, &mask2));
        assert_eq!(img.dim(), (64, 96, 3));
        assert!(mask.iter().all(|&c| c < 4));
        assert!(mask.iter().any(|&c| c > 0));
        assert_eq!(rgba(&img).len(), 64 * 96 * 4);
    }

    #[test]
    fn unperturbed_prediction_is_perfect() {
        let (_, mask) = build_scene(TaskKind::Binary, 1, 32, 32).unwrap();
        let same = perturb(&mask, 0, 0, 0.0, 2, 0);
        assert_eq!(same, mask);
        let report: serde_json::Value = serde_json::from_str(&score_report(&same, &mask, TaskKind::Binary).unwrap()).unwrap();
        assert_eq!(report["iou"], 1.0);
        assert_eq!(report["classes"][0]["fn"], 0);
    }

    #[test]
    fn shift_moves_content_and_fills_background() {
        let mask = ndarray::array![[1u8, 2], [3, 1]];
        assert_eq!(perturb(&mask, 1, 0, 0.0, 4, 0), ndarray::array![[0u8, 1], [0, 3]]);
        assert_eq!(perturb(&mask, 0, -1, 0.0, 4, 0), ndarray::array![[3u8, 1], [0, 0]]);
    }

    #[test]
    fn overlay_marks_disagreements() {
        let gt = ndarray::array![[0u8, 1]];
        let pred = ndarray::array![[0u8, 0]];
        let rgb = error_overlay(&pred, &gt, TaskKind::Binary).unwrap();
        assert_eq!([rgb[[0, 1, 0]], rgb[[0, 1, 1]], rgb[[0, 1, 2]]], MISMATCH);
        assert_eq!([rgb[[0, 0, 0]], rgb[[0, 0, 1]], rgb[[0, 0, 2]]], BACKGROUND);
    }

    #[test]
    fn footprint_matches_analytic_width() {
        let counts = receptive_counts(3, &[1, 2, 4, 8], 65);
        let summary: serde_json::Value = serde_json::from_str(&receptive_summary(3, &[1, 2, 4, 8], &counts)).unwrap();
        assert_eq!(summary["analytic"], 31);
        assert_eq!(summary["extent"], 31);
        assert_eq!(summary["coverage"], 1.0);
    }

    #[test]
    fn repeated_rate_leaves_gaps() {
        let counts = receptive_counts(3, &[2, 2, 2], 33);
        let summary: serde_json::Value = serde_json::from_str(&receptive_summary(3, &[2, 2, 2], &counts)).unwrap();
        assert_eq!(summary["extent"], 13);
        assert!(summary["coverage"].as_f64().unwrap() < 0.5);
    }
}

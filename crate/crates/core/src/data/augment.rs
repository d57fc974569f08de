//! Geometric augmentations applied identically to an image and its mask.

use ndarray::{s, Array2, Array3, ArrayBase, Axis, Data, Dimension, RemoveAxis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Centered zero padding up to at least this size.
    PadIfNeeded { min_height: usize, min_width: usize },
    RandomCrop { height: usize, width: usize },
    HFlip { p: f64 },
    VFlip { p: f64 },
}

/// A transform actually applied, with its sampled parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Applied {
    Pad { top: usize, bottom: usize, left: usize, right: usize },
    Crop { top: usize, left: usize, height: usize, width: usize },
    HFlip,
    VFlip,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub steps: Vec<Applied>,
}

/// Default training pipeline: pad to the crop size, crop, and flip with p = 0.5.
pub fn default_pipeline(height: usize, width: usize) -> Vec<AugmentOp> {
    vec![
        AugmentOp::PadIfNeeded { min_height: height, min_width: width },
        AugmentOp::RandomCrop { height, width },
        AugmentOp::HFlip { p: 0.5 },
        AugmentOp::VFlip { p: 0.5 },
    ]
}

pub fn validate_ops(ops: &[AugmentOp]) -> Result<()> {
    for op in ops {
        match *op {
            AugmentOp::HFlip { p } | AugmentOp::VFlip { p } if !(0.0..=1.0).contains(&p) => {
                return Err(Error::Augment(format!("flip probability {p} outside [0, 1]")));
            }
            AugmentOp::RandomCrop { height: 0, .. } | AugmentOp::RandomCrop { width: 0, .. } => {
                return Err(Error::Augment("crop size must be positive".into()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Pads axes `ha`/`wa` (height/width) of `a`, filling with `fill`.
fn pad<A: Clone, D: Dimension + RemoveAxis>(
    a: &ArrayBase<impl Data<Elem = A>, D>,
    ha: usize,
    wa: usize,
    p: (usize, usize, usize, usize),
    fill: A,
) -> ndarray::Array<A, D> {
    let (top, bottom, left, right) = p;
    let mut shape = a.raw_dim();
    shape[ha] += top + bottom;
    shape[wa] += left + right;
    let mut out = ndarray::Array::from_elem(shape, fill);
    let mut view = out.view_mut();
    view.slice_axis_inplace(Axis(ha), ndarray::Slice::from(top..top + a.shape()[ha]));
    view.slice_axis_inplace(Axis(wa), ndarray::Slice::from(left..left + a.shape()[wa]));
    view.assign(a);
    out
}

fn crop<A: Clone, D: Dimension + RemoveAxis>(
    a: &ArrayBase<impl Data<Elem = A>, D>,
    ha: usize,
    wa: usize,
    (top, left, h, w): (usize, usize, usize, usize),
) -> ndarray::Array<A, D> {
    let mut v = a.view();
    v.slice_axis_inplace(Axis(ha), ndarray::Slice::from(top..top + h));
    v.slice_axis_inplace(Axis(wa), ndarray::Slice::from(left..left + w));
    v.to_owned()
}

fn flip<A: Clone, D: Dimension>(a: &ArrayBase<impl Data<Elem = A>, D>, axis: usize) -> ndarray::Array<A, D> {
    let mut v = a.view();
    v.invert_axis(Axis(axis));
    v.to_owned()
}

fn apply_step<A: Clone, D: Dimension + RemoveAxis>(
    a: ndarray::Array<A, D>,
    step: Applied,
    ha: usize,
    wa: usize,
    fill: A,
) -> ndarray::Array<A, D> {
    match step {
        Applied::Pad { top, bottom, left, right } => pad(&a, ha, wa, (top, bottom, left, right), fill),
        Applied::Crop { top, left, height, width } => crop(&a, ha, wa, (top, left, height, width)),
        Applied::HFlip => flip(&a, wa),
        Applied::VFlip => flip(&a, ha),
    }
}

/// Applies `ops` in order to a `[C, H, W]` image and its `[H, W]` mask.
/// Image padding is 0 (the channel mean after normalization); mask padding
/// is the background class.
pub fn augment<R: Rng + ?Sized>(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    ops: &[AugmentOp],
    rng: &mut R,
) -> Result<(Array3<f32>, Array2<u8>, AugmentRecord)> {
    validate_ops(ops)?;
    let (_, ih, iw) = image.dim();
    if mask.dim() != (ih, iw) {
        return Err(Error::ShapeMismatch(format!("image {}x{} vs mask {:?}", ih, iw, mask.dim())));
    }
    let mut img = image.clone();
    let mut m = mask.clone();
    let mut record = AugmentRecord::default();
    for op in ops {
        let (_, h, w) = img.dim();
        let step = match *op {
            AugmentOp::PadIfNeeded { min_height, min_width } => {
                let (ph, pw) = (min_height.saturating_sub(h), min_width.saturating_sub(w));
                if ph == 0 && pw == 0 {
                    continue;
                }
                Applied::Pad { top: ph / 2, bottom: ph - ph / 2, left: pw / 2, right: pw - pw / 2 }
            }
            AugmentOp::RandomCrop { height, width } => {
                if height > h || width > w {
                    return Err(Error::Augment(format!("crop {height}x{width} larger than input {h}x{w}")));
                }
                let top = rng.random_range(0..=h - height);
                let left = rng.random_range(0..=w - width);
                Applied::Crop { top, left, height, width }
            }
            AugmentOp::HFlip { p } => {
                if rng.random::<f64>() >= p {
                    continue;
                }
                Applied::HFlip
            }
            AugmentOp::VFlip { p } => {
                if rng.random::<f64>() >= p {
                    continue;
                }
                Applied::VFlip
            }
        };
        img = apply_step(img, step, 1, 2, 0.0);
        m = apply_step(m, step, 0, 1, 0);
        record.steps.push(step);
    }
    Ok((img, m, record))
}

/// Replays a record on a mask alone.
pub fn apply_to_mask(record: &AugmentRecord, mask: &Array2<u8>) -> Array2<u8> {
    record.steps.iter().fold(mask.clone(), |m, &step| apply_step(m, step, 0, 1, 0))
}

/// Horizontal flip of a `[C, H, W]` tensor.
pub fn hflip_image(image: &Array3<f32>) -> Array3<f32> {
    flip(image, 2)
}

pub fn vflip_image(image: &Array3<f32>) -> Array3<f32> {
    flip(image, 1)
}

/// The centered `[C, h, w]` window, for deterministic evaluation crops.
pub fn center_crop(image: &Array3<f32>, h: usize, w: usize) -> Result<Array3<f32>> {
    let (_, ih, iw) = image.dim();
    if h > ih || w > iw {
        return Err(Error::Augment(format!("crop {h}x{w} larger than input {ih}x{iw}")));
    }
    let (t, l) = ((ih - h) / 2, (iw - w) / 2);
    Ok(image.slice(s![.., t..t + h, l..l + w]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> (Array3<f32>, Array2<u8>) {
        let img = Array3::from_shape_fn((3, h, w), |(c, y, x)| (c * 1000 + y * 37 + x) as f32);
        let mask = Array2::from_shape_fn((h, w), |(y, x)| ((y * 3 + x) % 4) as u8);
        (img, mask)
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, mask) = sample(5, 7);
        let ops = [AugmentOp::HFlip { p: 1.0 }, AugmentOp::HFlip { p: 1.0 }, AugmentOp::VFlip { p: 1.0 }, AugmentOp::VFlip { p: 1.0 }];
        let (i2, m2, rec) = augment(&img, &mask, &ops, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rec.steps.len(), 4);
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn crop_window_shared_by_image_and_mask() {
        let (img, _) = sample(64, 80);
        let mask = Array2::from_shape_fn((64, 80), |(y, x)| (y * 80 + x) as u8);
        let ops = [AugmentOp::RandomCrop { height: 32, width: 40 }];
        let (i2, m2, rec) = augment(&img, &mask, &ops, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(i2.dim(), (3, 32, 40));
        assert_eq!(m2.dim(), (32, 40));
        let Applied::Crop { top, left, .. } = rec.steps[0] else { panic!("expected a crop") };
        assert_eq!(i2[[1, 5, 6]], img[[1, top + 5, left + 6]]);
        assert_eq!(m2[[5, 6]], mask[[top + 5, left + 6]]);
    }

    #[test]
    fn pad_fills_background() {
        let (img, mask) = sample(250, 250);
        let mask = mask.mapv(|v| v.max(1));
        let ops = [AugmentOp::PadIfNeeded { min_height: 256, min_width: 256 }];
        let (i2, m2, _) = augment(&img, &mask, &ops, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m2.dim(), (256, 256));
        assert_eq!(m2[[0, 0]], 0);
        assert_eq!(m2[[255, 255]], 0);
        assert_eq!(m2[[3, 3]], mask[[0, 0]]);
        assert_eq!(i2[[0, 0, 0]], 0.0);
    }

    #[test]
    fn oversized_crop_rejected() {
        let (img, mask) = sample(8, 8);
        let ops = [AugmentOp::RandomCrop { height: 9, width: 8 }];
        assert!(matches!(augment(&img, &mask, &ops, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Augment(_))));
    }

    #[test]
    fn record_replays_on_mask() {
        let (img, mask) = sample(30, 34);
        let ops = default_pipeline(32, 32);
        for seed in 0..20 {
            let (_, m2, rec) = augment(&img, &mask, &ops, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(apply_to_mask(&rec, &mask), m2);
        }
    }
}

//! Inference, per-image scoring and prediction export.

use std::path::PathBuf;

use ndarray::{Array2, Array4, Axis};

use crate::data::{encode_mask, normalize_image, ChannelStats, Dataset, EncodeMode, LabelMapping, RawSample};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::metrics::image_scores;
use crate::model::Model;
use crate::report::{aggregate_report, ImageScore, MetricReport, ReportSettings};
use crate::task::TaskSpec;

/// A predicted mask with its optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub video_id: String,
    pub pred_mask: Array2<u8>,
    pub gt_mask: Option<Array2<u8>>,
}

/// Hard masks from `[N, C, H, W]` logits. One channel: class 1 where the
/// logistic exceeds 0.5 strictly. Several channels: argmax, ties to the
/// lowest index.
pub fn logits_to_masks<T: Float>(logits: &Array4<T>) -> Vec<Array2<u8>> {
    let (_, c, h, w) = logits.dim();
    logits
        .axis_iter(Axis(0))
        .map(|img| {
            if c == 1 {
                img.index_axis(Axis(0), 0).mapv(|x| {
                    let p = 1.0 / (1.0 + (-x.as_f64()).exp());
                    (p > 0.5) as u8
                })
            } else {
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let mut best = 0;
                    for k in 1..c {
                        if img[[k, y, x]] > img[[best, y, x]] {
                            best = k;
                        }
                    }
                    best as u8
                })
            }
        })
        .collect()
}

fn check_task<T: Float>(model: &Model<T>, task: &TaskSpec) -> Result<()> {
    task.validate()?;
    let found = model.config().num_classes;
    if found != task.num_classes {
        return Err(Error::TaskMismatch(format!(
            "model emits {found} channels but the {} task needs {}",
            task.kind, task.num_classes
        )));
    }
    Ok(())
}

/// Batch of normalized `[3, H, W]` images stacked to `[N, 3, H, W]`.
pub fn to_batch<T: Float>(images: &[ndarray::Array3<f32>]) -> Result<Array4<T>> {
    let first = images.first().ok_or_else(|| Error::Empty("batch of zero images".into()))?.dim();
    if let Some(bad) = images.iter().find(|i| i.dim() != first) {
        return Err(Error::ShapeMismatch(format!("batch mixes image sizes {first:?} and {:?}", bad.dim())));
    }
    let (c, h, w) = first;
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (mut slot, img) in out.axis_iter_mut(Axis(0)).zip(images) {
        slot.zip_mut_with(img, |o, &v| *o = T::lit(v as f64));
    }
    Ok(out)
}

/// Class mask for one frame at its (cropped) input size.
pub fn predict<T: Float>(model: &Model<T>, image: &RawSample, stats: &ChannelStats, task: &TaskSpec) -> Result<Array2<u8>> {
    check_task(model, task)?;
    let x = to_batch::<T>(&[normalize_image(&image.image, stats)])?;
    let logits = model.forward(&x)?;
    Ok(logits_to_masks(&logits).pop().expect("one image"))
}

/// Predictions for `indices` of a dataset, in order.
pub fn predict_all<T: Float>(
    model: &Model<T>,
    dataset: &dyn Dataset,
    indices: &[usize],
    stats: &ChannelStats,
    task: &TaskSpec,
    mapping: &LabelMapping,
) -> Result<Vec<PredictionRecord>> {
    check_task(model, task)?;
    indices
        .iter()
        .map(|&i| {
            let sample = dataset.load(i)?;
            let pred_mask = predict(model, &sample, stats, task)?;
            let gt_mask = match &sample.raw_mask {
                Some(raw) => Some(encode_mask(raw, mapping, EncodeMode::Strict)?.0),
                None => None,
            };
            Ok(PredictionRecord { image_id: sample.image_id(), video_id: sample.video_id.clone(), pred_mask, gt_mask })
        })
        .collect()
}

/// Scores records that carry ground truth.
pub fn score_records(records: &[PredictionRecord], task: &TaskSpec) -> Result<MetricReport> {
    let rows = records
        .iter()
        .map(|r| {
            let gt = r.gt_mask.as_ref().ok_or_else(|| Error::MissingMask(PathBuf::from(&r.image_id)))?;
            let (iou, dice) = image_scores(&r.pred_mask, gt, task)?;
            Ok(ImageScore { image_id: r.image_id.clone(), video_id: r.video_id.clone(), iou, dice })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_report(&rows, ReportSettings::for_task(task.kind))
}

/// Per-image IoU/Dice over `indices`, grouped by video.
pub fn evaluate<T: Float>(
    model: &Model<T>,
    dataset: &dyn Dataset,
    indices: &[usize],
    stats: &ChannelStats,
    task: &TaskSpec,
    mapping: &LabelMapping,
) -> Result<MetricReport> {
    check_task(model, task)?;
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = dataset.load(i)?;
        let raw = sample.raw_mask.as_ref().ok_or_else(|| Error::MissingMask(PathBuf::from(sample.image_id())))?;
        let gt = encode_mask(raw, mapping, EncodeMode::Strict)?.0;
        let pred = predict(model, &sample, stats, task)?;
        let (iou, dice) = image_scores(&pred, &gt, task)?;
        rows.push(ImageScore { image_id: sample.image_id(), video_id: sample.video_id.clone(), iou, dice });
    }
    aggregate_report(&rows, ReportSettings::for_task(task.kind))
}

/// Writes `<out>/<video>/<name>.png` with raw label values and, optionally,
/// `<out>/<video>/<name>_color.png`. With `full_canvas`, 1280×1024 masks are
/// re-embedded into a 1920×1080 background frame first.
#[cfg(feature = "io")]
pub fn write_prediction(
    out: &std::path::Path,
    record: &PredictionRecord,
    mapping: &LabelMapping,
    colorize: bool,
    full_canvas: bool,
) -> Result<()> {
    use crate::data::{colorize_mask, decode_mask, embed_canvas, write_mask, write_rgb, CROP_HEIGHT, CROP_WIDTH};

    let mut mask = record.pred_mask.clone();
    if full_canvas && mask.dim() == (CROP_HEIGHT, CROP_WIDTH) {
        mask = embed_canvas(&mask, 0)?;
    }
    let (video, name) = record.image_id.split_once('/').unwrap_or((&record.video_id, &record.image_id));
    let dir = out.join(video);
    std::fs::create_dir_all(&dir)?;
    write_mask(&dir.join(format!("{name}.png")), &decode_mask(&mask, mapping)?)?;
    if colorize {
        write_rgb(&dir.join(format!("{name}_color.png")), &colorize_mask(&mask, mapping.task)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;
    use ndarray::Array;

    #[test]
    fn binary_threshold_is_strict() {
        let logits = Array::from_shape_vec((1, 1, 1, 3), vec![-10.0f32, 0.0, 0.1]).unwrap();
        assert_eq!(logits_to_masks(&logits)[0].as_slice().unwrap(), &[0, 0, 1]);
        let neg = Array4::from_elem((1, 1, 2, 2), -10.0f32);
        assert!(logits_to_masks(&neg)[0].iter().all(|&v| v == 0));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let mut logits = Array4::<f64>::zeros((1, 2, 1, 2));
        logits[[0, 0, 0, 0]] = 0.2;
        logits[[0, 1, 0, 0]] = 0.9;
        assert_eq!(logits_to_masks(&logits)[0].as_slice().unwrap(), &[1, 0]);
    }

    #[test]
    fn mixed_sizes_rejected() {
        let a = ndarray::Array3::<f32>::zeros((3, 2, 2));
        let b = ndarray::Array3::<f32>::zeros((3, 2, 3));
        assert!(to_batch::<f32>(&[a, b]).is_err());
    }

    #[test]
    fn perfect_records_score_one() {
        let task = TaskSpec::new(TaskKind::Parts);
        let m = Array2::from_shape_fn((4, 4), |(y, x)| ((x + y) % 4) as u8);
        let recs: Vec<_> = ["v1", "v1", "v2"]
            .iter()
            .enumerate()
            .map(|(i, v)| PredictionRecord {
                image_id: format!("{v}/f{i}"),
                video_id: v.to_string(),
                pred_mask: m.clone(),
                gt_mask: Some(m.clone()),
            })
            .collect();
        let r = score_records(&recs, &task).unwrap();
        assert!(r.groups.iter().all(|g| g.mean_iou == 1.0));
        assert_eq!(r.mean_dice, 1.0);
    }
}

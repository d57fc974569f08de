//! Per-image IoU and Dice on hard label masks.
//!
//! Each scored class `c` contributes `tp / (tp + fp + fn)` (IoU) and
//! `2tp / (2tp + fp + fn)` (Dice). A class absent from both masks has no
//! defined score and is skipped; an image with every class skipped scores 1.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskSpec;

/// Pixel counts for one class on one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// True when the class appears in neither mask.
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn iou(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.tp as f64 / (self.tp + self.fp + self.fn_) as f64)
    }

    pub fn dice(&self) -> Option<f64> {
        (!self.is_empty()).then(|| (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64)
    }
}

fn check_pair(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    Ok(())
}

pub fn confusion_counts(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p == class_id, g == class_id) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Counts for every scored class of the task (class 1 only for binary).
pub fn class_counts(pred: &Array2<u8>, gt: &Array2<u8>, task: &TaskSpec) -> Result<Vec<(u8, ConfusionCounts)>> {
    check_pair(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::Empty("metric on a zero-pixel image".into()));
    }
    let classes = task.kind.label_classes();
    let mut per = vec![ConfusionCounts::default(); classes];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        for v in [p, g] {
            if v as usize >= classes {
                return Err(Error::InvalidLabel(format!("class {v} outside [0, {classes}) for {} task", task.kind)));
            }
        }
        if p == g {
            per[p as usize].tp += 1;
        } else {
            per[p as usize].fp += 1;
            per[g as usize].fn_ += 1;
        }
    }
    Ok(task.scored_classes().map(|c| (c, per[c as usize])).collect())
}

fn mean_defined(scores: impl Iterator<Item = Option<f64>>) -> f64 {
    let kept: Vec<f64> = scores.flatten().collect();
    if kept.is_empty() {
        1.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

pub fn iou_metric(pred: &Array2<u8>, gt: &Array2<u8>, task: &TaskSpec) -> Result<f64> {
    Ok(mean_defined(class_counts(pred, gt, task)?.iter().map(|(_, c)| c.iou())))
}

pub fn dice_metric(pred: &Array2<u8>, gt: &Array2<u8>, task: &TaskSpec) -> Result<f64> {
    Ok(mean_defined(class_counts(pred, gt, task)?.iter().map(|(_, c)| c.dice())))
}

/// IoU and Dice of one image from a single counting pass.
pub fn image_scores(pred: &Array2<u8>, gt: &Array2<u8>, task: &TaskSpec) -> Result<(f64, f64)> {
    let counts = class_counts(pred, gt, task)?;
    Ok((
        mean_defined(counts.iter().map(|(_, c)| c.iou())),
        mean_defined(counts.iter().map(|(_, c)| c.dice())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;
    use ndarray::array;

    #[test]
    fn counts_on_four_pixels() {
        let pred = array![[1u8, 0, 1, 0]];
        let gt = array![[1u8, 1, 0, 0]];
        assert_eq!(confusion_counts(&pred, &gt, 1).unwrap(), ConfusionCounts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(confusion_counts(&pred, &gt, 5).unwrap(), ConfusionCounts::default());
        assert_eq!(confusion_counts(&gt, &gt, 1).unwrap(), ConfusionCounts { tp: 2, fp: 0, fn_: 0 });
    }

    #[test]
    fn binary_iou_and_dice() {
        let task = TaskSpec::new(TaskKind::Binary);
        let pred = array![[1u8, 0, 1, 0]];
        let gt = array![[1u8, 1, 0, 0]];
        assert!((iou_metric(&pred, &gt, &task).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_metric(&pred, &gt, &task).unwrap(), 0.5);
        assert_eq!(iou_metric(&gt, &gt, &task).unwrap(), 1.0);
    }

    #[test]
    fn parts_silent_class_scores_zero() {
        let task = TaskSpec::new(TaskKind::Parts);
        let gt = array![[1u8, 1, 2, 2]];
        let pred = array![[1u8, 1, 0, 0]];
        assert_eq!(iou_metric(&pred, &gt, &task).unwrap(), 0.5);
    }

    #[test]
    fn all_background_scores_one() {
        let task = TaskSpec::new(TaskKind::Type);
        let z = Array2::<u8>::zeros((3, 3));
        assert_eq!(image_scores(&z, &z, &task).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn errors() {
        let task = TaskSpec::new(TaskKind::Binary);
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(matches!(iou_metric(&a, &b, &task), Err(Error::ShapeMismatch(_))));
        let e = Array2::<u8>::zeros((0, 0));
        assert!(matches!(iou_metric(&e, &e, &task), Err(Error::Empty(_))));
        let bad = Array2::from_elem((2, 2), 3u8);
        assert!(matches!(dice_metric(&bad, &a, &task), Err(Error::InvalidLabel(_))));
    }
}

use ndarray::Array2;
use proptest::prelude::*;

use nestseg::metrics::{class_counts, confusion_counts, dice_metric, image_scores, iou_metric};
use nestseg::{TaskKind, TaskSpec};

fn task_strategy() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::Binary), Just(TaskKind::Parts), Just(TaskKind::Type)]
}

/// A task with a pair of same-sized masks drawn from its label range.
fn mask_pair() -> impl Strategy<Value = (TaskKind, Array2<u8>, Array2<u8>)> {
    (task_strategy(), 1usize..12, 1usize..12).prop_flat_map(|(task, h, w)| {
        let classes = task.label_classes() as u8;
        let cells = proptest::collection::vec(0..classes, h * w);
        (Just(task), cells.clone(), cells).prop_map(move |(t, p, g)| {
            (t, Array2::from_shape_vec((h, w), p).unwrap(), Array2::from_shape_vec((h, w), g).unwrap())
        })
    })
}

fn reference_iou(pred: &Array2<u8>, gt: &Array2<u8>, task: TaskKind) -> f64 {
    let scores: Vec<f64> = (1..task.label_classes() as u8)
        .filter_map(|c| {
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

proptest! {
    #[test]
    fn iou_matches_set_reference((task, pred, gt) in mask_pair()) {
        let spec = TaskSpec::new(task);
        prop_assert_eq!(iou_metric(&pred, &gt, &spec).unwrap(), reference_iou(&pred, &gt, task));
    }

    #[test]
    fn scores_are_symmetric_and_bounded((task, pred, gt) in mask_pair()) {
        let spec = TaskSpec::new(task);
        let (iou, dice) = image_scores(&pred, &gt, &spec).unwrap();
        let (iou_r, dice_r) = image_scores(&gt, &pred, &spec).unwrap();
        prop_assert_eq!((iou, dice), (iou_r, dice_r));
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(dice >= iou);
        prop_assert!(dice <= 1.0);
    }

    #[test]
    fn dice_iou_identity_per_class((task, pred, gt) in mask_pair()) {
        for (_, c) in class_counts(&pred, &gt, &TaskSpec::new(task)).unwrap() {
            if let (Some(i), Some(d)) = (c.iou(), c.dice()) {
                prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_partition_the_pixels((task, pred, gt) in mask_pair()) {
        let mut disagreements = 0;
        for c in 0..task.label_classes() as u8 {
            disagreements += confusion_counts(&pred, &gt, c).unwrap().fp;
        }
        let expected = pred.iter().zip(&gt).filter(|(p, g)| p != g).count() as u64;
        prop_assert_eq!(disagreements, expected);
    }

    #[test]
    fn perfect_prediction_scores_one((task, pred, _gt) in mask_pair()) {
        let spec = TaskSpec::new(task);
        prop_assert_eq!(iou_metric(&pred, &pred, &spec).unwrap(), 1.0);
        prop_assert_eq!(dice_metric(&pred, &pred, &spec).unwrap(), 1.0);
    }
}

#[test]
fn silent_foreground_class_counts_as_zero() {
    let spec = TaskSpec::new(TaskKind::Type);
    let gt = ndarray::array![[3u8, 3], [0, 0]];
    let pred = ndarray::array![[0u8, 0], [0, 0]];
    assert_eq!(iou_metric(&pred, &gt, &spec).unwrap(), 0.0);
    assert_eq!(iou_metric(&pred, &pred, &spec).unwrap(), 1.0);
}

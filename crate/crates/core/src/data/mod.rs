//! Dataset ingestion, preprocessing, augmentation and fold assignment.

mod augment;
mod canvas;
mod folds;
#[cfg(feature = "io")]
mod io;
mod labels;
mod normalize;
mod synth;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};

pub use augment::{
    apply_to_mask, augment, center_crop, default_pipeline, hflip_image, validate_ops, vflip_image, Applied, AugmentOp,
    AugmentRecord,
};
pub use canvas::{crop_canvas, embed_canvas, CROP_HEIGHT, CROP_ORIGIN, CROP_WIDTH, FULL_HEIGHT, FULL_WIDTH};
pub use folds::{kfold_split, FoldSplit, FoldView};
#[cfg(feature = "io")]
pub use io::{
    load_endovis, read_mask, read_rgb, write_dataset, write_mask, write_rgb, DatasetIndex, LoadMode, SampleRef,
};
pub use labels::{
    colorize_mask, decode_colors, decode_mask, encode_mask, palette, EncodeMode, LabelMapping, BACKGROUND,
    CLASPER_YELLOW, SHAFT_BLUE, WRIST_GREEN,
};
pub use normalize::{denormalize_image, normalize_image, ChannelStats};
pub use synth::{generate_synthetic, SynthSpec};

use crate::error::Result;

/// One frame: `[H, W, 3]` RGB bytes and, when available, the raw mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub image: Array3<u8>,
    pub raw_mask: Option<Array2<u8>>,
    pub video_id: String,
    pub frame_index: usize,
    /// File stem, e.g. `frame007`.
    pub name: String,
}

impl RawSample {
    /// `video/name`, unique within a dataset.
    pub fn image_id(&self) -> String {
        format!("{}/{}", self.video_id, self.name)
    }
}

/// Random-access sample source.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn video_id(&self, index: usize) -> &str;

    fn load(&self, index: usize) -> Result<RawSample>;

    /// Sorted unique video ids.
    fn video_ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.video_id(i).to_string()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Indices of samples whose video is in `videos`, in dataset order.
    fn indices_for(&self, videos: &[String]) -> Vec<usize> {
        (0..self.len()).filter(|&i| videos.iter().any(|v| v == self.video_id(i))).collect()
    }
}

/// Samples held in memory, sorted by `(video_id, frame_index)`.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    samples: Vec<RawSample>,
}

impl InMemoryDataset {
    pub fn new(mut samples: Vec<RawSample>) -> Self {
        samples.sort_by(|a, b| (&a.video_id, a.frame_index, &a.name).cmp(&(&b.video_id, b.frame_index, &b.name)));
        Self { samples }
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn video_id(&self, index: usize) -> &str {
        &self.samples[index].video_id
    }

    fn load(&self, index: usize) -> Result<RawSample> {
        Ok(self.samples[index].clone())
    }
}

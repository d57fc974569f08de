//! Image files and the on-disk dataset layout.
//!
//! ```text
//! root/<video>/frames/<name>.png|jpg
//! root/<video>/ground_truth/<task>/<name>.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::data::{crop_canvas, Dataset, RawSample, FULL_HEIGHT, FULL_WIDTH};
use crate::error::{Error, Result};
use crate::task::TaskKind;

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("rgb buffer size"))
}

/// Reads an 8-bit mask; color files are reduced to their first channel so raw
/// label values survive unchanged.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray: Vec<u8> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw(),
        other => other.to_rgb8().pixels().map(|p| p.0[0]).collect(),
    };
    Ok(Array2::from_shape_vec((h, w), gray).expect("mask buffer size"))
}

pub fn write_rgb(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, found: c });
    }
    let buf = RgbImage::from_raw(w as u32, h as u32, rgb.as_standard_layout().iter().copied().collect())
        .expect("rgb buffer size");
    buf.save(path)?;
    Ok(())
}

pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = GrayImage::from_raw(w as u32, h as u32, mask.as_standard_layout().iter().copied().collect())
        .expect("mask buffer size");
    buf.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every frame must have a mask.
    Training,
    /// Masks are optional.
    PredictOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub video_id: String,
    pub frame_index: usize,
    pub name: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// Frames and masks discovered under a dataset root; files are read lazily.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub task: TaskKind,
    pub samples: Vec<SampleRef>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn trailing_number(stem: &str) -> Option<usize> {
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Indexes `root`. Video folders are those containing a `frames/` directory.
pub fn load_endovis(root: &Path, task: TaskKind, mode: LoadMode) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Layout(format!("dataset root {} is not a directory", root.display())));
    }
    let mut samples = Vec::new();
    for video_dir in sorted_entries(root)? {
        let frames_dir = video_dir.join("frames");
        if !frames_dir.is_dir() {
            continue;
        }
        let video_id = video_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let gt_dir = video_dir.join("ground_truth").join(task.as_str());
        if mode == LoadMode::Training && !gt_dir.is_dir() {
            return Err(Error::Layout(format!("missing ground-truth directory {}", gt_dir.display())));
        }
        let mut frames: Vec<SampleRef> = Vec::new();
        for (pos, path) in sorted_entries(&frames_dir)?.into_iter().filter(|p| is_image(p)).enumerate() {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mask = gt_dir.join(format!("{name}.png"));
            let mask_path = mask.is_file().then_some(mask);
            if mode == LoadMode::Training && mask_path.is_none() {
                return Err(Error::MissingMask(path));
            }
            frames.push(SampleRef {
                video_id: video_id.clone(),
                frame_index: trailing_number(&name).unwrap_or(pos),
                name,
                image_path: path,
                mask_path,
            });
        }
        frames.sort_by(|a, b| (a.frame_index, &a.name).cmp(&(b.frame_index, &b.name)));
        samples.extend(frames);
    }
    if samples.is_empty() {
        return Err(Error::Layout(format!("no <video>/frames/ images under {}", root.display())));
    }
    Ok(DatasetIndex { root: root.to_path_buf(), task, samples })
}

fn crop_if_native<A: Clone, D: ndarray::Dimension + ndarray::RemoveAxis>(a: ndarray::Array<A, D>) -> Result<ndarray::Array<A, D>> {
    if a.shape()[0] == FULL_HEIGHT && a.shape()[1] == FULL_WIDTH {
        crop_canvas(&a)
    } else {
        Ok(a)
    }
}

impl DatasetIndex {
    pub fn counts_per_video(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.video_id.clone()).or_insert(0) += 1;
        }
        m
    }
}

impl Dataset for DatasetIndex {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn video_id(&self, index: usize) -> &str {
        &self.samples[index].video_id
    }

    /// Reads one frame; full-HD frames and masks are cropped to the canvas window.
    fn load(&self, index: usize) -> Result<RawSample> {
        let r = &self.samples[index];
        let image = crop_if_native(read_rgb(&r.image_path)?)?;
        let raw_mask = match &r.mask_path {
            Some(p) => {
                let m = crop_if_native(read_mask(p)?)?;
                if m.dim() != (image.shape()[0], image.shape()[1]) {
                    return Err(Error::ShapeMismatch(format!(
                        "frame {}: image {}x{} but mask {}x{}",
                        r.image_path.display(),
                        image.shape()[1],
                        image.shape()[0],
                        m.ncols(),
                        m.nrows()
                    )));
                }
                Some(m)
            }
            None => None,
        };
        Ok(RawSample { image, raw_mask, video_id: r.video_id.clone(), frame_index: r.frame_index, name: r.name.clone() })
    }
}

/// Writes samples in the layout read by [`load_endovis`].
pub fn write_dataset(samples: &[RawSample], root: &Path, task: TaskKind) -> Result<()> {
    for s in samples {
        let video = root.join(&s.video_id);
        let frames = video.join("frames");
        let gt = video.join("ground_truth").join(task.as_str());
        std::fs::create_dir_all(&frames)?;
        write_rgb(&frames.join(format!("{}.png", s.name)), &s.image)?;
        if let Some(m) = &s.raw_mask {
            std::fs::create_dir_all(&gt)?;
            write_mask(&gt.join(format!("{}.png", s.name)), m)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { num_videos: 2, ..SynthSpec::new(6, 32, 64, TaskKind::Parts, 5) };
        let samples = generate_synthetic(&spec).unwrap();
        write_dataset(&samples, dir.path(), TaskKind::Parts).unwrap();
        let idx = load_endovis(dir.path(), TaskKind::Parts, LoadMode::Training).unwrap();
        assert_eq!(idx.len(), 6);
        assert_eq!(idx.counts_per_video().values().copied().collect::<Vec<_>>(), vec![3, 3]);
        let first = idx.load(0).unwrap();
        let orig = samples.iter().find(|s| s.image_id() == first.image_id()).unwrap();
        assert_eq!(&first, orig);
    }

    #[test]
    fn missing_mask_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&SynthSpec::new(2, 32, 32, TaskKind::Binary, 0)).unwrap();
        write_dataset(&samples, dir.path(), TaskKind::Binary).unwrap();
        std::fs::remove_file(dir.path().join("video_02/ground_truth/binary/frame000.png")).unwrap();
        match load_endovis(dir.path(), TaskKind::Binary, LoadMode::Training) {
            Err(Error::MissingMask(p)) => assert!(p.ends_with("video_02/frames/frame000.png")),
            other => panic!("expected a missing-mask error, got {other:?}"),
        }
        let idx = load_endovis(dir.path(), TaskKind::Binary, LoadMode::PredictOnly).unwrap();
        assert_eq!(idx.len(), 2);
        assert!(idx.load(1).unwrap().raw_mask.is_none());
    }

    #[test]
    fn empty_root_is_a_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_endovis(dir.path(), TaskKind::Binary, LoadMode::Training), Err(Error::Layout(_))));
    }
}

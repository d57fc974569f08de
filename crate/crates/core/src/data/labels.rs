//! Raw label values, class indices and display colors.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;

/// Maps the dataset's raw mask values to contiguous class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub task: TaskKind,
    pub raw_to_class: BTreeMap<u8, u8>,
    /// Raw value written back for each class.
    pub class_to_raw: Vec<u8>,
    pub class_names: Vec<String>,
}

/// How [`encode_mask`] treats raw values missing from the mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncodeMode {
    #[default]
    Strict,
    /// Unknown values become background and are counted.
    Lenient,
}

impl LabelMapping {
    pub fn default_for(task: TaskKind) -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match task {
            TaskKind::Binary => Self {
                task,
                raw_to_class: (0..=255u8).map(|v| (v, (v != 0) as u8)).collect(),
                class_to_raw: vec![0, 255],
                class_names: names(&["background", "instrument"]),
            },
            TaskKind::Parts => Self {
                task,
                raw_to_class: [(0, 0), (10, 1), (20, 2), (30, 3), (40, 0)].into_iter().collect(),
                class_to_raw: vec![0, 10, 20, 30],
                class_names: names(&["background", "shaft", "wrist", "clasper"]),
            },
            TaskKind::Type => Self {
                task,
                raw_to_class: (0..8u8).map(|v| (v, v)).collect(),
                class_to_raw: (0..8).collect(),
                class_names: names(&[
                    "background",
                    "bipolar forceps",
                    "prograsp forceps",
                    "large needle driver",
                    "vessel sealer",
                    "grasping retractor",
                    "monopolar curved scissors",
                    "other",
                ]),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.task.label_classes();
        let mut problems = Vec::new();
        if self.class_to_raw.len() != classes {
            problems.push(format!("{} classes expected, class_to_raw has {}", classes, self.class_to_raw.len()));
        }
        if self.class_names.len() != classes {
            problems.push(format!("{} class names expected, found {}", classes, self.class_names.len()));
        }
        if let Some((raw, c)) = self.raw_to_class.iter().find(|(_, &c)| c as usize >= classes) {
            problems.push(format!("raw value {raw} maps to class {c} outside [0, {classes})"));
        }
        for (c, raw) in self.class_to_raw.iter().enumerate() {
            if self.raw_to_class.get(raw) != Some(&(c as u8)) {
                problems.push(format!("class {c} writes raw value {raw}, which does not map back to it"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidLabel(problems.join("; ")))
        }
    }
}

/// Raw values to class indices. Returns the mask and the number of pixels
/// with values missing from the mapping (always 0 in strict mode).
pub fn encode_mask(raw: &Array2<u8>, mapping: &LabelMapping, mode: EncodeMode) -> Result<(Array2<u8>, usize)> {
    let mut lut = [None; 256];
    for (&r, &c) in &mapping.raw_to_class {
        lut[r as usize] = Some(c);
    }
    let mut unknown = 0usize;
    let mut first_unknown = None;
    let out = raw.mapv(|v| match lut[v as usize] {
        Some(c) => c,
        None => {
            unknown += 1;
            first_unknown.get_or_insert(v);
            0
        }
    });
    if let Some(v) = first_unknown {
        match mode {
            EncodeMode::Strict => {
                return Err(Error::InvalidLabel(format!(
                    "raw value {v} is not in the {} mapping ({unknown} pixels)",
                    mapping.task
                )))
            }
            EncodeMode::Lenient => warn!("{unknown} pixels with unmapped raw values (first: {v}) set to background"),
        }
    }
    Ok((out, unknown))
}

/// Class indices back to the mapping's raw values.
pub fn decode_mask(classes: &Array2<u8>, mapping: &LabelMapping) -> Result<Array2<u8>> {
    if let Some(&c) = classes.iter().find(|&&c| c as usize >= mapping.class_to_raw.len()) {
        return Err(Error::InvalidLabel(format!("class {c} has no raw value")));
    }
    Ok(classes.mapv(|c| mapping.class_to_raw[c as usize]))
}

pub const BACKGROUND: [u8; 3] = [68, 1, 84];
pub const SHAFT_BLUE: [u8; 3] = [49, 104, 142];
pub const WRIST_GREEN: [u8; 3] = [53, 183, 121];
pub const CLASPER_YELLOW: [u8; 3] = [253, 231, 37];

const BINARY_PALETTE: [[u8; 3]; 2] = [BACKGROUND, CLASPER_YELLOW];
const PARTS_PALETTE: [[u8; 3]; 4] = [BACKGROUND, SHAFT_BLUE, WRIST_GREEN, CLASPER_YELLOW];
const TYPE_PALETTE: [[u8; 3]; 8] = [
    BACKGROUND,
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [70, 240, 240],
    [240, 50, 230],
];

/// Display colors indexed by class.
pub fn palette(task: TaskKind) -> &'static [[u8; 3]] {
    match task {
        TaskKind::Binary => &BINARY_PALETTE,
        TaskKind::Parts => &PARTS_PALETTE,
        TaskKind::Type => &TYPE_PALETTE,
    }
}

/// Class mask to an `[H, W, 3]` color image.
pub fn colorize_mask(mask: &Array2<u8>, task: TaskKind) -> Result<Array3<u8>> {
    let pal = palette(task);
    if let Some(&c) = mask.iter().find(|&&c| c as usize >= pal.len()) {
        return Err(Error::InvalidLabel(format!("class {c} outside the {task} palette of {} colors", pal.len())));
    }
    let (h, w) = mask.dim();
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, ch)| pal[mask[[y, x]] as usize][ch]))
}

/// Inverse of [`colorize_mask`]; any color outside the palette is an error.
pub fn decode_colors(rgb: &Array3<u8>, task: TaskKind) -> Result<Array2<u8>> {
    let pal = palette(task);
    if rgb.shape()[2] != 3 {
        return Err(Error::ChannelMismatch { expected: 3, found: rgb.shape()[2] });
    }
    let (h, w, _) = rgb.dim();
    let mut out = Array2::zeros((h, w));
    for ((y, x), slot) in out.indexed_iter_mut() {
        let px = rgb.index_axis(Axis(0), y);
        let px = [px[[x, 0]], px[[x, 1]], px[[x, 2]]];
        let c = pal
            .iter()
            .position(|p| *p == px)
            .ok_or_else(|| Error::InvalidLabel(format!("color {px:?} at ({x}, {y}) is not in the {task} palette")))?;
        *slot = c as u8;
    }
    Ok(out)
}

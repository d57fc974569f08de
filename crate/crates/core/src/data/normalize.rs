//! Per-channel mean subtraction (and optional std division).

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel statistics in `[0, 1]` units, estimated on training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    /// `None` leaves the variance untouched.
    #[serde(default)]
    pub std: Option<[f64; 3]>,
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: None }
    }
}

impl ChannelStats {
    /// Pixel-weighted statistics over `[H, W, 3]` images.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a Array3<u8>>, with_std: bool) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0u64;
        for img in images {
            if img.shape()[2] != 3 {
                return Err(Error::ChannelMismatch { expected: 3, found: img.shape()[2] });
            }
            for px in img.lanes(Axis(2)) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += (img.shape()[0] * img.shape()[1]) as u64;
        }
        if count == 0 {
            return Err(Error::Empty("channel statistics need at least one pixel".into()));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let std = with_std.then(|| std::array::from_fn(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6)));
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.mean.iter().all(|m| m.is_finite());
        let std_ok = self.std.is_none_or(|s| s.iter().all(|v| v.is_finite() && *v > 0.0));
        if finite && std_ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid channel statistics {self:?}")))
        }
    }
}

/// `[H, W, 3]` bytes to a channel-first `[3, H, W]` tensor, `x/255 - mean`
/// (divided by `std` when present).
pub fn normalize_image(image: &Array3<u8>, stats: &ChannelStats) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let scale: [f64; 3] = match stats.std {
        Some(s) => s.map(|v| 1.0 / v),
        None => [1.0; 3],
    };
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        ((image[[y, x, c]] as f64 / 255.0 - stats.mean[c]) * scale[c]) as f32
    })
}

/// Inverse of [`normalize_image`], rounded and clamped to bytes.
pub fn denormalize_image(t: &Array3<f32>, stats: &ChannelStats) -> Array3<u8> {
    let (_, h, w) = t.dim();
    let std = stats.std.unwrap_or([1.0; 3]);
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        ((t[[c, y, x]] as f64 * std[c] + stats.mean[c]) * 255.0).round().clamp(0.0, 255.0) as u8
    })
}

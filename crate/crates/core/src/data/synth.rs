//! Procedural instrument-over-tissue scenes with EndoVis-style raw labels.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawSample;
use crate::error::{Error, Result};
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of instruments per image.
    pub instruments_per_image: (usize, usize),
    pub seed: u64,
    pub task: TaskKind,
    /// Images are dealt round-robin into this many videos.
    #[serde(default = "default_videos")]
    pub num_videos: usize,
    /// Adds small raw-value-40 blobs to parts masks.
    #[serde(default)]
    pub probe_shapes: bool,
}

fn default_videos() -> usize {
    8
}

impl SynthSpec {
    pub fn new(num_images: usize, height: usize, width: usize, task: TaskKind, seed: u64) -> Self {
        Self {
            num_images,
            height,
            width,
            instruments_per_image: (1, 3),
            seed,
            task,
            num_videos: default_videos(),
            probe_shapes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_images == 0 {
            problems.push("num_images must be positive".to_string());
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                problems.push(format!("{name} = {v} must be a positive multiple of 32"));
            }
        }
        let (lo, hi) = self.instruments_per_image;
        if lo > hi {
            problems.push(format!("instruments_per_image range ({lo}, {hi}) is empty"));
        }
        if self.num_videos == 0 {
            problems.push("num_videos must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

struct Instrument {
    origin: (f64, f64),
    dir: (f64, f64),
    radius: f64,
    shaft: f64,
    wrist: f64,
    clasper: f64,
    type_id: u8,
    tint: [f64; 3],
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Shaft,
    Wrist,
    Clasper,
}

impl Instrument {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let origin = match rng.random_range(0..4) {
            0 => (rng.random_range(0.0..wf), 0.0),
            1 => (rng.random_range(0.0..wf), hf - 1.0),
            2 => (0.0, rng.random_range(0.0..hf)),
            _ => (wf - 1.0, rng.random_range(0.0..hf)),
        };
        let to_center = ((wf / 2.0 - origin.0), (hf / 2.0 - origin.1));
        let angle = to_center.1.atan2(to_center.0) + rng.random_range(-0.6..0.6);
        let diag = (hf * hf + wf * wf).sqrt();
        let radius = hf.min(wf) * rng.random_range(0.04..0.07);
        let type_id = rng.random_range(1..=7u8);
        let hue = type_id as f64;
        Self {
            origin,
            dir: (angle.cos(), angle.sin()),
            radius,
            shaft: diag * rng.random_range(0.25..0.45),
            wrist: radius * 1.6,
            clasper: radius * 2.4,
            type_id,
            tint: [(hue * 1.3).sin() * 12.0, (hue * 2.1).sin() * 12.0, (hue * 0.7).cos() * 12.0],
        }
    }

    /// Part covering pixel center `(x, y)` and the normalized distance from the axis.
    fn hit(&self, x: f64, y: f64) -> Option<(Part, f64)> {
        let (dx, dy) = (x - self.origin.0, y - self.origin.1);
        let t = dx * self.dir.0 + dy * self.dir.1;
        let d = (dx * self.dir.1 - dy * self.dir.0).abs();
        let r = self.radius;
        if t < -r {
            return None;
        }
        if t <= self.shaft {
            return (d <= r).then_some((Part::Shaft, d / r));
        }
        let t = t - self.shaft;
        if t <= self.wrist {
            return (d <= 0.8 * r).then_some((Part::Wrist, d / r));
        }
        let t = t - self.wrist;
        if t <= self.clasper {
            let outer = 0.75 * r * (1.0 - 0.6 * t / self.clasper);
            return (d <= outer && d >= 0.12 * r).then_some((Part::Clasper, d / r));
        }
        None
    }

    fn raw_value(&self, part: Part, task: TaskKind) -> u8 {
        match task {
            TaskKind::Binary => 255,
            TaskKind::Parts => match part {
                Part::Shaft => 10,
                Part::Wrist => 20,
                Part::Clasper => 30,
            },
            TaskKind::Type => self.type_id,
        }
    }

    fn color(&self, part: Part, across: f64, task: TaskKind) -> [f64; 3] {
        let base = match part {
            Part::Shaft => 190.0,
            Part::Wrist => 110.0,
            Part::Clasper => 235.0,
        };
        let shade = base * (1.0 - 0.25 * across * across);
        let tint = if task == TaskKind::Type { self.tint } else { [0.0; 3] };
        [shade + tint[0], shade + tint[1], shade + 6.0 + tint[2]]
    }
}

fn render(spec: &SynthSpec, index: usize) -> (Array3<u8>, Array2<u8>) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let base = [rng.random_range(150.0..200.0), rng.random_range(40.0..80.0), rng.random_range(40.0..70.0)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.06),
                rng.random_range(0.01..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(5.0..15.0),
            )
        })
        .collect();
    let (lo, hi) = spec.instruments_per_image;
    let count = rng.random_range(lo..=hi);
    let tools: Vec<Instrument> = (0..count).map(|_| Instrument::sample(&mut rng, h, w)).collect();
    let probes: Vec<(f64, f64, f64)> = if spec.probe_shapes && spec.task == TaskKind::Parts {
        let r = h.min(w) as f64 * 0.05;
        vec![(rng.random_range(r..w as f64 - r), rng.random_range(r..h as f64 - r), r)]
    } else {
        Vec::new()
    };

    let mut image = Array3::zeros((h, w, 3));
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let tex: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * xf + fy * yf + ph).sin()).sum();
            let noise = rng.random_range(-6.0..6.0);
            let mut rgb = [base[0] + tex + noise, base[1] + 0.5 * tex + noise, base[2] + 0.4 * tex + noise];
            let mut raw = 0u8;
            for &(px, py, r) in &probes {
                if (xf - px).powi(2) + (yf - py).powi(2) <= r * r {
                    rgb = [90.0 + noise, 140.0 + noise, 200.0 + noise];
                    raw = 40;
                }
            }
            for tool in &tools {
                if let Some((part, across)) = tool.hit(xf, yf) {
                    let c = tool.color(part, across, spec.task);
                    rgb = [c[0] + noise, c[1] + noise, c[2] + noise];
                    raw = tool.raw_value(part, spec.task);
                }
            }
            for c in 0..3 {
                image[[y, x, c]] = rgb[c].round().clamp(0.0, 255.0) as u8;
            }
            mask[[y, x]] = raw;
        }
    }
    (image, mask)
}

/// Deterministic synthetic dataset. Image `i` belongs to video
/// `i % num_videos` and depends only on `(seed, i)`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<RawSample>> {
    spec.validate()?;
    let videos = spec.num_videos.min(spec.num_images);
    Ok((0..spec.num_images)
        .map(|i| {
            let (image, mask) = render(spec, i);
            let frame_index = i / videos;
            RawSample {
                image,
                raw_mask: Some(mask),
                video_id: format!("video_{:02}", i % videos + 1),
                frame_index,
                name: format!("frame{frame_index:03}"),
            }
        })
        .collect())
}

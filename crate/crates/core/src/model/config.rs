use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;

/// Number of encoder levels (nested unit, four residual-U stages, dilated bottleneck).
pub const ENCODER_LEVELS: usize = 6;
/// Number of decoder blocks.
pub const DECODER_BLOCKS: usize = 4;
/// RGB input.
pub const INPUT_CHANNELS: usize = 3;
/// Stabilizer of every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

fn default_slope() -> f64 {
    0.01
}

fn default_factor() -> usize {
    2
}

fn default_divisor() -> usize {
    32
}

/// One U-shaped block: an RSU (decoder), a residual-U encoder stage, the
/// nested starting unit, or (when `dilated`) the resolution-preserving
/// RSU-4F bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsuConfig {
    /// Number of U levels (>= 2).
    pub depth: usize,
    #[serde(rename = "in")]
    pub in_channels: usize,
    #[serde(rename = "mid")]
    pub mid_channels: usize,
    #[serde(rename = "out")]
    pub out_channels: usize,
    #[serde(default)]
    pub dilated: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dilation_rates: Vec<usize>,
    #[serde(default = "default_slope")]
    pub negative_slope: f64,
}

impl RsuConfig {
    pub fn pooled(depth: usize, in_channels: usize, mid_channels: usize, out_channels: usize) -> Self {
        Self {
            depth,
            in_channels,
            mid_channels,
            out_channels,
            dilated: false,
            dilation_rates: Vec::new(),
            negative_slope: default_slope(),
        }
    }

    /// Dilated variant with rates `1, 2, 4, ...` (one per level).
    pub fn dilated(depth: usize, in_channels: usize, mid_channels: usize, out_channels: usize) -> Self {
        Self {
            dilated: true,
            dilation_rates: (0..depth).map(|i| 1usize << i).collect(),
            ..Self::pooled(depth, in_channels, mid_channels, out_channels)
        }
    }

    /// Smallest spatial side the block accepts.
    pub fn min_side(&self) -> usize {
        if self.dilated {
            1
        } else {
            1usize << (self.depth.saturating_sub(1))
        }
    }

    /// Every violated block invariant, prefixed with `label`.
    pub fn problems(&self, label: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.depth < 2 {
            out.push(format!("{label}: depth must be >= 2, got {}", self.depth));
        }
        for (name, v) in [("in", self.in_channels), ("mid", self.mid_channels), ("out", self.out_channels)] {
            if v == 0 {
                out.push(format!("{label}: {name} channels must be >= 1"));
            }
        }
        if !(self.negative_slope.is_finite() && (0.0..1.0).contains(&self.negative_slope)) {
            out.push(format!("{label}: negative_slope must lie in [0, 1), got {}", self.negative_slope));
        }
        if self.dilated {
            let r = &self.dilation_rates;
            if r.len() != self.depth {
                out.push(format!(
                    "{label}: dilation_rates malformed: expected {} entries (one per level), found {}",
                    self.depth,
                    r.len()
                ));
            } else if r.first() != Some(&1) || r.windows(2).any(|w| w[1] <= w[0]) {
                out.push(format!(
                    "{label}: dilation_rates malformed: must start at 1 and strictly increase, got {r:?}"
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Instance,
    Batch,
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Level 1 nested unit, levels 2-5 residual-U stages, level 6 dilated bottleneck.
    pub stages: Vec<RsuConfig>,
    pub decoder: Vec<RsuConfig>,
    #[serde(default = "default_factor")]
    pub downsample_factor: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_divisor")]
    pub input_divisor: usize,
}

/// Per-level encoder depths: nested unit, residual-U stages, bottleneck.
const ENCODER_DEPTHS: [usize; ENCODER_LEVELS] = [2, 5, 4, 3, 2, 4];
/// Decoder depths from the coarsest block to the finest.
const DECODER_DEPTHS: [usize; DECODER_BLOCKS] = [2, 3, 4, 5];

impl ModelConfig {
    /// Builds a chained configuration from encoder and decoder output widths;
    /// mid channels are half of each block's output.
    pub fn from_widths(num_classes: usize, encoder_out: [usize; ENCODER_LEVELS], decoder_out: [usize; DECODER_BLOCKS]) -> Self {
        let mid = |c: usize| (c / 2).max(1);
        let mut stages = Vec::with_capacity(ENCODER_LEVELS);
        let mut cin = INPUT_CHANNELS;
        for (level, (&out, &depth)) in encoder_out.iter().zip(&ENCODER_DEPTHS).enumerate() {
            let cfg = if level == ENCODER_LEVELS - 1 {
                RsuConfig::dilated(depth, cin, mid(out), out)
            } else {
                RsuConfig::pooled(depth, cin, mid(out), out)
            };
            stages.push(cfg);
            cin = out;
        }
        let mut decoder = Vec::with_capacity(DECODER_BLOCKS);
        let mut incoming = encoder_out[5];
        for (k, (&out, &depth)) in decoder_out.iter().zip(&DECODER_DEPTHS).enumerate() {
            let skip = encoder_out[4 - k];
            decoder.push(RsuConfig::pooled(depth, incoming + skip, mid(out), out));
            incoming = out;
        }
        Self {
            num_classes,
            stages,
            decoder,
            downsample_factor: 2,
            normalization: Normalization::Instance,
            input_divisor: 32,
        }
    }

    /// Default channel schedule: encoder (64,128,256,512,512,512), decoder (256,128,64,64).
    pub fn for_task(task: TaskKind) -> Self {
        Self::from_widths(task.logit_channels(), [64, 128, 256, 512, 512, 512], [256, 128, 64, 64])
    }

    /// Narrow variant of the same topology for CPU-scale experiments.
    pub fn compact(task: TaskKind) -> Self {
        Self::from_widths(task.logit_channels(), [8, 16, 16, 32, 32, 32], [32, 16, 8, 8])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a `.toml` or `.json` config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(serde_json::from_str(&text)?),
            _ => Self::from_toml(&text),
        }
    }
}

/// Spatial scale of a level expressed as the input-size divisor (1, 2, 4, ...).
pub type ScaleDivisor = usize;

/// A configuration that passed [`validate_config`], with derived fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    config: ModelConfig,
    /// Scale of each encoder level: (1, 2, 4, 8, 16, 16).
    pub encoder_scales: [ScaleDivisor; ENCODER_LEVELS],
    /// Scale of each decoder block, coarsest first: (16, 8, 4, 2).
    pub decoder_scales: [ScaleDivisor; DECODER_BLOCKS],
    /// Skip source (encoder level index) concatenated into each decoder block.
    pub decoder_skips: [usize; DECODER_BLOCKS],
    /// Channels entering the head: upsampled last decoder output + level-1 skip.
    pub head_in_channels: usize,
}

impl ValidatedConfig {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn into_inner(self) -> ModelConfig {
        self.config
    }
}

impl Deref for ValidatedConfig {
    type Target = ModelConfig;

    fn deref(&self) -> &ModelConfig {
        &self.config
    }
}

/// Checks every architectural invariant and fills in derived scales and
/// channel chaining. All violations are reported together.
pub fn validate_config(config: &ModelConfig) -> Result<ValidatedConfig> {
    let mut problems = Vec::new();
    if config.stages.len() != ENCODER_LEVELS {
        problems.push(format!(
            "encoder level count: expected {ENCODER_LEVELS}, found {}",
            config.stages.len()
        ));
    }
    if config.decoder.len() != DECODER_BLOCKS {
        problems.push(format!("decoder count: expected {DECODER_BLOCKS}, found {}", config.decoder.len()));
    }
    if config.num_classes == 0 {
        problems.push("num_classes must be >= 1".into());
    }
    if config.downsample_factor != 2 {
        problems.push(format!("downsample_factor must be 2, got {}", config.downsample_factor));
    }
    if config.input_divisor == 0 || config.input_divisor % 16 != 0 {
        problems.push(format!(
            "input_divisor must be a positive multiple of 16 (four stride-2 transitions), got {}",
            config.input_divisor
        ));
    }

    let encoder_scales = [1, 2, 4, 8, 16, 16];
    let decoder_scales = [16, 8, 4, 2];
    let decoder_skips = [4, 3, 2, 1];

    for (i, s) in config.stages.iter().enumerate() {
        let label = format!("stage {}", i + 1);
        problems.extend(s.problems(&label));
        let should_dilate = i == ENCODER_LEVELS - 1;
        if s.dilated != should_dilate {
            problems.push(if should_dilate {
                format!("{label}: the bottleneck level must be dilated")
            } else {
                format!("{label}: only the bottleneck level may be dilated")
            });
        }
    }
    for (i, d) in config.decoder.iter().enumerate() {
        let label = format!("decoder {}", i + 1);
        problems.extend(d.problems(&label));
        if d.dilated {
            problems.push(format!("{label}: decoder blocks are pooled RSUs, not dilated"));
        }
    }

    let mut head_in_channels = 0;
    if config.stages.len() == ENCODER_LEVELS && config.decoder.len() == DECODER_BLOCKS {
        let st = &config.stages;
        if st[0].in_channels != INPUT_CHANNELS {
            problems.push(format!(
                "channel chaining: stage 1 in = {}, expected {INPUT_CHANNELS} (RGB)",
                st[0].in_channels
            ));
        }
        for i in 1..ENCODER_LEVELS {
            if st[i].in_channels != st[i - 1].out_channels {
                problems.push(format!(
                    "channel chaining: stage {} in = {}, expected stage {} out = {}",
                    i + 1,
                    st[i].in_channels,
                    i,
                    st[i - 1].out_channels
                ));
            }
        }
        let mut incoming = st[5].out_channels;
        for (k, d) in config.decoder.iter().enumerate() {
            let skip = st[decoder_skips[k]].out_channels;
            if d.in_channels != incoming + skip {
                problems.push(format!(
                    "channel chaining: decoder {} in = {}, expected {} (incoming) + {} (stage {} skip) = {}",
                    k + 1,
                    d.in_channels,
                    incoming,
                    skip,
                    decoder_skips[k] + 1,
                    incoming + skip
                ));
            }
            incoming = d.out_channels;
        }
        head_in_channels = incoming + st[0].out_channels;

        if config.input_divisor > 0 {
            let check = |label: String, b: &RsuConfig, scale: usize, problems: &mut Vec<String>| {
                let side = config.input_divisor / scale;
                if side < b.min_side() {
                    problems.push(format!(
                        "{label}: depth {} needs side >= {} but the smallest legal input gives {side} at scale 1/{scale}",
                        b.depth,
                        b.min_side()
                    ));
                }
            };
            for (i, s) in st.iter().enumerate() {
                check(format!("stage {}", i + 1), s, encoder_scales[i], &mut problems);
            }
            for (k, d) in config.decoder.iter().enumerate() {
                check(format!("decoder {}", k + 1), d, decoder_scales[k], &mut problems);
            }
        }
    }

    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    Ok(ValidatedConfig { config: config.clone(), encoder_scales, decoder_scales, decoder_skips, head_in_channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_with_expected_scales() {
        let v = validate_config(&ModelConfig::for_task(TaskKind::Binary)).unwrap();
        assert_eq!(v.encoder_scales, [1, 2, 4, 8, 16, 16]);
        assert_eq!(v.decoder_scales, [16, 8, 4, 2]);
        assert_eq!(v.head_in_channels, 64 + 64);
        assert_eq!(v.decoder[0].in_channels, 1024);
        assert_eq!(v.decoder[1].in_channels, 256 + 512);
        assert_eq!(v.stages[5].dilation_rates, vec![1, 2, 4, 8]);
    }

    #[test]
    fn three_decoders_rejected() {
        let mut c = ModelConfig::for_task(TaskKind::Parts);
        c.decoder.pop();
        let err = validate_config(&c).unwrap_err().to_string();
        assert!(err.contains("decoder count"), "{err}");
    }

    #[test]
    fn reports_every_violation() {
        let mut c = ModelConfig::for_task(TaskKind::Parts);
        c.stages[2].in_channels = 7;
        c.stages[5].dilation_rates = vec![1, 2, 2, 8];
        c.decoder[3].in_channels = 5;
        match validate_config(&c) {
            Err(Error::InvalidConfig(p)) => {
                assert!(p.iter().any(|m| m.contains("stage 3 in = 7")));
                assert!(p.iter().any(|m| m.contains("dilation_rates malformed")));
                assert!(p.iter().any(|m| m.contains("decoder 4 in = 5")));
            }
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn rsu4f_rates_must_match_depth() {
        let ok = RsuConfig { dilation_rates: vec![1, 2, 4, 8], ..RsuConfig::dilated(4, 8, 4, 8) };
        assert!(ok.problems("b").is_empty());
        let short = RsuConfig { dilation_rates: vec![1, 2, 4], ..ok.clone() };
        assert!(!short.problems("b").is_empty());
        let not_one = RsuConfig { dilation_rates: vec![2, 4, 8, 16], ..ok };
        assert!(!not_one.problems("b").is_empty());
    }

    #[test]
    fn wrong_encoder_level_count() {
        let mut c = ModelConfig::compact(TaskKind::Binary);
        c.stages.truncate(5);
        let err = validate_config(&c).unwrap_err().to_string();
        assert!(err.contains("encoder level count"));
    }

    #[test]
    fn toml_round_trip_uses_documented_keys() {
        let c = ModelConfig::compact(TaskKind::Type);
        let text = c.to_toml().unwrap();
        for key in ["num_classes", "[[stages]]", "[[decoder]]", "depth", "in =", "mid =", "out =", "dilation_rates", "normalization", "input_divisor"] {
            assert!(text.contains(key), "missing {key} in\n{text}");
        }
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), c);
    }
}

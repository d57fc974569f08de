use ndarray::Array4;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::blocks::{rng_from_seed, Conv, NestedBlock, ParamBuilder, UBlock, UnitKind};
use crate::model::config::{validate_config, ModelConfig, Normalization, RsuConfig, ValidatedConfig, INPUT_CHANNELS};

#[derive(Debug, Clone)]
struct Network {
    level1: NestedBlock,
    /// Residual-U stages, levels 2-5.
    stages: Vec<UBlock>,
    bottleneck: UBlock,
    decoder: Vec<UBlock>,
    head: Conv,
}

/// The full nested U-structure with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Float> {
    config: ValidatedConfig,
    params: ParamStore<T>,
    net: Network,
}

impl<T: Float> Model<T> {
    /// Builds a model with seeded initialization. Parameter names and shapes
    /// depend only on `config`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let config = validate_config(config)?;
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng, config.normalization);
        let st = &config.stages;
        let level1 = NestedBlock::new(&mut b, "enc1", &st[0]);
        let stages = (1..5).map(|i| UBlock::new(&mut b, &format!("enc{}", i + 1), &st[i], UnitKind::Residual)).collect();
        let bottleneck = UBlock::new(&mut b, "enc6", &st[5], UnitKind::Plain);
        let decoder = config
            .decoder
            .iter()
            .enumerate()
            .map(|(k, d)| UBlock::new(&mut b, &format!("dec{}", k + 1), d, UnitKind::Plain))
            .collect();
        let head = b.conv("head", config.head_in_channels, config.num_classes, 3, 1, true);
        let net = Network { level1, stages, bottleneck, decoder, head };
        Ok(Self { config, params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config.config()
    }

    pub fn layout(&self) -> &ValidatedConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Checks the input against the model's preconditions.
    pub fn check_input(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = dim;
        if c != INPUT_CHANNELS {
            return Err(Error::ChannelMismatch { expected: INPUT_CHANNELS, found: c });
        }
        let d = self.config.input_divisor;
        if h == 0 || h % d != 0 {
            return Err(Error::Indivisible { axis: 'H', size: h, divisor: d });
        }
        if w == 0 || w % d != 0 {
            return Err(Error::Indivisible { axis: 'W', size: w, divisor: d });
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the logits node.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, x: Array4<T>) -> Result<Var> {
        self.check_input(x.dim())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        let net = &self.net;
        let x = g.input(x);
        let e1 = net.level1.forward(g, x);
        let mut skips = vec![e1];
        let mut h = e1;
        for stage in &net.stages {
            let p = g.maxpool2(h);
            h = stage.forward(g, p);
            skips.push(h);
        }
        let mut d = net.bottleneck.forward(g, h);
        for (k, block) in net.decoder.iter().enumerate() {
            let skip = skips[self.config.decoder_skips[k]];
            let (_, _, sh, sw) = g.dim(skip);
            let up = if k == 0 { d } else { g.upsample2_to(d, sh, sw) };
            let cat = g.concat(&[up, skip]);
            d = block.forward(g, cat);
        }
        let (_, _, fh, fw) = g.dim(e1);
        let up = g.upsample2_to(d, fh, fw);
        let cat = g.concat(&[up, e1]);
        Ok(net.head.forward(g, cat))
    }

    /// Inference-mode logits `[N, num_classes, H, W]`.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let mut g = Graph::new(&self.params, false);
        let out = self.forward_graph(&mut g, x.clone())?;
        Ok(g.into_value(out))
    }

    /// Overwrites parameter values by name; shapes must match.
    pub fn load_params<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, ndarray::ArrayD<T>)>) -> Result<()> {
        for (name, value) in named {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name}")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        self.config.normalization
    }
}

/// A single RSU / RSU-4F block with its own parameters, for standalone use.
#[derive(Debug, Clone)]
pub struct RsuBlock<T: Float> {
    params: ParamStore<T>,
    block: UBlock,
}

impl<T: Float> RsuBlock<T> {
    pub fn new(config: &RsuConfig, normalization: Normalization, seed: u64) -> Result<Self> {
        let problems = config.problems("block");
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng, normalization);
        let block = UBlock::new(&mut b, "rsu", config, UnitKind::Plain);
        Ok(Self { params, block })
    }

    pub fn config(&self) -> &RsuConfig {
        self.block.config()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameters of the internal U path (excludes the input projection).
    pub fn internal_param_ids(&self) -> Vec<ParamId> {
        self.block.internal_param_ids()
    }

    fn check(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let cfg = self.block.config();
        let (_, c, h, w) = dim;
        if c != cfg.in_channels {
            return Err(Error::ChannelMismatch { expected: cfg.in_channels, found: c });
        }
        let min = cfg.min_side();
        if h < min || w < min {
            return Err(Error::TooSmall { height: h, width: w, depth: cfg.depth, min });
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph<'_, T>, x: Array4<T>) -> Result<Var> {
        self.check(x.dim())?;
        let x = g.input(x);
        Ok(self.block.forward(g, x))
    }

    /// Output of the block, `[N, out, H, W]`.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let mut g = Graph::new(&self.params, false);
        let out = self.forward_graph(&mut g, x.clone())?;
        Ok(g.into_value(out))
    }

    /// Output of the input-projection branch alone.
    pub fn projection(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check(x.dim())?;
        let mut g = Graph::new(&self.params, false);
        let xi = g.input(x.clone());
        let out = self.block.project(&mut g, xi);
        Ok(g.into_value(out))
    }

    /// Spatial size of every node recorded by one forward pass.
    pub fn activation_sizes(&self, x: &Array4<T>) -> Result<Vec<(usize, usize)>> {
        let mut g = Graph::new(&self.params, false);
        self.forward_graph(&mut g, x.clone())?;
        Ok(g.node_dims().map(|(_, _, h, w)| (h, w)).collect())
    }
}

/// Convenience wrapper: RSU forward for a pooled block.
pub fn rsu_forward<T: Float>(block: &RsuBlock<T>, x: &Array4<T>) -> Result<Array4<T>> {
    if block.config().dilated {
        return Err(Error::Config("rsu_forward expects a pooled block; use rsu4f_forward".into()));
    }
    block.forward(x)
}

/// Convenience wrapper: resolution-preserving RSU-4F forward.
pub fn rsu4f_forward<T: Float>(block: &RsuBlock<T>, x: &Array4<T>) -> Result<Array4<T>> {
    if !block.config().dilated {
        return Err(Error::Config("rsu4f_forward expects a dilated block".into()));
    }
    block.forward(x)
}

/// Runs the model on `x` in inference mode.
pub fn model_forward<T: Float>(model: &Model<T>, x: &Array4<T>) -> Result<Array4<T>> {
    model.forward(x)
}

pub fn parameter_count<T: Float>(model: &Model<T>) -> usize {
    model.parameter_count()
}

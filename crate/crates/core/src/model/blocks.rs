//! Building blocks of the nested U-structure.
//!
//! Every block is U-shaped. Its units are either `conv -> norm -> leaky`
//! ([`ConvUnit`]) or residual basic blocks ([`ResidualUnit`]), giving:
//!
//! * RSU: pooled U-block of conv units plus an input projection added back
//!   to the output (decoder blocks);
//! * RSU-4F: the same with dilated convolutions instead of pooling, so every
//!   internal map keeps the input resolution (bottleneck);
//! * residual-U: RSU topology built from residual units (encoder levels 2-5);
//! * nested unit: a dense-skip (UNet++) grid of residual units (level 1).

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, NormStats, ParamId, ParamStore, Var};
use crate::float::Float;
use crate::model::config::{Normalization, RsuConfig, NORM_EPS};

/// Registers parameters under a hierarchical name with seeded initialization.
pub(crate) struct ParamBuilder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    normalization: Normalization,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub(crate) fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, normalization: Normalization) -> Self {
        Self { store, rng, normalization }
    }

    /// Kaiming-normal weights (fan-in, gain sqrt(2)) and zero bias.
    pub(crate) fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, dilation: usize, bias: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                T::lit(z * std)
            })
            .collect();
        let weight = self
            .store
            .insert(format!("{name}.weight"), ArrayD::from_shape_vec(IxDyn(&[cout, cin, k, k]), data).expect("shape"));
        let bias = bias.then(|| self.store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Conv { weight, bias, dilation }
    }

    pub(crate) fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let gamma = self.store.insert(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), T::one()));
        let beta = self.store.insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        let stats = match self.normalization {
            Normalization::Instance => NormStats::Instance,
            Normalization::Batch => NormStats::Batch {
                running_mean: self
                    .store
                    .insert_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
                running_var: self
                    .store
                    .insert_buffer(format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            },
        };
        Norm { gamma, beta, stats }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub(crate) weight: ParamId,
    pub(crate) bias: Option<ParamId>,
    pub(crate) dilation: usize,
}

impl Conv {
    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.conv2d(x, self.weight, self.bias, self.dilation)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) stats: NormStats,
}

impl Norm {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.norm(x, self.gamma, self.beta, self.stats, T::lit(NORM_EPS))
    }
}

/// 3x3 convolution, normalization, leaky activation.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    conv: Conv,
    norm: Norm,
    slope: f64,
}

impl ConvUnit {
    fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, dilation: usize, slope: f64) -> Self {
        Self { conv: b.conv(&format!("{name}.conv"), cin, cout, 3, dilation, true), norm: b.norm(&format!("{name}.norm"), cout), slope }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv.forward(g, x);
        let h = self.norm.forward(g, h);
        g.leaky_relu(h, T::lit(self.slope))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv.weight, self.norm.gamma, self.norm.beta];
        v.extend(self.conv.bias);
        v
    }
}

/// Basic residual block: two 3x3 conv/norm layers with an identity (or 1x1
/// projection) shortcut, activation after the sum.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    first: ConvUnit,
    conv2: Conv,
    norm2: Norm,
    shortcut: Option<(Conv, Norm)>,
    slope: f64,
}

impl ResidualUnit {
    fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, dilation: usize, slope: f64) -> Self {
        let first = ConvUnit::new(b, &format!("{name}.unit1"), cin, cout, dilation, slope);
        let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, dilation, true);
        let norm2 = b.norm(&format!("{name}.norm2"), cout);
        let shortcut = (cin != cout).then(|| {
            (b.conv(&format!("{name}.shortcut.conv"), cin, cout, 1, 1, true), b.norm(&format!("{name}.shortcut.norm"), cout))
        });
        Self { first, conv2, norm2, shortcut, slope }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = self.conv2.forward(g, h);
        let h = self.norm2.forward(g, h);
        let s = match &self.shortcut {
            Some((c, n)) => {
                let s = c.forward(g, x);
                n.forward(g, s)
            }
            None => x,
        };
        let sum = g.add(h, s);
        g.leaky_relu(sum, T::lit(self.slope))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.first.param_ids();
        v.extend([self.conv2.weight, self.norm2.gamma, self.norm2.beta]);
        v.extend(self.conv2.bias);
        if let Some((c, n)) = &self.shortcut {
            v.extend([c.weight, n.gamma, n.beta]);
            v.extend(c.bias);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Plain,
    Residual,
}

#[derive(Debug, Clone)]
pub enum Unit {
    Plain(ConvUnit),
    Residual(ResidualUnit),
}

impl Unit {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        kind: UnitKind,
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        dilation: usize,
        slope: f64,
    ) -> Self {
        match kind {
            UnitKind::Plain => Unit::Plain(ConvUnit::new(b, name, cin, cout, dilation, slope)),
            UnitKind::Residual => Unit::Residual(ResidualUnit::new(b, name, cin, cout, dilation, slope)),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Unit::Plain(u) => u.forward(g, x),
            Unit::Residual(u) => u.forward(g, x),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Unit::Plain(u) => u.param_ids(),
            Unit::Residual(u) => u.param_ids(),
        }
    }
}

/// Upsamples `x` by two and crops it to the spatial size of `like`.
fn upsample_like<T: Float>(g: &mut Graph<'_, T>, x: Var, like: Var) -> Var {
    let (_, _, h, w) = g.dim(like);
    if g.dim(x).2 == h && g.dim(x).3 == w {
        return x;
    }
    g.upsample2_to(x, h, w)
}

/// RSU / RSU-4F / residual-U block.
#[derive(Debug, Clone)]
pub struct UBlock {
    pub(crate) config: RsuConfig,
    input: Unit,
    encoder: Vec<Unit>,
    bottom: Option<Unit>,
    decoder: Vec<Unit>,
}

impl UBlock {
    pub(crate) fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &RsuConfig, kind: UnitKind) -> Self {
        let (cin, mid, cout, depth, slope) =
            (cfg.in_channels, cfg.mid_channels, cfg.out_channels, cfg.depth, cfg.negative_slope);
        let rate = |i: usize| if cfg.dilated { cfg.dilation_rates[i] } else { 1 };
        let input = Unit::new(kind, b, &format!("{name}.input"), cin, cout, 1, slope);
        let encoder = (0..depth)
            .map(|i| Unit::new(kind, b, &format!("{name}.enc{i}"), if i == 0 { cout } else { mid }, mid, rate(i), slope))
            .collect();
        let bottom = (!cfg.dilated).then(|| Unit::new(kind, b, &format!("{name}.bottom"), mid, mid, 2, slope));
        // Dilated blocks reuse the deepest encoder unit as their bottom.
        let decoder_levels = if cfg.dilated { depth - 1 } else { depth };
        let decoder = (0..decoder_levels)
            .map(|i| Unit::new(kind, b, &format!("{name}.dec{i}"), 2 * mid, if i == 0 { cout } else { mid }, rate(i), slope))
            .collect();
        Self { config: cfg.clone(), input, encoder, bottom, decoder }
    }

    pub fn config(&self) -> &RsuConfig {
        &self.config
    }

    /// Input projection: the branch added back to the U output.
    pub(crate) fn project<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        self.input.forward(g, x)
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let hin = self.project(g, x);
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = hin;
        for (i, unit) in self.encoder.iter().enumerate() {
            if i > 0 && !self.config.dilated {
                h = g.maxpool2(h);
            }
            h = unit.forward(g, h);
            skips.push(h);
        }
        let mut d = match &self.bottom {
            Some(bottom) => {
                let b = bottom.forward(g, h);
                let cat = g.concat(&[b, skips[depth - 1]]);
                self.decoder[depth - 1].forward(g, cat)
            }
            None => h,
        };
        for i in (0..depth - 1).rev() {
            let up = upsample_like(g, d, skips[i]);
            let cat = g.concat(&[up, skips[i]]);
            d = self.decoder[i].forward(g, cat);
        }
        g.add(d, hin)
    }

    /// Parameters of the internal U path (everything except the projection).
    pub fn internal_param_ids(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .chain(self.bottom.iter())
            .chain(self.decoder.iter())
            .flat_map(Unit::param_ids)
            .collect()
    }
}

/// Dense-skip nested unit built from residual units. Node `(i, j)` sits at
/// scale `1/2^i`; column `j > 0` concatenates every earlier node of its row
/// with the upsampled node `(i + 1, j - 1)`.
#[derive(Debug, Clone)]
pub struct NestedBlock {
    pub(crate) config: RsuConfig,
    nodes: Vec<Vec<ResidualUnit>>,
}

impl NestedBlock {
    pub(crate) fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &RsuConfig) -> Self {
        let (cin, mid, cout, depth, slope) =
            (cfg.in_channels, cfg.mid_channels, cfg.out_channels, cfg.depth, cfg.negative_slope);
        let nodes = (0..depth)
            .map(|i| {
                (0..depth - i)
                    .map(|j| {
                        let node_in = if j == 0 { if i == 0 { cin } else { mid } } else { (j + 1) * mid };
                        let node_out = if i == 0 && j == depth - 1 { cout } else { mid };
                        ResidualUnit::new(b, &format!("{name}.x{i}{j}"), node_in, node_out, 1, slope)
                    })
                    .collect()
            })
            .collect();
        Self { config: cfg.clone(), nodes }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let depth = self.config.depth;
        let mut out: Vec<Vec<Var>> = vec![Vec::new(); depth];
        let mut h = x;
        for i in 0..depth {
            if i > 0 {
                h = g.maxpool2(h);
            }
            h = self.nodes[i][0].forward(g, h);
            out[i].push(h);
        }
        for j in 1..depth {
            for i in 0..depth - j {
                let below = out[i + 1][j - 1];
                let up = upsample_like(g, below, out[i][0]);
                let mut parts = out[i].clone();
                parts.push(up);
                let cat = g.concat(&parts);
                let node = self.nodes[i][j].forward(g, cat);
                out[i].push(node);
            }
        }
        out[0][depth - 1]
    }
}

/// Receptive field of a chain of dilated `kernel x kernel` convolutions.
pub fn dilated_receptive_field(kernel: usize, rates: &[usize]) -> usize {
    1 + (kernel - 1) * rates.iter().sum::<usize>()
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

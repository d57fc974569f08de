//! Minimal reverse-mode differentiation over NCHW feature maps.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation
//! applied during a forward pass, and [`Graph::backward`] walks the tape in
//! reverse to produce parameter gradients. Losses live outside the graph:
//! they hand back the gradient with respect to the logits, which seeds the
//! backward pass.

pub mod kernels;
mod params;

pub use params::{BufferId, NamedTensor, ParamId, ParamStore};

use ndarray::{s, Array4, ArrayD, Axis, Ix4, IxDyn};

use crate::float::Float;
use kernels::StatsScope;

/// Node handle on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Statistics source for a normalization node.
#[derive(Debug, Clone, Copy)]
pub enum NormStats {
    Instance,
    Batch { running_mean: BufferId, running_var: BufferId },
}

enum Op<T> {
    Leaf,
    Conv { x: Var, weight: ParamId, bias: Option<ParamId>, dilation: usize },
    Norm { x: Var, gamma: ParamId, beta: ParamId, xhat: Array4<T>, inv_std: Vec<T>, scope: StatsScope },
    FrozenNorm { x: Var, gamma: ParamId, beta: ParamId, mean: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var },
}

struct Node<T> {
    value: Array4<T>,
    op: Op<T>,
}

/// Batch statistics observed by a batch-norm node in training mode.
#[derive(Debug, Clone)]
pub struct BufferUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    training: bool,
    updates: Vec<BufferUpdate<T>>,
}

/// Parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<ArrayD<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        Self { grads: store.zeros_like() }
    }

    /// Wraps per-parameter arrays given in store order.
    pub fn from_values(grads: Vec<ArrayD<T>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<T>> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    fn add(&mut self, id: ParamId, delta: ArrayD<T>) {
        self.grads[id.0] += &delta;
    }
}

fn as4<T: Float>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("4-d parameter")
}

fn as1<T: Float>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("contiguous parameter")
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, training: bool) -> Self {
        Self { params, nodes: Vec::new(), training, updates: Vec::new() }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, x: Array4<T>) -> Var {
        self.push(x.as_standard_layout().into_owned(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> (usize, usize, usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every recorded node, in creation order.
    pub fn node_dims(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.nodes.iter().map(|n| n.value.dim())
    }

    pub fn into_value(mut self, v: Var) -> Array4<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Array4::zeros((0, 0, 0, 0)))
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.updates)
    }

    pub fn conv2d(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>, dilation: usize) -> Var {
        let w = as4(self.params.get(weight)).to_owned();
        let b = bias.map(|b| as1(self.params.get(b)));
        let y = kernels::conv2d_forward(self.value(x), &w, b, dilation);
        self.push(y, Op::Conv { x, weight, bias, dilation })
    }

    pub fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: NormStats, eps: T) -> Var {
        let g = as1(self.params.get(gamma));
        let b = as1(self.params.get(beta));
        match stats {
            NormStats::Instance => {
                let f = kernels::norm_forward(self.value(x), g, b, eps, StatsScope::Instance);
                self.push(f.y, Op::Norm { x, gamma, beta, xhat: f.xhat, inv_std: f.inv_std, scope: StatsScope::Instance })
            }
            NormStats::Batch { running_mean, running_var } if self.training => {
                let f = kernels::norm_forward(self.value(x), g, b, eps, StatsScope::Batch);
                let (n, _, h, w) = self.dim(x);
                let count = (n * h * w) as f64;
                let correction = if count > 1.0 { T::lit(count / (count - 1.0)) } else { T::one() };
                self.updates.push(BufferUpdate {
                    running_mean,
                    running_var,
                    batch_mean: f.mean,
                    batch_var: f.var.iter().map(|&v| v * correction).collect(),
                });
                self.push(f.y, Op::Norm { x, gamma, beta, xhat: f.xhat, inv_std: f.inv_std, scope: StatsScope::Batch })
            }
            NormStats::Batch { running_mean, running_var } => {
                let mean = as1(self.params.buffer(running_mean));
                let var = as1(self.params.buffer(running_var));
                let y = kernels::frozen_norm_forward(self.value(x), g, b, mean, var, eps);
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mean = mean.to_vec();
                self.push(y, Op::FrozenNorm { x, gamma, beta, mean, inv_std })
            }
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = kernels::leaky_relu(self.value(x), slope);
        self.push(y, Op::LeakyRelu { x, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "add shape mismatch");
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat: spatial sizes must agree");
        self.push(y.as_standard_layout().into_owned(), Op::Concat { parts: parts.to_vec() })
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (y, argmax) = kernels::maxpool2_forward(self.value(x));
        self.push(y, Op::MaxPool { x, argmax })
    }

    /// Bilinear x2 upsampling cropped to `out_h x out_w`.
    pub fn upsample2_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let y = kernels::upsample2_forward(self.value(x), out_h, out_w);
        self.push(y, Op::Upsample { x })
    }

    /// Back-propagates `seed` (gradient of a scalar objective with respect to
    /// `output`) through the recorded tape.
    pub fn backward(&self, output: Var, seed: Array4<T>) -> Gradients<T> {
        assert_eq!(seed.dim(), self.dim(output), "seed gradient shape");
        let mut grads = Gradients::zeros(self.params);
        let mut node_grads: Vec<Option<Array4<T>>> = (0..=output.0).map(|_| None).collect();
        node_grads[output.0] = Some(seed);

        fn acc<T: Float>(slot: &mut Option<Array4<T>>, g: Array4<T>) {
            match slot {
                Some(cur) => *cur += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = node_grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv { x, weight, bias, dilation } => {
                    let w = as4(self.params.get(*weight)).to_owned();
                    let need_dx = !matches!(self.nodes[x.0].op, Op::Leaf);
                    let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), &w, &dy, *dilation, need_dx);
                    grads.add(*weight, dw.into_dyn());
                    if let Some(b) = bias {
                        grads.add(*b, ArrayD::from_shape_vec(IxDyn(&[db.len()]), db).expect("bias"));
                    }
                    if let Some(dx) = dx {
                        acc(&mut node_grads[x.0], dx);
                    }
                }
                Op::Norm { x, gamma, beta, xhat, inv_std, scope } => {
                    let g = as1(self.params.get(*gamma));
                    let (dx, dg, db) = kernels::norm_backward(&dy, xhat, inv_std, g, *scope);
                    grads.add(*gamma, ArrayD::from_shape_vec(IxDyn(&[dg.len()]), dg).expect("gamma"));
                    grads.add(*beta, ArrayD::from_shape_vec(IxDyn(&[db.len()]), db).expect("beta"));
                    acc(&mut node_grads[x.0], dx);
                }
                Op::FrozenNorm { x, gamma, beta, mean, inv_std } => {
                    let g = as1(self.params.get(*gamma));
                    let xv = self.value(*x);
                    let c = g.len();
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    let mut dx = dy.clone();
                    for ch in 0..c {
                        let dyc = dy.slice(s![.., ch, .., ..]);
                        let xc = xv.slice(s![.., ch, .., ..]);
                        db[ch] = dyc.sum();
                        dg[ch] = ndarray::Zip::from(&dyc)
                            .and(&xc)
                            .fold(T::zero(), |a, &d, &v| a + d * (v - mean[ch]) * inv_std[ch]);
                        dx.slice_mut(s![.., ch, .., ..]).mapv_inplace(|d| d * g[ch] * inv_std[ch]);
                    }
                    grads.add(*gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dg).expect("gamma"));
                    grads.add(*beta, ArrayD::from_shape_vec(IxDyn(&[c]), db).expect("beta"));
                    acc(&mut node_grads[x.0], dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = kernels::leaky_relu_backward(&dy, &self.nodes[idx].value, *slope);
                    acc(&mut node_grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    acc(&mut node_grads[b.0], dy.clone());
                    acc(&mut node_grads[a.0], dy);
                }
                Op::Concat { parts } => {
                    let mut c0 = 0;
                    for p in parts {
                        let c = self.dim(*p).1;
                        let part = dy.slice(s![.., c0..c0 + c, .., ..]).to_owned();
                        acc(&mut node_grads[p.0], part);
                        c0 += c;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let (_, _, h, w) = self.dim(*x);
                    acc(&mut node_grads[x.0], kernels::maxpool2_backward(&dy, argmax, h, w));
                }
                Op::Upsample { x } => {
                    let (_, _, h, w) = self.dim(*x);
                    acc(&mut node_grads[x.0], kernels::upsample2_backward(&dy, h, w));
                }
            }
        }
        grads
    }
}

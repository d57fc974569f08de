//! Cross-entropy plus negative-log soft-Jaccard segmentation loss.
//!
//! The Jaccard term is a ratio of sums over every pixel of the batch,
//! `(sum p*m + eps) / (sum (p + m) - sum p*m + eps)`, which stays defined on
//! all-background inputs. Sums and gradients are accumulated in `f64`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::task::{BaseLoss, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Guards the Jaccard ratio and its logarithm.
    pub epsilon: f64,
    pub jaccard_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1e-15, jaccard_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.jaccard_weight.is_finite() && self.jaccard_weight >= 0.0) {
            return Err(Error::Config(format!("jaccard_weight must be finite and >= 0, got {}", self.jaccard_weight)));
        }
        Ok(())
    }
}

/// Soft Jaccard index of `probs` against a {0,1} `target`.
pub fn soft_jaccard<T: Float>(probs: &[T], target: &[T], cfg: &LossConfig) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "soft_jaccard: {} probabilities vs {} targets",
            probs.len(),
            target.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("soft_jaccard probabilities".into()));
    }
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &m) in probs.iter().zip(target) {
        let (p, m) = (p.as_f64(), m.as_f64());
        inter += p * m;
        total += p + m;
    }
    Ok((inter + cfg.epsilon) / (total - inter + cfg.epsilon))
}

/// Value and logit gradient of [`segmentation_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub total: f64,
    /// Cross-entropy part (binary or multiclass).
    pub base: f64,
    /// Soft Jaccard index entering `-log J`.
    pub jaccard: f64,
    /// Classes that took part in the Jaccard mean.
    pub jaccard_classes: Vec<usize>,
    /// d total / d logits, same shape as the logits.
    pub grad: Array4<T>,
}

impl<T> LossOutput<T> {
    pub fn jaccard_term(&self, cfg: &LossConfig) -> f64 {
        -cfg.jaccard_weight * self.jaccard.ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Partial derivative of the soft Jaccard ratio with respect to one probability.
fn jaccard_partial(target: f64, inter: f64, union: f64) -> f64 {
    (target * union - inter * (1.0 - target)) / (union * union)
}

/// `H + w * (-log J)` where `H` is binary cross-entropy on logits (binary task)
/// or softmax cross-entropy (multiclass), both averaged over pixels.
pub fn segmentation_loss<T: Float>(
    logits: &Array4<T>,
    target: &Array3<u8>,
    task: &TaskSpec,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    task.validate()?;
    let (n, c, h, w) = logits.dim();
    if c != task.num_classes {
        return Err(Error::ChannelMismatch { expected: task.num_classes, found: c });
    }
    if target.dim() != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let classes = task.kind.label_classes();
    if let Some(bad) = target.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::InvalidLabel(format!("target class {bad} outside [0, {classes})")));
    }
    if n * h * w == 0 {
        return Err(Error::Empty("segmentation_loss on an empty batch".into()));
    }
    let logits = logits.as_standard_layout();
    let target = target.as_standard_layout();
    let xs = logits.as_slice().expect("standard layout");
    let ts = target.as_slice().expect("standard layout");
    match task.base_loss {
        BaseLoss::BceLogits => Ok(binary_loss(xs, ts, (n, c, h, w), cfg)),
        BaseLoss::CrossEntropy => Ok(multiclass_loss(xs, ts, (n, c, h, w), task.include_background_in_jaccard, cfg)),
    }
}

fn binary_loss<T: Float>(xs: &[T], ts: &[u8], dim: (usize, usize, usize, usize), cfg: &LossConfig) -> LossOutput<T> {
    let m = xs.len() as f64;
    let mut probs = Vec::with_capacity(xs.len());
    let (mut bce, mut inter, mut total) = (0.0, 0.0, 0.0);
    for (&x, &t) in xs.iter().zip(ts) {
        let (x, t) = (x.as_f64(), t as f64);
        bce += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        let p = sigmoid(x);
        inter += p * t;
        total += p + t;
        probs.push(p);
    }
    let base = bce / m;
    let inter_e = inter + cfg.epsilon;
    let union_e = total - inter + cfg.epsilon;
    let jaccard = inter_e / union_e;
    let w = cfg.jaccard_weight;
    let grad: Vec<T> = probs
        .iter()
        .zip(ts)
        .map(|(&p, &t)| {
            let t = t as f64;
            let d_base = (p - t) / m;
            let d_jac = -w / jaccard * jaccard_partial(t, inter_e, union_e) * p * (1.0 - p);
            T::lit(d_base + d_jac)
        })
        .collect();
    LossOutput {
        total: base - w * jaccard.ln(),
        base,
        jaccard,
        jaccard_classes: vec![1],
        grad: Array4::from_shape_vec(dim, grad).expect("logit shape"),
    }
}

fn multiclass_loss<T: Float>(
    xs: &[T],
    ts: &[u8],
    (n, c, h, w): (usize, usize, usize, usize),
    include_background: bool,
    cfg: &LossConfig,
) -> LossOutput<T> {
    let hw = h * w;
    let m = (n * hw) as f64;
    // Softmax probabilities, laid out like the logits.
    let mut sm = vec![0.0f64; xs.len()];
    let mut ce = 0.0;
    let mut target_count = vec![0usize; c];
    let mut argmax_count = vec![0usize; c];
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    for b in 0..n {
        for i in 0..hw {
            let at = |k: usize| b * c * hw + k * hw + i;
            let mut best = 0;
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                let v = xs[at(k)].as_f64();
                if v > mx {
                    mx = v;
                    best = k;
                }
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (xs[at(k)].as_f64() - mx).exp();
                sm[at(k)] = e;
                z += e;
            }
            let t = ts[b * hw + i] as usize;
            ce += z.ln() - (xs[at(t)].as_f64() - mx);
            for k in 0..c {
                sm[at(k)] /= z;
                psum[k] += sm[at(k)];
            }
            inter[t] += sm[at(t)];
            target_count[t] += 1;
            argmax_count[best] += 1;
        }
    }
    let base = ce / m;
    let first = if include_background { 0 } else { 1 };
    let active: Vec<usize> = (first..c).filter(|&k| target_count[k] > 0 || argmax_count[k] > 0).collect();
    let stats: Vec<(f64, f64)> = active
        .iter()
        .map(|&k| {
            let ie = inter[k] + cfg.epsilon;
            let ue = psum[k] + target_count[k] as f64 - inter[k] + cfg.epsilon;
            (ie, ue)
        })
        .collect();
    let jaccard = if active.is_empty() {
        1.0
    } else {
        stats.iter().map(|(i, u)| i / u).sum::<f64>() / active.len() as f64
    };
    let wgt = cfg.jaccard_weight;
    let scale = if active.is_empty() { 0.0 } else { -wgt / (jaccard * active.len() as f64) };

    let mut grad = vec![T::zero(); xs.len()];
    let mut gprob = vec![0.0f64; c];
    for b in 0..n {
        for i in 0..hw {
            let at = |k: usize| b * c * hw + k * hw + i;
            let t = ts[b * hw + i] as usize;
            gprob.iter_mut().for_each(|g| *g = 0.0);
            for (&k, &(ie, ue)) in active.iter().zip(&stats) {
                let tk = if t == k { 1.0 } else { 0.0 };
                gprob[k] = scale * jaccard_partial(tk, ie, ue);
            }
            let dot: f64 = (0..c).map(|k| gprob[k] * sm[at(k)]).sum();
            for k in 0..c {
                let s = sm[at(k)];
                let onehot = if t == k { 1.0 } else { 0.0 };
                grad[at(k)] = T::lit((s - onehot) / m + s * (gprob[k] - dot));
            }
        }
    }
    LossOutput {
        total: base - wgt * jaccard.ln(),
        base,
        jaccard,
        jaccard_classes: active,
        grad: Array4::from_shape_vec((n, c, h, w), grad).expect("logit shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;
    use ndarray::Array;

    #[test]
    fn identical_probs_give_one() {
        let t = [1.0f64, 0.0, 1.0, 1.0];
        assert_eq!(soft_jaccard(&t, &t, &LossConfig::default()).unwrap(), 1.0);
        let zeros = [0.0f64; 4];
        assert_eq!(soft_jaccard(&zeros, &zeros, &LossConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn worked_example_gives_point_six() {
        let j = soft_jaccard(&[1.0f64, 0.5, 0.5, 0.0], &[1.0, 1.0, 0.0, 0.0], &LossConfig::default()).unwrap();
        assert!((j - 0.6).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_near_zero() {
        let j = soft_jaccard(&[0.0f64, 0.0, 1.0], &[1.0, 1.0, 0.0], &LossConfig::default()).unwrap();
        assert!(j < 1e-14);
    }

    #[test]
    fn soft_jaccard_shape_mismatch() {
        assert!(soft_jaccard(&[0.5f64], &[1.0, 0.0], &LossConfig::default()).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let task = TaskSpec::new(TaskKind::Parts);
        let cfg = LossConfig::default();
        let logits = Array4::<f64>::zeros((1, 3, 2, 2));
        assert!(matches!(
            segmentation_loss(&logits, &Array3::zeros((1, 2, 2)), &task, &cfg),
            Err(Error::ChannelMismatch { .. })
        ));
        let mut logits = Array4::<f64>::zeros((1, 4, 2, 2));
        let bad_target = Array3::from_elem((1, 2, 2), 5u8);
        assert!(segmentation_loss(&logits, &bad_target, &task, &cfg).is_err());
        logits[[0, 0, 0, 0]] = f64::NAN;
        assert!(matches!(
            segmentation_loss(&logits, &Array3::zeros((1, 2, 2)), &task, &cfg),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn multiclass_gradient_matches_finite_differences() {
        let task = TaskSpec::new(TaskKind::Parts);
        let cfg = LossConfig::default();
        let mut logits = Array::from_iter((0..2 * 4 * 9).map(|i| ((i * 31 % 17) as f64 / 17.0 - 0.5) * 3.0))
            .into_shape_with_order((2, 4, 3, 3))
            .unwrap();
        let target = Array::from_iter((0..18).map(|i| [0u8, 1, 2, 0, 1, 0][i % 6]))
            .into_shape_with_order((2, 3, 3))
            .unwrap();
        let out = segmentation_loss(&logits, &target, &task, &cfg).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let orig = logits.as_slice().unwrap()[k];
            logits.as_slice_mut().unwrap()[k] = orig + h;
            let lp = segmentation_loss(&logits, &target, &task, &cfg).unwrap().total;
            logits.as_slice_mut().unwrap()[k] = orig - h;
            let lm = segmentation_loss(&logits, &target, &task, &cfg).unwrap().total;
            logits.as_slice_mut().unwrap()[k] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = out.grad.as_slice().unwrap()[k];
            assert!((num - ana).abs() < 1e-7 + 1e-6 * num.abs(), "k={k} num={num} ana={ana}");
        }
    }

    #[test]
    fn binary_gradient_matches_finite_differences() {
        let task = TaskSpec::new(TaskKind::Binary);
        let cfg = LossConfig { jaccard_weight: 0.7, ..Default::default() };
        let mut logits = Array::from_iter((0..12).map(|i| ((i * 13 % 11) as f64 / 11.0 - 0.5) * 4.0))
            .into_shape_with_order((1, 1, 3, 4))
            .unwrap();
        let target = Array::from_iter((0..12).map(|i| (i % 3 == 0) as u8)).into_shape_with_order((1, 3, 4)).unwrap();
        let out = segmentation_loss(&logits, &target, &task, &cfg).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let orig = logits.as_slice().unwrap()[k];
            logits.as_slice_mut().unwrap()[k] = orig + h;
            let lp = segmentation_loss(&logits, &target, &task, &cfg).unwrap().total;
            logits.as_slice_mut().unwrap()[k] = orig - h;
            let lm = segmentation_loss(&logits, &target, &task, &cfg).unwrap().total;
            logits.as_slice_mut().unwrap()[k] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - out.grad.as_slice().unwrap()[k]).abs() < 1e-8, "k={k}");
        }
    }
}

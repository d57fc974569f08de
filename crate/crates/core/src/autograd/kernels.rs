//! Raw NCHW kernels with their hand-derived backward passes.
//!
//! Convolutions are stride 1 with "same" padding (`dilation * (k - 1) / 2`)
//! and are lowered to GEMM through an im2col buffer built over bands of
//! output rows, so peak scratch memory stays bounded at large resolutions.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayViewMut2};

use crate::float::Float;

/// Upper bound on im2col scratch elements per band.
const COL_BUDGET: usize = 1 << 22;

fn band_rows(rows_per_unit: usize, height: usize) -> usize {
    (COL_BUDGET / rows_per_unit.max(1)).clamp(1, height.max(1))
}

/// Geometry of a same-padded dilated square kernel.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, dilation: usize) -> Self {
        Self { cin, h, w, k, dilation, pad: dilation * (k - 1) / 2 }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Valid output-column range for kernel column `kx`, and the input offset.
    fn col_span(&self, kx: usize) -> (usize, usize, isize) {
        let shift = (kx * self.dilation) as isize - self.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.w as isize) - shift).clamp(0, self.w as isize) as usize;
        (lo.min(hi), hi, shift)
    }
}

/// Fills `col` ([rows, band_h * w]) for output rows `[y0, y0 + band_h)`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, y0: usize, band_h: usize, col: &mut [T]) {
    let band = band_h * g.w;
    col[..g.rows() * band].fill(T::zero());
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let yshift = (ky * g.dilation) as isize - g.pad as isize;
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut col[r * band..(r + 1) * band];
                let (lo, hi, xshift) = g.col_span(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..band_h {
                    let iy = (y0 + oy) as isize + yshift;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = iy as usize * g.w;
                    let ilo = (lo as isize + xshift) as usize;
                    let ihi = (hi as isize + xshift) as usize;
                    row[oy * g.w + lo..oy * g.w + hi].copy_from_slice(&plane[src + ilo..src + ihi]);
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the image gradient `dx`.
fn col2im<T: Float>(col: &[T], g: &ConvGeom, y0: usize, band_h: usize, dx: &mut [T]) {
    let band = band_h * g.w;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let yshift = (ky * g.dilation) as isize - g.pad as isize;
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &col[r * band..(r + 1) * band];
                let (lo, hi, xshift) = g.col_span(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..band_h {
                    let iy = (y0 + oy) as isize + yshift;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = iy as usize * g.w;
                    let ilo = (lo as isize + xshift) as usize;
                    let ihi = (hi as isize + xshift) as usize;
                    for (d, s) in plane[dst + ilo..dst + ihi]
                        .iter_mut()
                        .zip(&row[oy * g.w + lo..oy * g.w + hi])
                    {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix")
}

/// Same-padded stride-1 convolution. `weight` is `[cout, cin, k, k]`.
pub fn conv2d_forward<T: Float>(
    x: &Array4<T>,
    weight: &Array4<T>,
    bias: Option<&[T]>,
    dilation: usize,
) -> Array4<T> {
    let (n, cin, h, w) = x.dim();
    let (cout, wcin, k, _) = weight.dim();
    assert_eq!(cin, wcin, "conv input channels");
    let g = ConvGeom::new(cin, h, w, k, dilation);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let wt = weight.as_standard_layout();
    let wmat = view2(wt.as_slice().expect("standard layout"), cout, g.rows());
    let mut out = Array4::<T>::zeros((n, cout, h, w));
    let hw = h * w;
    let pointwise = k == 1;
    let rows_per_band = band_rows(g.rows() * w, h);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); g.rows() * rows_per_band * w] };
    {
        let os = out.as_slice_mut().expect("fresh array");
        for b in 0..n {
            let xb = &xs[b * cin * hw..(b + 1) * cin * hw];
            let ob = &mut os[b * cout * hw..(b + 1) * cout * hw];
            if pointwise {
                let mut om = view2_mut(ob, cout, hw);
                general_mat_mul(T::one(), &wmat, &view2(xb, cin, hw), T::zero(), &mut om);
            } else {
                let mut y0 = 0;
                while y0 < h {
                    let bh = rows_per_band.min(h - y0);
                    im2col(xb, &g, y0, bh, &mut col);
                    let cm = view2(&col[..g.rows() * bh * w], g.rows(), bh * w);
                    let mut tmp = ndarray::Array2::<T>::zeros((cout, bh * w));
                    general_mat_mul(T::one(), &wmat, &cm, T::zero(), &mut tmp);
                    for co in 0..cout {
                        let dst = &mut ob[co * hw + y0 * w..co * hw + (y0 + bh) * w];
                        dst.copy_from_slice(tmp.row(co).as_slice().expect("row"));
                    }
                    y0 += bh;
                }
            }
            if let Some(bias) = bias {
                for co in 0..cout {
                    let bv = bias[co];
                    ob[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Float>(
    x: &Array4<T>,
    weight: &Array4<T>,
    dout: &Array4<T>,
    dilation: usize,
    need_dx: bool,
) -> (Option<Array4<T>>, Array4<T>, Vec<T>) {
    let (n, cin, h, w) = x.dim();
    let (cout, _, k, _) = weight.dim();
    let g = ConvGeom::new(cin, h, w, k, dilation);
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dout = dout.as_standard_layout();
    let ds = dout.as_slice().expect("standard layout");
    let wt = weight.as_standard_layout();
    let wmat = view2(wt.as_slice().expect("standard layout"), cout, g.rows());

    let mut dw = Array4::<T>::zeros(weight.dim());
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_dx { Some(Array4::<T>::zeros(x.dim())) } else { None };
    let pointwise = k == 1;
    let rows_per_band = band_rows(g.rows() * w, h);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); g.rows() * rows_per_band * w] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); g.rows() * rows_per_band * w] };
    let mut dband = vec![T::zero(); cout * rows_per_band * w];

    let dws = dw.as_slice_mut().expect("fresh array");
    for b in 0..n {
        let xb = &xs[b * cin * hw..(b + 1) * cin * hw];
        let db_ = &ds[b * cout * hw..(b + 1) * cout * hw];
        for co in 0..cout {
            db[co] += db_[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        let mut dwm = view2_mut(dws, cout, g.rows());
        if pointwise {
            let dm = view2(db_, cout, hw);
            general_mat_mul(T::one(), &dm, &view2(xb, cin, hw).t(), T::one(), &mut dwm);
            if let Some(dx) = dx.as_mut() {
                let dxs = dx.as_slice_mut().expect("fresh array");
                let mut dxm = view2_mut(&mut dxs[b * cin * hw..(b + 1) * cin * hw], cin, hw);
                general_mat_mul(T::one(), &wmat.t(), &dm, T::zero(), &mut dxm);
            }
            continue;
        }
        let mut y0 = 0;
        while y0 < h {
            let bh = rows_per_band.min(h - y0);
            let cols = bh * w;
            for co in 0..cout {
                dband[co * cols..(co + 1) * cols]
                    .copy_from_slice(&db_[co * hw + y0 * w..co * hw + (y0 + bh) * w]);
            }
            let dm = view2(&dband[..cout * cols], cout, cols);
            im2col(xb, &g, y0, bh, &mut col);
            let cm = view2(&col[..g.rows() * cols], g.rows(), cols);
            general_mat_mul(T::one(), &dm, &cm.t(), T::one(), &mut dwm);
            if let Some(dx) = dx.as_mut() {
                let mut dcm = view2_mut(&mut dcol[..g.rows() * cols], g.rows(), cols);
                general_mat_mul(T::one(), &wmat.t(), &dm, T::zero(), &mut dcm);
                let dxs = dx.as_slice_mut().expect("fresh array");
                col2im(&dcol, &g, y0, bh, &mut dxs[b * cin * hw..(b + 1) * cin * hw]);
            }
            y0 += bh;
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 max pooling in ceil mode: an odd trailing row/column is
/// treated as padded with -inf, so the output is `ceil(h/2) x ceil(w/2)`.
/// Returns the flat in-plane argmax of every output element.
pub fn maxpool2_forward<T: Float>(x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    let mut arg = vec![0u32; n * c * oh * ow];
    let os = out.as_slice_mut().expect("fresh array");
    for p in 0..n * c {
        let plane = &xs[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for dy in 0..2 {
                    let iy = 2 * oy + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = 2 * ox + dx;
                        if ix >= w {
                            continue;
                        }
                        let v = plane[iy * w + ix];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = iy * w + ix;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                os[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Float>(dout: &Array4<T>, argmax: &[u32], in_h: usize, in_w: usize) -> Array4<T> {
    let (n, c, oh, ow) = dout.dim();
    let dout = dout.as_standard_layout();
    let ds = dout.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((n, c, in_h, in_w));
    let dxs = dx.as_slice_mut().expect("fresh array");
    for p in 0..n * c {
        for o in 0..oh * ow {
            let i = p * oh * ow + o;
            dxs[p * in_h * in_w + argmax[i] as usize] += ds[i];
        }
    }
    dx
}

/// Source taps for x2 bilinear upsampling with half-pixel centers
/// (`align_corners = false`): `(i0, i1, weight_of_i1)`.
fn upsample_taps<T: Float>(out_len: usize, in_len: usize) -> Vec<(usize, usize, T)> {
    let half = T::lit(0.5);
    (0..out_len)
        .map(|o| {
            let src = ((T::lit(o as f64) + half) * half - half).max(T::zero());
            let i0 = (src.floor().as_f64() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - T::lit(i0 as f64);
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear x2 upsampling evaluated only on the leading `out_h x out_w`
/// window, i.e. upsample then crop to the skip tensor's size.
pub fn upsample2_forward<T: Float>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let ty = upsample_taps::<T>(out_h, h);
    let tx = upsample_taps::<T>(out_w, w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((n, c, out_h, out_w));
    let os = out.as_slice_mut().expect("fresh array");
    for p in 0..n * c {
        let plane = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut os[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Float>(dout: &Array4<T>, in_h: usize, in_w: usize) -> Array4<T> {
    let (n, c, oh, ow) = dout.dim();
    let ty = upsample_taps::<T>(oh, in_h);
    let tx = upsample_taps::<T>(ow, in_w);
    let dout = dout.as_standard_layout();
    let ds = dout.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((n, c, in_h, in_w));
    let dxs = dx.as_slice_mut().expect("fresh array");
    for p in 0..n * c {
        let src = &ds[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dxs[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gy0 = g * (T::one() - fy);
                let gy1 = g * fy;
                dst[y0 * in_w + x0] += gy0 * (T::one() - fx);
                dst[y0 * in_w + x1] += gy0 * fx;
                dst[y1 * in_w + x0] += gy1 * (T::one() - fx);
                dst[y1 * in_w + x1] += gy1 * fx;
            }
        }
    }
    dx
}

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsScope {
    /// One mean/variance per (sample, channel).
    Instance,
    /// One mean/variance per channel across the batch.
    Batch,
}

/// Output of a statistics-based normalization forward pass.
pub struct NormForward<T> {
    pub y: Array4<T>,
    pub xhat: Array4<T>,
    /// Indexed by group: `n * c + ch` for instance scope, `ch` for batch scope.
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn group_of(scope: StatsScope, b: usize, ch: usize, c: usize) -> usize {
    match scope {
        StatsScope::Instance => b * c + ch,
        StatsScope::Batch => ch,
    }
}

/// Normalizes with biased statistics, then applies per-channel affine.
pub fn norm_forward<T: Float>(
    x: &Array4<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    scope: StatsScope,
) -> NormForward<T> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let groups = match scope {
        StatsScope::Instance => n * c,
        StatsScope::Batch => c,
    };
    let count = T::lit(match scope {
        StatsScope::Instance => hw,
        StatsScope::Batch => n * hw,
    } as f64);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    for b in 0..n {
        for ch in 0..c {
            let g = group_of(scope, b, ch, c);
            let p = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            mean[g] += p.iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let g = group_of(scope, b, ch, c);
            let m = mean[g];
            let p = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            var[g] += p.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Array4::<T>::zeros((n, c, h, w));
    let mut y = Array4::<T>::zeros((n, c, h, w));
    {
        let xh = xhat.as_slice_mut().expect("fresh array");
        let ys = y.as_slice_mut().expect("fresh array");
        for b in 0..n {
            for ch in 0..c {
                let g = group_of(scope, b, ch, c);
                let (m, is) = (mean[g], inv_std[g]);
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let v = (xs[i] - m) * is;
                    xh[i] = v;
                    ys[i] = v * gamma[ch] + beta[ch];
                }
            }
        }
    }
    NormForward { y, xhat, inv_std, mean, var }
}

/// Gradients of [`norm_forward`]: `(dx, dgamma, dbeta)`.
pub fn norm_backward<T: Float>(
    dy: &Array4<T>,
    xhat: &Array4<T>,
    inv_std: &[T],
    gamma: &[T],
    scope: StatsScope,
) -> (Array4<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.dim();
    let hw = h * w;
    let groups = inv_std.len();
    let count = T::lit(match scope {
        StatsScope::Instance => hw,
        StatsScope::Batch => n * hw,
    } as f64);
    let dy = dy.as_standard_layout();
    let ds = dy.as_slice().expect("standard layout");
    let xs = xhat.as_slice().expect("standard layout");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    // Per group: sum of dxhat and sum of dxhat * xhat.
    let mut s1 = vec![T::zero(); groups];
    let mut s2 = vec![T::zero(); groups];
    for b in 0..n {
        for ch in 0..c {
            let g = group_of(scope, b, ch, c);
            let off = (b * c + ch) * hw;
            let (mut a, mut gx) = (T::zero(), T::zero());
            for i in off..off + hw {
                a += ds[i];
                gx += ds[i] * xs[i];
            }
            dbeta[ch] += a;
            dgamma[ch] += gx;
            s1[g] += a * gamma[ch];
            s2[g] += gx * gamma[ch];
        }
    }
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().expect("fresh array");
    for b in 0..n {
        for ch in 0..c {
            let g = group_of(scope, b, ch, c);
            let off = (b * c + ch) * hw;
            let k = inv_std[g] / count;
            let gm = gamma[ch];
            for i in off..off + hw {
                dxs[i] = k * (count * ds[i] * gm - s1[g] - xs[i] * s2[g]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-channel affine with frozen statistics (batch norm in inference mode).
pub fn frozen_norm_forward<T: Float>(
    x: &Array4<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut y = x.as_standard_layout().into_owned();
    let ys = y.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for ch in 0..c {
            let is = T::one() / (var[ch] + eps).sqrt();
            let off = (b * c + ch) * hw;
            for v in &mut ys[off..off + hw] {
                *v = (*v - mean[ch]) * is * gamma[ch] + beta[ch];
            }
        }
    }
    y
}

pub fn leaky_relu<T: Float>(x: &Array4<T>, slope: T) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

/// Backward of leaky ReLU given its output (same sign as its input for slope > 0).
pub fn leaky_relu_backward<T: Float>(dy: &Array4<T>, y: &Array4<T>, slope: T) -> Array4<T> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d *= slope;
        }
    });
    dx
}

//! Forward and backward kernels on raw NCHW buffers. Shape validation lives
//! here so the tape only has to wire inputs to outputs.

use super::{Float, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn window_output(
    what: &str,
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("{what}: stride must be positive"));
    }
    if kernel == 0 {
        return Err(dim_err!("{what}: kernel must be positive"));
    }
    if size + 2 * pad < kernel {
        return Err(dim_err!(
            "{what}: kernel {kernel} does not fit input extent {size} with padding {pad}"
        ));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

pub(crate) fn conv_geom<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight
        .dims4()
        .map_err(|_| dim_err!("conv2d: weight must be O×I×Kh×Kw, got {:?}", weight.shape()))?;
    if wc != c {
        return Err(dim_err!(
            "conv2d: input has {c} channels but weight expects {wc}"
        ));
    }
    let oh = window_output("conv2d", h, kh, stride, pad)?;
    let ow = window_output("conv2d", w, kw, stride, pad)?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let ncols = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = conv_geom(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(dim_err!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                g.o
            ));
        }
    }
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.o * ncols;
    let mut out = vec![T::ZERO; g.n * out_stride];
    let mut cols = if is_pointwise(&g) {
        Vec::new()
    } else {
        vec![T::ZERO; rows * ncols]
    };
    for ni in 0..g.n {
        let xs = &x.data()[ni * in_stride..(ni + 1) * in_stride];
        let dst = &mut out[ni * out_stride..(ni + 1) * out_stride];
        let cols_ref: &[T] = if is_pointwise(&g) {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        T::gemm(g.o, rows, ncols, weight.data(), false, cols_ref, false, T::ZERO, dst);
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(ncols).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::new([g.n, g.o, g.oh, g.ow], out)?, g))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.o * ncols;
    let mut dx = need[0].then(|| vec![T::ZERO; g.n * in_stride]);
    let mut dw = need[1].then(|| vec![T::ZERO; g.o * rows]);
    let mut db = need[2].then(|| vec![T::ZERO; g.o]);
    let pointwise = is_pointwise(g);
    let mut cols = vec![T::ZERO; if pointwise { 0 } else { rows * ncols }];
    for ni in 0..g.n {
        let go = &gout[ni * out_stride..(ni + 1) * out_stride];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in go.chunks(ncols).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[ni * in_stride..(ni + 1) * in_stride];
            let cols_ref: &[T] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            T::gemm(g.o, ncols, rows, go, false, cols_ref, true, T::ONE, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[ni * in_stride..(ni + 1) * in_stride];
            if pointwise {
                T::gemm(rows, g.o, ncols, weight.data(), true, go, false, T::ZERO, dst);
            } else {
                T::gemm(rows, g.o, ncols, weight.data(), true, go, false, T::ZERO, &mut cols);
                col2im_add(g, &cols, dst);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Geometry of a non-overlapping transposed convolution (kernel == stride).
#[derive(Debug, Clone, Copy)]
pub(crate) struct UpGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
}

pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<(Tensor<T>, UpGeom)> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, o, kh, kw) = weight.dims4().map_err(|_| {
        dim_err!(
            "conv_transpose2d: weight must be I×O×K×K, got {:?}",
            weight.shape()
        )
    })?;
    if wc != c {
        return Err(dim_err!(
            "conv_transpose2d: input has {c} channels but weight expects {wc}"
        ));
    }
    if kh != kw || kh != stride || stride == 0 {
        return Err(dim_err!(
            "conv_transpose2d: only square kernels equal to the stride are supported \
             (kernel {kh}×{kw}, stride {stride})"
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(dim_err!(
                "conv_transpose2d: bias shape {:?} does not match {o} output channels",
                b.shape()
            ));
        }
    }
    let g = UpGeom { n, c, h, w, o, k: kh };
    let (hw, okk) = (h * w, o * kh * kw);
    let (oh, ow) = (h * g.k, w * g.k);
    let mut out = vec![T::ZERO; n * o * oh * ow];
    let mut cols = vec![T::ZERO; okk * hw];
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        T::gemm(okk, c, hw, weight.data(), true, xs, false, T::ZERO, &mut cols);
        let dst = &mut out[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for oc in 0..o {
            let bv = bias.map_or(T::ZERO, |b| b.data()[oc]);
            for a in 0..g.k {
                for b in 0..g.k {
                    let row = &cols[((oc * g.k + a) * g.k + b) * hw..][..hw];
                    for i in 0..h {
                        let out_row = &mut dst[(oc * oh + i * g.k + a) * ow..][..ow];
                        for j in 0..w {
                            out_row[j * g.k + b] = row[i * w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new([n, o, oh, ow], out)?, g))
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    g: &UpGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (hw, okk) = (g.h * g.w, g.o * g.k * g.k);
    let (oh, ow) = (g.h * g.k, g.w * g.k);
    let mut dx = need[0].then(|| vec![T::ZERO; g.n * g.c * hw]);
    let mut dw = need[1].then(|| vec![T::ZERO; g.c * okk]);
    let mut db = need[2].then(|| vec![T::ZERO; g.o]);
    let mut cols = vec![T::ZERO; okk * hw];
    for ni in 0..g.n {
        let go = &gout[ni * g.o * oh * ow..(ni + 1) * g.o * oh * ow];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in go.chunks(oh * ow).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        for oc in 0..g.o {
            for a in 0..g.k {
                for b in 0..g.k {
                    let row = &mut cols[((oc * g.k + a) * g.k + b) * hw..][..hw];
                    for i in 0..g.h {
                        let src = &go[(oc * oh + i * g.k + a) * ow..][..ow];
                        for j in 0..g.w {
                            row[i * g.w + j] = src[j * g.k + b];
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[ni * g.c * hw..(ni + 1) * g.c * hw];
            T::gemm(g.c, okk, hw, weight.data(), false, &cols, false, T::ZERO, dst);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[ni * g.c * hw..(ni + 1) * g.c * hw];
            T::gemm(g.c, hw, okk, xs, false, &cols, true, T::ONE, dw);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Per-channel state the batch-norm backward pass needs.
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// True when `xhat` came from batch statistics (train mode).
    pub batch_stats: bool,
}

pub(crate) fn check_channel_vec<T: Float>(what: &str, t: &Tensor<T>, c: usize) -> Result<()> {
    if t.shape() != [c] {
        return Err(dim_err!(
            "batch_norm: {what} has shape {:?}, expected [{c}]",
            t.shape()
        ));
    }
    Ok(())
}

/// Returns the output, the saved context and, in train mode, the per-channel
/// batch mean and unbiased variance.
#[allow(clippy::type_complexity)]
pub(crate) fn batch_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: (&Tensor<T>, &Tensor<T>),
    train: bool,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>, Option<(Vec<T>, Vec<T>)>)> {
    let (n, c, h, w) = x.dims4()?;
    check_channel_vec("gamma", gamma, c)?;
    check_channel_vec("beta", beta, c)?;
    check_channel_vec("running_mean", running.0, c)?;
    check_channel_vec("running_var", running.1, c)?;
    let hw = h * w;
    let m = n * hw;
    if train && m < 2 {
        return Err(crate::error::Error::DegenerateStatistics(format!(
            "train-mode batch norm over {m} element(s) per channel (shape {:?})",
            x.shape()
        )));
    }
    let eps_t = T::from_f64(eps);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut inv_std = vec![T::ZERO; c];
    let mut stats = train.then(|| (vec![T::ZERO; c], vec![T::ZERO; c]));
    let mf = T::from_usize(m);
    for ch in 0..c {
        let plane = |ni: usize| &xd[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
        let (mean, var) = if train {
            let mean = (0..n).map(|ni| plane(ni).iter().copied().sum::<T>()).sum::<T>() / mf;
            let ss = (0..n)
                .map(|ni| {
                    plane(ni)
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                })
                .sum::<T>();
            let var = ss / mf;
            if let Some((bm, bv)) = stats.as_mut() {
                bm[ch] = mean;
                bv[ch] = ss / T::from_usize(m - 1);
            }
            (mean, var)
        } else {
            (running.0.data()[ch], running.1.data()[ch])
        };
        let istd = T::ONE / (var + eps_t).sqrt();
        inv_std[ch] = istd;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in base..base + hw {
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnSaved {
            xhat,
            inv_std,
            batch_stats: train,
        },
        stats,
    ))
}

pub(crate) fn batch_norm_backward<T: Float>(
    shape: &[usize],
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::from_usize(n * hw);
    let mut dx = need[0].then(|| vec![T::ZERO; gout.len()]);
    let mut dgamma = need[1].then(|| vec![T::ZERO; c]);
    let mut dbeta = need[2].then(|| vec![T::ZERO; c]);
    for ch in 0..c {
        let idx = |ni: usize| (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for ni in 0..n {
            for i in idx(ni) {
                sum_g += gout[i];
                sum_gx += gout[i] * saved.xhat[i];
            }
        }
        if let Some(dg) = dgamma.as_mut() {
            dg[ch] = sum_gx;
        }
        if let Some(db) = dbeta.as_mut() {
            db[ch] = sum_g;
        }
        if let Some(dx) = dx.as_mut() {
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            for ni in 0..n {
                for i in idx(ni) {
                    dx[i] = if saved.batch_stats {
                        scale * (gout[i] - sum_g / m - saved.xhat[i] * sum_gx / m)
                    } else {
                        scale * gout[i]
                    };
                }
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dgamma,
        bias: dbeta,
    }
}

/// Max pooling with padded positions ignored. Returns the output and, per
/// output element, the flat input index of the selected maximum (first in
/// row-major window order on ties).
pub(crate) fn max_pool2d_forward<T: Float>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if pad >= kernel && kernel > 0 {
        return Err(dim_err!(
            "max_pool2d: padding {pad} must be smaller than the kernel {kernel}"
        ));
    }
    let oh = window_output("max_pool2d", h, kernel, stride, pad)?;
    let ow = window_output("max_pool2d", w, kernel, stride, pad)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut best = T::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..kernel as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_idx = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

pub(crate) fn max_pool2d_backward<T: Float>(numel: usize, argmax: &[usize], gout: &[T]) -> Vec<T> {
    let mut dx = vec![T::ZERO; numel];
    for (&i, &g) in argmax.iter().zip(gout) {
        dx[i] += g;
    }
    dx
}

/// How the smaller operand of [`mul`](super::Tape::mul) spans the larger one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    None,
    /// `N×C×1×1` against `N×C×H×W`.
    Channel,
    /// `N×1×H×W` against `N×C×H×W`.
    Spatial,
}

pub(crate) fn broadcast_kind(big: &[usize], small: &[usize]) -> Option<Broadcast> {
    if big == small {
        return Some(Broadcast::None);
    }
    match (big, small) {
        ([n, c, _, _], [sn, sc, 1, 1]) if n == sn && c == sc => Some(Broadcast::Channel),
        ([n, _, h, w], [sn, 1, sh, sw]) if n == sn && h == sh && w == sw => {
            Some(Broadcast::Spatial)
        }
        _ => None,
    }
}

/// Index into the small operand for flat index `i` of the big one.
#[inline]
pub(crate) fn broadcast_index(kind: Broadcast, big: &[usize], i: usize) -> usize {
    match kind {
        Broadcast::None => i,
        Broadcast::Channel => i / (big[2] * big[3]),
        Broadcast::Spatial => {
            let hw = big[2] * big[3];
            (i / (big[1] * hw)) * hw + i % hw
        }
    }
}

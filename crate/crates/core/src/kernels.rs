//! Hand-written CPU kernels for the mask decoder.
//!
//! candle's generic convolution backward is slow on small channel counts at
//! 64x64, so the 3x3 same-padding convolution and the nearest 2x upsample are
//! implemented directly on contiguous f32 NCHW buffers.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;

fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

/// Valid output range along one axis for kernel offset `k` (0..3, padding 1).
#[inline]
fn span(k: usize, len: usize) -> (usize, usize) {
    // output index o reads input o + k - 1
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len - 1 } else { len };
    (lo, hi)
}

fn conv_forward(x: &[f32], w: &[f32], n: usize, c: usize, o: usize, h: usize, wd: usize) -> Vec<f32> {
    let plane = h * wd;
    let mut out = vec![0f32; n * o * plane];
    for b in 0..n {
        for oc in 0..o {
            let dst = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for ic in 0..c {
                let src = &x[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                let kw = &w[(oc * c + ic) * 9..(oc * c + ic + 1) * 9];
                for ky in 0..3 {
                    let (y0, y1) = span(ky, h);
                    for kx in 0..3 {
                        let wv = kw[ky * 3 + kx];
                        let (x0, x1) = span(kx, wd);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let d = &mut dst[y * wd + x0..y * wd + x1];
                            let s = &src[sy * wd + x0 + kx - 1..sy * wd + x1 + kx - 1];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_input(g: &[f32], w: &[f32], n: usize, c: usize, o: usize, h: usize, wd: usize) -> Vec<f32> {
    let plane = h * wd;
    let mut out = vec![0f32; n * c * plane];
    for b in 0..n {
        for ic in 0..c {
            let dst = &mut out[(b * c + ic) * plane..(b * c + ic + 1) * plane];
            for oc in 0..o {
                let src = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                let kw = &w[(oc * c + ic) * 9..(oc * c + ic + 1) * 9];
                for ky in 0..3 {
                    let (y0, y1) = span(ky, h);
                    for kx in 0..3 {
                        let wv = kw[ky * 3 + kx];
                        let (x0, x1) = span(kx, wd);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let d = &mut dst[sy * wd + x0 + kx - 1..sy * wd + x1 + kx - 1];
                            let s = &src[y * wd + x0..y * wd + x1];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Writes the shifted copies of one image as rows `[C*9, H*W]`.
fn shifted_planes(x: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) {
    let plane = h * w;
    out.iter_mut().for_each(|v| *v = 0.0);
    for ic in 0..c {
        let src = &x[ic * plane..(ic + 1) * plane];
        for ky in 0..3 {
            let (y0, y1) = span(ky, h);
            for kx in 0..3 {
                let (x0, x1) = span(kx, w);
                let row = ic * 9 + ky * 3 + kx;
                let dst = &mut out[row * plane..(row + 1) * plane];
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1]);
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| p * q).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn conv_grad_weight(g: &[f32], x: &[f32], n: usize, c: usize, o: usize, h: usize, wd: usize) -> Vec<f32> {
    let plane = h * wd;
    let k = c * 9;
    let mut out = vec![0f32; o * k];
    let mut shifted = vec![0f32; k * plane];
    for b in 0..n {
        shifted_planes(&x[b * c * plane..(b + 1) * c * plane], c, h, wd, &mut shifted);
        for oc in 0..o {
            let gp = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for (j, acc) in out[oc * k..(oc + 1) * k].iter_mut().enumerate() {
                *acc += dot(gp, &shifted[j * plane..(j + 1) * plane]);
            }
        }
    }
    out
}

/// Sums `[N, C, H, W]` over everything but the channel axis.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = dims4(l)?;
        let mut out = vec![0f32; c];
        for (p, chunk) in slice(s, l)?.chunks_exact(h * w).enumerate() {
            out[p % c] += chunk.iter().sum::<f32>();
        }
        Ok((CpuStorage::F32(out), Shape::from(c)))
    }
}

/// `x: [N, C, H, W]`, `w: [O, C, 3, 3]`, `b: [O]` -> `[N, O, H, W]`.
struct Conv3x3 {
    relu: bool,
}

impl CustomOp3 for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1)?;
        let (o, c2, _, _) = dims4(l2)?;
        if c != c2 || l3.shape().elem_count() != o {
            candle_core::bail!("conv3x3 shape mismatch: input {c}, weight {o}x{c2}");
        }
        let mut out = conv_forward(slice(s1, l1)?, slice(s2, l2)?, n, c, o, h, w);
        let bias = slice(s3, l3)?;
        for (p, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let b = bias[p % o];
            if self.relu {
                plane.iter_mut().for_each(|v| *v = (*v + b).max(0.0));
            } else {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, o, h, w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let mut grad = grad.contiguous()?;
        if self.relu {
            grad = grad.apply_op2_no_bwd(&res.contiguous()?, &ReluMask)?;
        }
        let gx = grad.apply_op2_no_bwd(w, &ConvGradInput)?;
        let gw = grad.apply_op2_no_bwd(x, &ConvGradWeight)?;
        let gb = grad.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Zeroes `grad` where the rectified output is not positive.
struct ReluMask;

impl CustomOp2 for ReluMask {
    fn name(&self) -> &'static str {
        "relu-mask"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = slice(s1, l1)?;
        let r = slice(s2, l2)?;
        let out = g.iter().zip(r).map(|(&gv, &rv)| if rv > 0.0 { gv } else { 0.0 }).collect();
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }
}

struct ConvGradInput;

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv3x3-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, o, h, w) = dims4(l1)?;
        let (_, c, _, _) = dims4(l2)?;
        let out = conv_grad_input(slice(s1, l1)?, slice(s2, l2)?, n, c, o, h, w);
        Ok((CpuStorage::F32(out), Shape::from((n, c, h, w))))
    }
}

struct ConvGradWeight;

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv3x3-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, o, h, w) = dims4(l1)?;
        let (_, c, _, _) = dims4(l2)?;
        let out = conv_grad_weight(slice(s1, l1)?, slice(s2, l2)?, n, c, o, h, w);
        Ok((CpuStorage::F32(out), Shape::from((o, c, 3, 3))))
    }
}

/// Nearest-neighbour 2x upsample of `[N, C, H, W]`.
struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        let x = slice(s, l)?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0f32; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[xx / 2];
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, h2, w2))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Downsample2xSum)?))
    }
}

struct Downsample2xSum;

impl CustomOp1 for Downsample2xSum {
    fn name(&self) -> &'static str {
        "downsample2x-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h2, w2) = dims4(l)?;
        let g = slice(s, l)?;
        let (h, w) = (h2 / 2, w2 / 2);
        let mut out = vec![0f32; n * c * h * w];
        for p in 0..n * c {
            let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                let row = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
                for (xx, v) in src[y * w2..(y + 1) * w2].iter().enumerate() {
                    row[xx / 2] += v;
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, h, w))))
    }
}

/// 2x2 average pooling of `[N, C, H, W]` with even `H`, `W`.
struct AvgPool2x;

impl CustomOp1 for AvgPool2x {
    fn name(&self) -> &'static str {
        "avgpool2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("avgpool2x needs even spatial dims, got {h}x{w}");
        }
        let (storage, shape) = Downsample2xSum.cpu_fwd(s, l)?;
        let CpuStorage::F32(mut out) = storage else {
            candle_core::bail!("avgpool2x expects f32");
        };
        out.iter_mut().for_each(|v| *v *= 0.25);
        debug_assert_eq!(out.len(), n * c * (h / 2) * (w / 2));
        Ok((CpuStorage::F32(out), shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((grad.contiguous()?.apply_op1_no_bwd(&Upsample2x)? * 0.25)?))
    }
}

fn f32_cpu(t: &Tensor) -> bool {
    t.dtype() == DType::F32 && t.device().is_cpu()
}

/// Unfolds 3x3 neighbourhoods: `[N, C, H, W] -> [N*H*W, C*9]`.
struct Im2Col;

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        let x = slice(s, l)?;
        let k = c * 9;
        let mut out = vec![0f32; n * h * w * k];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = &mut out[((b * h + y) * w + xx) * k..((b * h + y) * w + xx + 1) * k];
                    for ic in 0..c {
                        let plane = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                        for ky in 0..3 {
                            let sy = y + ky;
                            if sy == 0 || sy > h {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx + kx;
                                if sx == 0 || sx > w {
                                    continue;
                                }
                                row[ic * 9 + ky * 3 + kx] = plane[(sy - 1) * w + sx - 1];
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n * h * w, k))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im { n, c, h, w })?))
    }
}

struct Col2Im {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Col2Im { n, c, h, w } = *self;
        let g = slice(s, l)?;
        let k = c * 9;
        let mut out = vec![0f32; n * c * h * w];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = &g[((b * h + y) * w + xx) * k..((b * h + y) * w + xx + 1) * k];
                    for ic in 0..c {
                        let plane = &mut out[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                        for ky in 0..3 {
                            let sy = y + ky;
                            if sy == 0 || sy > h {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx + kx;
                                if sx == 0 || sx > w {
                                    continue;
                                }
                                plane[(sy - 1) * w + sx - 1] += row[ic * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, h, w))))
    }
}

/// Below this many pixels per plane the GEMM formulation wins.
const GEMM_MAX_PLANE: usize = 1024;

/// Same-padded 3x3 convolution, optionally rectified; falls back to candle
/// off the fast path.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor, relu: bool) -> Result<Tensor> {
    if f32_cpu(x) && f32_cpu(w) && f32_cpu(b) {
        let (n, _, h, wd) = x.dims4()?;
        if h * wd > GEMM_MAX_PLANE {
            return Ok(x
                .contiguous()?
                .apply_op3(&w.contiguous()?, &b.contiguous()?, Conv3x3 { relu })?);
        }
        let o = w.dim(0)?;
        let cols = x.contiguous()?.apply_op1(Im2Col)?;
        let y = cols.matmul(&w.reshape((o, ()))?.t()?)?.broadcast_add(b)?;
        let y = y.reshape((n, h, wd, o))?.permute((0, 3, 1, 2))?.contiguous()?;
        return Ok(if relu { y.relu()? } else { y });
    }
    let y = x.conv2d(w, 1, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
    Ok(if relu { y.relu()? } else { y })
}

/// Per-channel mean and biased variance of `[N, C, H, W]`.
fn channel_moments(x: &[f32], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for (p, chunk) in x.chunks_exact(plane).enumerate() {
        mean[p % c] += chunk.iter().map(|&v| f64::from(v)).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (p, chunk) in x.chunks_exact(plane).enumerate() {
        let m = mean[p % c];
        var[p % c] += chunk.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Batch-statistics normalisation `(x - mean) / sqrt(var + eps)` per channel.
struct BatchNormalize {
    eps: f64,
}

impl BatchNormalize {
    fn normalized(&self, x: &[f32], n: usize, c: usize, plane: usize) -> (Vec<f32>, Vec<f64>) {
        let (mean, var) = channel_moments(x, n, c, plane);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = vec![0f32; x.len()];
        for (p, (dst, src)) in out.chunks_exact_mut(plane).zip(x.chunks_exact(plane)).enumerate() {
            let (m, s) = (mean[p % c] as f32, inv[p % c] as f32);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - m) * s;
            }
        }
        (out, inv)
    }
}

impl CustomOp1 for BatchNormalize {
    fn name(&self) -> &'static str {
        "batch-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        let (out, _) = self.normalized(slice(s, l)?, n, c, h * w);
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let arg = arg.contiguous()?;
        let grad = grad.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(&grad, &BatchNormalizeGrad { eps: self.eps })?))
    }
}

/// `dx = inv_std * (g - mean(g) - x_hat * mean(g * x_hat))` per channel.
struct BatchNormalizeGrad {
    eps: f64,
}

impl CustomOp2 for BatchNormalizeGrad {
    fn name(&self) -> &'static str {
        "batch-normalize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1)?;
        let plane = h * w;
        let g = slice(s2, l2)?;
        let (xhat, inv) = BatchNormalize { eps: self.eps }.normalized(slice(s1, l1)?, n, c, plane);
        let count = (n * plane) as f64;
        let mut mg = vec![0f64; c];
        let mut mgx = vec![0f64; c];
        for (p, (gp, xp)) in g.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
            mg[p % c] += gp.iter().map(|&v| f64::from(v)).sum::<f64>();
            mgx[p % c] += gp.iter().zip(xp).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>();
        }
        let mut out = vec![0f32; g.len()];
        for (p, dst) in out.chunks_exact_mut(plane).enumerate() {
            let k = p % c;
            let (a, b, s) = ((mg[k] / count) as f32, (mgx[k] / count) as f32, inv[k] as f32);
            let gp = &g[p * plane..(p + 1) * plane];
            let xp = &xhat[p * plane..(p + 1) * plane];
            for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                *d = s * (gv - a - xv * b);
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }
}

/// Normalised tensor with per-channel `(mean, biased var)`.
pub type BatchStats = (Tensor, Vec<f64>, Vec<f64>);

/// Normalises with batch statistics and returns them as `(mean, biased var)`.
pub fn batch_normalize(x: &Tensor, eps: f64) -> Result<Option<BatchStats>> {
    if !f32_cpu(x) {
        return Ok(None);
    }
    let x = x.contiguous()?;
    let (n, c, h, w) = x.dims4()?;
    let flat = x.flatten_all()?.to_vec1::<f32>()?;
    let (mean, var) = channel_moments(&flat, n, c, h * w);
    let y = x.apply_op1(BatchNormalize { eps })?;
    Ok(Some((y, mean, var)))
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    if f32_cpu(x) {
        Ok(x.contiguous()?.apply_op1(Upsample2x)?)
    } else {
        let (_, _, h, w) = x.dims4()?;
        Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

pub fn avgpool2x(x: &Tensor) -> Result<Tensor> {
    if f32_cpu(x) {
        Ok(x.contiguous()?.apply_op1(AvgPool2x)?)
    } else {
        Ok(x.avg_pool2d(2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn conv_matches_candle_forward_and_backward() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 5, 7), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f32, 1.0, (4, 3, 3, 3), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1.0, (2, 4, 5, 7), &dev).unwrap();

        let b = Var::from_tensor(&Tensor::randn(0f32, 1.0, 4, &dev).unwrap()).unwrap();
        let ours = conv3x3(x.as_tensor(), w.as_tensor(), b.as_tensor(), false).unwrap();
        let reference = x
            .as_tensor()
            .conv2d(w.as_tensor(), 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-4);

        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            let a = g1.get(v.as_tensor()).unwrap();
            let b = g2.get(v.as_tensor()).unwrap();
            assert!(max_diff(a, b) < 1e-3);
        }
    }

    #[test]
    fn fused_relu_matches_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 20, 20), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 3, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f32, 1.0, 2, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1.0, (2, 2, 20, 20), &dev).unwrap();
        let ours = conv3x3(x.as_tensor(), w.as_tensor(), b.as_tensor(), true).unwrap();
        let reference = x
            .as_tensor()
            .conv2d(w.as_tensor(), 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 2, 1, 1)).unwrap())
            .unwrap()
            .relu()
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-4);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap()) < 1e-3);
        }
    }

    #[test]
    fn gemm_path_matches_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (3, 5, 4, 3), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 5, 3, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f32, 1.0, 2, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1.0, (3, 2, 4, 3), &dev).unwrap();
        let ours = conv3x3(x.as_tensor(), w.as_tensor(), b.as_tensor(), false).unwrap();
        let reference = x
            .as_tensor()
            .conv2d(w.as_tensor(), 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 2, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-4);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap()) < 1e-3);
        }
    }

    #[test]
    fn batch_normalize_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 2.0, (3, 2, 4, 5), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1.0, (3, 2, 4, 5), &dev).unwrap();
        let (ours, mean, var) = batch_normalize(x.as_tensor(), 1e-5).unwrap().unwrap();

        let flat = x.as_tensor().transpose(0, 1).unwrap().flatten_from(1).unwrap();
        let m = flat.mean(1).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let centered = x.as_tensor().broadcast_sub(&m).unwrap();
        let v = centered.sqr().unwrap().transpose(0, 1).unwrap().flatten_from(1).unwrap().mean(1).unwrap();
        let reference = centered
            .broadcast_div(&(v.reshape((1, 2, 1, 1)).unwrap() + 1e-5).unwrap().sqrt().unwrap())
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-5);
        let m = m.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((mean[1] - m[1] as f64).abs() < 1e-5);
        assert!(var.iter().all(|&v| v > 0.0));

        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let a = g1.get(x.as_tensor()).unwrap();
        let b = g2.get(x.as_tensor()).unwrap();
        assert!(max_diff(a, b) < 1e-4);
    }

    #[test]
    fn avgpool_matches_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 4, 6), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1.0, (2, 3, 2, 3), &dev).unwrap();
        let ours = avgpool2x(x.as_tensor()).unwrap();
        let reference = x.as_tensor().avg_pool2d(2).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-6);
        let g = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let expect = (probe.upsample_nearest2d(4, 6).unwrap() * 0.25).unwrap();
        assert!(max_diff(g.get(x.as_tensor()).unwrap(), &expect) < 1e-6);
    }

    #[test]
    fn upsample_matches_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f32, 1.0, (2, 3, 8, 10), &dev).unwrap();
        let ours = upsample2x(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(8, 10).unwrap();
        assert_eq!(max_diff(&ours, &reference), 0.0);
        let g = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let got = g.get(x.as_tensor()).unwrap();
        let expect = probe
            .reshape((2, 3, 4, 2, 5, 2))
            .unwrap()
            .sum(5)
            .unwrap()
            .sum(3)
            .unwrap();
        assert!(max_diff(got, &expect) < 1e-5);
    }
}
